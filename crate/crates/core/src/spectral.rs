//! STFT analysis/synthesis, log-magnitude features and Griffin-Lim phase
//! reconstruction.
//!
//! Spectrogram matrices are stored frame-major: `data[t * bins + f]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use thiserror::Error;

use crate::audio::{AudioClip, SAMPLE_RATE};

/// Floor added to magnitudes before taking the natural log.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("clip of {len} samples is shorter than the {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("invalid STFT geometry: {0}")]
    InvalidGeometry(String),
    #[error("normalization stats are degenerate (min == max == {0})")]
    DegenerateStats(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("target magnitude is all zero")]
    ZeroTarget,
    #[error("bad spectrogram dump: {0}")]
    BadDump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Window length and hop, in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    /// 1024-sample Hann window, hop of a quarter window (75% overlap).
    fn default() -> Self {
        Self {
            window_size: 1024,
            hop: 256,
        }
    }
}

impl StftConfig {
    /// The alternative reading of "1/4 overlapping windows": adjacent windows
    /// share a quarter of their samples, so hop = 768.
    pub fn quarter_overlap() -> Self {
        Self {
            window_size: 1024,
            hop: 768,
        }
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Frames produced for a signal of `len` samples, or `None` if it is
    /// shorter than one window.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.window_size).then(|| (len - self.window_size) / self.hop + 1)
    }

    /// Length of the signal synthesized from `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop + self.window_size
    }

    fn validate(&self) -> Result<(), SpectralError> {
        if self.window_size < 2 || self.window_size % 2 != 0 {
            return Err(SpectralError::InvalidGeometry(format!(
                "window size {} must be even and at least 2",
                self.window_size
            )));
        }
        if self.hop == 0 || self.hop > self.window_size {
            return Err(SpectralError::InvalidGeometry(format!(
                "hop {} must lie in [1, {}]",
                self.hop, self.window_size
            )));
        }
        Ok(())
    }
}

/// Periodic Hann window.
/// `|c|` without the overflow guard of `hypot`; spectra here are far from
/// the `f64` range limits.
pub fn abs(c: Complex64) -> f64 {
    c.norm_sqr().sqrt()
}

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
    pub window_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn config(&self) -> StftConfig {
        StftConfig {
            window_size: self.window_size,
            hop: self.hop,
        }
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitude(&self) -> Magnitude {
        Magnitude {
            frames: self.frames,
            bins: self.bins,
            data: self.data.iter().map(|&c| abs(c)).collect(),
        }
    }

    /// Combines a magnitude matrix with the phase of this spectrogram. Bins
    /// with zero magnitude here take phase zero.
    fn with_magnitude(&self, mag: &Magnitude) -> ComplexSpectrogram {
        let data = self
            .data
            .iter()
            .zip(&mag.data)
            .map(|(c, &m)| {
                let n = abs(*c);
                if n > 0.0 {
                    c * (m / n)
                } else {
                    Complex64::new(m, 0.0)
                }
            })
            .collect();
        ComplexSpectrogram {
            data,
            ..self.clone()
        }
    }
}

/// A real, nonnegative frames x bins matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Magnitude {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Magnitude {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![0.0; frames * bins],
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Zero-phase complex spectrogram with this magnitude.
    pub fn to_zero_phase(&self, cfg: StftConfig) -> ComplexSpectrogram {
        ComplexSpectrogram {
            frames: self.frames,
            bins: self.bins,
            data: self.data.iter().map(|&m| Complex64::new(m, 0.0)).collect(),
            window_size: cfg.window_size,
            hop: cfg.hop,
            sample_rate: SAMPLE_RATE,
        }
    }
}

/// Planned FFTs and window for one STFT geometry. Reuse it when running many
/// transforms of the same size.
pub struct StftEngine {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl StftEngine {
    pub fn new(cfg: StftConfig) -> Result<Self, SpectralError> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            cfg,
            window: hann_window(cfg.window_size),
            forward: planner.plan_fft_forward(cfg.window_size),
            inverse: planner.plan_fft_inverse(cfg.window_size),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Hann-windowed one-sided STFT of raw samples.
    pub fn analyze(&self, samples: &[f64], sample_rate: u32) -> Result<ComplexSpectrogram, SpectralError> {
        let n = self.cfg.window_size;
        let frames = self.cfg.frame_count(samples.len()).ok_or(SpectralError::TooShort {
            len: samples.len(),
            window: n,
        })?;
        let bins = self.cfg.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut input = self.forward.make_input_vec();
        let mut output = self.forward.make_output_vec();
        let mut scratch = self.forward.make_scratch_vec();
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for ((dst, &x), &w) in input.iter_mut().zip(&samples[start..start + n]).zip(&self.window) {
                *dst = x * w;
            }
            self.forward
                .process_with_scratch(&mut input, &mut output, &mut scratch)
                .expect("buffer sizes come from the plan");
            data.extend_from_slice(&output);
        }
        Ok(ComplexSpectrogram {
            frames,
            bins,
            data,
            window_size: n,
            hop: self.cfg.hop,
            sample_rate,
        })
    }

    /// Squared-window sum at every output sample of a `frames`-frame
    /// synthesis.
    fn window_square_sum(&self, frames: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.cfg.signal_len(frames)];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for (a, w) in acc[start..start + self.cfg.window_size].iter_mut().zip(&self.window) {
                *a += w * w;
            }
        }
        acc
    }

    /// Least-squares overlap-add inverse: windowed inverse frames summed and
    /// divided by the squared-window sum.
    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Result<AudioClip, SpectralError> {
        if spec.window_size != self.cfg.window_size || spec.hop != self.cfg.hop {
            return Err(SpectralError::ShapeMismatch(format!(
                "spectrogram geometry {}/{} does not match engine {}/{}",
                spec.window_size, spec.hop, self.cfg.window_size, self.cfg.hop
            )));
        }
        if spec.bins != self.cfg.bins() || spec.data.len() != spec.frames * spec.bins {
            return Err(SpectralError::ShapeMismatch(format!(
                "expected {} bins per frame",
                self.cfg.bins()
            )));
        }
        if spec.frames == 0 {
            return Err(SpectralError::InvalidGeometry("no frames".into()));
        }
        let n = self.cfg.window_size;
        let wss = self.window_square_sum(spec.frames);
        // The first and last samples may sit where a window is exactly zero;
        // anywhere else a zero sum means part of the signal is unobserved.
        if let Some(pos) = (1..wss.len() - 1).find(|&i| wss[i] == 0.0) {
            return Err(SpectralError::InvalidGeometry(format!(
                "window sum vanishes at sample {pos}"
            )));
        }

        let mut out = vec![0.0; wss.len()];
        let mut freq = self.inverse.make_input_vec();
        let mut time = self.inverse.make_output_vec();
        let mut scratch = self.inverse.make_scratch_vec();
        let scale = 1.0 / n as f64;
        for t in 0..spec.frames {
            freq.copy_from_slice(spec.frame(t));
            // A real signal has purely real DC and Nyquist bins.
            freq[0].im = 0.0;
            let last = freq.len() - 1;
            freq[last].im = 0.0;
            self.inverse
                .process_with_scratch(&mut freq, &mut time, &mut scratch)
                .expect("buffer sizes come from the plan");
            let start = t * self.cfg.hop;
            for ((o, &x), &w) in out[start..start + n].iter_mut().zip(&time).zip(&self.window) {
                *o += x * scale * w;
            }
        }
        for (o, &w) in out.iter_mut().zip(&wss) {
            *o = if w > 0.0 { *o / w } else { 0.0 };
        }
        Ok(AudioClip::new(out, spec.sample_rate))
    }
}

/// One-sided Hann STFT of a clip.
pub fn stft(clip: &AudioClip, cfg: StftConfig) -> Result<ComplexSpectrogram, SpectralError> {
    StftEngine::new(cfg)?.analyze(&clip.samples, clip.sample_rate)
}

/// Overlap-add inverse of [`stft`].
pub fn istft(spec: &ComplexSpectrogram) -> Result<AudioClip, SpectralError> {
    StftEngine::new(spec.config())?.synthesize(spec)
}

/// Global (min, max) used to map log-magnitudes affinely onto [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    pub fn new(min: f64, max: f64) -> Result<Self, SpectralError> {
        if !(max > min) {
            return Err(SpectralError::DegenerateStats(min));
        }
        Ok(Self { min, max })
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (2.0 * (y - self.min) / (self.max - self.min) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        (v + 1.0) * 0.5 * (self.max - self.min) + self.min
    }

    /// Widens `self` to cover `other`.
    pub fn merge(&self, other: &NormStats) -> NormStats {
        NormStats {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }
}

/// Natural-log magnitude features, optionally normalized to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct LogMagSpectrogram {
    pub frames: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub floor: f64,
    pub stats: Option<NormStats>,
}

impl LogMagSpectrogram {
    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// `ln(|X| + eps)`, then the affine map to [-1, 1] when stats are given.
pub fn featurize(
    spec: &ComplexSpectrogram,
    stats: Option<NormStats>,
) -> Result<LogMagSpectrogram, SpectralError> {
    featurize_magnitude(&spec.magnitude(), stats)
}

pub fn featurize_magnitude(
    mag: &Magnitude,
    stats: Option<NormStats>,
) -> Result<LogMagSpectrogram, SpectralError> {
    if let Some(s) = stats {
        NormStats::new(s.min, s.max)?;
    }
    let data = mag
        .data
        .iter()
        .map(|&m| {
            let y = (m + LOG_FLOOR).ln();
            match stats {
                Some(s) => s.normalize(y),
                None => y,
            }
        })
        .collect();
    Ok(LogMagSpectrogram {
        frames: mag.frames,
        channels: mag.bins,
        data,
        floor: LOG_FLOOR,
        stats,
    })
}

/// Inverse of [`featurize`]; magnitudes below the floor map to zero.
pub fn defeaturize(feat: &LogMagSpectrogram) -> Magnitude {
    let data = feat
        .data
        .iter()
        .map(|&v| {
            let y = match feat.stats {
                Some(s) => s.denormalize(v),
                None => v,
            };
            (y.exp() - feat.floor).max(0.0)
        })
        .collect();
    Magnitude {
        frames: feat.frames,
        bins: feat.channels,
        data,
    }
}

/// `||target - estimate||_F / ||target||_F`.
pub fn spectral_convergence(target: &Magnitude, estimate: &Magnitude) -> Result<f64, SpectralError> {
    if target.frames != estimate.frames || target.bins != estimate.bins {
        return Err(SpectralError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            target.frames, target.bins, estimate.frames, estimate.bins
        )));
    }
    let denom = target.frobenius_norm();
    if denom == 0.0 {
        return Err(SpectralError::ZeroTarget);
    }
    let num = target
        .data
        .iter()
        .zip(&estimate.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    pub clip: AudioClip,
    /// `|| |stft(x_k)| - mag ||_F` for k = 0..=iterations.
    pub inconsistency: Vec<f64>,
    /// Inconsistency divided by `||mag||_F`; all zeros for a silent target.
    pub spectral_convergence: Vec<f64>,
}

impl GriffinLimOutput {
    pub fn final_convergence(&self) -> f64 {
        *self.spectral_convergence.last().expect("at least one entry")
    }
}

/// Griffin-Lim phase retrieval. Starts from zero phase, or uniform random
/// phase in [-pi, pi) when `seed` is given, and alternates least-squares
/// synthesis with phase replacement.
pub fn griffin_lim(
    mag: &Magnitude,
    cfg: StftConfig,
    iterations: usize,
    seed: Option<u64>,
) -> Result<GriffinLimOutput, SpectralError> {
    let engine = StftEngine::new(cfg)?;
    if mag.bins != cfg.bins() || mag.data.len() != mag.frames * mag.bins {
        return Err(SpectralError::ShapeMismatch(format!(
            "magnitude has {} bins, geometry needs {}",
            mag.bins,
            cfg.bins()
        )));
    }
    if mag.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(SpectralError::InvalidGeometry(
            "magnitudes must be finite and nonnegative".into(),
        ));
    }

    let mut spec = mag.to_zero_phase(cfg);
    if let Some(seed) = seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (c, &m) in spec.data.iter_mut().zip(&mag.data) {
            let phi: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            *c = Complex64::from_polar(m, phi);
        }
    }

    let norm = mag.frobenius_norm();
    let mut inconsistency = Vec::with_capacity(iterations + 1);
    let mut x = engine.synthesize(&spec)?;
    for _ in 0..iterations {
        let rebuilt = engine.analyze(&x.samples, x.sample_rate)?;
        inconsistency.push(magnitude_distance(&rebuilt, mag));
        spec = rebuilt.with_magnitude(mag);
        x = engine.synthesize(&spec)?;
    }
    let last = engine.analyze(&x.samples, x.sample_rate)?;
    inconsistency.push(magnitude_distance(&last, mag));

    let spectral_convergence = inconsistency
        .iter()
        .map(|d| if norm > 0.0 { d / norm } else { 0.0 })
        .collect();
    Ok(GriffinLimOutput {
        clip: x,
        inconsistency,
        spectral_convergence,
    })
}

fn magnitude_distance(spec: &ComplexSpectrogram, mag: &Magnitude) -> f64 {
    spec.data
        .iter()
        .zip(&mag.data)
        .map(|(c, m)| {
            let d = abs(*c) - m;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

const DUMP_MAGIC: &[u8; 4] = b"CBSP";

/// What the values of a dumped spectrogram mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum DumpKind {
    /// Unnormalized natural-log magnitude.
    LogMagnitude = 1,
    /// Linear magnitude.
    Magnitude = 2,
}

/// In-memory form of the binary spectrogram dump: a 16-byte header
/// (`CBSP`, frames, bins, kind as little-endian u32) followed by row-major
/// little-endian f32 values.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramDump {
    pub kind: DumpKind,
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f32>,
}

impl SpectrogramDump {
    /// Dumps a feature matrix as unnormalized log-magnitude.
    pub fn from_features(feat: &LogMagSpectrogram) -> Self {
        let data = feat
            .data
            .iter()
            .map(|&v| match feat.stats {
                Some(s) => s.denormalize(v) as f32,
                None => v as f32,
            })
            .collect();
        Self {
            kind: DumpKind::LogMagnitude,
            frames: feat.frames,
            bins: feat.channels,
            data,
        }
    }

    pub fn to_features(&self) -> LogMagSpectrogram {
        let data = self
            .data
            .iter()
            .map(|&v| match self.kind {
                DumpKind::LogMagnitude => v as f64,
                DumpKind::Magnitude => (v as f64 + LOG_FLOOR).ln(),
            })
            .collect();
        LogMagSpectrogram {
            frames: self.frames,
            channels: self.bins,
            data,
            floor: LOG_FLOOR,
            stats: None,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), SpectralError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.bins as u32).to_le_bytes())?;
        w.write_all(&(self.kind as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SpectralError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != DUMP_MAGIC {
            return Err(SpectralError::BadDump("missing CBSP header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (frames, bins) = (word(4) as usize, word(8) as usize);
        let kind = match word(12) {
            1 => DumpKind::LogMagnitude,
            2 => DumpKind::Magnitude,
            k => return Err(SpectralError::BadDump(format!("unknown element kind {k}"))),
        };
        let payload = &bytes[16..];
        if payload.len() != frames * bins * 4 {
            return Err(SpectralError::BadDump(format!(
                "payload of {} bytes does not hold {frames}x{bins} floats",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            kind,
            frames,
            bins,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sine(freq: f64, len: usize) -> AudioClip {
        AudioClip::new(
            (0..len)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 44_100.0).sin())
                .collect(),
            SAMPLE_RATE,
        )
    }

    /// Direct O(N^2) DFT of one windowed frame; independent of the FFT path.
    fn naive_dft_magnitudes(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, &x) in frame.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn zero_clip_gives_zero_matrix_of_expected_shape() {
        let spec = stft(&AudioClip::zeros(220_500), StftConfig::default()).unwrap();
        assert_eq!((spec.frames, spec.bins), (858, 513));
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn sine_peaks_at_bin_ten() {
        let clip = sine(441.0, 8192);
        let spec = stft(&clip, StftConfig::default()).unwrap();
        let window = hann_window(1024);
        let oracle: Vec<f64> = clip.samples[..1024].iter().zip(&window).map(|(x, w)| x * w).collect();
        let oracle_mag = naive_dft_magnitudes(&oracle);
        let oracle_peak = argmax(&oracle_mag);
        assert_eq!(oracle_peak, 10);
        let mag = spec.magnitude();
        for t in 0..spec.frames {
            assert_eq!(argmax(&mag.data[t * 513..(t + 1) * 513]), oracle_peak);
        }
        for (a, b) in mag.data[..513].iter().zip(&oracle_mag) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b));
        }
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    }

    #[test]
    fn dc_signal_peaks_at_bin_zero() {
        let clip = AudioClip::new(vec![1.0; 4096], SAMPLE_RATE);
        let mag = stft(&clip, StftConfig::default()).unwrap().magnitude();
        for t in 0..mag.frames {
            assert_eq!(argmax(&mag.data[t * 513..(t + 1) * 513]), 0);
        }
    }

    #[test]
    fn too_short_clip_is_rejected() {
        assert!(matches!(
            stft(&AudioClip::zeros(1000), StftConfig::default()),
            Err(SpectralError::TooShort { len: 1000, window: 1024 })
        ));
    }

    #[test]
    fn round_trip_is_transparent_in_the_interior() {
        let clip = sine(317.0, 44_100);
        let back = istft(&stft(&clip, StftConfig::default()).unwrap()).unwrap();
        let n = back.len();
        for i in 1024..n - 1024 {
            assert!((clip.samples[i] - back.samples[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn quarter_overlap_geometry_also_inverts() {
        let clip = sine(200.0, 20_000);
        let cfg = StftConfig::quarter_overlap();
        let back = istft(&stft(&clip, cfg).unwrap()).unwrap();
        for i in 1024..back.len() - 1024 {
            assert!((clip.samples[i] - back.samples[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_spectrogram_inverts_to_silence() {
        let spec = Magnitude::zeros(10, 513).to_zero_phase(StftConfig::default());
        let clip = istft(&spec).unwrap();
        assert_eq!(clip.len(), 9 * 256 + 1024);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn single_frame_renormalizes_the_window() {
        let clip = sine(441.0, 1024);
        let back = istft(&stft(&clip, StftConfig::default()).unwrap()).unwrap();
        assert_eq!(back.len(), 1024);
        // With one frame the synthesis divides the windowed frame by w^2,
        // recovering the input wherever w != 0.
        for i in 1..1024 {
            assert!((back.samples[i] - clip.samples[i]).abs() < 1e-6);
        }
        assert_eq!(back.samples[0], 0.0);
    }

    #[test]
    fn gaps_between_windows_are_invalid() {
        let cfg = StftConfig {
            window_size: 1024,
            hop: 1024,
        };
        let spec = Magnitude::zeros(3, 513).to_zero_phase(cfg);
        assert!(matches!(istft(&spec), Err(SpectralError::InvalidGeometry(_))));
        let cfg = StftConfig {
            window_size: 1024,
            hop: 2000,
        };
        assert!(matches!(StftEngine::new(cfg), Err(SpectralError::InvalidGeometry(_))));
    }

    #[test]
    fn zero_magnitude_features_sit_at_the_floor() {
        let feat = featurize_magnitude(&Magnitude::zeros(2, 3), None).unwrap();
        for &v in &feat.data {
            assert!((v - (-11.512925464970229)).abs() < 1e-12);
        }
    }

    #[test]
    fn e_minus_floor_maps_to_one() {
        let mag = Magnitude {
            frames: 1,
            bins: 2,
            data: vec![std::f64::consts::E - LOG_FLOOR; 2],
        };
        let feat = featurize_magnitude(&mag, None).unwrap();
        assert!(feat.data.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn normalization_endpoints() {
        let stats = NormStats::new(LOG_FLOOR.ln(), 0.0).unwrap();
        let feat = featurize_magnitude(&Magnitude::zeros(1, 1), Some(stats)).unwrap();
        assert!((feat.data[0] + 1.0).abs() < 1e-12);
        assert!(matches!(
            featurize_magnitude(&Magnitude::zeros(1, 1), Some(NormStats { min: 1.0, max: 1.0 })),
            Err(SpectralError::DegenerateStats(_))
        ));
    }

    #[test]
    fn all_minus_one_defeaturizes_to_floor_formula() {
        let stats = NormStats::new(-3.0, 2.0).unwrap();
        let feat = LogMagSpectrogram {
            frames: 2,
            channels: 2,
            data: vec![-1.0; 4],
            floor: LOG_FLOOR,
            stats: Some(stats),
        };
        let mag = defeaturize(&feat);
        let expected = ((-3.0f64).exp() - LOG_FLOOR).max(0.0);
        assert!(mag.data.iter().all(|&m| (m - expected).abs() < 1e-15));
    }

    #[test]
    fn values_below_floor_clamp_to_zero() {
        let feat = LogMagSpectrogram {
            frames: 1,
            channels: 1,
            data: vec![-40.0],
            floor: LOG_FLOOR,
            stats: None,
        };
        assert_eq!(defeaturize(&feat).data, vec![0.0]);
    }

    #[test]
    fn sine_magnitudes_survive_featurize_round_trip() {
        let mag = stft(&sine(441.0, 4096), StftConfig::default()).unwrap().magnitude();
        let back = defeaturize(&featurize_magnitude(&mag, None).unwrap());
        for (a, b) in mag.data.iter().zip(&back.data) {
            if *a >= 1e-3 {
                assert!((a - b).abs() / a <= 1e-6);
            }
        }
    }

    #[test]
    fn spectral_convergence_examples() {
        let ones = Magnitude {
            frames: 2,
            bins: 2,
            data: vec![1.0; 4],
        };
        let halves = Magnitude {
            data: vec![0.5; 4],
            ..ones.clone()
        };
        assert_eq!(spectral_convergence(&ones, &ones).unwrap(), 0.0);
        assert_eq!(spectral_convergence(&ones, &Magnitude::zeros(2, 2)).unwrap(), 1.0);
        assert!((spectral_convergence(&ones, &halves).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            spectral_convergence(&Magnitude::zeros(2, 2), &ones),
            Err(SpectralError::ZeroTarget)
        ));
        assert!(matches!(
            spectral_convergence(&ones, &Magnitude::zeros(1, 2)),
            Err(SpectralError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn griffin_lim_zero_magnitude_is_a_fixed_point() {
        let out = griffin_lim(&Magnitude::zeros(8, 513), StftConfig::default(), 5, Some(1)).unwrap();
        assert!(out.clip.samples.iter().all(|&s| s == 0.0));
        assert_eq!(out.inconsistency.len(), 6);
    }

    #[test]
    fn griffin_lim_zero_iterations_is_zero_phase_istft() {
        let mag = stft(&sine(441.0, 8192), StftConfig::default()).unwrap().magnitude();
        let out = griffin_lim(&mag, StftConfig::default(), 0, None).unwrap();
        let direct = istft(&mag.to_zero_phase(StftConfig::default())).unwrap();
        assert_eq!(out.clip, direct);
        assert_eq!(out.inconsistency.len(), 1);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.spec");
        let dump = SpectrogramDump {
            kind: DumpKind::LogMagnitude,
            frames: 3,
            bins: 2,
            data: vec![1.0, -2.0, 3.5, 0.0, -11.5, 4.25],
        };
        dump.write(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(&bytes[..4], b"CBSP");
        assert_eq!(SpectrogramDump::read(&p).unwrap(), dump);
        std::fs::write(&p, &bytes[..20]).unwrap();
        assert!(matches!(SpectrogramDump::read(&p), Err(SpectralError::BadDump(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn featurize_inverts(mags in proptest::collection::vec(1e-3f64..1e3, 1..64)) {
            let m = Magnitude { frames: 1, bins: mags.len(), data: mags.clone() };
            let stats = NormStats::new(LOG_FLOOR.ln(), 8.0).unwrap();
            for s in [None, Some(stats)] {
                let back = defeaturize(&featurize_magnitude(&m, s).unwrap());
                for (a, b) in mags.iter().zip(&back.data) {
                    prop_assert!((a - b).abs() / a <= 1e-6);
                }
            }
        }

        #[test]
        fn stft_is_linear_in_scale(seed in 0u64..1000, a in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = AudioClip::new((0..3000).map(|_| rng.gen_range(-1.0..1.0)).collect(), SAMPLE_RATE);
            let sx = stft(&x, StftConfig::default()).unwrap();
            let sax = stft(&x.scaled(a), StftConfig::default()).unwrap();
            let scale = sx.data.iter().map(|c| c.norm()).fold(0.0, f64::max) * a.abs();
            for (p, q) in sx.data.iter().zip(&sax.data) {
                prop_assert!((p * a - q).norm() <= 1e-10 * scale.max(1e-300));
            }
        }
    }
}
