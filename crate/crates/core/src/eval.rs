//! Objective proxies for listening-test axes: f0 tracking and pitch shift,
//! reconstruction SNR, spectral contrast and spectrogram images.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use realfft::RealFftPlanner;
use thiserror::Error;

use crate::audio::AudioClip;
use crate::spectral::LogMagSpectrogram;

pub const F0_FRAME: usize = 2048;
pub const F0_HOP: usize = 512;
/// Integration window of the difference function.
pub const F0_WINDOW: usize = 1024;
pub const YIN_THRESHOLD: f64 = 0.15;
pub const F0_MIN: f64 = 50.0;
pub const F0_MAX: f64 = 1000.0;
pub const SNR_CAP_DB: f64 = 300.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("clip of {len} samples is shorter than the {min}-sample analysis frame")]
    TooShort { len: usize, min: usize },
    #[error("no voiced frames in {0}")]
    NoVoicedFrames(&'static str),
    #[error("length mismatch: reference {reference}, estimate {estimate}")]
    LengthMismatch { reference: usize, estimate: usize },
    #[error("reference signal is all zero")]
    ZeroReference,
    #[error("empty spectrogram")]
    Empty,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Per-frame f0 in Hz (`None` = unvoiced).
#[derive(Clone, Debug, PartialEq)]
pub struct F0Track {
    pub f0: Vec<Option<f64>>,
    pub hop_seconds: f64,
}

impl F0Track {
    pub fn voiced(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0.iter().flatten().copied()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.f0.is_empty() {
            0.0
        } else {
            self.voiced().count() as f64 / self.f0.len() as f64
        }
    }

    pub fn median_voiced(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.voiced().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }
}

/// Cumulative-mean-normalized difference function of one frame for lags
/// `0..=max_lag`.
fn cmnd(frame: &[f64], max_lag: usize, planner: &mut RealFftPlanner<f64>) -> Vec<f64> {
    let w = F0_WINDOW;
    // r(tau) = sum_{j<w} x_j x_{j+tau}, by FFT cross-correlation.
    let n = (F0_FRAME + w).next_power_of_two();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    a[..w].copy_from_slice(&frame[..w]);
    b[..frame.len()].copy_from_slice(frame);
    let mut fa = fwd.make_output_vec();
    let mut fb = fwd.make_output_vec();
    fwd.process(&mut a, &mut fa).expect("sized");
    fwd.process(&mut b, &mut fb).expect("sized");
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x = x.conj() * y;
    }
    let mut r = vec![0.0; n];
    inv.process(&mut fa, &mut r).expect("sized");
    let scale = 1.0 / n as f64;

    let mut prefix = vec![0.0; frame.len() + 1];
    for (i, &x) in frame.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x * x;
    }
    let energy = |start: usize| prefix[start + w] - prefix[start];
    let e0 = energy(0);

    let mut d = vec![1.0; max_lag + 1];
    let mut running = 0.0;
    for tau in 1..=max_lag {
        let diff = (e0 + energy(tau) - 2.0 * r[tau] * scale).max(0.0);
        running += diff;
        d[tau] = if running > 0.0 { diff * tau as f64 / running } else { 1.0 };
    }
    d
}

fn frame_f0(frame: &[f64], sample_rate: f64, planner: &mut RealFftPlanner<f64>) -> Option<f64> {
    let min_lag = (sample_rate / F0_MAX).ceil() as usize;
    let max_lag = (sample_rate / F0_MIN).floor() as usize;
    let d = cmnd(frame, max_lag + 1, planner);
    let mut tau = (min_lag.max(1)..=max_lag).find(|&t| d[t] < YIN_THRESHOLD)?;
    while tau < max_lag && d[tau + 1] < d[tau] {
        tau += 1;
    }
    let (l, c, r) = (d[tau - 1], d[tau], d[tau + 1]);
    let denom = l - 2.0 * c + r;
    let shift = if denom.abs() > 1e-12 { (0.5 * (l - r) / denom).clamp(-1.0, 1.0) } else { 0.0 };
    let f0 = sample_rate / (tau as f64 + shift);
    (F0_MIN..=F0_MAX).contains(&f0).then_some(f0)
}

/// Difference-function pitch tracker with cumulative-mean normalization,
/// absolute threshold 0.15 and parabolic refinement, on 2048-sample frames
/// every 512 samples.
pub fn estimate_f0(clip: &AudioClip) -> Result<F0Track, EvalError> {
    if clip.len() < F0_FRAME {
        return Err(EvalError::TooShort {
            len: clip.len(),
            min: F0_FRAME,
        });
    }
    let sr = clip.sample_rate as f64;
    let frames = (clip.len() - F0_FRAME) / F0_HOP + 1;
    let mut planner = RealFftPlanner::new();
    let f0 = (0..frames)
        .map(|i| frame_f0(&clip.samples[i * F0_HOP..i * F0_HOP + F0_FRAME], sr, &mut planner))
        .collect();
    Ok(F0Track {
        f0,
        hop_seconds: F0_HOP as f64 / sr,
    })
}

/// `12 log2(median f0(transferred) / median f0(source))` over voiced frames.
pub fn mean_f0_shift(source: &AudioClip, transferred: &AudioClip) -> Result<f64, EvalError> {
    let s = estimate_f0(source)?.median_voiced().ok_or(EvalError::NoVoicedFrames("source"))?;
    let t = estimate_f0(transferred)?
        .median_voiced()
        .ok_or(EvalError::NoVoicedFrames("transferred"))?;
    Ok(semitones(s, t))
}

pub fn semitones(from_hz: f64, to_hz: f64) -> f64 {
    12.0 * (to_hz.log2() - from_hz.log2())
}

/// `10 log10(sum ref^2 / sum (ref - est)^2)`, capped at 300 dB.
pub fn reconstruction_snr(reference: &AudioClip, estimate: &AudioClip) -> Result<f64, EvalError> {
    if reference.len() != estimate.len() {
        return Err(EvalError::LengthMismatch {
            reference: reference.len(),
            estimate: estimate.len(),
        });
    }
    let signal: f64 = reference.samples.iter().map(|x| x * x).sum();
    if signal == 0.0 {
        return Err(EvalError::ZeroReference);
    }
    let noise: f64 = reference
        .samples
        .iter()
        .zip(&estimate.samples)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if noise == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (signal / noise).log10()).min(SNR_CAP_DB))
}

/// Mean over frames of the spread between the 95th and 5th percentile of
/// the frame's feature values. Higher means sharper harmonic structure.
pub fn spectral_contrast(feat: &LogMagSpectrogram) -> f64 {
    if feat.frames == 0 || feat.channels == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut row = Vec::with_capacity(feat.channels);
    for t in 0..feat.frames {
        row.clear();
        row.extend_from_slice(&feat.data[t * feat.channels..(t + 1) * feat.channels]);
        row.sort_by(|a, b| a.total_cmp(b));
        let at = |q: f64| row[((row.len() - 1) as f64 * q).round() as usize];
        total += at(0.95) - at(0.05);
    }
    total / feat.frames as f64
}

/// Binary PGM: width = frames, height = bins with the lowest bin on the
/// bottom row, min -> 0 and max -> 255. A constant matrix renders as 128.
pub fn spectrogram_pgm(feat: &LogMagSpectrogram) -> Result<Vec<u8>, EvalError> {
    let (t, f) = (feat.frames, feat.channels);
    if t == 0 || f == 0 {
        return Err(EvalError::Empty);
    }
    let (lo, hi) = feat.min_max();
    let mut out = format!("P5\n{t} {f}\n255\n").into_bytes();
    out.reserve(t * f);
    for row in 0..f {
        let bin = f - 1 - row;
        for frame in 0..t {
            let v = feat.data[frame * f + bin];
            let px = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 };
            out.push(px);
        }
    }
    Ok(out)
}

pub fn export_spectrogram_image(feat: &LogMagSpectrogram, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    fs::write(path, spectrogram_pgm(feat)?).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Metrics comparing a source clip with its transfer.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub source_median_f0: Option<f64>,
    pub transferred_median_f0: Option<f64>,
    pub source_voiced_fraction: f64,
    pub transferred_voiced_fraction: f64,
    pub snr_db: Option<f64>,
}

impl EvalReport {
    pub fn f0_shift_semitones(&self) -> Option<f64> {
        Some(semitones(self.source_median_f0?, self.transferred_median_f0?))
    }

    /// `metric=value` lines. Axes without an objective proxy are listed as
    /// not evaluated.
    pub fn lines(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.4}"));
        vec![
            format!("f0_shift_semitones={}", opt(self.f0_shift_semitones())),
            format!("source_median_f0_hz={}", opt(self.source_median_f0)),
            format!("transferred_median_f0_hz={}", opt(self.transferred_median_f0)),
            format!("source_voiced_fraction={:.4}", self.source_voiced_fraction),
            format!("transferred_voiced_fraction={:.4}", self.transferred_voiced_fraction),
            format!("snr_db={}", opt(self.snr_db)),
            "lyrics=not evaluated".to_string(),
            "naturalness=not evaluated".to_string(),
            "overall=not evaluated".to_string(),
        ]
    }
}

pub fn evaluate_pair(source: &AudioClip, transferred: &AudioClip) -> Result<EvalReport, EvalError> {
    let s = estimate_f0(source)?;
    let t = estimate_f0(transferred)?;
    let snr_db = match reconstruction_snr(source, transferred) {
        Ok(v) => Some(v),
        Err(EvalError::LengthMismatch { .. }) | Err(EvalError::ZeroReference) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        source_median_f0: s.median_voiced(),
        transferred_median_f0: t.median_voiced(),
        source_voiced_fraction: s.voiced_fraction(),
        transferred_voiced_fraction: t.voiced_fraction(),
        snr_db,
    })
}

pub fn append_report(path: impl AsRef<Path>, lines: &[String]) -> Result<(), EvalError> {
    let path = path.as_ref();
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    for l in lines {
        writeln!(f, "{l}").map_err(io)?;
    }
    Ok(())
}
