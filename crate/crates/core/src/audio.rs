//! PCM audio I/O and fixed-window segmentation.
//!
//! Everything inside the pipeline runs at 44.1 kHz mono. Files at other rates
//! are rejected rather than resampled.

use std::path::{Path, PathBuf};

use thiserror::Error;

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE: u32 = 44_100;

/// Largest value representable by the 16-bit write path.
const MAX_WRITE: f64 = 1.0 - 1.0 / 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("file not found: {0}")]
    NotFound(PathBuf),
    #[error("unsupported format in {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },
    #[error("unsupported sample rate {rate} Hz in {path} (only 44100 Hz is accepted)")]
    UnsupportedRate { path: PathBuf, rate: u32 },
    #[error("cannot write an empty clip")]
    EmptyClip,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn wav_err(path: &Path, err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(source) => AudioError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => AudioError::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    }
}

/// A mono buffer of samples in [-1, 1] at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len], SAMPLE_RATE)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// Scale so the largest absolute sample equals `peak`. Silent clips are
    /// returned unchanged.
    pub fn peak_normalized(&self, peak: f64) -> Self {
        let current = self.peak();
        if current == 0.0 {
            return self.clone();
        }
        let gain = peak / current;
        Self::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
        )
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
        )
    }
}

/// Reads a 16-bit PCM RIFF/WAVE file. Stereo input is averaged to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(AudioError::NotFound(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!(
                "{:?} {}-bit samples (need 16-bit integer PCM)",
                spec.sample_format, spec.bits_per_sample
            ),
        });
    }
    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("{} channels (need 1 or 2)", spec.channels),
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(AudioError::UnsupportedRate {
            path: path.to_path_buf(),
            rate: spec.sample_rate,
        });
    }

    let raw = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    let samples = if spec.channels == 2 {
        raw.chunks_exact(2).map(|lr| (lr[0] + lr[1]) / 2.0).collect()
    } else {
        raw
    };
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Quantizes one sample to 16-bit PCM: clamp to [-1, 1 - 2^-15], then
/// round to nearest.
pub fn quantize_sample(x: f64) -> i16 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(-1.0, MAX_WRITE) };
    (x * 32768.0).round() as i16
}

/// Writes a mono 16-bit PCM file.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), AudioError> {
    let path = path.as_ref();
    if clip.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    {
        let mut w = writer.get_i16_writer(clip.samples.len() as u32);
        for &s in &clip.samples {
            w.write_sample(quantize_sample(s));
        }
        w.flush().map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

/// Number of whole segments [`segment_clip`] produces for a clip of `len`
/// samples.
pub fn segment_count(len: usize, seg_len: usize, hop_len: usize) -> usize {
    if len < seg_len {
        0
    } else {
        (len - seg_len) / hop_len + 1
    }
}

/// Cuts a clip into fixed-length, possibly overlapping segments starting at
/// 0, hop, 2*hop, ... A trailing partial window is dropped.
///
/// Panics unless `seg_seconds > 0` and `0 < hop_seconds <= seg_seconds`.
pub fn segment_clip(clip: &AudioClip, seg_seconds: f64, hop_seconds: f64) -> Vec<AudioClip> {
    assert!(seg_seconds > 0.0, "segment length must be positive");
    assert!(
        hop_seconds > 0.0 && hop_seconds <= seg_seconds,
        "hop must lie in (0, segment length]"
    );
    let rate = clip.sample_rate as f64;
    let seg_len = (seg_seconds * rate).round() as usize;
    let hop_len = ((hop_seconds * rate).round() as usize).max(1);
    (0..segment_count(clip.len(), seg_len, hop_len))
        .map(|i| {
            let start = i * hop_len;
            AudioClip::new(
                clip.samples[start..start + seg_len].to_vec(),
                clip.sample_rate,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_raw(path: &Path, channels: u16, rate: u32, bits: u16, frames: &[i32]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in frames {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn mono_read_keeps_length_and_rate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.wav");
        write_raw(&p, 1, 44_100, 16, &vec![0; 220_500]);
        let clip = read_wav(&p).unwrap();
        assert_eq!(clip.len(), 220_500);
        assert_eq!(clip.sample_rate, 44_100);
    }

    #[test]
    fn stereo_opposite_channels_average_to_silence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let frames: Vec<i32> = (0..200).flat_map(|_| [16384, -16384]).collect();
        write_raw(&p, 2, 44_100, 16, &frames);
        let clip = read_wav(&p).unwrap();
        assert_eq!(clip.len(), 200);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rejects_other_rates_and_encodings() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        write_raw(&p, 1, 22_050, 16, &[0; 10]);
        assert!(matches!(
            read_wav(&p),
            Err(AudioError::UnsupportedRate { rate: 22_050, .. })
        ));
        let p24 = dir.path().join("b.wav");
        write_raw(&p24, 1, 44_100, 24, &[0; 10]);
        assert!(matches!(
            read_wav(&p24),
            Err(AudioError::UnsupportedFormat { .. })
        ));
        assert!(matches!(
            read_wav(dir.path().join("missing.wav")),
            Err(AudioError::NotFound(_))
        ));
    }

    #[test]
    fn zero_clip_payload_is_all_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_wav(&p, &AudioClip::zeros(100)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 44 + 200);
        assert_eq!(&bytes[36..40], b"data");
        assert_eq!(u32::from_le_bytes(bytes[40..44].try_into().unwrap()), 200);
        assert!(bytes[44..].iter().all(|&b| b == 0));
    }

    #[test]
    fn clamps_out_of_range_samples() {
        assert_eq!(quantize_sample(2.0), 32767);
        assert_eq!(quantize_sample(-3.0), -32768);
        assert_eq!(quantize_sample(1.0), 32767);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        write_wav(&p, &AudioClip::new(vec![2.0, -2.0], SAMPLE_RATE)).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.samples, vec![32767.0 / 32768.0, -1.0]);
    }

    #[test]
    fn empty_clip_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_wav(dir.path().join("e.wav"), &AudioClip::zeros(0)),
            Err(AudioError::EmptyClip)
        ));
    }

    #[test]
    fn random_round_trip_error_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clip = AudioClip::new(
            (0..10_000).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            SAMPLE_RATE,
        );
        write_wav(&p, &clip).unwrap();
        let back = read_wav(&p).unwrap();
        let max_err = clip
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // Round-to-nearest gives half an LSB except at the clamped top.
        assert!(max_err <= 1.0 / 32768.0, "max error {max_err}");
    }

    #[test]
    fn thirty_seconds_gives_twenty_six_segments() {
        let clip = AudioClip::zeros(30 * 44_100);
        assert_eq!(segment_clip(&clip, 5.0, 1.0).len(), 26);
    }

    #[test]
    fn exact_window_gives_the_input_back() {
        let clip = AudioClip::new((0..220_500).map(|i| i as f64 * 1e-6).collect(), SAMPLE_RATE);
        let segs = segment_clip(&clip, 5.0, 1.0);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0], clip);
    }

    #[test]
    fn short_clip_gives_no_segments() {
        assert!(segment_clip(&AudioClip::zeros(4 * 44_100), 5.0, 1.0).is_empty());
    }

    #[test]
    fn adjacent_segments_share_four_seconds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clip = AudioClip::new(
            (0..8 * 44_100).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            SAMPLE_RATE,
        );
        let segs = segment_clip(&clip, 5.0, 1.0);
        assert_eq!(segs.len(), 4);
        for pair in segs.windows(2) {
            assert_eq!(pair[0].samples[44_100..], pair[1].samples[..4 * 44_100]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn segment_count_matches_formula(len in 0usize..=60 * 44_100) {
            let clip = AudioClip::zeros(len);
            let segs = segment_clip(&clip, 5.0, 1.0);
            let secs = len as f64 / 44_100.0;
            let expected = if secs >= 5.0 { ((secs - 5.0) / 1.0).floor() as usize + 1 } else { 0 };
            prop_assert_eq!(segs.len(), expected);
            prop_assert!(segs.iter().all(|s| s.len() == 220_500));
        }
    }
}
