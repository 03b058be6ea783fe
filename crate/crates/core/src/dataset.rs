//! Segment manifests, train/test splits, unpaired batch sampling and the
//! synthetic two-domain tone corpus.
//!
//! Manifest files are plain text, one record per line:
//!
//! ```text
//! # seed=7
//! <id>\t<source_file>\t<offset_s>\t<duration_s>\t<domain>
//! ```
//!
//! Relative source paths are resolved against the manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fnv::FnvHasher;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{read_wav, segment_count, write_wav, AudioClip, AudioError, SAMPLE_RATE};
use crate::models::FEATURE_BINS;
use crate::nn::Tensor;
use crate::spectral::{self, NormStats, SpectralError, StftConfig, StftEngine, LOG_FLOOR};

pub const SEGMENT_SECONDS: f64 = 5.0;
pub const SEGMENT_HOP_SECONDS: f64 = 1.0;
/// Samples in one 5 s segment at 44.1 kHz.
pub const SEGMENT_SAMPLES: usize = 220_500;

pub const TOY_PARTIALS: usize = 5;
pub const TOY_PEAK: f64 = 0.5;
pub const TOY_VIBRATO_DEPTH: f64 = 0.02;
pub const TOY_VIBRATO_RATE: f64 = 5.0;
pub const TOY_RANGE_A: (f64, f64) = (100.0, 200.0);
pub const TOY_RANGE_B: (f64, f64) = (200.0, 400.0);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{0} has no domain label")]
    UnlabeledFile(String),
    #[error("domain {domain} has {available} segments, {requested} requested")]
    InsufficientSegments {
        domain: Domain,
        available: usize,
        requested: usize,
    },
    #[error("crop of {crop} frames exceeds the {frames}-frame segments")]
    CropTooLong { crop: usize, frames: usize },
    #[error("domain {0} has no segments")]
    EmptyDomain(Domain),
    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },
    #[error("segment {id} lies outside {path}")]
    SegmentOutOfRange { id: String, path: PathBuf },
    #[error("duplicate segment id {0}")]
    DuplicateId(String),
    #[error("bad dataset configuration: {0}")]
    BadConfig(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Source (A) or target (B) singer domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::A, Domain::B];

    pub fn index(self) -> usize {
        match self {
            Domain::A => 0,
            Domain::B => 1,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

impl FromStr for Domain {
    type Err = String;

    /// Accepts `A`/`B` and the gender-transfer aliases `male`/`female`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" | "male" | "m" => Ok(Domain::A),
            "b" | "female" | "f" => Ok(Domain::B),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRecord {
    pub id: String,
    pub source_file: PathBuf,
    pub offset: f64,
    pub duration: f64,
    pub domain: Domain,
}

/// Stable 64-bit FNV-1a id of a segment's provenance.
pub fn segment_id(source_file: &Path, offset: f64, duration: f64) -> String {
    let mut h = FnvHasher::default();
    h.write(source_file.to_string_lossy().as_bytes());
    h.write(format!("\t{offset}\t{duration}").as_bytes());
    format!("{:016x}", h.finish())
}

impl SegmentRecord {
    pub fn new(source_file: impl Into<PathBuf>, offset: f64, duration: f64, domain: Domain) -> Self {
        let source_file = source_file.into();
        Self {
            id: segment_id(&source_file, offset, duration),
            source_file,
            offset,
            duration,
            domain,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<SegmentRecord>,
    pub seed: Option<u64>,
}

impl Manifest {
    pub fn new(records: Vec<SegmentRecord>, seed: Option<u64>) -> Self {
        Self { records, seed }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.records.iter().filter(|r| r.domain == domain).count()
    }

    pub fn domain(&self, domain: Domain) -> impl Iterator<Item = &SegmentRecord> {
        self.records.iter().filter(move |r| r.domain == domain)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(seed) = self.seed {
            s.push_str(&format!("# seed={seed}\n"));
        }
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.source_file.display(),
                r.offset,
                r.duration,
                r.domain
            ));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, DatasetError> {
        let mut records = Vec::new();
        let mut seed = None;
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let err = |detail: String| DatasetError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail,
            };
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("seed=") {
                    seed = Some(v.trim().parse().map_err(|e| err(format!("bad seed: {e}")))?);
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
            }
            let offset: f64 = fields[2].parse().map_err(|e| err(format!("bad offset: {e}")))?;
            let duration: f64 = fields[3].parse().map_err(|e| err(format!("bad duration: {e}")))?;
            if !(offset >= 0.0 && duration > 0.0) {
                return Err(err("offset must be >= 0 and duration > 0".into()));
            }
            let domain = fields[4].parse().map_err(err)?;
            if !seen.insert(fields[0].to_string()) {
                return Err(DatasetError::DuplicateId(fields[0].to_string()));
            }
            records.push(SegmentRecord {
                id: fields[0].to_string(),
                source_file: PathBuf::from(fields[1]),
                offset,
                duration,
                domain,
            });
        }
        Ok(Self { records, seed })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }
}

/// Reads `filename<TAB>domain` lines. Blank lines and `#` comments are
/// skipped.
pub fn read_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, Domain>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut labels = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, domain) = line.split_once('\t').ok_or_else(|| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: "expected filename<TAB>domain".into(),
        })?;
        let domain = domain.parse().map_err(|detail| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        })?;
        labels.insert(name.trim().to_string(), domain);
    }
    Ok(labels)
}

/// Cuts every WAV in `audio_dir` into 5 s segments with a 1 s hop. Source
/// paths are recorded relative to `audio_dir`.
pub fn build_manifest(audio_dir: impl AsRef<Path>, labels: &BTreeMap<String, Domain>) -> Result<Manifest, DatasetError> {
    let dir = audio_dir.as_ref();
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".wav"))
        .collect();
    names.sort();
    let seg_len = (SEGMENT_SECONDS * SAMPLE_RATE as f64) as usize;
    let hop_len = (SEGMENT_HOP_SECONDS * SAMPLE_RATE as f64) as usize;
    let mut records = Vec::new();
    for name in names {
        let domain = *labels.get(&name).ok_or_else(|| DatasetError::UnlabeledFile(name.clone()))?;
        let clip = read_wav(dir.join(&name))?;
        for i in 0..segment_count(clip.len(), seg_len, hop_len) {
            records.push(SegmentRecord::new(
                &name,
                i as f64 * SEGMENT_HOP_SECONDS,
                SEGMENT_SECONDS,
                domain,
            ));
        }
    }
    Ok(Manifest::new(records, None))
}

/// Per-domain uniform selection without replacement of `n_train + n_test`
/// records; the first `n_train` draws go to the training set.
pub fn split_dataset(
    manifest: &Manifest,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Manifest, Manifest), DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for domain in Domain::BOTH {
        let pool: Vec<&SegmentRecord> = manifest.domain(domain).collect();
        let requested = n_train + n_test;
        if pool.len() < requested {
            return Err(DatasetError::InsufficientSegments {
                domain,
                available: pool.len(),
                requested,
            });
        }
        let picks = sample(&mut rng, pool.len(), requested).into_vec();
        let (tr, te) = picks.split_at(n_train);
        let mut tr = tr.to_vec();
        let mut te = te.to_vec();
        tr.sort_unstable();
        te.sort_unstable();
        train.extend(tr.iter().map(|&i| pool[i].clone()));
        test.extend(te.iter().map(|&i| pool[i].clone()));
    }
    Ok((Manifest::new(train, Some(seed)), Manifest::new(test, Some(seed))))
}

fn resolve(base_dir: &Path, source: &Path) -> PathBuf {
    if source.is_absolute() {
        source.to_path_buf()
    } else {
        base_dir.join(source)
    }
}

fn slice_segment(clip: &AudioClip, record: &SegmentRecord, path: &Path) -> Result<Vec<f64>, DatasetError> {
    let sr = clip.sample_rate as f64;
    let start = (record.offset * sr).round() as usize;
    let len = (record.duration * sr).round() as usize;
    clip.samples
        .get(start..start + len)
        .map(|s| s.to_vec())
        .ok_or_else(|| DatasetError::SegmentOutOfRange {
            id: record.id.clone(),
            path: path.to_path_buf(),
        })
}

/// Loads the samples of one record.
pub fn load_segment(record: &SegmentRecord, base_dir: impl AsRef<Path>) -> Result<AudioClip, DatasetError> {
    let path = resolve(base_dir.as_ref(), &record.source_file);
    let clip = read_wav(&path)?;
    let samples = slice_segment(&clip, record, &path)?;
    Ok(AudioClip::new(samples, clip.sample_rate))
}

/// Segment audio held in memory, grouped by domain.
#[derive(Clone, Debug)]
pub struct SegmentStore {
    segments: [Vec<Vec<f32>>; 2],
    cfg: StftConfig,
    frames: usize,
}

impl SegmentStore {
    /// Reads every record of `manifest`, opening each source file once. All
    /// segments must have the same length.
    pub fn load(manifest: &Manifest, base_dir: impl AsRef<Path>, cfg: StftConfig) -> Result<Self, DatasetError> {
        let base_dir = base_dir.as_ref();
        let mut cache: HashMap<PathBuf, AudioClip> = HashMap::new();
        let mut segments: [Vec<Vec<f32>>; 2] = [Vec::new(), Vec::new()];
        let mut seg_len = None;
        for r in &manifest.records {
            let path = resolve(base_dir, &r.source_file);
            if !cache.contains_key(&path) {
                let clip = read_wav(&path)?;
                cache.insert(path.clone(), clip);
            }
            let s = slice_segment(&cache[&path], r, &path)?;
            match seg_len {
                None => seg_len = Some(s.len()),
                Some(n) if n != s.len() => {
                    return Err(DatasetError::BadConfig(format!(
                        "segment {} has {} samples, expected {n}",
                        r.id,
                        s.len()
                    )))
                }
                _ => {}
            }
            segments[r.domain.index()].push(s.into_iter().map(|v| v as f32).collect());
        }
        Self::from_segments(segments, cfg)
    }

    /// Builds a store from raw per-domain sample vectors of equal length.
    pub fn from_segments(segments: [Vec<Vec<f32>>; 2], cfg: StftConfig) -> Result<Self, DatasetError> {
        for d in Domain::BOTH {
            if segments[d.index()].is_empty() {
                return Err(DatasetError::EmptyDomain(d));
            }
        }
        let len = segments[0][0].len();
        if segments.iter().flatten().any(|s| s.len() != len) {
            return Err(DatasetError::BadConfig("segments differ in length".into()));
        }
        let frames = cfg.frame_count(len).ok_or(SpectralError::TooShort {
            len,
            window: cfg.window_size,
        })?;
        Ok(Self { segments, cfg, frames })
    }

    pub fn stft_config(&self) -> StftConfig {
        self.cfg
    }

    pub fn len(&self, domain: Domain) -> usize {
        self.segments[domain.index()].len()
    }

    /// STFT frames of one full segment.
    pub fn segment_frames(&self) -> usize {
        self.frames
    }

    pub fn segment(&self, domain: Domain, index: usize) -> &[f32] {
        &self.segments[domain.index()][index]
    }

    /// Global min/max of the log-magnitude features of every segment.
    pub fn norm_stats(&self) -> Result<NormStats, DatasetError> {
        let engine = StftEngine::new(self.cfg)?;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut buf = Vec::new();
        for s in self.segments.iter().flatten() {
            buf.clear();
            buf.extend(s.iter().map(|&v| v as f64));
            let spec = engine.analyze(&buf, SAMPLE_RATE)?;
            for c in &spec.data {
                let y = (spectral::abs(*c) + LOG_FLOOR).ln();
                lo = lo.min(y);
                hi = hi.max(y);
            }
        }
        Ok(NormStats::new(lo, hi)?)
    }

    /// Normalized features of frames `start..start + crop` of one segment,
    /// written channel-major into `out` (`FEATURE_BINS * crop` values).
    fn crop_features(
        &self,
        engine: &StftEngine,
        domain: Domain,
        index: usize,
        start: usize,
        crop: usize,
        stats: NormStats,
        out: &mut [f32],
    ) -> Result<(), DatasetError> {
        let s = self.segment(domain, index);
        let from = start * self.cfg.hop;
        let to = from + self.cfg.signal_len(crop);
        let buf: Vec<f64> = s[from..to].iter().map(|&v| v as f64).collect();
        let spec = engine.analyze(&buf, SAMPLE_RATE)?;
        debug_assert_eq!(spec.frames, crop);
        for t in 0..crop {
            for (f, c) in spec.frame(t).iter().enumerate() {
                out[f * crop + t] = stats.normalize((spectral::abs(*c) + LOG_FLOOR).ln()) as f32;
            }
        }
        Ok(())
    }

    /// `batch` random crops of `crop` frames from domain A drawn with
    /// `rng_a`, and independently from domain B with `rng_b`. Items are
    /// drawn with replacement.
    pub fn sample_batch(
        &self,
        batch: usize,
        crop: usize,
        stats: NormStats,
        rng_a: &mut impl Rng,
        rng_b: &mut impl Rng,
    ) -> Result<(Tensor<f32>, Tensor<f32>), DatasetError> {
        Ok((
            self.sample_domain(Domain::A, batch, crop, stats, rng_a)?,
            self.sample_domain(Domain::B, batch, crop, stats, rng_b)?,
        ))
    }

    pub fn sample_domain(
        &self,
        domain: Domain,
        batch: usize,
        crop: usize,
        stats: NormStats,
        rng: &mut impl Rng,
    ) -> Result<Tensor<f32>, DatasetError> {
        if crop == 0 || crop > self.frames {
            return Err(DatasetError::CropTooLong {
                crop,
                frames: self.frames,
            });
        }
        if batch == 0 {
            return Err(DatasetError::BadConfig("batch size must be at least 1".into()));
        }
        let engine = StftEngine::new(self.cfg)?;
        let item = FEATURE_BINS * crop;
        let mut data = vec![0.0f32; batch * item];
        for b in 0..batch {
            let index = rng.gen_range(0..self.len(domain));
            let start = rng.gen_range(0..=self.frames - crop);
            self.crop_features(&engine, domain, index, start, crop, stats, &mut data[b * item..(b + 1) * item])?;
        }
        Ok(Tensor::from_vec(&[batch, FEATURE_BINS, crop], data).expect("sized"))
    }
}

/// Per-step batch randomness: one ChaCha stream per (step, domain), so the
/// two domains never share draws and any step can be replayed alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSampler {
    pub seed: u64,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self, step: u64, domain: Domain) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step.wrapping_mul(2).wrapping_add(domain.index() as u64));
        rng
    }

    pub fn sample(
        &self,
        store: &SegmentStore,
        step: u64,
        batch: usize,
        crop: usize,
        stats: NormStats,
    ) -> Result<(Tensor<f32>, Tensor<f32>), DatasetError> {
        store.sample_batch(
            batch,
            crop,
            stats,
            &mut self.rng(step, Domain::A),
            &mut self.rng(step, Domain::B),
        )
    }
}

/// One synthesized tone of the toy corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDraw {
    pub file: String,
    pub domain: Domain,
    pub f0: f64,
    pub vibrato_phase: f64,
}

/// Draws `n` tones per domain: A first, then B, from one seeded stream.
pub fn toy_draws(n_per_domain: usize, seed: u64) -> Vec<ToyDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(2 * n_per_domain);
    for (domain, (lo, hi), prefix) in [(Domain::A, TOY_RANGE_A, "a"), (Domain::B, TOY_RANGE_B, "b")] {
        for i in 0..n_per_domain {
            let f0 = rng.gen_range(lo..hi);
            let vibrato_phase = rng.gen_range(0.0..std::f64::consts::TAU);
            draws.push(ToyDraw {
                file: format!("{prefix}_{i:04}.wav"),
                domain,
                f0,
                vibrato_phase,
            });
        }
    }
    draws
}

/// Five-partial harmonic tone with amplitudes `1/k` and ±2 % vibrato at
/// 5 Hz, peak-normalized to 0.5.
pub fn toy_tone(f0: f64, vibrato_phase: f64, len: usize, sample_rate: u32) -> AudioClip {
    use std::f64::consts::TAU;
    let sr = sample_rate as f64;
    let depth = TOY_VIBRATO_DEPTH * f0 / TOY_VIBRATO_RATE;
    let samples = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            // Integral of f0 * (1 + d sin(2 pi r t + phi)).
            let theta =
                TAU * (f0 * t - depth / TAU * ((TAU * TOY_VIBRATO_RATE * t + vibrato_phase).cos() - vibrato_phase.cos()));
            (1..=TOY_PARTIALS).map(|k| (k as f64 * theta).sin() / k as f64).sum()
        })
        .collect();
    AudioClip::new(samples, sample_rate).peak_normalized(TOY_PEAK)
}

/// Writes the toy corpus (`a_NNNN.wav`, `b_NNNN.wav`, `labels.tsv`,
/// `manifest.tsv`) into `out_dir` and returns its manifest.
pub fn gen_toy_corpus(n_per_domain: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<Manifest, DatasetError> {
    if n_per_domain == 0 {
        return Err(DatasetError::BadConfig("toy corpus needs at least one tone per domain".into()));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut labels = String::new();
    let mut records = Vec::new();
    for d in toy_draws(n_per_domain, seed) {
        let clip = toy_tone(d.f0, d.vibrato_phase, SEGMENT_SAMPLES, SAMPLE_RATE);
        write_wav(dir.join(&d.file), &clip)?;
        labels.push_str(&format!("{}\t{}\n", d.file, d.domain));
        records.push(SegmentRecord::new(&d.file, 0.0, SEGMENT_SECONDS, d.domain));
    }
    let labels_path = dir.join("labels.tsv");
    fs::write(&labels_path, labels).map_err(io_err(&labels_path))?;
    let manifest = Manifest::new(records, Some(seed));
    manifest.write(dir.join("manifest.tsv"))?;
    Ok(manifest)
}
