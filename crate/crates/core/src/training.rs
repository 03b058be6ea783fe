//! Joint cycle-consistent training of both translation directions, with
//! boundary-equilibrium control for auto-encoder discriminators, plus
//! checkpoints, the loss log and inference-time transfer.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"CBGANCKP" | u32 version | u32 header_len | header (key=value lines)
//! u32 blob_count | blobs: u32 name_len, name, u32 ndim, u32 dims.., f32 data..
//! u64 FNV-1a of everything above
//! ```

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::hash::Hasher;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc::sync_channel;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{AudioClip, AudioError};
use crate::dataset::{BatchSampler, DatasetError, SegmentStore};
use crate::models::{
    build_discriminator, build_generator, Discriminator, DiscriminatorTape, Generator, ModelError, VariantSpec,
    FEATURE_BINS,
};
use crate::nn::{l1_loss, squared_error_loss, AdamConfig, AdamState, GradMode, NnError, Param, Tensor};
use crate::spectral::{
    defeaturize, featurize, griffin_lim, stft, LogMagSpectrogram, NormStats, SpectralError, StftConfig,
};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CBGANCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {name} at step {step}")]
    NonFiniteLoss { step: u64, name: &'static str },
    #[error("checkpoint format version {found} is not supported (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint checksum mismatch (truncated or corrupted file)")]
    CorruptChecksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("bad training configuration: {0}")]
    BadConfig(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparams {
    pub lambda_cyc: f64,
    pub gamma: f64,
    pub lambda_k: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub crop_frames: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            gamma: 0.5,
            lambda_k: 0.001,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 8,
            crop_frames: 256,
        }
    }
}

impl Hyperparams {
    pub const KEYS: [&'static str; 8] = [
        "lambda_cyc",
        "gamma",
        "lambda_k",
        "learning_rate",
        "beta1",
        "beta2",
        "batch_size",
        "crop_frames",
    ];

    /// Overrides one value by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value
                .trim()
                .parse()
                .map_err(|_| TrainError::BadConfig(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "lambda_cyc" => self.lambda_cyc = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "lambda_k" => self.lambda_k = num(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "crop_frames" => self.crop_frames = num(key, value)?,
            other => return Err(TrainError::BadConfig(format!("unknown hyperparameter {other:?}"))),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lambda_cyc", self.lambda_cyc.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lambda_k", self.lambda_k.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("crop_frames", self.crop_frames.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lambda_cyc >= 0.0
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && self.lambda_k >= 0.0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.batch_size >= 1
            && self.crop_frames >= 1;
        if ok && [self.lambda_cyc, self.gamma, self.lambda_k, self.learning_rate].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TrainError::BadConfig(format!("invalid hyperparameters {self:?}")))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Mean absolute difference.
pub fn cycle_loss(x: &Tensor<f32>, reconstructed: &Tensor<f32>) -> Result<f64, TrainError> {
    Ok(l1_loss(reconstructed, x)?.0 as f64)
}

/// `(L_real - k L_fake, L_fake)`.
pub fn began_losses(l_real: f64, l_fake: f64, k: f64) -> (f64, f64) {
    (l_real - k * l_fake, l_fake)
}

/// Proportional control of `k` towards `L_fake = gamma L_real`, and the
/// convergence measure `M = L_real + |gamma L_real - L_fake|`.
pub fn update_equilibrium(k: f64, l_real: f64, l_fake: f64, gamma: f64, lambda_k: f64) -> (f64, f64) {
    let balance = gamma * l_real - l_fake;
    ((k + lambda_k * balance).clamp(0.0, 1.0), l_real + balance.abs())
}

/// Least-squares objectives with real target 1 and fake target 0.
pub fn lsgan_losses(scores_real: &Tensor<f32>, scores_fake: &Tensor<f32>) -> (f64, f64) {
    let (real, _) = squared_error_loss(scores_real, 1.0f32);
    let (fake, _) = squared_error_loss(scores_fake, 0.0f32);
    let (g, _) = squared_error_loss(scores_fake, 1.0f32);
    (real as f64 + fake as f64, g as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub adv_g_ab: f64,
    pub adv_g_ba: f64,
    pub cyc_a: f64,
    pub cyc_b: f64,
    pub d_a: f64,
    pub d_b: f64,
    /// Convergence measure of `D_A`; zero for patch discriminators.
    pub m_a: f64,
    pub m_b: f64,
    /// Equilibrium variables after this step's update.
    pub k_a: f64,
    pub k_b: f64,
}

impl LossReport {
    pub fn entries(&self) -> [(&'static str, f64); 10] {
        [
            ("adv_G_AB", self.adv_g_ab),
            ("adv_G_BA", self.adv_g_ba),
            ("cyc_A", self.cyc_a),
            ("cyc_B", self.cyc_b),
            ("d_A", self.d_a),
            ("d_B", self.d_b),
            ("M_A", self.m_a),
            ("M_B", self.m_b),
            ("k_A", self.k_a),
            ("k_B", self.k_b),
        ]
    }

    pub fn check_finite(&self) -> Result<(), TrainError> {
        for (name, v) in self.entries() {
            if !v.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: self.step, name });
            }
        }
        Ok(())
    }

    /// `step,loss_name,value` lines.
    pub fn log_lines(&self) -> String {
        self.entries()
            .iter()
            .map(|(n, v)| format!("{},{},{}\n", self.step, n, v))
            .collect()
    }
}

/// Translation direction of a transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    AToB,
    BToA,
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a2b" => Ok(Direction::AToB),
            "b2a" => Ok(Direction::BToA),
            other => Err(format!("unknown direction {other:?} (expected a2b or b2a)")),
        }
    }
}

/// Everything a training run owns.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub spec: VariantSpec,
    pub hp: Hyperparams,
    pub stft: StftConfig,
    pub norm_stats: NormStats,
    pub seed: u64,
    pub step: u64,
    pub k_a: f64,
    pub k_b: f64,
    pub g_ab: Generator<f32>,
    pub g_ba: Generator<f32>,
    pub d_a: Discriminator<f32>,
    pub d_b: Discriminator<f32>,
    pub opt_g: AdamState<f32>,
    pub opt_d: AdamState<f32>,
}

impl TrainState {
    /// Fresh networks, each initialized from its own seed drawn from `seed`.
    pub fn new(
        spec: VariantSpec,
        hp: Hyperparams,
        stft: StftConfig,
        norm_stats: NormStats,
        seed: u64,
    ) -> Result<Self, TrainError> {
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seeds: [u64; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        let g_ab = build_generator(&spec, seeds[0])?;
        let g_ba = build_generator(&spec, seeds[1])?;
        let d_a = build_discriminator(&spec, seeds[2])?;
        let d_b = build_discriminator(&spec, seeds[3])?;
        let opt_g = AdamState::new(hp.adam(), g_ab.params().into_iter().chain(g_ba.params()));
        let opt_d = AdamState::new(hp.adam(), d_a.params().into_iter().chain(d_b.params()));
        Ok(Self {
            spec,
            hp,
            stft,
            norm_stats,
            seed,
            step: 0,
            k_a: 0.0,
            k_b: 0.0,
            g_ab,
            g_ba,
            d_a,
            d_b,
            opt_g,
            opt_d,
        })
    }

    pub fn generator(&self, direction: Direction) -> &Generator<f32> {
        match direction {
            Direction::AToB => &self.g_ab,
            Direction::BToA => &self.g_ba,
        }
    }
}

/// Discriminator pass over a generated batch, kept so the discriminator
/// update can reuse it.
struct FakePass {
    out: Tensor<f32>,
    tape: DiscriminatorTape<f32>,
    /// `L_fake` (auto-encoder) or the generator's least-squares loss.
    gen_loss: f64,
    /// Gradient of the generator's adversarial loss with respect to the fake.
    d_fake: Tensor<f32>,
}

fn generator_adversarial(disc: &mut Discriminator<f32>, fake: &Tensor<f32>) -> Result<FakePass, TrainError> {
    let (out, tape) = disc.forward(fake)?;
    if disc.is_auto_encoder() {
        // L_fake = mean |D(x) - x|: the fake is both input and target.
        let (l, dpred, dtarget) = l1_loss(&out, fake)?;
        let mut d_fake = disc.backward(&tape, &dpred, GradMode::INPUT_ONLY)?.expect("input grad");
        d_fake.add_assign(&dtarget)?;
        Ok(FakePass {
            out,
            tape,
            gen_loss: l as f64,
            d_fake,
        })
    } else {
        let (l, ds) = squared_error_loss(&out, 1.0);
        let d_fake = disc.backward(&tape, &ds, GradMode::INPUT_ONLY)?.expect("input grad");
        Ok(FakePass {
            out,
            tape,
            gen_loss: l as f64,
            d_fake,
        })
    }
}

struct DiscOutcome {
    loss: f64,
    l_real: f64,
    l_fake: f64,
}

/// Accumulates the discriminator's own gradients for real batch `real` and
/// the (detached) fake pass.
fn discriminator_gradients(
    disc: &mut Discriminator<f32>,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    pass: &FakePass,
    k: f64,
) -> Result<DiscOutcome, TrainError> {
    let (out_r, tape_r) = disc.forward(real)?;
    if disc.is_auto_encoder() {
        let (l_real, d_real, _) = l1_loss(&out_r, real)?;
        disc.backward(&tape_r, &d_real, GradMode::PARAMS_ONLY)?;
        let (l_fake, mut d_fake, _) = l1_loss(&pass.out, fake)?;
        if k > 0.0 {
            d_fake.scale(-(k as f32));
            disc.backward(&pass.tape, &d_fake, GradMode::PARAMS_ONLY)?;
        }
        let (loss, _) = began_losses(l_real as f64, l_fake as f64, k);
        Ok(DiscOutcome {
            loss,
            l_real: l_real as f64,
            l_fake: l_fake as f64,
        })
    } else {
        let (l_real, d_real) = squared_error_loss(&out_r, 1.0);
        disc.backward(&tape_r, &d_real, GradMode::PARAMS_ONLY)?;
        let (l_fake, d_fake) = squared_error_loss(&pass.out, 0.0);
        disc.backward(&pass.tape, &d_fake, GradMode::PARAMS_ONLY)?;
        Ok(DiscOutcome {
            loss: l_real as f64 + l_fake as f64,
            l_real: l_real as f64,
            l_fake: l_fake as f64,
        })
    }
}

/// One update of both generators, then both discriminators, then the
/// equilibrium variables. `batch_a` and `batch_b` are sampled independently.
pub fn train_step(state: &mut TrainState, batch_a: &Tensor<f32>, batch_b: &Tensor<f32>) -> Result<LossReport, TrainError> {
    if batch_a.shape() != batch_b.shape() {
        return Err(TrainError::BadConfig(format!(
            "batch shapes differ: {:?} vs {:?}",
            batch_a.shape(),
            batch_b.shape()
        )));
    }
    let step = state.step + 1;
    let lambda = state.hp.lambda_cyc as f32;

    state.g_ab.zero_grad();
    state.g_ba.zero_grad();
    let (fake_b, tape_ab) = state.g_ab.forward(batch_a)?;
    let (fake_a, tape_ba) = state.g_ba.forward(batch_b)?;
    let (rec_a, tape_aba) = state.g_ba.forward(&fake_b)?;
    let (rec_b, tape_bab) = state.g_ab.forward(&fake_a)?;

    let (cyc_a, mut d_rec_a, _) = l1_loss(&rec_a, batch_a)?;
    let (cyc_b, mut d_rec_b, _) = l1_loss(&rec_b, batch_b)?;
    d_rec_a.scale(lambda);
    d_rec_b.scale(lambda);
    let mut d_fake_b = state.g_ba.backward(&tape_aba, &d_rec_a, GradMode::ALL)?.expect("input grad");
    let mut d_fake_a = state.g_ab.backward(&tape_bab, &d_rec_b, GradMode::ALL)?.expect("input grad");

    let pass_b = generator_adversarial(&mut state.d_b, &fake_b)?;
    let pass_a = generator_adversarial(&mut state.d_a, &fake_a)?;
    d_fake_b.add_assign(&pass_b.d_fake)?;
    d_fake_a.add_assign(&pass_a.d_fake)?;
    state.g_ab.backward(&tape_ab, &d_fake_b, GradMode::PARAMS_ONLY)?;
    state.g_ba.backward(&tape_ba, &d_fake_a, GradMode::PARAMS_ONLY)?;

    let mut report = LossReport {
        step,
        adv_g_ab: pass_b.gen_loss,
        adv_g_ba: pass_a.gen_loss,
        cyc_a: cyc_a as f64,
        cyc_b: cyc_b as f64,
        ..LossReport::default()
    };
    report.check_finite()?;
    let mut gp = state.g_ab.params_mut();
    gp.extend(state.g_ba.params_mut());
    state.opt_g.step(&mut gp)?;
    gp.iter_mut().for_each(|p| p.zero_grad());

    state.d_a.zero_grad();
    state.d_b.zero_grad();
    let out_a = discriminator_gradients(&mut state.d_a, batch_a, &fake_a, &pass_a, state.k_a)?;
    let out_b = discriminator_gradients(&mut state.d_b, batch_b, &fake_b, &pass_b, state.k_b)?;
    report.d_a = out_a.loss;
    report.d_b = out_b.loss;
    report.check_finite()?;
    let mut dp = state.d_a.params_mut();
    dp.extend(state.d_b.params_mut());
    state.opt_d.step(&mut dp)?;
    dp.iter_mut().for_each(|p| p.zero_grad());

    if state.spec.began {
        let (gamma, lk) = (state.hp.gamma, state.hp.lambda_k);
        let (k_a, m_a) = update_equilibrium(state.k_a, out_a.l_real, out_a.l_fake, gamma, lk);
        let (k_b, m_b) = update_equilibrium(state.k_b, out_b.l_real, out_b.l_fake, gamma, lk);
        state.k_a = k_a;
        state.k_b = k_b;
        report.m_a = m_a;
        report.m_b = m_b;
    }
    report.k_a = state.k_a;
    report.k_b = state.k_b;
    report.check_finite()?;
    state.step = step;
    Ok(report)
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn named_tensors(state: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    let nets: [(&str, Vec<&Param<f32>>); 4] = [
        ("g_ab", state.g_ab.params()),
        ("g_ba", state.g_ba.params()),
        ("d_a", state.d_a.params()),
        ("d_b", state.d_b.params()),
    ];
    let mut out = Vec::new();
    let mut g_names = Vec::new();
    let mut d_names = Vec::new();
    for (net, params) in &nets {
        for p in params {
            let name = format!("{net}/{}", p.name);
            if net.starts_with('g') {
                g_names.push(name.clone());
            } else {
                d_names.push(name.clone());
            }
            out.push((name, &p.value));
        }
    }
    for (opt, names, tag) in [(&state.opt_g, &g_names, "adam_g"), (&state.opt_d, &d_names, "adam_d")] {
        for (i, n) in names.iter().enumerate() {
            out.push((format!("{tag}/m/{n}"), &opt.first[i]));
            out.push((format!("{tag}/v/{n}"), &opt.second[i]));
        }
    }
    out
}

fn header(state: &TrainState) -> String {
    let s = &state.spec;
    let mut pairs: Vec<(&str, String)> = vec![
        ("variant", s.name.clone()),
        ("began", s.began.to_string()),
        ("skip", s.skip.to_string()),
        ("recurrent", s.recurrent.to_string()),
        ("base_channels", s.base_channels.to_string()),
        ("depth", s.depth.to_string()),
    ];
    pairs.extend(state.hp.pairs());
    pairs.extend([
        ("window", state.stft.window_size.to_string()),
        ("hop", state.stft.hop.to_string()),
        ("norm_min", state.norm_stats.min.to_string()),
        ("norm_max", state.norm_stats.max.to_string()),
        ("seed", state.seed.to_string()),
        ("step", state.step.to_string()),
        ("k_a", state.k_a.to_string()),
        ("k_b", state.k_b.to_string()),
        ("adam_g_step", state.opt_g.step.to_string()),
        ("adam_d_step", state.opt_d.step.to_string()),
    ]);
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Serializes the complete training state.
pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let h = header(state);
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(h.as_bytes());
    let blobs = named_tensors(state);
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, t) in blobs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(state)).map_err(io_err(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TrainError::Malformed("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn parse_header(text: &str) -> Result<HashMap<String, String>, TrainError> {
    text.lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| TrainError::Malformed(format!("header line {l:?}")))
        })
        .collect()
}

fn field<T: FromStr>(h: &HashMap<String, String>, key: &str) -> Result<T, TrainError> {
    h.get(key)
        .ok_or_else(|| TrainError::Malformed(format!("missing header key {key}")))?
        .parse()
        .map_err(|_| TrainError::Malformed(format!("bad value for header key {key}")))
}

/// Inverse of [`checkpoint_bytes`]. The version is checked before the
/// checksum so newer files get a clear message.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState, TrainError> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(TrainError::Malformed("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 20 {
        return Err(TrainError::CorruptChecksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv64(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(TrainError::CorruptChecksum);
    }

    let mut r = Reader { bytes: body, pos: 12 };
    let hlen = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| TrainError::Malformed("header is not UTF-8".into()))?;
    let h = parse_header(text)?;
    let spec = VariantSpec {
        name: field(&h, "variant")?,
        began: field(&h, "began")?,
        skip: field(&h, "skip")?,
        recurrent: field(&h, "recurrent")?,
        base_channels: field(&h, "base_channels")?,
        depth: field(&h, "depth")?,
    };
    let mut hp = Hyperparams::default();
    for key in Hyperparams::KEYS {
        let v: String = field(&h, key)?;
        hp.set(key, &v).map_err(|e| TrainError::Malformed(e.to_string()))?;
    }
    let stft = StftConfig {
        window_size: field(&h, "window")?,
        hop: field(&h, "hop")?,
    };
    let norm_stats = NormStats::new(field(&h, "norm_min")?, field(&h, "norm_max")?)?;
    let mut state = TrainState::new(spec, hp, stft, norm_stats, field(&h, "seed")?)?;
    state.step = field(&h, "step")?;
    state.k_a = field(&h, "k_a")?;
    state.k_b = field(&h, "k_b")?;
    state.opt_g.step = field(&h, "adam_g_step")?;
    state.opt_d.step = field(&h, "adam_d_step")?;

    let count = r.u32()? as usize;
    let mut blobs: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| TrainError::Malformed("blob name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(4).ok_or_else(|| TrainError::Malformed("blob too large".into()))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        blobs.insert(name, (shape, data));
    }
    if r.pos != body.len() {
        return Err(TrainError::Malformed("trailing bytes after the last blob".into()));
    }

    let expected: Vec<(String, Vec<usize>)> = named_tensors(&state)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != blobs.len() {
        return Err(TrainError::Malformed(format!(
            "{} blobs, architecture needs {}",
            blobs.len(),
            expected.len()
        )));
    }
    let mut ordered = Vec::with_capacity(expected.len());
    for (name, shape) in expected {
        let (s, data) = blobs
            .remove(&name)
            .ok_or_else(|| TrainError::Malformed(format!("missing blob {name}")))?;
        if s != shape {
            return Err(TrainError::Malformed(format!("blob {name} has shape {s:?}, expected {shape:?}")));
        }
        ordered.push(Tensor::from_vec(&s, data)?);
    }
    let mut it = ordered.into_iter();
    for p in state
        .g_ab
        .params_mut()
        .into_iter()
        .chain(state.g_ba.params_mut())
        .chain(state.d_a.params_mut())
        .chain(state.d_b.params_mut())
    {
        p.value = it.next().expect("counted");
    }
    for opt in [&mut state.opt_g, &mut state.opt_d] {
        for i in 0..opt.first.len() {
            opt.first[i] = it.next().expect("counted");
            opt.second[i] = it.next().expect("counted");
        }
    }
    Ok(state)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState, TrainError> {
    let path = path.as_ref();
    checkpoint_from_bytes(&fs::read(path).map_err(io_err(path))?)
}

pub fn checkpoint_name(variant: &str, step: u64) -> String {
    format!("{variant}_step{step:04}.ckpt")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// Steps to run from the state's current step.
    pub steps: u64,
    /// Checkpoint interval in steps; 0 saves only at the end.
    pub ckpt_every: u64,
    /// Checkpoint and loss-log directory; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Batch preparation threads. With more than one, batches are prepared
    /// ahead of the training loop on a bounded queue.
    pub workers: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            ckpt_every: 0,
            out_dir: None,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

fn batch_sampler(seed: u64) -> BatchSampler {
    BatchSampler::new(seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// Runs `opts.steps` training steps on batches sampled from `store`,
/// writing checkpoints and the loss log under `opts.out_dir`. `on_step`
/// sees every report as it is produced.
pub fn train(
    state: &mut TrainState,
    store: &SegmentStore,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&LossReport),
) -> Result<TrainOutcome, TrainError> {
    if store.stft_config() != state.stft {
        return Err(TrainError::BadConfig("segment store and state use different STFT geometry".into()));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut log = match &opts.out_dir {
        Some(dir) => {
            let p = dir.join(format!("{}_loss.log", state.spec.name));
            let f = OpenOptions::new().create(true).append(true).open(&p).map_err(io_err(&p))?;
            Some((p, BufWriter::new(f)))
        }
        None => None,
    };
    let sampler = batch_sampler(state.seed);
    let (batch, crop, stats) = (state.hp.batch_size, state.hp.crop_frames, state.norm_stats);
    let first = state.step + 1;
    let mut outcome = TrainOutcome::default();

    let mut consume = |state: &mut TrainState, a: Tensor<f32>, b: Tensor<f32>| -> Result<(), TrainError> {
        let report = train_step(state, &a, &b)?;
        if let Some((p, w)) = &mut log {
            w.write_all(report.log_lines().as_bytes()).map_err(io_err(p))?;
        }
        on_step(&report);
        outcome.reports.push(report);
        let last = state.step == first - 1 + opts.steps;
        let due = opts.ckpt_every > 0 && state.step % opts.ckpt_every == 0;
        if let Some(dir) = &opts.out_dir {
            if due || last {
                if let Some((p, w)) = &mut log {
                    w.flush().map_err(io_err(p))?;
                }
                let path = dir.join(checkpoint_name(&state.spec.name, state.step));
                save_checkpoint(state, &path)?;
                outcome.checkpoints.push(path);
            }
        }
        Ok(())
    };

    if opts.workers <= 1 {
        for step in first..first + opts.steps {
            let (a, b) = sampler.sample(store, step, batch, crop, stats)?;
            consume(state, a, b)?;
        }
    } else {
        let n = opts.workers as u64;
        std::thread::scope(|scope| -> Result<(), TrainError> {
            let mut queues = Vec::with_capacity(opts.workers);
            for w in 0..n {
                let (tx, rx) = sync_channel(2);
                queues.push(rx);
                let sampler = &sampler;
                scope.spawn(move || {
                    let mut step = first + w;
                    while step < first + opts.steps {
                        if tx.send(sampler.sample(store, step, batch, crop, stats)).is_err() {
                            break;
                        }
                        step += n;
                    }
                });
            }
            for i in 0..opts.steps {
                let (a, b) = queues[(i % n) as usize]
                    .recv()
                    .map_err(|_| TrainError::BadConfig("batch worker stopped".into()))??;
                consume(state, a, b)?;
            }
            Ok(())
        })?;
    }
    drop(consume);
    if let Some((p, w)) = &mut log {
        w.flush().map_err(io_err(p))?;
    }
    Ok(outcome)
}

/// `(B=1, 513, T)` tensor of a feature matrix stored frame-major.
pub fn features_to_tensor(feat: &LogMagSpectrogram) -> Tensor<f32> {
    let (t, f) = (feat.frames, feat.channels);
    let mut data = vec![0.0f32; t * f];
    for ti in 0..t {
        for fi in 0..f {
            data[fi * t + ti] = feat.data[ti * f + fi] as f32;
        }
    }
    Tensor::from_vec(&[1, f, t], data).expect("sized")
}

pub fn tensor_to_features(x: &Tensor<f32>, stats: NormStats) -> Result<LogMagSpectrogram, TrainError> {
    let (b, f, t) = x.dims3()?;
    if b != 1 {
        return Err(TrainError::BadConfig(format!("expected one item, got {b}")));
    }
    let mut data = vec![0.0f64; t * f];
    for fi in 0..f {
        for ti in 0..t {
            data[ti * f + fi] = x.data()[fi * t + ti] as f64;
        }
    }
    Ok(LogMagSpectrogram {
        frames: t,
        channels: f,
        data,
        floor: crate::spectral::LOG_FLOOR,
        stats: Some(stats),
    })
}

#[derive(Clone, Debug)]
pub struct TransferOutput {
    pub clip: AudioClip,
    pub source_features: LogMagSpectrogram,
    pub features: LogMagSpectrogram,
    pub spectral_convergence: f64,
}

/// featurize -> generator -> defeaturize -> zero-phase Griffin-Lim. The
/// input is zero-padded by one window on each side (and up to a whole
/// number of hops) and the output trimmed back, so lengths match exactly.
pub fn transfer_clip(
    gen: &Generator<f32>,
    clip: &AudioClip,
    stats: NormStats,
    cfg: StftConfig,
    gl_iterations: usize,
) -> Result<TransferOutput, TrainError> {
    if clip.is_empty() {
        return Err(AudioError::EmptyClip.into());
    }
    let pad = cfg.window_size;
    let mut total = clip.len() + 2 * pad;
    total += (cfg.hop - (total - cfg.window_size) % cfg.hop) % cfg.hop;
    while cfg.frame_count(total).unwrap_or(0) < gen.min_frames() {
        total += cfg.hop;
    }
    let mut samples = vec![0.0; total];
    samples[pad..pad + clip.len()].copy_from_slice(&clip.samples);
    let padded = AudioClip::new(samples, clip.sample_rate);

    let source_features = featurize(&stft(&padded, cfg)?, Some(stats))?;
    debug_assert_eq!(source_features.channels, FEATURE_BINS);
    let y = gen.infer(&features_to_tensor(&source_features))?;
    let features = tensor_to_features(&y, stats)?;
    let gl = griffin_lim(&defeaturize(&features), cfg, gl_iterations, None)?;
    let out = AudioClip::new(gl.clip.samples[pad..pad + clip.len()].to_vec(), clip.sample_rate);
    Ok(TransferOutput {
        clip: out,
        source_features,
        features,
        spectral_convergence: gl.final_convergence(),
    })
}

/// Appends `step,loss_name,value` lines to `path`.
pub fn append_loss_log(path: impl AsRef<Path>, reports: &[LossReport]) -> Result<(), TrainError> {
    let path = path.as_ref();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    for r in reports {
        f.write_all(r.log_lines().as_bytes()).map_err(io_err(path))?;
    }
    Ok(())
}

/// Reads a loss log back as `(step, name, value)` triples.
pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<(u64, String, f64)>, TrainError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.splitn(3, ',');
            let bad = || TrainError::Malformed(format!("loss log line {l:?}"));
            let step = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let name = it.next().ok_or_else(bad)?.to_string();
            let value = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            Ok((step, name, value))
        })
        .collect()
}
