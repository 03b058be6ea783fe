//! `cbgan`: prepare corpora, train, transfer, evaluate and plot.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

use cbgan_core::audio::{read_wav, write_wav, AudioError};
use cbgan_core::dataset::{build_manifest, gen_toy_corpus, read_labels, split_dataset, DatasetError, Domain, Manifest, SegmentStore};
use cbgan_core::eval::{append_report, evaluate_pair, export_spectrogram_image, EvalError};
use cbgan_core::models::ModelError;
use cbgan_core::nn::NnError;
use cbgan_core::spectral::{featurize, stft, SpectralError, SpectrogramDump, StftConfig};
use cbgan_core::training::{load_checkpoint, train, transfer_clip, Direction, TrainError, TrainState};

use config::{RunConfig, SEED_ENV};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn is_numeric(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::NonFiniteLoss { .. }
            | TrainError::Nn(NnError::NonFinite(_))
            | TrainError::Model(ModelError::Nn(NnError::NonFinite(_)))
    )
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if is_numeric(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(AudioError, DatasetError, SpectralError, EvalError, ModelError);

#[derive(Parser, Debug)]
#[command(name = "cbgan", version, about = "Unpaired singing style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a segment manifest from labeled WAVs, or generate the toy tone corpus.
    Prepare(PrepareArgs),
    /// Train a variant on a manifest, writing checkpoints and a loss log.
    Train(TrainArgs),
    /// Transfer a WAV with one direction of a checkpoint.
    Transfer(TransferArgs),
    /// Compare a source clip with its transfer.
    Eval(EvalArgs),
    /// Render a WAV or a dumped spectrogram as a PGM image.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Generate this many synthetic tones per domain.
    #[arg(long, conflicts_with_all = ["data_dir", "labels"])]
    toy: Option<usize>,
    /// Directory of WAV excerpts.
    #[arg(long, requires = "labels")]
    data_dir: Option<PathBuf>,
    /// `filename<TAB>domain` file for --data-dir.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write train.tsv/test.tsv with this many test segments per domain.
    #[arg(long)]
    test_per_domain: Option<usize>,
    /// Training segments per domain (default: everything not in the test set).
    #[arg(long, requires = "test_per_domain")]
    train_per_domain: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// m1..m5
    #[arg(long)]
    variant: String,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// `key=value` settings applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    ckpt_every: Option<u64>,
    /// Falls back to the CBGAN_SEED environment variable.
    #[arg(long)]
    seed: Option<u64>,
    /// Batch preparation threads. Runs are bitwise reproducible only with 1.
    #[arg(long)]
    workers: Option<usize>,
    /// Small CPU-scale networks: 16 base channels, depth 2.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_frames: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda_cyc: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda_k: Option<f64>,
    /// STFT hop in samples (256, or 768 for quarter-overlapping windows).
    #[arg(long)]
    hop: Option<usize>,
    /// Print a progress line every N steps (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// a2b or b2a
    #[arg(long, alias = "dir")]
    direction: Direction,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long, default_value_t = 100)]
    gl_iters: usize,
    /// Also write the generated (normalized) features as a spectrogram dump.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    transferred: PathBuf,
    /// Append the metric lines to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// WAV file or spectrogram dump.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// When the input is a WAV, also write its log-magnitude dump here.
    #[arg(long)]
    dump: Option<PathBuf>,
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: no such file", path.display())))
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn prepare(args: PrepareArgs) -> Result<(), CliError> {
    let mut seed = RunConfig::defaults("m1")?;
    seed.apply_env_seed(env_seed())?;
    let seed = args.seed.unwrap_or(seed.seed);
    fs::create_dir_all(&args.out_dir).map_err(|e| CliError::Data(format!("{}: {e}", args.out_dir.display())))?;

    let manifest = match (args.toy, &args.data_dir, &args.labels) {
        (Some(n), _, _) => gen_toy_corpus(n, seed, &args.out_dir)?,
        (None, Some(dir), Some(labels)) => {
            require_file(labels)?;
            let dir = fs::canonicalize(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
            let mut m = build_manifest(&dir, &read_labels(labels)?)?;
            for r in &mut m.records {
                r.source_file = dir.join(&r.source_file);
            }
            m.write(args.out_dir.join("manifest.tsv"))?;
            m
        }
        _ => return Err(CliError::Usage("prepare needs --toy N or --data-dir with --labels".into())),
    };
    println!(
        "manifest: {} segments (A: {}, B: {})",
        manifest.len(),
        manifest.count(Domain::A),
        manifest.count(Domain::B)
    );

    if let Some(n_test) = args.test_per_domain {
        let smallest = manifest.count(Domain::A).min(manifest.count(Domain::B));
        let n_train = args.train_per_domain.unwrap_or(smallest.saturating_sub(n_test));
        let (tr, te) = split_dataset(&manifest, n_train, n_test, seed)?;
        tr.write(args.out_dir.join("train.tsv"))?;
        te.write(args.out_dir.join("test.tsv"))?;
        println!("split: {n_train} train + {n_test} test per domain");
    }
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut c = RunConfig::defaults(&args.variant)?;
    if args.desk {
        c.spec = c.spec.clone().desk();
    }
    c.apply_env_seed(env_seed())?;
    if let Some(p) = &args.config {
        c.apply_file(p)?;
    }
    let flags: [(&str, Option<String>); 13] = [
        ("seed", args.seed.map(|v| v.to_string())),
        ("steps", args.steps.map(|v| v.to_string())),
        ("ckpt_every", args.ckpt_every.map(|v| v.to_string())),
        ("workers", args.workers.map(|v| v.to_string())),
        ("base_channels", args.base_channels.map(|v| v.to_string())),
        ("depth", args.depth.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("crop_frames", args.crop_frames.map(|v| v.to_string())),
        ("learning_rate", args.learning_rate.map(|v| v.to_string())),
        ("lambda_cyc", args.lambda_cyc.map(|v| v.to_string())),
        ("gamma", args.gamma.map(|v| v.to_string())),
        ("lambda_k", args.lambda_k.map(|v| v.to_string())),
        ("hop", args.hop.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            c.set(k, &v)?;
        }
    }
    c.spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    c.hp.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if c.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    Ok(c)
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let c = train_config(&args)?;
    require_file(&args.manifest)?;
    let manifest = Manifest::read(&args.manifest)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let store = SegmentStore::load(&manifest, base, c.stft)?;
    let stats = store.norm_stats()?;
    let mut state = TrainState::new(c.spec.clone(), c.hp, c.stft, stats, c.seed)?;
    eprintln!(
        "training {} ({}) for {} steps, seed {}, {} + {} segments",
        c.spec.name,
        c.spec.label(),
        c.steps,
        c.seed,
        store.len(Domain::A),
        store.len(Domain::B)
    );
    let log_every = args.log_every;
    let outcome = train(&mut state, &store, &c.options(&args.out_dir), |r| {
        if log_every > 0 && r.step % log_every == 0 {
            eprintln!(
                "step {} cyc_A={:.4} cyc_B={:.4} adv_AB={:.4} adv_BA={:.4} k_A={:.4} k_B={:.4}",
                r.step, r.cyc_a, r.cyc_b, r.adv_g_ab, r.adv_g_ba, r.k_a, r.k_b
            );
        }
    })?;
    for p in &outcome.checkpoints {
        println!("{}", p.display());
    }
    Ok(())
}

fn run_transfer(args: TransferArgs) -> Result<(), CliError> {
    require_file(&args.ckpt)?;
    require_file(&args.input)?;
    let state = load_checkpoint(&args.ckpt)?;
    let clip = read_wav(&args.input)?;
    let out = transfer_clip(state.generator(args.direction), &clip, state.norm_stats, state.stft, args.gl_iters)?;
    write_wav(&args.output, &out.clip)?;
    if let Some(p) = &args.dump {
        SpectrogramDump::from_features(&out.features).write(p)?;
    }
    println!("spectral_convergence={:.6}", out.spectral_convergence);
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    require_file(&args.source)?;
    require_file(&args.transferred)?;
    let report = evaluate_pair(&read_wav(&args.source)?, &read_wav(&args.transferred)?)?;
    let lines = report.lines();
    for l in &lines {
        println!("{l}");
    }
    if let Some(p) = &args.report {
        append_report(p, &lines)?;
    }
    Ok(())
}

fn run_plot(args: PlotArgs) -> Result<(), CliError> {
    require_file(&args.input)?;
    let head = fs::read(&args.input).map_err(|e| CliError::Data(format!("{}: {e}", args.input.display())))?;
    let feat = if head.starts_with(b"RIFF") {
        let clip = read_wav(&args.input)?;
        let feat = featurize(&stft(&clip, StftConfig::default())?, None)?;
        if let Some(p) = &args.dump {
            SpectrogramDump::from_features(&feat).write(p)?;
        }
        feat
    } else {
        SpectrogramDump::read(&args.input)?.to_features()
    };
    export_spectrogram_image(&feat, &args.output)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => run_train(a),
        Command::Transfer(a) => run_transfer(a),
        Command::Eval(a) => run_eval(a),
        Command::Plot(a) => run_plot(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
