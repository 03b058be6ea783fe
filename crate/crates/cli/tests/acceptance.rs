//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N ... PASS|FAIL` line to stderr (outside the test harness
//! capture, so the lines appear in every run's output).
//!
//! Criteria 5 and 6 share one m5 training run. The long-running criteria
//! take a common lock so they do not compete for the CPU.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cbgan_core::audio::AudioClip;
use cbgan_core::dataset::{
    gen_toy_corpus, load_segment, split_dataset, Domain, Manifest, SegmentRecord, SegmentStore, SEGMENT_SAMPLES,
};
use cbgan_core::eval::{mean_f0_shift, reconstruction_snr};
use cbgan_core::models::{
    architecture_summary, build_discriminator, build_generator, variant_registry, Discriminator, LayerKind,
    VariantSpec, FEATURE_BINS, VARIANT_NAMES,
};
use cbgan_core::nn::gradcheck::{check_gradients, GruProbe, L1Head, SquaredErrorHead};
use cbgan_core::nn::{Conv1d, ConvTranspose1d, Gru, InstanceNorm, Padding, Param, Tensor};
use cbgan_core::spectral::{griffin_lim, istft, stft, StftConfig};
use cbgan_core::training::{read_loss_log, train, transfer_clip, Direction, Hyperparams, TrainOptions, TrainState};

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_lock() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id} {name}: {verdict} ({detail})");
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_1_dsp_round_trip() {
    let start = Instant::now();
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = f64::INFINITY;
    for _ in 0..10 {
        let clip = AudioClip::new((0..SEGMENT_SAMPLES).map(|_| rng.gen_range(-0.5..0.5)).collect(), 44_100);
        let back = istft(&stft(&clip, cfg).unwrap()).unwrap();
        let interior = cfg.window_size..back.len() - cfg.window_size;
        let snr = reconstruction_snr(
            &AudioClip::new(clip.samples[interior.clone()].to_vec(), 44_100),
            &AudioClip::new(back.samples[interior].to_vec(), 44_100),
        )
        .unwrap();
        worst = worst.min(snr);
    }
    let elapsed = start.elapsed();
    let pass = worst >= 60.0 && elapsed < Duration::from_secs(5);
    report(
        1,
        "DSP round trip",
        pass,
        &format!("min interior SNR {worst:.1} dB >= 60 over 10 clips, {:.2} s < 5 s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_2_griffin_lim() {
    let start = Instant::now();
    let cfg = StftConfig::default();
    let tone = AudioClip::new(
        (0..44_100)
            .map(|i| {
                let t = i as f64 / 44_100.0;
                0.4 * (2.0 * std::f64::consts::PI * 441.0 * t).sin() + 0.2 * (2.0 * std::f64::consts::PI * 882.0 * t).sin()
            })
            .collect(),
        44_100,
    );
    let mag = stft(&tone, cfg).unwrap().magnitude();
    let out = griffin_lim(&mag, cfg, 100, None).unwrap();
    let sc = out.final_convergence();
    let worst_rise = out
        .inconsistency
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let elapsed = start.elapsed();
    let pass = sc < 0.1 && worst_rise <= 1e-7 && elapsed < Duration::from_secs(30);
    report(
        2,
        "Griffin-Lim",
        pass,
        &format!(
            "spectral convergence {sc:.4} < 0.1, largest per-iteration rise {worst_rise:.2e} <= 1e-7, {:.2} s < 30 s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_gradient_correctness() {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut track = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(e) => e.1 = e.1.max(err),
        None => worst.push((name, err)),
    };
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
            let conv = Conv1d::<f64>::new("c", 3, 4, 5, stride, padding, &mut rng).unwrap();
            let mut conv = Conv1d {
                bias: Param::uniform("c.bias", &[4], 0.5, &mut rng),
                ..conv
            };
            let x = random_tensor(&[2, 3, 11], &mut rng);
            track("conv1d", check_gradients(&mut conv, &x, seed));
        }

        let t = ConvTranspose1d::<f64>::new("t", 3, 2, 5, 2, &mut rng).unwrap();
        let mut t = ConvTranspose1d {
            bias: Param::uniform("t.bias", &[2], 0.5, &mut rng),
            ..t
        };
        let x = random_tensor(&[2, 3, 6], &mut rng);
        track("conv1d_transpose", check_gradients(&mut t, &x, seed));

        let mut gru = Gru::<f64>::new("g", 3, 4, &mut rng).unwrap();
        for p in [&mut gru.b_ih, &mut gru.b_hh] {
            *p = Param::uniform(p.name.clone(), p.value.shape(), 0.5, &mut rng);
        }
        let mut probe = GruProbe {
            gru,
            state0: random_tensor(&[2, 4], &mut rng),
        };
        let x = random_tensor(&[2, 3, 6], &mut rng);
        track("gru", check_gradients(&mut probe, &x, seed));

        let mut norm = InstanceNorm::<f64>::new("n", 3);
        norm.gain = Param::uniform("n.gain", &[3], 1.5, &mut rng);
        norm.bias = Param::uniform("n.bias", &[3], 0.5, &mut rng);
        let x = random_tensor(&[2, 3, 7], &mut rng);
        track("instance_norm", check_gradients(&mut norm, &x, seed));

        let mut l1 = L1Head {
            target: random_tensor(&[2, 3, 5], &mut rng),
        };
        let x = random_tensor(&[2, 3, 5], &mut rng);
        track("l1_head", check_gradients(&mut l1, &x, seed));

        for target in [0.0, 1.0] {
            let mut ls = SquaredErrorHead { target };
            let x = random_tensor(&[2, 1, 5], &mut rng);
            track("least_squares_head", check_gradients(&mut ls, &x, seed));
        }
    }
    let pass = worst.len() == 6 && worst.iter().all(|(_, e)| *e < 1e-4);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(3, "gradient correctness", pass, &format!("max relative error < 1e-4 over 5 seeds: {detail}"));
    assert!(pass);
}

#[test]
fn criterion_4_fully_convolutional() {
    let mut failures = Vec::new();
    let mut checked = 0;
    for name in VARIANT_NAMES {
        let spec = variant_registry(name).unwrap();
        let g = build_generator::<f32>(&spec, 4).unwrap();
        let d = build_discriminator::<f32>(&spec, 5).unwrap();
        for t in [128usize, 858, 1723] {
            let x = Tensor::<f32>::filled(&[1, FEATURE_BINS, t], 0.1);
            let y = g.infer(&x).unwrap();
            if y.shape() != x.shape() {
                failures.push(format!("{name} generator T={t} -> {:?}", y.shape()));
            }
            if spec.began {
                let (z, _) = d.forward(&x).unwrap();
                if z.shape() != x.shape() {
                    failures.push(format!("{name} discriminator T={t} -> {:?}", z.shape()));
                }
                if !matches!(d, Discriminator::AutoEncoder(_)) {
                    failures.push(format!("{name} discriminator is not an auto-encoder"));
                }
            }
            checked += 1;
        }
    }
    let pass = failures.is_empty();
    report(
        4,
        "fully-convolutional contract",
        pass,
        &if pass {
            format!("{checked} variant/length pairs keep their shape at T in {{128, 858, 1723}}")
        } else {
            failures.join("; ")
        },
    );
    assert!(pass);
}

/// The shared toy-corpus run: m5 at desk scale, batch 8, 2000 steps, 200
/// training tones and 20 held-out tones per domain.
struct ToyRun {
    dir: tempfile::TempDir,
    test: Manifest,
    state: TrainState,
    log: PathBuf,
    elapsed: Duration,
}

fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let _guard = heavy_lock();
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_toy_corpus(220, 1, dir.path()).unwrap();
        let (train_set, test) = split_dataset(&manifest, 200, 20, 1).unwrap();
        let cfg = StftConfig::default();
        let store = SegmentStore::load(&train_set, dir.path(), cfg).unwrap();
        let stats = store.norm_stats().unwrap();
        let spec = variant_registry("m5").unwrap().desk();
        let hp = Hyperparams {
            batch_size: 8,
            ..Hyperparams::default()
        };
        let mut state = TrainState::new(spec, hp, cfg, stats, 1).unwrap();
        let out_dir = dir.path().join("run");
        let opts = TrainOptions {
            steps: 2000,
            ckpt_every: 0,
            out_dir: Some(out_dir.clone()),
            workers: 1,
        };
        train(&mut state, &store, &opts, |_| {}).unwrap();
        ToyRun {
            log: out_dir.join("m5_loss.log"),
            dir,
            test,
            state,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_5_equilibrium_invariant() {
    let run = toy_run();
    let entries = read_loss_log(&run.log).unwrap();
    let steps: BTreeSet<u64> = entries.iter().map(|(s, _, _)| *s).collect();
    let non_finite = entries.iter().filter(|(_, _, v)| !v.is_finite()).count();
    let k: Vec<f64> = entries
        .iter()
        .filter(|(_, n, _)| n == "k_A" || n == "k_B")
        .map(|(_, _, v)| *v)
        .collect();
    let (k_lo, k_hi) = k.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let pass = steps.len() >= 500 && non_finite == 0 && k.len() == 2 * steps.len() && k_lo >= 0.0 && k_hi <= 1.0;
    report(
        5,
        "equilibrium invariant",
        pass,
        &format!(
            "{} logged steps >= 500, {non_finite} non-finite values, k in [{k_lo:.4}, {k_hi:.4}] within [0, 1]",
            steps.len()
        ),
    );
    assert!(pass);
}

/// Per-tone shifts in semitones; `None` when either clip has no voiced frame.
fn held_out_shifts(run: &ToyRun, domain: Domain, direction: Direction) -> Vec<Option<f64>> {
    let gen = run.state.generator(direction);
    run.test
        .domain(domain)
        .map(|r: &SegmentRecord| {
            let clip = load_segment(r, run.dir.path()).unwrap();
            let out = transfer_clip(gen, &clip, run.state.norm_stats, run.state.stft, 100).unwrap();
            mean_f0_shift(&clip, &out.clip).ok().filter(|s| s.is_finite())
        })
        .collect()
}

#[test]
fn criterion_6_toy_transfer() {
    let run = toy_run();
    let _guard = heavy_lock();
    let start = Instant::now();
    let ab = held_out_shifts(run, Domain::A, Direction::AToB);
    let ba = held_out_shifts(run, Domain::B, Direction::BToA);
    // An unvoiced transfer carries no pitch and counts as no shift.
    let unvoiced = ab.iter().chain(&ba).filter(|s| s.is_none()).count();
    let (ab, ba): (Vec<f64>, Vec<f64>) = (
        ab.iter().map(|s| s.unwrap_or(0.0)).collect(),
        ba.iter().map(|s| s.unwrap_or(0.0)).collect(),
    );
    let (m_ab, m_ba) = (median(ab.clone()), median(ba.clone()));
    let pass = ab.len() == 20 && ba.len() == 20 && m_ab >= 6.0 && m_ba <= -6.0;
    report(
        6,
        "toy transfer",
        pass,
        &format!(
            "median f0 shift A->B {m_ab:+.2} st >= +6, B->A {m_ba:+.2} st <= -6 over {}+{} held-out tones ({unvoiced} unvoiced); \
             training {:.1} min (target < 30), transfers {:.1} s",
            ab.len(),
            ba.len(),
            run.elapsed.as_secs_f64() / 60.0,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass, "A->B shifts {ab:?}\nB->A shifts {ba:?}");
}

fn summary_is_consistent(spec: &VariantSpec) -> Result<(), String> {
    let g = build_generator::<f32>(spec, 0).map_err(|e| e.to_string())?;
    let d = build_discriminator::<f32>(spec, 1).map_err(|e| e.to_string())?;
    let shapes = g.layer_shapes();
    let has_gru = shapes.iter().any(|s| s.kind == LayerKind::Gru);
    if has_gru != spec.recurrent {
        return Err(format!("{}: GRU present = {has_gru}", spec.name));
    }
    if matches!(d, Discriminator::AutoEncoder(_)) != spec.began {
        return Err(format!("{}: discriminator kind does not follow the registry", spec.name));
    }
    let decoders: Vec<_> = shapes.iter().filter(|s| s.kind == LayerKind::ConvTranspose).collect();
    let plain = variant_registry(spec.name.as_str())
        .map(|s| VariantSpec { skip: false, ..s })
        .map_err(|e| e.to_string())?;
    let plain = VariantSpec {
        base_channels: spec.base_channels,
        depth: spec.depth,
        ..plain
    };
    let plain_g = build_generator::<f32>(&plain, 0).map_err(|e| e.to_string())?;
    let plain_dec: Vec<_> = plain_g
        .layer_shapes()
        .into_iter()
        .filter(|s| s.kind == LayerKind::ConvTranspose)
        .collect();
    for (a, b) in decoders.iter().zip(&plain_dec) {
        let expected = if spec.skip { 2 * b.in_channels } else { b.in_channels };
        if a.in_channels != expected {
            return Err(format!(
                "{}: {} takes {} channels, expected {expected}",
                spec.name, a.name, a.in_channels
            ));
        }
    }
    Ok(())
}

#[test]
fn criterion_7_ablation_harness() {
    let _guard = heavy_lock();
    let cfg = StftConfig::default();
    let tones = |lo: f64| -> Vec<Vec<f32>> {
        (0..6)
            .map(|i| {
                let f0 = lo * (1.0 + 0.1 * i as f64);
                cbgan_core::dataset::toy_tone(f0, 0.3 * i as f64, SEGMENT_SAMPLES, 44_100)
                    .samples
                    .iter()
                    .map(|&v| v as f32)
                    .collect()
            })
            .collect()
    };
    let store = SegmentStore::from_segments([tones(120.0), tones(260.0)], cfg).unwrap();
    let stats = store.norm_stats().unwrap();
    let mut summaries = BTreeSet::new();
    let mut problems = Vec::new();
    for name in VARIANT_NAMES {
        let spec = variant_registry(name).unwrap().desk();
        summaries.insert(architecture_summary(&spec).unwrap());
        if let Err(e) = summary_is_consistent(&spec).and_then(|_| summary_is_consistent(&variant_registry(name).unwrap())) {
            problems.push(e);
        }
        let mut state = TrainState::new(spec, Hyperparams::default(), cfg, stats, 3).unwrap();
        let opts = TrainOptions {
            steps: 100,
            ..TrainOptions::default()
        };
        match train(&mut state, &store, &opts, |_| {}) {
            Ok(out) if out.reports.len() == 100 && out.reports.iter().all(|r| r.check_finite().is_ok()) => {}
            Ok(_) => problems.push(format!("{name}: incomplete run")),
            Err(e) => problems.push(format!("{name}: {e}")),
        }
    }
    let pass = problems.is_empty() && summaries.len() == VARIANT_NAMES.len();
    report(
        7,
        "ablation harness",
        pass,
        &if problems.is_empty() {
            format!(
                "{} variants trained 100 steps each, {} distinct summaries matching the registry",
                VARIANT_NAMES.len(),
                summaries.len()
            )
        } else {
            problems.join("; ")
        },
    );
    assert!(pass);
}

#[test]
fn criterion_8_dataset_protocol() {
    let mut records = Vec::new();
    for file in 0..252 {
        let domain = if file < 126 { Domain::A } else { Domain::B };
        for s in 0..26 {
            records.push(SegmentRecord::new(format!("song_{file:03}.wav"), s as f64, 5.0, domain));
        }
    }
    let manifest = Manifest::new(records, None);
    let (tr, te) = split_dataset(&manifest, 2800, 100, 11).unwrap();
    let (tr2, te2) = split_dataset(&manifest, 2800, 100, 11).unwrap();
    let (tr3, _) = split_dataset(&manifest, 2800, 100, 12).unwrap();
    let train_ids: BTreeSet<&str> = tr.records.iter().map(|r| r.id.as_str()).collect();
    let disjoint = te.records.iter().all(|r| !train_ids.contains(r.id.as_str()));
    let counts = [Domain::A, Domain::B]
        .iter()
        .all(|&d| tr.count(d) == 2800 && te.count(d) == 100);
    let deterministic = tr == tr2 && te == te2;
    let seed_sensitive = tr != tr3;
    let pass = manifest.len() == 6552 && counts && disjoint && deterministic && seed_sensitive;
    report(
        8,
        "dataset protocol",
        pass,
        &format!(
            "{} records; train {}/{} test {}/{} per domain; disjoint {disjoint}; same seed identical {deterministic}; \
             other seed differs {seed_sensitive}",
            manifest.len(),
            tr.count(Domain::A),
            tr.count(Domain::B),
            te.count(Domain::A),
            te.count(Domain::B)
        ),
    );
    assert!(pass);
}

fn cbgan(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cbgan"))
        .args(args)
        .env_remove("CBGAN_SEED")
        .output()
        .expect("binary runs")
}

fn train_run(manifest: &Path, out: &Path) -> Vec<u8> {
    let o = cbgan(&[
        "train",
        "--variant",
        "m5",
        "--desk",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--steps",
        "100",
        "--seed",
        "7",
        "--workers",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::read(out.join("m5_step0100.ckpt")).expect("step-100 checkpoint")
}

#[test]
fn criterion_9_determinism() {
    let _guard = heavy_lock();
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("toy");
    let o = cbgan(&["prepare", "--toy", "12", "--out-dir", corpus.to_str().unwrap(), "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = corpus.join("manifest.tsv");
    let first = train_run(&manifest, &dir.path().join("run1"));
    let second = train_run(&manifest, &dir.path().join("run2"));
    let pass = first == second;
    report(
        9,
        "determinism",
        pass,
        &format!(
            "two `train --seed 7 --workers 1` runs, step-100 checkpoints {} bytes, bitwise identical {pass}",
            first.len()
        ),
    );
    assert!(pass);
}
