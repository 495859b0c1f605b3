//! Acceptance gate: one PASS/FAIL line per criterion, tolerances and time
//! budgets pinned below. Exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use dpenet_cli::args::Suite;
use dpenet_cli::commands::ablation_legs;
use dpenet_cli::{run_args, RunConfig, RunManifest};
use dpenet_core::analysis::{
    analyze, check_gridding, count_params, estimate_flops, reachable_offsets, FlopConvention, Gridding,
};
use dpenet_core::data::{write_synthetic_dataset, PairedDataset, SynthRainConfig};
use dpenet_core::losses::{edge_loss, hybrid_loss, ssim, LossConfig};
use dpenet_core::networks::{dpenet_forward, init_params, read_checkpoint, write_checkpoint, DpeNetParams, NetworkConfig};
use dpenet_core::ops::gradcheck::{run_standard_suite, GradCheckConfig};
use dpenet_core::ops::{Eager, Ops};
use dpenet_core::training::{lr_at, TrainConfig, Trainer, CHECKPOINT_DIR};
use dpenet_core::Tensor;

const PUBLISHED_PARAMS: [(usize, usize, f64); 6] = [
    (15, 3, 0.924e6),
    (15, 1, 0.861e6),
    (10, 3, 0.647e6),
    (10, 1, 0.585e6),
    (5, 3, 0.371e6),
    (5, 1, 0.308e6),
];
const PARAM_TOLERANCE: f64 = 0.02;
const PUBLISHED_FLOPS: f64 = 42.43e9;
const FLOP_TOLERANCE: f64 = 0.10;
const LOSS_TOLERANCE: f64 = 1e-9;
const GRAD_SEEDS: u64 = 20;
const GRAD_TOLERANCE: f64 = 1e-5;
const OVERFIT_MAX_STEPS: usize = 2000;
const OVERFIT_TARGET_DB: f64 = 30.0;
const SMOOTHING_STEPS: usize = 200;
const SMOOTHING_BLOCK: usize = 50;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Deterministic pseudo-random values in `[0, 1)`.
fn hash_tensor(shape: &[usize], salt: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 * 12.9898 + salt * 78.233).sin() * 43758.5453).rem_euclid(1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn brute_offsets(dilations: &[usize]) -> BTreeSet<i64> {
    let mut set = BTreeSet::from([0i64]);
    for &d in dilations {
        set = set.iter().flat_map(|o| [o - d as i64, *o, o + d as i64]).collect();
    }
    set
}

fn receptive_fields() -> Outcome {
    let report = analyze(&NetworkConfig::default(), 256, 256, FlopConvention::MacAsOne).map_err(|e| e.to_string())?;
    ensure(report.drb_receptive_field == [3, 5, 7, 9, 11, 13], || format!("DRB {:?}", report.drb_receptive_field))?;
    ensure(report.ddrb_receptive_field == [3, 5, 9, 13, 23, 33], || format!("DDRB {:?}", report.ddrb_receptive_field))?;
    Ok(format!("DRB {:?}, DDRB {:?}", report.drb_receptive_field, report.ddrb_receptive_field))
}

fn parameter_counts() -> Outcome {
    let mut worst: f64 = 0.0;
    for (lambda, mu, published) in PUBLISHED_PARAMS {
        let cfg = NetworkConfig::new(lambda, mu, 32);
        let n = count_params(&cfg);
        let rel = n as f64 / published - 1.0;
        worst = worst.max(rel.abs());
        ensure(rel.abs() <= PARAM_TOLERANCE, || format!("lambda {lambda} mu {mu}: {n} vs {published} ({rel:+.4})"))?;
        let scalars = init_params::<f32>(&cfg, 0).scalar_count();
        ensure(n == scalars, || format!("lambda {lambda} mu {mu}: count {n} != init scalars {scalars}"))?;
    }
    Ok(format!("six configurations, worst deviation {:.2}% (limit 2%), counts equal init scalars", worst * 100.0))
}

fn flops() -> Outcome {
    let r = estimate_flops(&NetworkConfig::default(), 256, 256, FlopConvention::MacAsOne).map_err(|e| e.to_string())?;
    let rel = r.conv_flops as f64 / PUBLISHED_FLOPS - 1.0;
    ensure(rel.abs() <= FLOP_TOLERANCE, || format!("{} ({rel:+.4})", r.conv_flops))?;
    Ok(format!("{:.2}G vs 42.43G ({:+.2}%, limit 10%)", r.conv_flops as f64 / 1e9, rel * 100.0))
}

fn loss_identities() -> Outcome {
    let cfg = LossConfig::default();
    let y = hash_tensor(&[2, 3, 24, 24], 1.0);
    let h = hybrid_loss(&y, &y, &cfg).map_err(|e| e.to_string())?;
    let e = edge_loss(&y, &y, &cfg).map_err(|e| e.to_string())?;
    let s = ssim(&y, &y, &cfg).map_err(|e| e.to_string())?;
    ensure((h - 5e-5).abs() <= LOSS_TOLERANCE, || format!("hybrid(y, y) = {h:e}"))?;
    ensure((e - 1e-3).abs() <= LOSS_TOLERANCE, || format!("edge(y, y) = {e:e}"))?;
    ensure((s - 1.0).abs() <= LOSS_TOLERANCE, || format!("ssim(y, y) = {s}"))?;
    let c1 = (0.01f64 * 1.0).powi(2);
    let zeros = Tensor::<f64>::zeros(&[1, 3, 16, 16]);
    let ones = Tensor::<f64>::full(&[1, 3, 16, 16], 1.0);
    let c = ssim(&zeros, &ones, &cfg).map_err(|e| e.to_string())?;
    ensure((c - c1 / (1.0 + c1)).abs() <= LOSS_TOLERANCE, || format!("constant ssim {c:e}"))?;
    Ok(format!("hybrid {h:.3e}, edge {e:.3e}, ssim {s}, constant-image ssim {c:.6e}"))
}

fn gradients() -> Outcome {
    let results = run_standard_suite(0..GRAD_SEEDS, &GradCheckConfig::default()).map_err(|e| e.to_string())?;
    let worst = results
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .ok_or("empty suite")?;
    for (name, r) in &results {
        ensure(r.max_rel_error < GRAD_TOLERANCE, || format!("{name}: {:.3e} at {:?}", r.max_rel_error, r.worst))?;
    }
    let checked: usize = results.iter().map(|(_, r)| r.checked).sum();
    Ok(format!(
        "{} subjects x {GRAD_SEEDS} seeds, {checked} coordinates, worst {} {:.2e} (limit 1e-5)",
        results.len(),
        worst.0,
        worst.1.max_rel_error
    ))
}

fn zero_identity() -> Outcome {
    for (i, cfg) in [NetworkConfig::default(), NetworkConfig::new(2, 1, 16)].iter().enumerate() {
        let p = DpeNetParams::<f64>::zeros(cfg);
        let x = hash_tensor(&[1, 3, 20, 23], i as f64 + 3.0);
        let mut ops = Eager;
        let v = ops.input(x.clone());
        let (s_c, s) = dpenet_forward(&mut ops, &v, &p).map_err(|e| e.to_string())?;
        ensure(s_c == x && s == x, || format!("config {i}: outputs differ from input"))?;
    }
    Ok("default and small networks return (x, x) exactly".into())
}

fn gridding() -> Outcome {
    let ddrb = [1, 1, 2, 2, 5, 5];
    let good = check_gridding(&ddrb, 3);
    ensure(good.is_ok(), || format!("{ddrb:?}: {good:?}"))?;
    ensure(reachable_offsets(&ddrb, 3) == brute_offsets(&ddrb), || "DDRB offsets disagree with brute force".into())?;
    let bad = check_gridding(&[2, 2, 2], 3);
    let brute = brute_offsets(&[2, 2, 2]);
    let expected: Vec<i64> = (-6..=6).filter(|o| !brute.contains(o)).collect();
    match &bad {
        Gridding::Holes { holes, .. } if *holes == expected => {
            Ok(format!("{ddrb:?} contiguous; [2, 2, 2] holes {holes:?} match brute force"))
        }
        other => Err(format!("[2, 2, 2]: {other:?}, brute-force holes {expected:?}")),
    }
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_synthetic_dataset(dir.path(), 8, 64, 64, &SynthRainConfig::default()).map_err(|e| e.to_string())?;
    let pairs = PairedDataset::open(dir.path()).and_then(|d| d.load_all::<f32>()).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: OVERFIT_MAX_STEPS / 2, batch_size: 4, patch: 64, ..TrainConfig::default() };
    let mut trainer = Trainer::<f32>::new(NetworkConfig::new(2, 1, 16), cfg).map_err(|e| e.to_string())?;
    let mut psnr = f64::NEG_INFINITY;
    while trainer.step() < OVERFIT_MAX_STEPS {
        trainer.fit_until(&pairs, &[], trainer.epoch + SMOOTHING_BLOCK / 2).map_err(|e| e.to_string())?;
        psnr = trainer.evaluate(&pairs).map_err(|e| e.to_string())?.psnr_db;
        if trainer.step() >= SMOOTHING_STEPS && psnr >= OVERFIT_TARGET_DB {
            break;
        }
    }
    let losses = trainer.log.losses();
    let blocks: Vec<f64> = losses[..SMOOTHING_STEPS]
        .chunks(SMOOTHING_BLOCK)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    ensure(blocks.windows(2).all(|w| w[1] <= w[0]), || format!("50-step loss means {blocks:.4?}"))?;
    ensure(psnr >= OVERFIT_TARGET_DB, || format!("{psnr:.2} dB after {} steps", trainer.step()))?;
    Ok(format!("{psnr:.2} dB after {} steps (target 30); 50-step loss means {blocks:.4?}", trainer.step()))
}

fn schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let got: Vec<f64> = [129, 130, 150, 180].iter().map(|&e| lr_at(e, &cfg)).collect();
    ensure(got == [1e-3, 2e-4, 4e-5, 8e-6], || format!("{got:?}"))?;
    Ok(format!("epochs 129/130/150/180 -> {got:?}"))
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let net = NetworkConfig::default();
    let params = init_params::<f64>(&net, 11);
    let trainer = Trainer::with_params(net.clone(), TrainConfig::default(), params.clone());
    let path = dir.path().join("a.ckpt");
    write_checkpoint(&path, &trainer.checkpoint_contents()).map_err(|e| e.to_string())?;
    let back = read_checkpoint::<f64>(&path).map_err(|e| e.to_string())?;
    ensure(back.params == params && back.config == net, || "reloaded parameters differ".into())?;
    let again = dir.path().join("b.ckpt");
    write_checkpoint(&again, &back).map_err(|e| e.to_string())?;
    ensure(fs::read(&path).ok() == fs::read(&again).ok(), || "rewritten checkpoint bytes differ".into())?;

    let data = dir.path().join("data");
    write_synthetic_dataset(&data, 4, 24, 24, &SynthRainConfig::default()).map_err(|e| e.to_string())?;
    let pairs = PairedDataset::open(&data).and_then(|d| d.load_all::<f64>()).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 6, batch_size: 2, patch: 16, checkpoint_every: 3, ..TrainConfig::default() };
    let small = NetworkConfig::new(1, 1, 8);
    let mut straight = Trainer::<f64>::new(small.clone(), cfg.clone()).map_err(|e| e.to_string())?;
    straight.fit(&pairs, &[]).map_err(|e| e.to_string())?;
    let run = dir.path().join("run");
    let mut first = Trainer::<f64>::new(small, cfg).and_then(|t| t.with_run_dir(&run)).map_err(|e| e.to_string())?;
    first.fit_until(&pairs, &[], 3).map_err(|e| e.to_string())?;
    let mut resumed =
        Trainer::<f64>::resume(&run.join(CHECKPOINT_DIR).join("epoch_0003.ckpt")).map_err(|e| e.to_string())?;
    resumed.fit(&pairs, &[]).map_err(|e| e.to_string())?;
    let mut joined = first.log.losses();
    joined.extend(resumed.log.losses());
    ensure(joined == straight.log.losses(), || "resumed loss trajectory differs".into())?;
    ensure(resumed.params == straight.params, || "resumed parameters differ".into())?;
    Ok(format!("checkpoint bitwise; resumed trajectory of {} steps identical (64-bit)", joined.len()))
}

fn ablation() -> Outcome {
    let legs = ablation_legs(&RunConfig::default(), Suite::All);
    let names: Vec<String> = legs.iter().map(|l| format!("{}/{}", l.suite, l.name)).collect();
    let expected = [
        "architecture/rb",
        "architecture/drb",
        "architecture/ddrb",
        "architecture/ddrb_pab",
        "architecture/ddrb_erpab",
        "loss/mse",
        "loss/edge",
        "loss/ssim",
        "loss/ssim_mse",
        "loss/hybrid",
    ];
    ensure(names == expected, || format!("legs {names:?}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    write_synthetic_dataset(&data, 4, 32, 32, &SynthRainConfig::default()).map_err(|e| e.to_string())?;
    let out = dir.path().join("ablate");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let argv = [
        "dpenet", "--precision", "64", "--out", &s(&out), "ablate", "--suite", "all", "--data", &s(&data),
        "--lambda", "1", "--mu", "1", "--channels", "8", "--epochs", "60", "--batch-size", "4", "--patch", "32",
        "--checkpoint-every", "0",
    ];
    let report = run_args(argv).map_err(|e| format!("{e:#}"))?;
    let base = RunManifest::read(&out.join("run.json")).map_err(|e| e.to_string())?.config;
    for leg in ablation_legs(&base, Suite::All) {
        let m = RunManifest::read(&out.join(leg.suite).join(leg.name).join("run.json")).map_err(|e| e.to_string())?;
        let mut c = m.config.clone();
        c.network.architecture = base.network.architecture;
        c.training.loss = base.training.loss;
        ensure(c == base, || format!("{}/{} differs beyond the ablated field", leg.suite, leg.name))?;
    }
    ensure(fs::read_to_string(out.join("ablation.txt")).ok().as_deref() == Some(report.as_str()), || {
        "ablation.txt differs from the printed report".into()
    })?;
    let directional: Vec<&str> = report.lines().filter(|l| l.starts_with("  ")).map(str::trim).collect();
    Ok(format!("10 legs as expected, manifests differ only in the ablated field; directional (not gated): {}", directional.join("; ")))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("receptive field", Duration::from_secs(1), receptive_fields),
        ("parameter counts", Duration::from_secs(1), parameter_counts),
        ("FLOPs", Duration::from_secs(1), flops),
        ("loss identities", Duration::from_secs(1), loss_identities),
        ("gradient suite", Duration::from_secs(300), gradients),
        ("zero-weight identity", Duration::from_secs(1), zero_identity),
        ("gridding", Duration::from_secs(1), gridding),
        ("overfit sanity", Duration::from_secs(1800), overfit),
        ("schedule", Duration::from_secs(1), schedule),
        ("determinism and persistence", Duration::from_secs(300), persistence),
        ("ablation harness", Duration::from_secs(600), ablation),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > *budget => Err(format!("over time budget: {detail}")),
            other => other,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail} [{:.2}s / {}s]", i + 1, elapsed.as_secs_f64(), budget.as_secs());
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
