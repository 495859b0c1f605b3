//! Subcommand implementations. Every command that writes files records a
//! [`RunManifest`] in its output directory first and stamps its finish
//! time last.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use dpenet_core::analysis::{self, AnalysisReport, FlopConvention, Gridding};
use dpenet_core::data::{is_image_file, list_images, load_image, save_image, write_synthetic_dataset, PairedDataset, SynthRainConfig};
use dpenet_core::losses::LossKind;
use dpenet_core::metrics::{evaluate_directory, EvalReport};
use dpenet_core::networks::{load_checkpoint, Architecture, DpeNetParams};
use dpenet_core::training::Trainer;
use dpenet_core::{Error, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::args::{AblateArgs, AnalyzeArgs, Cli, Command, EvalArgs, InferArgs, Overrides, Suite, SynthesizeArgs, TrainArgs};
use crate::config::{Precision, RunConfig};
use crate::manifest::RunManifest;

pub type Result<T> = anyhow::Result<T>;

pub const EVAL_JSONL: &str = "eval.jsonl";
pub const EVAL_RECORDS_CSV: &str = "eval_records.csv";
pub const EVAL_SUMMARY_CSV: &str = "eval_summary.csv";
pub const ANALYSIS_JSON: &str = "analysis.json";
pub const ABLATION_JSONL: &str = "ablation.jsonl";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TXT: &str = "ablation.txt";

macro_rules! with_precision {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Runs the command and returns the text to show the user.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Analyze(a) => analyze(cli, a),
        Command::Ablate(a) => ablate(cli, a),
        Command::Synthesize(a) => synthesize(cli, a),
    }
}

/// Defaults, then `--config`, then `overrides` and the global flags.
pub fn resolve(cli: &Cli, overrides: Option<&Overrides>) -> dpenet_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(o) = overrides {
        o.apply(&mut cfg);
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    if cli.deterministic {
        if cli.precision == Some(Precision::F32) {
            return Err(Error::config("precision", "deterministic runs are 64-bit; drop --precision 32"));
        }
        cfg.deterministic = true;
    }
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
        cfg.synth.seed = seed;
    }
    cfg.finalize()?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::config("out", "this command needs --out").into())
}

fn load_pairs<T: Real>(path: &Path, stage: &str) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    PairedDataset::open(path)
        .and_then(|d| d.load_all())
        .with_context(|| format!("{stage}: loading dataset {}", path.display()))
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<String> {
    let cfg = resolve(cli, Some(&args.overrides))?;
    let out = out_dir(cli)?;
    let resume = args.resume.as_deref();
    with_precision!(cfg.precision, train_summary(&cfg, out, resume))
}

fn train_summary<T: Real>(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<String> {
    let trainer = train_run::<T>(cfg, out, "train", resume)?;
    let last = trainer.log.steps.last().map(|s| s.loss).unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} steps over {} epochs; final loss {last:.6}; outputs in {}\n",
        trainer.step(),
        trainer.epoch,
        out.display()
    ))
}

/// Trains into `out` and returns the finished trainer. Dataset paths are
/// checked before anything is computed.
pub fn train_run<T: Real>(cfg: &RunConfig, out: &Path, command: &str, resume: Option<&Path>) -> Result<Trainer<T>> {
    let train_path = cfg.train_data()?;
    let eval_path = match cfg.data.eval {
        Some(_) => Some(cfg.eval_data()?),
        None => None,
    };
    let trainer = match resume {
        Some(ckpt) => Trainer::<T>::resume(ckpt).with_context(|| format!("train: resuming from {}", ckpt.display()))?,
        None => Trainer::new(cfg.network.clone(), cfg.training.clone())?,
    };
    let mut effective = cfg.clone();
    effective.network = trainer.network.clone();
    effective.training = trainer.config.clone();
    let mut manifest = RunManifest::start(command, &effective, trainer.config.seed)
        .path("out", out)
        .path("train_data", train_path);
    if let Some(p) = eval_path {
        manifest = manifest.path("eval_data", p);
    }
    if let Some(p) = resume {
        manifest = manifest.path("resume", p);
    }
    manifest.write(out)?;

    let pairs = load_pairs::<T>(train_path, "train")?;
    let eval_pairs = match eval_path {
        Some(p) => load_pairs::<T>(p, "train")?,
        None => Vec::new(),
    };
    let mut trainer = trainer.with_run_dir(out)?;
    trainer.fit(&pairs, &eval_pairs).context("train")?;
    manifest.finish(out)?;
    Ok(trainer)
}

/// Scores every pair: stage 0 is the unprocessed input, 1 the coarse
/// output and 2 the final output.
pub fn score_dataset<T: Real>(params: &DpeNetParams<T>, dataset: &PairedDataset) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for id in dataset.ids() {
        let (x, y) = dataset.load_pair::<T>(id).with_context(|| format!("eval: loading pair `{id}`"))?;
        let (s_c, s) = params.infer(&x).with_context(|| format!("eval: running pair `{id}`"))?;
        report.score(id, 0, &x, &y)?;
        report.score(id, 1, &s_c, &y)?;
        report.score(id, 2, &s, &y)?;
    }
    Ok(report)
}

pub fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, text) in [
        (EVAL_JSONL, report.to_jsonl()),
        (EVAL_RECORDS_CSV, report.records_csv()),
        (EVAL_SUMMARY_CSV, report.summary_csv()),
    ] {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn render_summary(report: &EvalReport) -> String {
    let mut s = String::new();
    for a in report.aggregates() {
        let psnr = a.mean_psnr_db.map_or("inf".to_string(), |p| format!("{p:.3}"));
        let label = match a.stage {
            0 => "input",
            1 => "coarse",
            _ => "final",
        };
        let _ = writeln!(s, "stage {} ({label}): psnr {psnr} dB, ssim {:.4} ({} images)", a.stage, a.mean_ssim, a.count);
    }
    for w in &report.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<String> {
    let mut cfg = resolve(cli, None)?;
    let out = out_dir(cli)?;
    let report = if let (Some(pred), Some(gt)) = (&args.pred, &args.gt) {
        let mut manifest = RunManifest::start("eval", &cfg, cfg.training.seed)
            .path("pred", pred)
            .path("gt", gt)
            .path("out", out);
        manifest.write(out)?;
        let report = evaluate_directory(pred, gt).context("eval: scoring directories")?;
        write_report(out, &report)?;
        manifest.finish(out)?;
        report
    } else {
        let ckpt = args.checkpoint.as_ref().ok_or_else(|| anyhow!("eval: pass --checkpoint with --data, or --pred with --gt"))?;
        cfg.data.eval = args.data.clone();
        cfg.finalize()?;
        let data = cfg.eval_data()?.to_path_buf();
        with_precision!(cfg.precision, eval_checkpoint(&cfg, ckpt, &data, out))?
    };
    Ok(render_summary(&report))
}

fn eval_checkpoint<T: Real>(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<EvalReport> {
    let (params, network) =
        load_checkpoint::<T>(ckpt).with_context(|| format!("eval: loading checkpoint {}", ckpt.display()))?;
    let dataset = PairedDataset::open(data).with_context(|| format!("eval: opening dataset {}", data.display()))?;
    let mut effective = cfg.clone();
    effective.network = network;
    let mut manifest = RunManifest::start("eval", &effective, cfg.training.seed)
        .path("checkpoint", ckpt)
        .path("eval_data", data)
        .path("out", out);
    manifest.write(out)?;
    let report = score_dataset(&params, &dataset)?;
    write_report(out, &report)?;
    manifest.finish(out)?;
    Ok(report)
}

/// Image files named directly or found in the given directories.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(list_images(p)?);
        } else if p.is_file() && is_image_file(p) {
            files.push(p.clone());
        } else {
            bail!("infer: {} is neither an image nor a directory", p.display());
        }
    }
    let mut stems = BTreeSet::new();
    for f in &files {
        let stem = f.file_stem().unwrap_or_default().to_os_string();
        if !stems.insert(stem) {
            bail!("infer: two inputs share the output name of {}", f.display());
        }
    }
    if files.is_empty() {
        bail!("infer: no input images");
    }
    Ok(files)
}

fn infer(cli: &Cli, args: &InferArgs) -> Result<String> {
    let cfg = resolve(cli, None)?;
    let out = out_dir(cli)?;
    let files = expand_inputs(&args.inputs)?;
    let mut manifest = RunManifest::start("infer", &cfg, cfg.training.seed)
        .path("checkpoint", &args.checkpoint)
        .path("out", out);
    for (i, f) in args.inputs.iter().enumerate() {
        manifest = manifest.path(&format!("input{i}"), f);
    }
    manifest.write(out)?;
    with_precision!(cfg.precision, infer_run(&args.checkpoint, &files, out, args.coarse))?;
    manifest.finish(out)?;
    Ok(format!("wrote {} images to {}\n", files.len(), out.display()))
}

/// Writes `<stem>.png` per input, and `coarse/<stem>.png` when asked.
pub fn infer_run<T: Real>(ckpt: &Path, files: &[PathBuf], out: &Path, coarse: bool) -> Result<()> {
    let (params, _) =
        load_checkpoint::<T>(ckpt).with_context(|| format!("infer: loading checkpoint {}", ckpt.display()))?;
    for f in files {
        let x = load_image::<T>(f).with_context(|| format!("infer: reading {}", f.display()))?;
        let (s_c, s) = params.infer(&x).with_context(|| format!("infer: running {}", f.display()))?;
        let name = Path::new(f.file_stem().unwrap_or_default()).with_extension("png");
        save_image(&s, &out.join(&name))?;
        if coarse {
            save_image(&s_c, &out.join("coarse").join(&name))?;
        }
    }
    Ok(())
}

fn analyze(cli: &Cli, args: &AnalyzeArgs) -> Result<String> {
    let mut cfg = resolve(cli, Some(&args.overrides))?;
    if let Some(h) = args.height {
        cfg.analysis.height = h;
    }
    if let Some(w) = args.width {
        cfg.analysis.width = w;
    }
    if let Some(c) = args.flop_convention {
        cfg.analysis.flop_convention = c.into();
    }
    cfg.validate()?;
    let a = &cfg.analysis;
    let report = analysis::analyze(&cfg.network, a.height, a.width, a.flop_convention).context("analyze")?;
    let json = serde_json::to_string_pretty(&report).expect("analysis report serializes");
    let text = if args.json { format!("{json}\n") } else { render_analysis(&report) };
    if let Some(out) = &cli.out {
        let mut manifest = RunManifest::start("analyze", &cfg, cfg.training.seed).path("out", out);
        manifest.write(out)?;
        let path = out.join(ANALYSIS_JSON);
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        manifest.finish(out)?;
    }
    Ok(text)
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

pub fn render_analysis(r: &AnalysisReport) -> String {
    let n = &r.network;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "network: {} (lambda {}, mu {}, {} channels)",
        n.architecture.name(),
        n.lambda_ddrb,
        n.mu_erpab,
        n.channels
    );
    let _ = writeln!(s, "receptive field, 6-layer DRB stack:  [{}]", join(&r.drb_receptive_field));
    let _ = writeln!(s, "receptive field, 6-layer DDRB stack: [{}]", join(&r.ddrb_receptive_field));
    let _ = writeln!(s, "receptive field, whole network: {}", r.network_receptive_field);
    match &r.ddrb_gridding {
        Gridding::Ok { reach } => {
            let _ = writeln!(s, "DDRB gridding: none (contiguous offsets up to +/-{reach})");
        }
        Gridding::Holes { reach, holes } => {
            let _ = writeln!(s, "DDRB gridding: holes at {holes:?} within +/-{reach}");
        }
    }
    let _ = writeln!(s, "parameters: {} ({:.3} M)", r.total_params, r.total_params as f64 / 1e6);
    for (group, count) in &r.param_breakdown {
        let _ = writeln!(s, "  {group}: {count}");
    }
    let f = &r.flops;
    let _ = writeln!(
        s,
        "FLOPs at {}x{} ({}): {:.2} G convolutions, {:.2} G including elementwise",
        f.height,
        f.width,
        match f.convention {
            FlopConvention::MacAsOne => "one per multiply-accumulate",
            FlopConvention::TwoPerMac => "two per multiply-accumulate",
        },
        f.conv_flops as f64 / 1e9,
        f.total_with_elementwise() as f64 / 1e9
    );
    s
}

/// One training run of an ablation suite.
#[derive(Clone, Debug)]
pub struct Leg {
    pub suite: &'static str,
    pub name: &'static str,
    pub config: RunConfig,
}

/// The legs of `suite`, each differing from `base` in one field.
pub fn ablation_legs(base: &RunConfig, suite: Suite) -> Vec<Leg> {
    let mut legs = Vec::new();
    if matches!(suite, Suite::Architecture | Suite::All) {
        for arch in Architecture::ALL {
            let mut config = base.clone();
            config.network.architecture = arch;
            legs.push(Leg { suite: "architecture", name: arch.name(), config });
        }
    }
    if matches!(suite, Suite::Loss | Suite::All) {
        for loss in LossKind::ALL {
            let mut config = base.clone();
            config.training.loss = loss;
            legs.push(Leg { suite: "loss", name: loss.name(), config });
        }
    }
    legs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegResult {
    pub suite: String,
    pub leg: String,
    pub params: usize,
    pub steps: usize,
    /// Mean training loss over the last epoch.
    pub final_loss: f64,
    /// Mean final-output PSNR; `None` when every image is reproduced exactly.
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    pub coarse_psnr_db: Option<f64>,
}

/// Comparisons reported after an ablation: `(suite, better, worse)` on
/// final-output PSNR.
pub const DIRECTIONAL: [(&str, &str, &str); 8] = [
    ("architecture", "drb", "rb"),
    ("architecture", "ddrb", "drb"),
    ("architecture", "ddrb_pab", "ddrb"),
    ("architecture", "ddrb_erpab", "ddrb_pab"),
    ("loss", "hybrid", "mse"),
    ("loss", "hybrid", "edge"),
    ("loss", "hybrid", "ssim"),
    ("loss", "hybrid", "ssim_mse"),
];

pub fn render_ablation(results: &[LegResult]) -> String {
    let mut s = String::from("suite         leg          params    psnr_db   ssim     coarse_db\n");
    let db = |p: Option<f64>| p.map_or("inf".to_string(), |v| format!("{v:.3}"));
    for r in results {
        let _ = writeln!(
            s,
            "{:<13} {:<12} {:>8}  {:>8}  {:.4}  {:>8}",
            r.suite,
            r.leg,
            r.params,
            db(r.psnr_db),
            r.ssim,
            db(r.coarse_psnr_db)
        );
    }
    let find = |suite: &str, leg: &str| results.iter().find(|r| r.suite == suite && r.leg == leg);
    let mut header = false;
    for (suite, better, worse) in DIRECTIONAL {
        if let (Some(b), Some(w)) = (find(suite, better), find(suite, worse)) {
            if !header {
                s.push_str("directional checks (reported, not gated):\n");
                header = true;
            }
            let (pb, pw) = (b.psnr_db.unwrap_or(f64::INFINITY), w.psnr_db.unwrap_or(f64::INFINITY));
            let verdict = if pb >= pw { "holds" } else { "does not hold" };
            let _ = writeln!(s, "  {better} >= {worse}: {verdict} ({} vs {} dB)", db(b.psnr_db), db(w.psnr_db));
        }
    }
    s
}

fn ablate(cli: &Cli, args: &AblateArgs) -> Result<String> {
    let cfg = resolve(cli, Some(&args.overrides))?;
    let out = out_dir(cli)?;
    cfg.train_data()?;
    let eval_path = cfg.eval_data()?;
    let mut manifest = RunManifest::start("ablate", &cfg, cfg.training.seed)
        .path("out", out)
        .path("eval_data", eval_path);
    manifest.write(out)?;
    let legs = ablation_legs(&cfg, args.suite);
    let results = with_precision!(cfg.precision, run_legs(&legs, eval_path, out))?;

    let mut jsonl = String::new();
    let mut csv = String::from("suite,leg,params,steps,final_loss,psnr_db,ssim,coarse_psnr_db\n");
    let opt = |v: Option<f64>| v.map_or("inf".to_string(), |p| p.to_string());
    for r in &results {
        jsonl.push_str(&serde_json::to_string(r).expect("leg result serializes"));
        jsonl.push('\n');
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.suite,
            r.leg,
            r.params,
            r.steps,
            r.final_loss,
            opt(r.psnr_db),
            r.ssim,
            opt(r.coarse_psnr_db)
        );
    }
    let text = render_ablation(&results);
    for (name, body) in [(ABLATION_JSONL, jsonl), (ABLATION_CSV, csv), (ABLATION_TXT, text.clone())] {
        let path = out.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    manifest.finish(out)?;
    Ok(text)
}

/// Trains and scores each leg in `out/<suite>/<leg>`. Legs share nothing
/// but the read-only datasets.
pub fn run_legs<T: Real>(legs: &[Leg], eval_path: &Path, out: &Path) -> Result<Vec<LegResult>> {
    let eval_set = PairedDataset::open(eval_path).with_context(|| format!("ablate: opening {}", eval_path.display()))?;
    let mut results = Vec::new();
    for leg in legs {
        log::info!("ablation leg {}/{}", leg.suite, leg.name);
        let dir = out.join(leg.suite).join(leg.name);
        let command = format!("ablate {}/{}", leg.suite, leg.name);
        let trainer = train_run::<T>(&leg.config, &dir, &command, None)?;
        let report = score_dataset(&trainer.params, &eval_set)?;
        write_report(&dir, &report)?;
        let last_epoch = trainer.epoch.saturating_sub(1);
        let last: Vec<f64> =
            trainer.log.steps.iter().filter(|s| s.epoch == last_epoch).map(|s| s.loss).collect();
        let stage = |k| report.aggregate(k).and_then(|a| a.mean_psnr_db);
        results.push(LegResult {
            suite: leg.suite.to_string(),
            leg: leg.name.to_string(),
            params: trainer.params.scalar_count(),
            steps: trainer.step(),
            final_loss: last.iter().sum::<f64>() / last.len().max(1) as f64,
            psnr_db: stage(2),
            ssim: report.aggregate(2).map_or(f64::NAN, |a| a.mean_ssim),
            coarse_psnr_db: stage(1),
        });
    }
    Ok(results)
}

fn synthesize(cli: &Cli, args: &SynthesizeArgs) -> Result<String> {
    let mut cfg = resolve(cli, None)?;
    if args.no_rain {
        cfg.synth = SynthRainConfig { seed: cfg.synth.seed, ..SynthRainConfig::no_rain() };
    }
    let s = &mut cfg.synth_dataset;
    for (slot, v) in [(&mut s.count, args.count), (&mut s.height, args.height), (&mut s.width, args.width)] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    cfg.validate()?;
    let out = out_dir(cli)?;
    let mut manifest = RunManifest::start("synthesize", &cfg, cfg.synth.seed).path("out", out);
    manifest.write(out)?;
    let s = &cfg.synth_dataset;
    write_synthetic_dataset(out, s.count, s.height, s.width, &cfg.synth).context("synthesize")?;
    manifest.finish(out)?;
    Ok(format!("wrote {} pairs of {}x{} to {}\n", s.count, s.height, s.width, out.display()))
}
