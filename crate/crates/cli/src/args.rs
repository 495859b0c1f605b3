use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpenet_core::analysis::FlopConvention;
use dpenet_core::losses::LossKind;
use dpenet_core::networks::Architecture;

use crate::config::{Precision, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "dpenet", version, about = "Train, evaluate and analyze the dual-stage deraining network")]
pub struct Cli {
    /// TOML config file, or the run.json of an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// 64-bit arithmetic and synchronous data loading.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network on paired data.
    Train(TrainArgs),
    /// Score a checkpoint on paired data, or two image directories.
    Eval(EvalArgs),
    /// Derain images with a checkpoint.
    Infer(InferArgs),
    /// Receptive field, gridding, parameter and FLOP report.
    Analyze(AnalyzeArgs),
    /// Train and score one leg per architecture or loss variant.
    Ablate(AblateArgs),
    /// Generate a synthetic paired dataset.
    Synthesize(SynthesizeArgs),
}

/// Command-line overrides of the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Training set directory or pair manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<usize>,
    #[arg(long)]
    pub mu: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub architecture: Option<Architecture>,
    #[arg(long)]
    pub pab_sigmoid: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub gamma_e: Option<f64>,
    #[arg(long)]
    pub gamma_l2: Option<f64>,
    /// Apply the loss to the final output only.
    #[arg(long)]
    pub no_deep_supervision: bool,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub prefetch: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let (n, t) = (&mut cfg.network, &mut cfg.training);
        set(&mut cfg.data.train, self.data.clone().map(Some));
        set(&mut cfg.data.eval, self.eval_data.clone().map(Some));
        set(&mut n.lambda_ddrb, self.lambda);
        set(&mut n.mu_erpab, self.mu);
        set(&mut n.channels, self.channels);
        set(&mut n.architecture, self.architecture);
        n.pab_sigmoid |= self.pab_sigmoid;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.patch, self.patch);
        set(&mut t.lr0, self.lr);
        set(&mut t.loss, self.loss);
        set(&mut t.loss_config.gamma_e, self.gamma_e);
        set(&mut t.loss_config.gamma_l2, self.gamma_l2);
        t.deep_supervision &= !self.no_deep_supervision;
        set(&mut t.checkpoint_every, self.checkpoint_every);
        set(&mut t.eval_every, self.eval_every);
        set(&mut t.prefetch, self.prefetch);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires = "data", conflicts_with_all = ["pred", "gt"])]
    pub checkpoint: Option<PathBuf>,
    /// Paired dataset scored with `--checkpoint`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory of predictions, matched by file name against `--gt`.
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image files or directories of images.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Also write the first-stage output under `coarse/`.
    #[arg(long)]
    pub coarse: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, value_enum)]
    pub flop_convention: Option<FlopConventionArg>,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FlopConventionArg {
    MacAsOne,
    TwoPerMac,
}

impl From<FlopConventionArg> for FlopConvention {
    fn from(a: FlopConventionArg) -> Self {
        match a {
            FlopConventionArg::MacAsOne => FlopConvention::MacAsOne,
            FlopConventionArg::TwoPerMac => FlopConvention::TwoPerMac,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Architecture,
    Loss,
    All,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Disable streaks and veil: rainy images equal the clean ones.
    #[arg(long)]
    pub no_rain: bool,
}
