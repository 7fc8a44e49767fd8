use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use promptseg_core::data::Fraction;
use promptseg_core::training::TrainConfig;
use promptseg_core::uplc::PerturbKind;

#[derive(Debug, Parser)]
#[command(name = "promptseg", version, about = "Prompt-conditioned semi-supervised segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-task dataset.
    Synth(SynthArgs),
    /// Train one model and write its run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Prompt/UPLC on-off grid plus a perturbation-count sweep.
    Ablate(AblateArgs),
    /// Summary tables and charts from run records.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Csv,
}

/// `"64"` or `"64x48"` (height x width).
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size {s:?}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

fn parse_fraction(s: &str) -> Result<Fraction, String> {
    s.parse().map_err(|e: promptseg_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<PerturbKind, String> {
    s.parse().map_err(|e: promptseg_core::Error| e.to_string())
}

#[derive(Clone, Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of tasks (structures per image).
    #[arg(long, default_value_t = 2)]
    pub tasks: usize,
    #[arg(long, default_value_t = 400)]
    pub n_samples: usize,
    #[arg(long, default_value = "64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed_data: u64,
    /// Replace an existing dataset in `--out`.
    #[arg(long)]
    pub force: bool,
}

/// Training knobs; unset flags keep the config-file (or default) value.
#[derive(Clone, Debug, Default, Args)]
pub struct TrainFlags {
    /// TOML file mirroring the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    #[arg(long)]
    pub seed_model: Option<u64>,
    /// Also seeds the train/test split.
    #[arg(long)]
    pub seed_data: Option<u64>,
    #[arg(long)]
    pub seed_perturb: Option<u64>,
    #[arg(long, value_parser = parse_fraction)]
    pub labeled_fraction: Option<Fraction>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub power: Option<f64>,
    #[arg(long)]
    pub uplc_n: Option<usize>,
    #[arg(long, value_parser = parse_kind)]
    pub uplc_kind: Option<PerturbKind>,
    #[arg(long)]
    pub uplc_rate: Option<f64>,
    #[arg(long)]
    pub lambda_u: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Bypass every prompting block.
    #[arg(long)]
    pub no_prompt: bool,
    /// Use the plain supervised-decoder output as pseudo-label.
    #[arg(long)]
    pub no_uplc: bool,
    /// Ignore unlabeled images (labeled-only baseline).
    #[arg(long)]
    pub no_unlabeled: bool,
    #[arg(long)]
    pub no_augment: bool,
}

pub const DEFAULT_LABELED_FRACTION: Fraction = Fraction::new(1, 8);

impl TrainFlags {
    pub fn labeled_fraction(&self) -> Fraction {
        self.labeled_fraction.unwrap_or(DEFAULT_LABELED_FRACTION)
    }

    /// File values, then flags.
    pub fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", p.display()))?;
                TrainConfig::from_toml(&text)?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.size {
            c.image_size = v;
        }
        if let Some(v) = self.seed_model {
            c.seeds.model = v;
        }
        if let Some(v) = self.seed_data {
            c.seeds.data = v;
        }
        if let Some(v) = self.seed_perturb {
            c.seeds.perturb = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.init_lr = v;
        }
        if let Some(v) = self.power {
            c.power = v;
        }
        if let Some(v) = self.uplc_n {
            c.uplc.n = v;
        }
        if let Some(v) = self.uplc_kind {
            c.uplc.kind = v;
        }
        if let Some(v) = self.uplc_rate {
            c.uplc.rate = v;
        }
        if let Some(v) = self.lambda_u {
            c.lambda_u = v;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        c.prompt_enabled &= !self.no_prompt;
        c.uplc_enabled &= !self.no_uplc;
        c.use_unlabeled &= !self.no_unlabeled;
        c.augment &= !self.no_augment;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Overwrite an existing run in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split file; defaults to `split.json` beside the checkpoint. Its test ids are scored.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Write the report here as CSV as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score the pseudo-supervised decoder instead.
    #[arg(long)]
    pub pd: bool,
}

#[derive(Clone, Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory receiving one run per arm plus the summary files.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Perturbation counts for the sweep.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub sweep: Vec<usize>,
    /// Skip the on/off grid and run only the sweep.
    #[arg(long)]
    pub sweep_only: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Debug, Args)]
pub struct ReportArgs {
    /// Directory searched (one level deep) for run records.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}
