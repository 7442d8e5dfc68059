use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Arch, ModelSpec};
use crate::norm::{GradMode, NormConfig, NormKind};
use crate::tensor::DType;
use crate::train::{default_workers, OptimizerConfig, OptimizerKind, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "filtnorm", version, about = "Filtered batch normalization experiments")]
pub struct Cli {
    /// TOML file whose keys mirror the long flags; flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub options: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Train one configuration over several seeds.
    Train,
    /// Sweep threshold and batch size.
    Grid,
    /// Compare small-batch moments against large-batch references.
    MomentConsistency,
    /// Probe loss and gradient changes along the gradient at every step.
    Landscape,
    /// Percentile bands of normalized activations.
    Profile,
    /// Train with normalization at each slot in turn.
    Ablation,
    /// Check normalization gradients against finite differences.
    Gradcheck,
    /// Time normalization passes and moment computations.
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Grid => "grid",
            Command::MomentConsistency => "moment-consistency",
            Command::Landscape => "landscape",
            Command::Profile => "profile",
            Command::Ablation => "ablation",
            Command::Gradcheck => "gradcheck",
            Command::Bench => "bench",
        }
    }
}

/// Every option is optional; each command applies its own defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Options {
    /// lenet5 or mlp.
    #[arg(long, global = true)]
    pub arch: Option<Arch>,
    /// none, bn, fbn, gn or fgn.
    #[arg(long, global = true)]
    pub norm: Option<String>,
    /// Normalization slot name, or `all`.
    #[arg(long, global = true)]
    pub slot: Option<String>,
    /// Filter threshold in standard deviations.
    #[arg(long, global = true)]
    pub tsigma: Option<f64>,
    /// Threshold list for grid sweeps and gradient checks.
    #[arg(long, global = true, value_delimiter = ',')]
    pub tsigmas: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Batch-size list for grid sweeps.
    #[arg(long, global = true, value_delimiter = ',')]
    pub batches: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub iters: Option<u64>,
    /// Number of paired repetitions.
    #[arg(long, global = true)]
    pub seeds: Option<usize>,
    /// Base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub groups: Option<usize>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// exact or paper.
    #[arg(long, global = true)]
    pub grad_mode: Option<GradMode>,
    /// sgd or adam.
    #[arg(long, global = true)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub momentum: Option<f64>,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    #[arg(long, global = true)]
    pub eval_every: Option<u64>,
    /// Evaluate on the first this many test images.
    #[arg(long, global = true)]
    pub eval_limit: Option<usize>,
    #[arg(long, global = true)]
    pub eval_batch: Option<usize>,
    /// f32 or f64.
    #[arg(long, global = true)]
    pub dtype: Option<DType>,
    /// MNIST directory; falls back to $FILTNORM_DATA_DIR, then data/mnist.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Save a checkpoint per trained seed.
    #[arg(long, global = true)]
    pub checkpoint: Option<bool>,
    /// synthetic or mnist.
    #[arg(long, global = true)]
    pub source: Option<String>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub large_batch: Option<usize>,
    #[arg(long, global = true)]
    pub small_batch: Option<usize>,
    #[arg(long, global = true)]
    pub channels: Option<usize>,
    #[arg(long, global = true)]
    pub outlier_rate: Option<f64>,
    /// Lower end of the planted outlier band, in standard deviations.
    #[arg(long, global = true)]
    pub outlier_low: Option<f64>,
    #[arg(long, global = true)]
    pub outlier_high: Option<f64>,
    /// Normalization kinds compared by the landscape probe.
    #[arg(long, global = true, value_delimiter = ',')]
    pub norms: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub probe_every: Option<u64>,
    /// Slots to profile; all when absent.
    #[arg(long, global = true, value_delimiter = ',')]
    pub hooks: Option<Vec<String>>,
    /// Stream length for synthetic profiling.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Half-width of the excluded band around the threshold, in standard deviations.
    #[arg(long, global = true)]
    pub band: Option<f64>,
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    /// Element counts of the complexity sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),+ $(,)?) => {
        Options { $($f: $top.$f.or($base.$f)),+ }
    };
}

impl Options {
    /// `top` wins wherever it sets a value.
    pub fn overlay(self, top: Options) -> Options {
        overlay!(
            self, top, arch, norm, slot, tsigma, tsigmas, batch, batches, iters, seeds, seed, groups,
            epsilon, grad_mode, optimizer, lr, momentum, eval_every, eval_limit, eval_batch, dtype,
            data_dir, out, workers, checkpoint, source, steps, large_batch, small_batch, channels,
            outlier_rate, outlier_low, outlier_high, norms, probe_every, hooks, samples, trials, band,
            repeats, sizes,
        )
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Options together with the command they configure, with defaults applied
/// on access.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub command: Command,
    pub o: Options,
}

fn positive<T: PartialOrd + Default + std::fmt::Display + Copy>(name: &str, v: T) -> Result<T> {
    if v > T::default() {
        Ok(v)
    } else {
        Err(Error::config(format!("{name} must be positive, got {v}")))
    }
}

impl Resolved {
    pub fn arch(&self) -> Arch {
        self.o.arch.unwrap_or(Arch::Lenet5)
    }

    pub fn parse_norm(s: &str) -> Result<Option<NormKind>> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(None),
            other => other.parse().map(Some),
        }
    }

    pub fn norm(&self) -> Result<Option<NormKind>> {
        Self::parse_norm(self.o.norm.as_deref().unwrap_or("fbn"))
    }

    pub fn slot(&self) -> String {
        match (&self.o.slot, self.command, self.arch()) {
            (Some(s), _, _) => s.clone(),
            (None, Command::Profile, _) | (None, _, Arch::Mlp) => "all".into(),
            (None, _, Arch::Lenet5) => "fc84".into(),
        }
    }

    pub fn tsigma(&self) -> f64 {
        self.o.tsigma.unwrap_or(crate::norm::DEFAULT_T_SIGMA)
    }

    pub fn tsigmas(&self) -> Result<Vec<f64>> {
        let default: &[f64] = match self.command {
            Command::Gradcheck => &[2.0, 4.0, 7.0],
            _ => &[1.5, 2.0, 3.0, 4.0, 5.0, 7.0],
        };
        let v = self.o.tsigmas.clone().unwrap_or_else(|| default.to_vec());
        if v.is_empty() {
            return Err(Error::config("tsigmas is empty"));
        }
        for &t in &v {
            positive("tsigma", t)?;
        }
        Ok(v)
    }

    pub fn batch(&self) -> Result<usize> {
        positive("batch", self.o.batch.unwrap_or(256))
    }

    pub fn batches(&self) -> Result<Vec<usize>> {
        let v = self.o.batches.clone().unwrap_or_else(|| vec![16, 64, 256]);
        if v.is_empty() {
            return Err(Error::config("batches is empty"));
        }
        for &b in &v {
            positive("batch", b)?;
        }
        Ok(v)
    }

    pub fn iters(&self) -> u64 {
        self.o.iters.unwrap_or(1000)
    }

    pub fn seeds(&self) -> Result<usize> {
        positive("seeds", self.o.seeds.unwrap_or(1))
    }

    pub fn seed(&self) -> u64 {
        self.o.seed.unwrap_or(0)
    }

    pub fn workers(&self) -> usize {
        self.o.workers.unwrap_or_else(default_workers).max(1)
    }

    pub fn dtype(&self) -> DType {
        self.o.dtype.unwrap_or(DType::F32)
    }

    pub fn out(&self) -> PathBuf {
        self.o
            .out
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(self.command.name()))
    }

    pub fn checkpoint(&self) -> bool {
        self.o.checkpoint.unwrap_or(false)
    }

    pub fn source(&self) -> Result<String> {
        let s = self.o.source.clone().unwrap_or_else(|| "synthetic".into());
        match s.as_str() {
            "synthetic" | "mnist" => Ok(s),
            other => Err(Error::config(format!("unknown source `{other}` (synthetic or mnist)"))),
        }
    }

    pub fn outlier_rate(&self) -> f64 {
        let default = if self.command == Command::MomentConsistency { 0.005 } else { 0.0 };
        self.o.outlier_rate.unwrap_or(default)
    }

    pub fn outlier_band(&self) -> (f64, f64) {
        (self.o.outlier_low.unwrap_or(15.0), self.o.outlier_high.unwrap_or(20.0))
    }

    pub fn norms(&self) -> Result<Vec<Option<NormKind>>> {
        let v = self.o.norms.clone().unwrap_or_else(|| vec!["bn".into(), "fbn".into()]);
        if v.is_empty() {
            return Err(Error::config("norms is empty"));
        }
        v.iter().map(|s| Self::parse_norm(s)).collect()
    }

    pub fn norm_config(&self, kind: NormKind, t_sigma: f64) -> Result<NormConfig> {
        let mut cfg = NormConfig::default().with_kind(kind).with_grad_mode(self.o.grad_mode.unwrap_or_default());
        cfg.t_sigma = t_sigma;
        cfg.num_groups = self.o.groups.unwrap_or(1);
        if let Some(e) = self.o.epsilon {
            cfg = cfg.with_epsilon(e);
        }
        cfg.validate(None)?;
        Ok(cfg)
    }

    pub fn model_spec(&self, kind: Option<NormKind>, t_sigma: f64, seed: u64) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(self.arch(), seed);
        if let Some(kind) = kind {
            spec = spec.with_config(self.norm_config(kind, t_sigma)?);
            spec = match self.slot().as_str() {
                "all" => spec.with_norm_everywhere(kind),
                slot => spec.with_norm(slot, kind),
            };
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn optimizer(&self) -> Result<OptimizerConfig> {
        let kind = self.o.optimizer.unwrap_or(OptimizerKind::SgdMomentum);
        let mut cfg = match kind {
            OptimizerKind::SgdMomentum => OptimizerConfig::sgd(self.o.lr.unwrap_or(0.01), self.o.momentum.unwrap_or(0.9)),
            OptimizerKind::Adam => OptimizerConfig::adam(self.o.lr.unwrap_or(1e-3)),
        };
        if kind == OptimizerKind::Adam {
            cfg.momentum = self.o.momentum.unwrap_or(0.0);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, batch: usize, iterations: u64, data_seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            iterations,
            batch_size: batch,
            eval_every: self.o.eval_every.unwrap_or(100),
            eval_limit: self.o.eval_limit,
            eval_batch: self.o.eval_batch.unwrap_or(1000),
            data_seed,
            optimizer: self.optimizer()?,
            probe_every: if self.command == Command::Landscape {
                self.o.probe_every.unwrap_or(1)
            } else {
                0
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The options with the shared defaults filled in. The worker count is
    /// dropped because it does not affect results.
    pub fn effective(&self) -> Options {
        let mut o = self.o.clone();
        o.arch = Some(self.arch());
        o.slot = Some(self.slot());
        o.norm = o.norm.or_else(|| Some("fbn".into()));
        o.tsigma = Some(self.tsigma());
        o.iters = Some(self.iters());
        o.seeds = o.seeds.or(Some(1));
        o.seed = Some(self.seed());
        o.batch = o.batch.or(Some(256));
        o.dtype = Some(self.dtype());
        o.out = Some(self.out());
        o.workers = None;
        if let Ok(opt) = self.optimizer() {
            o.optimizer = Some(opt.kind);
            o.lr = Some(opt.lr);
            o.momentum = Some(opt.momentum);
        }
        o
    }
}
