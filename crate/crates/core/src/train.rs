//! Optimizers, the training loop, evaluation, checkpoints and the
//! training-dynamics probes.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{synth_gaussian_with_outliers, BatchStream, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec, Mode};
use crate::norm::{self, AffineParams, NormConfig, NormKind};
use crate::tensor::{cast, DType, Scalar, Tensor};

/// Step sizes of the landscape probe.
pub const PROBE_STEPS: [f64; 4] = [0.02, 0.01, 0.005, 0.001];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sgd" | "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `factor` every `every` iterations.
    StepDecay { every: u64, factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum coefficient.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sgd(0.01, 0.9)
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            lr,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Constant,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr, 0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        if let Schedule::StepDecay { every, factor } = self.schedule {
            if every == 0 || factor.is_nan() || factor <= 0.0 {
                return Err(Error::config("step decay needs every >= 1 and factor > 0"));
            }
        }
        Ok(())
    }

    /// Learning rate used at 1-based iteration `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::StepDecay { every, factor } => {
                self.lr * factor.powi((iter.saturating_sub(1) / every) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<S: Scalar = f64> {
    pub cfg: OptimizerConfig,
    pub steps: u64,
    /// Velocity (SGD) or first moment (Adam), one per parameter.
    pub m: Vec<Tensor<S>>,
    /// Second moment (Adam only).
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(cfg: OptimizerConfig, model: &Model<S>) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Tensor<S>> = model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let v = if cfg.kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() };
        Ok(Self { cfg, steps: 0, m: zeros, v })
    }

    /// Applies one update from the gradients stored in `model`.
    pub fn step(&mut self, model: &mut Model<S>) {
        self.steps += 1;
        let lr = self.cfg.lr_at(self.steps);
        match self.cfg.kind {
            OptimizerKind::SgdMomentum => {
                let (mu, lr): (S, S) = (cast(self.cfg.momentum), cast(lr));
                for (p, vel) in model.params.iter_mut().zip(&mut self.m) {
                    if !p.trainable {
                        continue;
                    }
                    for ((w, v), &g) in p.value.data_mut().iter_mut().zip(vel.data_mut()).zip(p.grad.data()) {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                let c1: S = cast(1.0 - b1.powi(t));
                let c2: S = cast(1.0 - b2.powi(t));
                let (b1, b2, eps, lr): (S, S, S, S) = (cast(b1), cast(b2), cast(self.cfg.eps), cast(lr));
                let one = S::one();
                for ((p, m), v) in model.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    if !p.trainable {
                        continue;
                    }
                    let it = p.value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut());
                    for (((w, m), v), &g) in it.zip(p.grad.data()) {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Restrict evaluation to the first `eval_limit` test samples.
    pub eval_limit: Option<usize>,
    pub eval_batch: usize,
    pub data_seed: u64,
    pub optimizer: OptimizerConfig,
    /// Run the landscape probe every this many iterations; 0 disables it.
    pub probe_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 256,
            eval_every: 0,
            eval_limit: None,
            eval_batch: 1000,
            data_seed: 0,
            optimizer: OptimizerConfig::default(),
            probe_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: u64,
    pub accuracy: f64,
}

/// Losses and gradient changes along the negative gradient at one
/// training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeProbe {
    pub iteration: u64,
    pub base_loss: f64,
    pub steps: Vec<f64>,
    /// `loss(theta - eta * g)` per step size.
    pub losses: Vec<f64>,
    /// `||g(theta - eta * g) - g(theta)||_2` per step size.
    pub grad_changes: Vec<f64>,
    /// Population variance of `base_loss` and `losses` together.
    pub loss_variance: f64,
    pub loss_min: f64,
    pub loss_max: f64,
    /// Population variance of `grad_changes`.
    pub grad_change_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub model_seed: u64,
    pub data_seed: u64,
    /// Training loss per iteration, starting at iteration 1.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub probes: Vec<LandscapeProbe>,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.evals.last().map(|e| e.accuracy)
    }

    pub fn accuracy_at(&self, iteration: u64) -> Option<f64> {
        self.evals.iter().find(|e| e.iteration == iteration).map(|e| e.accuracy)
    }
}

fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// A differentiable scalar function of a parameter list.
pub trait Objective<S: Scalar> {
    fn params(&self) -> Vec<Tensor<S>>;
    fn set_params(&mut self, values: &[Tensor<S>]);
    /// Loss and gradient at the current parameters. Must not change any
    /// state other than what `set_params` controls.
    fn loss_and_grad(&mut self) -> Result<(f64, Vec<Tensor<S>>)>;
}

/// Probes `loss(theta - eta * g)` for each step size, where `g` is
/// `base_grad`, and restores the parameters exactly.
pub fn probe_landscape<S: Scalar, O: Objective<S>>(
    obj: &mut O,
    iteration: u64,
    base_loss: f64,
    base_grad: &[Tensor<S>],
    steps: &[f64],
) -> Result<LandscapeProbe> {
    let theta = obj.params();
    let mut losses = Vec::with_capacity(steps.len());
    let mut grad_changes = Vec::with_capacity(steps.len());
    let mut outcome = Ok(());
    for &eta in steps {
        let eta_s: S = cast(eta);
        let moved: Vec<Tensor<S>> = theta
            .iter()
            .zip(base_grad)
            .map(|(t, g)| t.zip_with(g, |a, b| a - eta_s * b).expect("matching parameter shapes"))
            .collect();
        obj.set_params(&moved);
        match obj.loss_and_grad() {
            Ok((loss, grad)) => {
                let mut sq = 0.0;
                for (a, b) in grad.iter().zip(base_grad) {
                    for (x, y) in a.data().iter().zip(b.data()) {
                        let d = x.to_f64_lossy() - y.to_f64_lossy();
                        sq += d * d;
                    }
                }
                losses.push(loss);
                grad_changes.push(sq.sqrt());
            }
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    obj.set_params(&theta);
    outcome?;
    let mut all = vec![base_loss];
    all.extend(&losses);
    Ok(LandscapeProbe {
        iteration,
        base_loss,
        steps: steps.to_vec(),
        loss_variance: population_variance(&all),
        loss_min: all.iter().copied().fold(f64::INFINITY, f64::min),
        loss_max: all.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        grad_change_variance: population_variance(&grad_changes),
        losses,
        grad_changes,
    })
}

/// A model and one fixed batch, evaluated with batch statistics and no
/// running-statistics update.
pub struct BatchObjective<'a, S: Scalar> {
    pub model: &'a mut Model<S>,
    pub x: &'a Tensor<S>,
    pub labels: &'a [usize],
}

impl<S: Scalar> Objective<S> for BatchObjective<'_, S> {
    fn params(&self) -> Vec<Tensor<S>> {
        self.model.snapshot_params()
    }

    fn set_params(&mut self, values: &[Tensor<S>]) {
        self.model.restore_params(values);
    }

    fn loss_and_grad(&mut self) -> Result<(f64, Vec<Tensor<S>>)> {
        let saved = self.model.snapshot_grads();
        let loss = self.model.loss_and_grads(self.x, self.labels, Mode::BatchStats);
        let grads = self.model.snapshot_grads();
        self.model.restore_grads(&saved);
        Ok((loss?, grads))
    }
}

/// Trains `model` and evaluates it in inference mode on `test`.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let mut opt = Optimizer::new(cfg.optimizer, model)?;
    train_with(model, &mut opt, train_set, test_set, cfg)
}

/// [`train`] with an explicit optimizer, e.g. one restored from a checkpoint.
pub fn train_with<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut Optimizer<S>,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let eval_set = match cfg.eval_limit {
        Some(n) if n < test_set.len() => test_set.truncated(n),
        _ => test_set.clone(),
    };
    let mut record = RunRecord {
        label: model.spec.label(),
        model_seed: model.spec.seed,
        data_seed: cfg.data_seed,
        losses: Vec::with_capacity(cfg.iterations as usize),
        evals: Vec::new(),
        probes: Vec::new(),
        wall_seconds: 0.0,
    };
    let mut stream = BatchStream::new(train_set.len(), cfg.batch_size, cfg.data_seed)?;
    for it in 1..=cfg.iterations {
        let idx = stream.next().expect("endless stream");
        let (x, labels) = train_set.gather(&idx);
        let loss = model.loss_and_grads(&x, &labels, Mode::Train)?;
        if !loss.is_finite() {
            log::error!(
                "diverged at iteration {it}: loss {loss}, squared gradient norm {}, {}",
                model.params.grad_norm_sq(),
                record.label
            );
            return Err(Error::Divergence { iteration: it, loss });
        }
        record.losses.push(loss);
        if cfg.probe_every > 0 && it % cfg.probe_every == 0 {
            let base_grad = model.snapshot_grads();
            let mut obj = BatchObjective {
                model: &mut *model,
                x: &x,
                labels: &labels,
            };
            record
                .probes
                .push(probe_landscape(&mut obj, it, loss, &base_grad, &PROBE_STEPS)?);
        }
        opt.step(model);
        if cfg.eval_every > 0 && it % cfg.eval_every == 0 && it != cfg.iterations {
            let accuracy = model.evaluate(&eval_set, cfg.eval_batch)?;
            log::info!("{} iteration {it}: loss {loss:.4}, accuracy {accuracy:.4}", record.label);
            record.evals.push(EvalPoint { iteration: it, accuracy });
        }
    }
    let accuracy = model.evaluate(&eval_set, cfg.eval_batch)?;
    record.evals.push(EvalPoint {
        iteration: cfg.iterations,
        accuracy,
    });
    record.wall_seconds = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Runs `f` over `items` on up to `workers` threads; results keep input order.
pub fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return items.into_iter().map(f).collect();
    }
    let queue: Mutex<Vec<Option<T>>> = Mutex::new(items.into_iter().map(Some).collect());
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let item = queue.lock().expect("queue lock")[i].take().expect("item taken once");
                let r = f(item);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Source of `[n, C]` activation batches for the moment-consistency study.
pub trait ActivationSource {
    fn next_batch(&mut self) -> Result<Tensor<f64>>;

    /// Rows of the last batch that hold a planted outlier, when known.
    fn planted_rows(&self) -> Option<&[bool]> {
        None
    }
}

/// Per-channel Gaussian streams with planted outliers.
#[derive(Debug, Clone)]
pub struct SyntheticStreams {
    /// `streams[c]` is the whole stream of channel `c`.
    streams: Vec<Vec<f64>>,
    /// Sorted outlier positions per channel.
    outliers: Vec<Vec<usize>>,
    batch: usize,
    cursor: usize,
    last_planted: Vec<bool>,
}

impl SyntheticStreams {
    /// `channels` streams of `steps * batch` elements. Channel `c` has its
    /// own mean and scale, derived from `seed`.
    pub fn new(channels: usize, batch: usize, steps: usize, outlier_rate: f64, band: (f64, f64), seed: u64) -> Result<Self> {
        let mut streams = Vec::with_capacity(channels);
        let mut outliers = Vec::with_capacity(channels);
        for c in 0..channels {
            let spec = SyntheticSpec {
                mean: (c as f64 * 0.37).sin() * 2.0,
                std: 0.5 + (c % 5) as f64 * 0.25,
                outlier_rate,
                outlier_low: band.0,
                outlier_high: band.1,
                len: steps * batch,
                seed: seed.wrapping_mul(1_000_003).wrapping_add(c as u64),
            };
            let sample = synth_gaussian_with_outliers(&spec)?;
            outliers.push(sample.outliers);
            streams.push(sample.values.into_data());
        }
        Ok(Self {
            streams,
            outliers,
            batch,
            cursor: 0,
            last_planted: Vec::new(),
        })
    }
}

impl ActivationSource for SyntheticStreams {
    fn next_batch(&mut self) -> Result<Tensor<f64>> {
        let len = self.streams.first().map_or(0, Vec::len);
        if self.cursor + self.batch > len {
            return Err(Error::invalid("synthetic stream exhausted"));
        }
        let c = self.streams.len();
        let mut data = Vec::with_capacity(self.batch * c);
        for i in self.cursor..self.cursor + self.batch {
            data.extend(self.streams.iter().map(|s| s[i]));
        }
        let range = self.cursor..self.cursor + self.batch;
        self.last_planted = vec![false; self.batch];
        for pos in &self.outliers {
            let start = pos.partition_point(|&p| p < range.start);
            for &p in pos[start..].iter().take_while(|&&p| p < range.end) {
                self.last_planted[p - range.start] = true;
            }
        }
        self.cursor += self.batch;
        Tensor::new(vec![self.batch, c], data)
    }

    fn planted_rows(&self) -> Option<&[bool]> {
        Some(&self.last_planted)
    }
}

/// Normalization-slot inputs of a model trained with plain batch
/// normalization on large batches.
pub struct ModelActivations<'a, S: Scalar> {
    pub model: Model<S>,
    pub optimizer: Optimizer<S>,
    pub data: &'a Dataset<S>,
    pub stream: BatchStream,
    pub slot: String,
}

impl<'a, S: Scalar> ModelActivations<'a, S> {
    pub fn new(spec: &ModelSpec, slot: &str, opt: OptimizerConfig, data: &'a Dataset<S>, batch: usize, seed: u64) -> Result<Self> {
        if spec.norms.get(slot) != Some(&NormKind::Bn) {
            return Err(Error::config(format!("slot `{slot}` must carry plain batch normalization")));
        }
        let model = Model::build(spec)?;
        let optimizer = Optimizer::new(opt, &model)?;
        Ok(Self {
            model,
            optimizer,
            data,
            stream: BatchStream::new(data.len(), batch, seed)?,
            slot: slot.to_string(),
        })
    }
}

impl<S: Scalar> ActivationSource for ModelActivations<'_, S> {
    /// Takes one training step and returns the slot input of that step,
    /// flattened to `[n * spatial, C]` for convolutional slots.
    fn next_batch(&mut self) -> Result<Tensor<f64>> {
        let idx = self.stream.next().expect("endless stream");
        let (x, labels) = self.data.gather(&idx);
        let (_, inputs) = self.model.loss_and_grads_capture(&x, &labels, Mode::Train)?;
        self.optimizer.step(&mut self.model);
        let (_, t) = inputs
            .into_iter()
            .find(|(s, _)| *s == self.slot)
            .ok_or_else(|| Error::invalid(format!("no normalization at slot `{}`", self.slot)))?;
        Ok(t.cast())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentConsistencyConfig {
    pub large_batch: usize,
    pub small_batch: usize,
    pub t_sigma: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for MomentConsistencyConfig {
    fn default() -> Self {
        Self {
            large_batch: 128,
            small_batch: 16,
            t_sigma: norm::DEFAULT_T_SIGMA,
            epsilon: norm::DEFAULT_EPSILON,
            steps: 500,
            seed: 0,
        }
    }
}

/// Mean over channels of the absolute moment deviations at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentDeviation {
    pub step: usize,
    pub bn_mean: f64,
    pub fbn_mean: f64,
    pub bn_var: f64,
    pub fbn_var: f64,
    /// Elements the filter removed from the small batch.
    pub masked: usize,
    /// Whether the small batch holds a planted outlier, when the source knows.
    pub outlier: Option<bool>,
}

/// Per-channel `(mean, biased variance)` of `[n, C, ...]` input, plain or
/// filtered.
pub fn channel_moments(x: &Tensor<f64>, cfg: &NormConfig) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let affine = AffineParams::new(x.shape()[1]);
    let (_, cache) = norm::forward_train(x, &affine, cfg, None)?;
    let masked = cache.num_masked();
    Ok((cache.filtered_mu, cache.filtered_var, masked))
}

fn mean_abs_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Compares small-batch BN and FBN moments against large-batch BN moments
/// computed on the same activations.
pub fn moment_consistency_experiment<A: ActivationSource>(
    source: &mut A,
    cfg: &MomentConsistencyConfig,
) -> Result<Vec<MomentDeviation>> {
    if cfg.small_batch > cfg.large_batch {
        return Err(Error::config(format!(
            "small batch {} exceeds large batch {}",
            cfg.small_batch, cfg.large_batch
        )));
    }
    if cfg.small_batch < 2 {
        return Err(Error::config("small batch needs at least 2 samples"));
    }
    let bn = NormConfig::bn().with_epsilon(cfg.epsilon);
    let fbn = NormConfig::fbn(cfg.t_sigma).with_epsilon(cfg.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let large = source.next_batch()?;
        if large.shape()[0] != cfg.large_batch {
            return Err(Error::ShapeMismatch {
                expected: vec![cfg.large_batch],
                actual: vec![large.shape()[0]],
            });
        }
        let mut rows = index::sample(&mut rng, cfg.large_batch, cfg.small_batch).into_vec();
        rows.sort_unstable();
        let per: usize = large.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in &rows {
            data.extend_from_slice(&large.data()[r * per..(r + 1) * per]);
        }
        let mut shape = large.shape().to_vec();
        shape[0] = rows.len();
        let small = Tensor::new(shape, data)?;

        let (ref_mu, ref_var, _) = channel_moments(&large, &bn)?;
        let (bn_mu, bn_var, _) = channel_moments(&small, &bn)?;
        let (f_mu, f_var, masked) = channel_moments(&small, &fbn)?;
        out.push(MomentDeviation {
            step,
            bn_mean: mean_abs_dev(&bn_mu, &ref_mu),
            fbn_mean: mean_abs_dev(&f_mu, &ref_mu),
            bn_var: mean_abs_dev(&bn_var, &ref_var),
            fbn_var: mean_abs_dev(&f_var, &ref_var),
            masked,
            outlier: source.planted_rows().map(|p| rows.iter().any(|&r| p[r])),
        });
    }
    Ok(out)
}

/// Where the ablation puts normalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    None,
    Slot(String),
    All,
}

impl Placement {
    pub fn label(&self) -> String {
        match self {
            Placement::None => "none".into(),
            Placement::Slot(s) => s.clone(),
            Placement::All => "all".into(),
        }
    }

    pub fn apply(&self, base: &ModelSpec, kind: NormKind) -> ModelSpec {
        let mut spec = base.clone();
        spec.norms.clear();
        match self {
            Placement::None => spec,
            Placement::Slot(s) => spec.with_norm(s, kind),
            Placement::All => spec.with_norm_everywhere(kind),
        }
    }

    /// Each slot on its own, then all slots, then none.
    pub fn standard_set(arch: crate::models::Arch) -> Vec<Placement> {
        let mut v: Vec<Placement> = arch.slots().iter().map(|s| Placement::Slot(s.to_string())).collect();
        v.push(Placement::All);
        v.push(Placement::None);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub placement: String,
    pub iteration: u64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub runs: usize,
}

/// Seeds of repetition `rep`, shared by every configuration.
pub fn paired_seeds(base: u64, rep: u64) -> (u64, u64) {
    let s = base.wrapping_add(rep.wrapping_mul(7919));
    (s, s ^ 0x5DEE_CE66)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One training run per `(placement, repetition)`; seeds are paired across
/// placements. Returns per-placement accuracy curves and every record.
#[allow(clippy::too_many_arguments)]
pub fn layer_placement_ablation<S: Scalar>(
    base: &ModelSpec,
    kind: NormKind,
    placements: &[Placement],
    repetitions: usize,
    train_cfg: &TrainConfig,
    base_seed: u64,
    data: (&Dataset<S>, &Dataset<S>),
    workers: usize,
) -> Result<(Vec<AblationRow>, Vec<RunRecord>)> {
    if repetitions == 0 {
        return Err(Error::config("repetitions must be at least 1"));
    }
    if placements.is_empty() {
        return Err(Error::config("no placements given"));
    }
    let jobs: Vec<(usize, u64)> = (0..placements.len())
        .flat_map(|p| (0..repetitions as u64).map(move |r| (p, r)))
        .collect();
    let results = parallel_map(jobs.clone(), workers, |(p, r)| {
        let (model_seed, data_seed) = paired_seeds(base_seed, r);
        let mut spec = placements[p].apply(base, kind);
        spec.seed = model_seed;
        let cfg = TrainConfig {
            data_seed,
            ..train_cfg.clone()
        };
        let mut model = Model::build(&spec)?;
        let mut rec = train(&mut model, data.0, data.1, &cfg)?;
        rec.label = placements[p].label();
        Ok::<_, Error>(rec)
    });
    let records: Vec<RunRecord> = results.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (p, placement) in placements.iter().enumerate() {
        let runs: Vec<&RunRecord> = jobs
            .iter()
            .zip(&records)
            .filter(|((jp, _), _)| *jp == p)
            .map(|(_, r)| r)
            .collect();
        for e in &runs[0].evals {
            let accs: Vec<f64> = runs.iter().filter_map(|r| r.accuracy_at(e.iteration)).collect();
            let (mean, std) = mean_std(&accs);
            rows.push(AblationRow {
                placement: placement.label(),
                iteration: e.iteration,
                mean_accuracy: mean,
                std_accuracy: std,
                runs: accs.len(),
            });
        }
    }
    Ok((rows, records))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FILTNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
    stats_updates: Vec<u64>,
    optimizer: Option<OptimizerConfig>,
    optimizer_steps: u64,
}

/// Model (and optionally optimizer) state read back from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar = f64> {
    pub model: Model<S>,
    pub optimizer: Option<Optimizer<S>>,
}

fn state_tensors<'a, S: Scalar>(model: &'a Model<S>, opt: Option<&'a Optimizer<S>>) -> Vec<(String, &'a Tensor<S>)> {
    let mut out: Vec<(String, &Tensor<S>)> = model.params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    for slot in model.norm_slots() {
        out.push((format!("{}.norm.running_mean", slot.slot), &slot.stats.mean));
        out.push((format!("{}.norm.running_var", slot.slot), &slot.stats.var));
    }
    if let Some(opt) = opt {
        for (p, m) in model.params.iter().zip(&opt.m) {
            out.push((format!("optimizer.m.{}", p.name), m));
        }
        for (p, v) in model.params.iter().zip(&opt.v) {
            out.push((format!("optimizer.v.{}", p.name), v));
        }
    }
    out
}

/// Writes a versioned binary checkpoint: magic, version, dtype, a JSON
/// manifest, then raw little-endian buffers in manifest order.
pub fn save_checkpoint<S: Scalar>(path: &Path, model: &Model<S>, opt: Option<&Optimizer<S>>) -> Result<()> {
    let tensors = state_tensors(model, opt);
    let manifest = Manifest {
        spec: model.spec.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        stats_updates: model.norm_slots().iter().map(|s| s.stats.updates).collect(),
        optimizer: opt.map(|o| o.cfg),
        optimizer_steps: opt.map_or(0, |o| o.steps),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(S::DTYPE.code());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            v.write_le(&mut buf);
        }
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.bytes.len() as u64,
                message: format!("truncated while reading {what}"),
            }),
        }
    }
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "not a checkpoint file".into(),
        });
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            field: "version".into(),
            message: format!("file has {version}, reader supports {CHECKPOINT_VERSION}"),
        });
    }
    let code = cur.take(1, "dtype")?[0];
    if DType::from_code(code) != Some(S::DTYPE) {
        return Err(Error::Checkpoint {
            field: "dtype".into(),
            message: format!("file has code {code}, reader expects {}", S::DTYPE),
        });
    }
    let len = u64::from_le_bytes(cur.take(8, "manifest length")?.try_into().expect("8 bytes")) as usize;
    let manifest: Manifest = serde_json::from_slice(cur.take(len, "manifest")?)?;
    let mut model = Model::<S>::build(&manifest.spec)?;
    let mut optimizer = match manifest.optimizer {
        Some(cfg) => {
            let mut o = Optimizer::new(cfg, &model)?;
            o.steps = manifest.optimizer_steps;
            Some(o)
        }
        None => None,
    };
    let mut values = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = cur.take(n * S::DTYPE.size_of(), &entry.name)?;
        let data: Vec<S> = raw.chunks(S::DTYPE.size_of()).map(S::read_le).collect();
        values.push(Tensor::new(entry.shape.clone(), data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: cur.pos as u64,
            message: "trailing bytes after the last buffer".into(),
        });
    }
    apply_state(&mut model, optimizer.as_mut(), &manifest, values)?;
    Ok(Checkpoint { model, optimizer })
}

fn apply_state<S: Scalar>(
    model: &mut Model<S>,
    opt: Option<&mut Optimizer<S>>,
    manifest: &Manifest,
    values: Vec<Tensor<S>>,
) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = state_tensors(model, opt.as_deref())
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint {
            field: "tensors".into(),
            message: format!("{} stored, {} expected", manifest.tensors.len(), expected.len()),
        });
    }
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Checkpoint {
                field: entry.name.clone(),
                message: format!("stored {} {:?}, model expects {name} {shape:?}", entry.name, entry.shape),
            });
        }
    }
    let mut it = values.into_iter();
    for p in model.params.iter_mut() {
        p.value = it.next().expect("counted");
    }
    for (slot, &updates) in model.norm_slots_mut().iter_mut().zip(&manifest.stats_updates) {
        slot.stats.mean = it.next().expect("counted");
        slot.stats.var = it.next().expect("counted");
        slot.stats.updates = updates;
    }
    if let Some(opt) = opt {
        for m in opt.m.iter_mut() {
            *m = it.next().expect("counted");
        }
        for v in opt.v.iter_mut() {
            *v = it.next().expect("counted");
        }
    }
    Ok(())
}

impl<S: Scalar> Checkpoint<S> {
    /// Copies the stored state into an existing model built from the same
    /// specification.
    pub fn restore_into(&self, model: &mut Model<S>) -> Result<()> {
        if model.spec.arch != self.model.spec.arch || model.spec.norms != self.model.spec.norms {
            return Err(Error::Checkpoint {
                field: "spec".into(),
                message: format!("checkpoint holds {}, target is {}", self.model.spec.label(), model.spec.label()),
            });
        }
        *model = self.model.clone();
        Ok(())
    }
}
