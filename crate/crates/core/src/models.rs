//! LeNet-5 and a small MLP with configurable normalization slots.
//!
//! Normalization sits between each affine layer and its nonlinearity. The
//! logit layer never carries a slot.

use std::collections::BTreeMap;
use std::fmt;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::norm::{self, AffineParams, NormConfig, NormKind, RunningStats};
use crate::tensor::{cast, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Lenet5,
    Mlp,
}

impl Arch {
    /// Normalization slots in network order.
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            Arch::Lenet5 => &["conv1", "conv2", "fc120", "fc84"],
            Arch::Mlp => &["fc256", "fc128"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Lenet5 => "lenet5",
            Arch::Mlp => "mlp",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lenet5" | "lenet" => Ok(Arch::Lenet5),
            "mlp" => Ok(Arch::Mlp),
            other => Err(Error::config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Normalization kind per slot; absent slots carry none.
    pub norms: BTreeMap<String, NormKind>,
    /// Shared settings; `kind` is overridden per slot.
    pub norm: NormConfig,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(arch: Arch, seed: u64) -> Self {
        Self {
            arch,
            norms: BTreeMap::new(),
            norm: NormConfig::default(),
            seed,
        }
    }

    pub fn lenet5(seed: u64) -> Self {
        Self::new(Arch::Lenet5, seed)
    }

    pub fn mlp(seed: u64) -> Self {
        Self::new(Arch::Mlp, seed)
    }

    pub fn with_norm(mut self, slot: &str, kind: NormKind) -> Self {
        self.norms.insert(slot.to_string(), kind);
        self
    }

    pub fn with_norm_everywhere(mut self, kind: NormKind) -> Self {
        for s in self.arch.slots() {
            self.norms.insert(s.to_string(), kind);
        }
        self
    }

    pub fn with_config(mut self, cfg: NormConfig) -> Self {
        self.norm = cfg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for slot in self.norms.keys() {
            if !self.arch.slots().contains(&slot.as_str()) {
                return Err(Error::config(format!(
                    "{} has no normalization slot `{slot}` (slots: {})",
                    self.arch,
                    self.arch.slots().join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Short label such as `lenet5[fc84=fbn]`.
    pub fn label(&self) -> String {
        if self.norms.is_empty() {
            return format!("{}[none]", self.arch);
        }
        let parts: Vec<String> = self
            .norms
            .iter()
            .map(|(s, k)| format!("{s}={}", k.name()))
            .collect();
        format!("{}[{}]", self.arch, parts.join(","))
    }
}

#[derive(Debug, Clone)]
pub struct NormSlot<S: Scalar = f64> {
    pub slot: String,
    pub cfg: NormConfig,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: RunningStats<S>,
}

#[derive(Debug, Clone, Copy)]
enum Layer {
    Conv { w: ParamId, b: ParamId },
    Linear { w: ParamId, b: ParamId },
    Norm(usize),
    Relu,
    Pool,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics with no state change.
    BatchStats,
    /// Running statistics as constants.
    Infer,
}

/// One recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass<S: Scalar = f64> {
    pub tape: Tape<S>,
    pub logits: Var,
    pub mode: Mode,
    /// `(slot index, input, output)` per normalization layer.
    pub norm_nodes: Vec<(usize, Var, Var)>,
}

/// Inputs of the normalization slots, by slot name.
pub type Captured<S> = Vec<(String, Tensor<S>)>;

#[derive(Debug, Clone)]
pub struct Model<S: Scalar = f64> {
    pub spec: ModelSpec,
    pub params: ParamStore<S>,
    norms: Vec<NormSlot<S>>,
    layers: Vec<Layer>,
}

struct Builder<'a, S: Scalar> {
    spec: &'a ModelSpec,
    rng: ChaCha8Rng,
    params: ParamStore<S>,
    norms: Vec<NormSlot<S>>,
    layers: Vec<Layer>,
}

impl<S: Scalar> Builder<'_, S> {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor<S> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| cast(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = cin * k * k;
        let w = self.uniform(&[cout, cin, k, k], fan_in);
        let b = self.uniform(&[cout], fan_in);
        let w = self.params.add(format!("{name}.weight"), w);
        let b = self.params.add(format!("{name}.bias"), b);
        self.layers.push(Layer::Conv { w, b });
        self.slot(name, cout);
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize, slot: bool) {
        let w = self.uniform(&[fout, fin], fin);
        let b = self.uniform(&[fout], fin);
        let w = self.params.add(format!("{name}.weight"), w);
        let b = self.params.add(format!("{name}.bias"), b);
        self.layers.push(Layer::Linear { w, b });
        if slot {
            self.slot(name, fout);
        }
    }

    fn slot(&mut self, name: &str, channels: usize) {
        if let Some(&kind) = self.spec.norms.get(name) {
            let cfg = self.spec.norm.with_kind(kind);
            let gamma = self.params.add(format!("{name}.norm.gamma"), Tensor::ones(&[channels]));
            let beta = self.params.add(format!("{name}.norm.beta"), Tensor::zeros(&[channels]));
            self.layers.push(Layer::Norm(self.norms.len()));
            self.norms.push(NormSlot {
                slot: name.to_string(),
                cfg,
                gamma,
                beta,
                stats: RunningStats::new(channels),
            });
        }
    }
}

impl<S: Scalar> Model<S> {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            params: ParamStore::new(),
            norms: Vec::new(),
            layers: Vec::new(),
        };
        match spec.arch {
            Arch::Lenet5 => {
                b.conv("conv1", 1, 6, 5);
                b.layers.extend([Layer::Relu, Layer::Pool]);
                b.conv("conv2", 6, 16, 5);
                b.layers.extend([Layer::Relu, Layer::Pool, Layer::Flatten]);
                b.linear("fc120", 16 * 4 * 4, 120, true);
                b.layers.push(Layer::Relu);
                b.linear("fc84", 120, 84, true);
                b.layers.push(Layer::Relu);
                b.linear("fc10", 84, 10, false);
            }
            Arch::Mlp => {
                b.layers.push(Layer::Flatten);
                b.linear("fc256", 784, 256, true);
                b.layers.push(Layer::Relu);
                b.linear("fc128", 256, 128, true);
                b.layers.push(Layer::Relu);
                b.linear("fc10", 128, 10, false);
            }
        }
        for n in &b.norms {
            n.cfg.validate(Some(n.stats.channels()))?;
        }
        Ok(Self {
            spec: spec.clone(),
            params: b.params,
            norms: b.norms,
            layers: b.layers,
        })
    }

    pub fn norm_slots(&self) -> &[NormSlot<S>] {
        &self.norms
    }

    pub fn norm_slots_mut(&mut self) -> &mut [NormSlot<S>] {
        &mut self.norms
    }

    /// Trainable scalar count (weights, biases, gamma, beta).
    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Scalar count of running statistics.
    pub fn num_running_stats(&self) -> usize {
        self.norms.iter().map(|n| 2 * n.stats.channels()).sum()
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let ok = match self.spec.arch {
            Arch::Lenet5 => x.rank() == 4 && x.shape()[1..] == [1, 28, 28],
            Arch::Mlp => !x.is_empty() && x.shape()[1..].iter().product::<usize>() == 784,
        };
        if ok && x.shape()[0] > 0 {
            Ok(())
        } else {
            let mut expected = vec![0, 1, 28, 28];
            expected[0] = x.shape().first().copied().unwrap_or(0);
            Err(Error::ShapeMismatch {
                expected,
                actual: x.shape().to_vec(),
            })
        }
    }

    fn run(&self, x: &Tensor<S>, mode: Mode) -> Result<ForwardPass<S>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let mut h = tape.constant(x.clone());
        let mut norm_nodes = Vec::new();
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv { w, b } => {
                    let (w, b) = (tape.param(&self.params, w), tape.param(&self.params, b));
                    tape.conv2d(h, w, b, 1, 0)?
                }
                Layer::Linear { w, b } => {
                    let (w, b) = (tape.param(&self.params, w), tape.param(&self.params, b));
                    tape.linear(h, w, b)?
                }
                Layer::Norm(i) => {
                    let slot = &self.norms[i];
                    let out = if mode == Mode::Infer {
                        let affine = AffineParams {
                            gamma: self.params.get(slot.gamma).value.clone(),
                            beta: self.params.get(slot.beta).value.clone(),
                        };
                        let y = norm::norm_forward_infer(tape.value(h), &affine, &slot.cfg, &slot.stats)?.y;
                        tape.constant(y)
                    } else {
                        let (g, b) = (
                            tape.param(&self.params, slot.gamma),
                            tape.param(&self.params, slot.beta),
                        );
                        tape.norm(h, g, b, &slot.cfg, None)?
                    };
                    norm_nodes.push((i, h, out));
                    out
                }
                Layer::Relu => tape.relu(h),
                Layer::Pool => tape.max_pool2d(h, 2, 2)?,
                Layer::Flatten => tape.flatten(h)?,
            };
        }
        Ok(ForwardPass {
            tape,
            logits: h,
            mode,
            norm_nodes,
        })
    }

    /// Forward pass. Train mode folds the batch moments of every batch-kind
    /// slot into its running statistics.
    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<ForwardPass<S>> {
        let pass = self.run(x, mode)?;
        if mode == Mode::Train {
            for &(i, _, out) in &pass.norm_nodes {
                let slot = &mut self.norms[i];
                if slot.cfg.kind.is_grouped() {
                    continue;
                }
                let cache = pass.tape.norm_cache(out).expect("train-mode norm node");
                slot.stats
                    .update(&cache.filtered_mu, &cache.filtered_var, slot.cfg.momentum);
            }
        }
        Ok(pass)
    }

    /// Forward pass that never mutates the model. `Mode::Train` is treated
    /// as `Mode::BatchStats`.
    pub fn forward_frozen(&self, x: &Tensor<S>, mode: Mode) -> Result<ForwardPass<S>> {
        let mode = if mode == Mode::Train { Mode::BatchStats } else { mode };
        self.run(x, mode)
    }

    /// Mean cross-entropy and parameter gradients on one batch. Gradients
    /// are zeroed first. Returns the loss.
    pub fn loss_and_grads(&mut self, x: &Tensor<S>, labels: &[usize], mode: Mode) -> Result<f64> {
        Ok(self.step_inner(x, labels, mode, false)?.0)
    }

    /// As [`Model::loss_and_grads`], also returning the input of every
    /// normalization slot.
    pub fn loss_and_grads_capture(
        &mut self,
        x: &Tensor<S>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(f64, Captured<S>)> {
        self.step_inner(x, labels, mode, true)
    }

    fn step_inner(
        &mut self,
        x: &Tensor<S>,
        labels: &[usize],
        mode: Mode,
        capture: bool,
    ) -> Result<(f64, Captured<S>)> {
        let mut pass = if mode == Mode::Train {
            self.forward(x, mode)?
        } else {
            self.forward_frozen(x, mode)?
        };
        let loss = pass.tape.softmax_cross_entropy(pass.logits, labels)?;
        self.params.zero_grad();
        pass.tape.backward(loss, &mut self.params)?;
        let inputs = if capture {
            pass.norm_nodes
                .iter()
                .map(|&(i, input, _)| (self.norms[i].slot.clone(), pass.tape.value(input).clone()))
                .collect()
        } else {
            Vec::new()
        };
        Ok((pass.tape.value(loss).item()?.to_f64_lossy(), inputs))
    }

    pub fn snapshot_grads(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }

    pub fn restore_grads(&mut self, grads: &[Tensor<S>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad.data_mut().copy_from_slice(g.data());
        }
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, x: &Tensor<S>, labels: &[usize], mode: Mode) -> Result<f64> {
        let mut pass = self.forward_frozen(x, mode)?;
        let loss = pass.tape.softmax_cross_entropy(pass.logits, labels)?;
        Ok(pass.tape.value(loss).item()?.to_f64_lossy())
    }

    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let pass = self.forward_frozen(x, Mode::Infer)?;
        Ok(pass.tape.value(pass.logits).clone())
    }

    /// Arg-max class per row, in inference mode. Ties go to the lowest class.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        let k = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Inference-mode accuracy over a whole dataset.
    pub fn evaluate(&self, ds: &Dataset<S>, batch_size: usize) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty dataset"));
        }
        let mut correct = 0usize;
        for idx in crate::data::batches(ds.len(), batch_size, 0, 0, crate::data::BatchMode::Eval)? {
            let (x, labels) = ds.gather(&idx);
            let pred = self.predict(&x)?;
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        Ok(correct as f64 / ds.len() as f64)
    }

    /// Pre-affine normalized activations per slot, as seen by `pass`.
    pub fn pre_affine(&self, pass: &ForwardPass<S>) -> Result<Vec<(String, Tensor<S>)>> {
        let mut out = Vec::with_capacity(pass.norm_nodes.len());
        for &(i, input, output) in &pass.norm_nodes {
            let slot = &self.norms[i];
            let values = match pass.tape.norm_cache(output) {
                Some(cache) => cache.normalized.clone(),
                None if slot.cfg.kind.is_grouped() => {
                    let affine = AffineParams::new(slot.stats.channels());
                    norm::forward_train(pass.tape.value(input), &affine, &slot.cfg, None)?
                        .1
                        .normalized
                }
                None => {
                    let unit = AffineParams::new(slot.stats.channels());
                    norm::norm_forward_infer(pass.tape.value(input), &unit, &slot.cfg, &slot.stats)?.y
                }
            };
            out.push((slot.slot.clone(), values));
        }
        Ok(out)
    }

    /// Copies every parameter value, for exact restoration.
    pub fn snapshot_params(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_params(&mut self, values: &[Tensor<S>]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value.data_mut().copy_from_slice(v.data());
        }
    }

    /// Per-slot running statistics, in slot order.
    pub fn running_stats(&self) -> Vec<&RunningStats<S>> {
        self.norms.iter().map(|n| &n.stats).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn batch(n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 784).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels = (0..n).map(|i| i % 10).collect();
        (Tensor::new(vec![n, 1, 28, 28], data).unwrap(), labels)
    }

    #[test]
    fn lenet_parameter_counts() {
        let plain = Model::<f64>::build(&ModelSpec::lenet5(0)).unwrap();
        assert_eq!(plain.num_parameters(), 156 + 2416 + 30840 + 10164 + 850);
        let fc84 = Model::<f64>::build(&ModelSpec::lenet5(0).with_norm("fc84", NormKind::Fbn)).unwrap();
        assert_eq!(fc84.num_parameters(), plain.num_parameters() + 2 * 84);
        assert_eq!(fc84.num_running_stats(), 2 * 84);
        let all = Model::<f64>::build(&ModelSpec::lenet5(0).with_norm_everywhere(NormKind::Bn)).unwrap();
        assert_eq!(all.num_parameters(), plain.num_parameters() + 2 * (6 + 16 + 120 + 84));
        let mlp = Model::<f64>::build(&ModelSpec::mlp(0)).unwrap();
        assert_eq!(mlp.num_parameters(), 785 * 256 + 257 * 128 + 129 * 10);
    }

    #[test]
    fn unknown_slot_is_rejected() {
        let spec = ModelSpec::lenet5(0).with_norm("fc10", NormKind::Bn);
        assert!(matches!(Model::<f64>::build(&spec), Err(Error::Config(_))));
        let spec = ModelSpec::mlp(0).with_norm("conv1", NormKind::Bn);
        assert!(Model::<f64>::build(&spec).is_err());
    }

    #[test]
    fn init_is_seeded_and_shared_across_norm_kinds() {
        let a = Model::<f64>::build(&ModelSpec::lenet5(4)).unwrap();
        let b = Model::<f64>::build(&ModelSpec::lenet5(4)).unwrap();
        assert_eq!(a.params, b.params);
        let c = Model::<f64>::build(&ModelSpec::lenet5(5)).unwrap();
        assert_ne!(a.params, c.params);
        let d = Model::<f64>::build(&ModelSpec::lenet5(4).with_norm("fc84", NormKind::Bn)).unwrap();
        let w = |m: &Model<f64>, name: &str| {
            m.params.iter().find(|p| p.name == name).unwrap().value.clone()
        };
        for name in ["conv1.weight", "fc84.weight", "fc10.bias"] {
            assert_eq!(w(&a, name), w(&d, name));
        }
    }

    #[test]
    fn shapes_and_modes() {
        let mut m = Model::<f64>::build(&ModelSpec::lenet5(1).with_norm("fc84", NormKind::Fbn)).unwrap();
        let (x, _) = batch(8, 2);
        let pass = m.forward(&x, Mode::Train).unwrap();
        assert_eq!(pass.tape.value(pass.logits).shape(), &[8, 10]);
        assert_eq!(m.norm_slots()[0].stats.updates, 1);

        let before = m.logits(&x).unwrap();
        assert_eq!(before, m.logits(&x).unwrap());
        m.forward(&x, Mode::Train).unwrap();
        assert_ne!(before, m.logits(&x).unwrap());

        let frozen = m.clone();
        m.forward_frozen(&x, Mode::Train).unwrap();
        assert_eq!(m.norm_slots()[0].stats, frozen.norm_slots()[0].stats);

        let bad = Tensor::<f64>::zeros(&[8, 1, 32, 32]);
        assert!(matches!(m.logits(&bad), Err(Error::ShapeMismatch { .. })));
        let mlp = Model::<f64>::build(&ModelSpec::mlp(1).with_norm_everywhere(NormKind::Gn)).unwrap();
        assert_eq!(mlp.predict(&x).unwrap().len(), 8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = ModelSpec::mlp(3).with_norm("fc128", NormKind::Fbn);
        let mut m = Model::<f64>::build(&spec).unwrap();
        let (x, labels) = batch(6, 9);
        m.loss_and_grads(&x, &labels, Mode::BatchStats).unwrap();
        let pid = m.params.iter().position(|p| p.name == "fc128.weight").unwrap();
        let grad = m.params.get(ParamId(pid)).grad.clone();
        let base = m.clone();
        let eval = |w: &Tensor<f64>| {
            let mut probe = base.clone();
            probe.params.get_mut(ParamId(pid)).value = w.clone();
            probe.loss(&x, &labels, Mode::BatchStats).unwrap()
        };
        let opts = crate::autodiff::FdOptions {
            indices: Some((0..40).map(|i| i * 811 % grad.len()).collect()),
            ..Default::default()
        };
        let w0 = base.params.get(ParamId(pid)).value.clone();
        let report = crate::autodiff::finite_difference_check(eval, &w0, &grad, &opts);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn pre_affine_values_are_standardized() {
        let spec = ModelSpec::mlp(0).with_norm("fc256", NormKind::Bn);
        let m = Model::<f64>::build(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..64 * 784)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let x = Tensor::new(vec![64, 784], data).unwrap();
        let pass = m.forward_frozen(&x, Mode::BatchStats).unwrap();
        let vals = m.pre_affine(&pass).unwrap();
        assert_eq!(vals.len(), 1);
        let t = &vals[0].1;
        let mean = t.reduce_mean(&[0], false).unwrap();
        assert!(mean.max_abs() < 1e-12);
        let infer = m.forward_frozen(&x, Mode::Infer).unwrap();
        assert_eq!(m.pre_affine(&infer).unwrap()[0].1.shape(), &[64, 256]);
    }
}
