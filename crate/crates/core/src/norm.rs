//! Batch, filtered batch, group and filtered group normalization.
//!
//! All four kinds share one code path. Elements are partitioned into
//! normalization slices (one per channel for batch kinds, one per
//! instance-and-group for group kinds). The filtered kinds first
//! standardize each slice with its plain moments, mask out every element
//! whose standardized value lies beyond `t_sigma`, and then normalize the
//! whole slice, outliers included, with the moments of the surviving
//! elements.
//!
//! The mask is piecewise constant in the input and is treated as a constant
//! by the backward pass.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cast, Scalar, Tensor};

pub const DEFAULT_T_SIGMA: f64 = 2.0;
pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Bn,
    Fbn,
    Gn,
    Fgn,
}

impl NormKind {
    pub fn is_filtered(self) -> bool {
        matches!(self, NormKind::Fbn | NormKind::Fgn)
    }

    pub fn is_grouped(self) -> bool {
        matches!(self, NormKind::Gn | NormKind::Fgn)
    }

    pub fn name(self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::Fbn => "fbn",
            NormKind::Gn => "gn",
            NormKind::Fgn => "fgn",
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Ok(NormKind::Bn),
            "fbn" => Ok(NormKind::Fbn),
            "gn" => Ok(NormKind::Gn),
            "fgn" => Ok(NormKind::Fgn),
            other => Err(Error::config(format!("unknown normalization kind `{other}`"))),
        }
    }
}

/// How the filtered backward pass treats the mask.
///
/// `Paper` evaluates the published equations literally: the variance and
/// mean adjoints and the affine gradients sum over surviving elements only,
/// and the mean-path term of the input gradient omits the element's own
/// mask value. `Exact` is the gradient of the implemented forward map with
/// the mask frozen. The two agree bit-for-bit when nothing is masked out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    Paper,
    #[default]
    Exact,
}

impl std::str::FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(GradMode::Paper),
            "exact" => Ok(GradMode::Exact),
            other => Err(Error::config(format!("unknown gradient mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub kind: NormKind,
    /// Mask threshold in standard deviations of the candidate distribution.
    pub t_sigma: f64,
    /// Added to the variance inside the square root.
    pub epsilon: f64,
    /// EMA weight of the newest batch moment in the running statistics.
    pub momentum: f64,
    pub num_groups: usize,
    pub grad_mode: GradMode,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            kind: NormKind::Fbn,
            t_sigma: DEFAULT_T_SIGMA,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            num_groups: 1,
            grad_mode: GradMode::Exact,
        }
    }
}

impl NormConfig {
    pub fn bn() -> Self {
        Self {
            kind: NormKind::Bn,
            ..Self::default()
        }
    }

    pub fn fbn(t_sigma: f64) -> Self {
        Self {
            kind: NormKind::Fbn,
            t_sigma,
            ..Self::default()
        }
    }

    pub fn gn(num_groups: usize) -> Self {
        Self {
            kind: NormKind::Gn,
            num_groups,
            ..Self::default()
        }
    }

    pub fn fgn(num_groups: usize, t_sigma: f64) -> Self {
        Self {
            kind: NormKind::Fgn,
            num_groups,
            t_sigma,
            ..Self::default()
        }
    }

    pub fn with_kind(mut self, kind: NormKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_grad_mode(mut self, mode: GradMode) -> Self {
        self.grad_mode = mode;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Checks scalar ranges and, when `channels` is given, group divisibility.
    pub fn validate(&self, channels: Option<usize>) -> Result<()> {
        if !(self.t_sigma > 0.0 && self.t_sigma.is_finite()) {
            return Err(Error::config(format!(
                "t_sigma must lie in (0, inf), got {}",
                self.t_sigma
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::config(format!(
                "momentum must lie in (0, 1], got {}",
                self.momentum
            )));
        }
        if self.kind.is_grouped() {
            if self.num_groups == 0 {
                return Err(Error::config("num_groups must be positive"));
            }
            if let Some(c) = channels {
                if c % self.num_groups != 0 {
                    return Err(Error::config(format!(
                        "{c} channels are not divisible into {} groups",
                        self.num_groups
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Learnable per-channel scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams<S: Scalar = f64> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> AffineParams<S> {
    /// `gamma = 1`, `beta = 0`.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn from_values(gamma: &[S], beta: &[S]) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![gamma.len()],
                actual: vec![beta.len()],
            });
        }
        Ok(Self {
            gamma: Tensor::vector(gamma),
            beta: Tensor::vector(beta),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Per-channel exponential moving averages of the batch moments.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S: Scalar = f64> {
    pub mean: Tensor<S>,
    /// Biased variance.
    pub var: Tensor<S>,
    pub updates: u64,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `running <- (1 - alpha) * running + alpha * batch`.
    pub fn update(&mut self, batch_mean: &[S], batch_var: &[S], alpha: f64) {
        let a: S = cast(alpha);
        let keep = S::one() - a;
        for (r, &m) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = keep * *r + a * m;
        }
        for (r, &v) in self.var.data_mut().iter_mut().zip(batch_var) {
            *r = keep * *r + a * v;
        }
        self.updates += 1;
    }
}

/// How a `[N, C, spatial...]` tensor splits into normalization slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceLayout {
    pub batch: usize,
    pub channels: usize,
    /// Product of the trailing (spatial) extents; 1 for rank-2 input.
    pub spatial: usize,
    /// `None` for per-channel slices, `Some(g)` for per-instance groups.
    pub groups: Option<usize>,
}

impl SliceLayout {
    pub fn for_input(shape: &[usize], cfg: &NormConfig) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::invalid(format!(
                "normalization needs input of rank >= 2, got shape {shape:?}"
            )));
        }
        let layout = Self {
            batch: shape[0],
            channels: shape[1],
            spatial: shape[2..].iter().product(),
            groups: cfg.kind.is_grouped().then_some(cfg.num_groups),
        };
        cfg.validate(Some(layout.channels))?;
        Ok(layout)
    }

    pub fn num_slices(&self) -> usize {
        match self.groups {
            None => self.channels,
            Some(g) => self.batch * g,
        }
    }

    pub fn slice_len(&self) -> usize {
        match self.groups {
            None => self.batch * self.spatial,
            Some(g) => self.channels / g * self.spatial,
        }
    }

    /// Contiguous index ranges of `slice`, in ascending order.
    pub fn runs(&self, slice: usize) -> impl Iterator<Item = Range<usize>> + '_ {
        let (count, len, first, step) = match self.groups {
            None => (
                self.batch,
                self.spatial,
                slice * self.spatial,
                self.channels * self.spatial,
            ),
            Some(g) => {
                let per_group = self.channels / g;
                let (n, grp) = (slice / g, slice % g);
                (
                    1,
                    per_group * self.spatial,
                    (n * self.channels + grp * per_group) * self.spatial,
                    0,
                )
            }
        };
        (0..count).map(move |i| {
            let start = first + i * step;
            start..start + len
        })
    }

    /// Slice owning the `(n, c)` block.
    pub fn slice_of(&self, n: usize, c: usize) -> usize {
        match self.groups {
            None => c,
            Some(g) => n * g + c / (self.channels / g),
        }
    }
}

/// State saved by a training forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<S: Scalar = f64> {
    pub layout: SliceLayout,
    pub shape: Vec<usize>,
    pub candidate_mu: Vec<S>,
    /// Square root of candidate variance plus epsilon.
    pub candidate_sigma: Vec<S>,
    /// {0,1} per element; all ones for unfiltered kinds.
    pub mask: Tensor<S>,
    pub mask_count: Vec<S>,
    pub filtered_mu: Vec<S>,
    /// Biased filtered variance, without epsilon.
    pub filtered_var: Vec<S>,
    /// `1 / sqrt(filtered_var + epsilon)`.
    pub inv_std: Vec<S>,
    /// `x - filtered_mu`, per element.
    pub centered: Tensor<S>,
    /// `(x - filtered_mu) / sigma'`, before the affine transform.
    pub normalized: Tensor<S>,
    /// Slices whose mask selected nothing and fell back to plain moments.
    pub fallback_slices: Vec<usize>,
    pub grad_mode: GradMode,
}

impl<S: Scalar> NormCache<S> {
    pub fn num_masked(&self) -> usize {
        self.mask.data().iter().filter(|&&f| f == S::zero()).count()
    }

    /// Smallest `| |z| - t_sigma |` over all elements, where `z` is the
    /// candidate standardized value.
    pub fn min_threshold_gap(&self, t_sigma: f64) -> f64 {
        let mut gap = f64::INFINITY;
        for s in 0..self.layout.num_slices() {
            let (mu, sigma) = (self.candidate_mu[s], self.candidate_sigma[s]);
            for r in self.layout.runs(s) {
                for i in r {
                    let x = self.centered.data()[i] + self.filtered_mu[s];
                    let z = ((x - mu) / sigma).to_f64_lossy().abs();
                    gap = gap.min((z - t_sigma).abs());
                }
            }
        }
        gap
    }
}

#[derive(Debug, Clone)]
pub struct NormGrads<S: Scalar = f64> {
    pub dx: Tensor<S>,
    pub dgamma: Tensor<S>,
    pub dbeta: Tensor<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormWarning {
    /// Inference ran on running statistics that were never updated.
    UninitializedStats,
}

#[derive(Debug, Clone)]
pub struct InferOutput<S: Scalar = f64> {
    pub y: Tensor<S>,
    pub warnings: Vec<NormWarning>,
}

fn slice_sum<S: Scalar>(x: &[S], layout: &SliceLayout, slice: usize, f: impl Fn(usize, S) -> S) -> S {
    let mut acc = S::zero();
    for r in layout.runs(slice) {
        for i in r {
            acc += f(i, x[i]);
        }
    }
    acc
}

fn check_affine<S: Scalar>(affine: &AffineParams<S>, channels: usize) -> Result<()> {
    for t in [&affine.gamma, &affine.beta] {
        if t.shape() != [channels] {
            return Err(Error::ShapeMismatch {
                expected: vec![channels],
                actual: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Shared training-mode forward for every kind. `filter` selects the masked
/// variant; `stats` receives the filtered moments when present.
fn forward_slices<S: Scalar>(
    x: &Tensor<S>,
    affine: &AffineParams<S>,
    cfg: &NormConfig,
    filter: bool,
) -> Result<(Tensor<S>, NormCache<S>)> {
    let layout = SliceLayout::for_input(x.shape(), cfg)?;
    check_affine(affine, layout.channels)?;
    if layout.groups.is_none() && layout.batch < 2 {
        return Err(Error::invalid(format!(
            "batch normalization needs at least 2 samples, got {}",
            layout.batch
        )));
    }
    let slice_len = layout.slice_len();
    if slice_len < 2 {
        return Err(Error::DegenerateSlice {
            slice: 0,
            count: slice_len,
        });
    }

    let xs = x.data();
    let slices = layout.num_slices();
    let eps: S = cast(cfg.epsilon);
    let t_sigma: S = cast(cfg.t_sigma);
    let n: S = cast(slice_len as f64);

    let mut candidate_mu = Vec::with_capacity(slices);
    let mut candidate_sigma = Vec::with_capacity(slices);
    let mut filtered_mu = Vec::with_capacity(slices);
    let mut filtered_var = Vec::with_capacity(slices);
    let mut mask_count = Vec::with_capacity(slices);
    let mut fallback_slices = Vec::new();
    let mut mask = Tensor::<S>::ones(x.shape());

    for s in 0..slices {
        let mu = slice_sum(xs, &layout, s, |_, v| v) / n;
        let var = slice_sum(xs, &layout, s, |_, v| {
            let d = v - mu;
            d * d
        }) / n;
        let sigma = (var + eps).sqrt();
        candidate_mu.push(mu);
        candidate_sigma.push(sigma);

        if !filter {
            filtered_mu.push(mu);
            filtered_var.push(var);
            mask_count.push(n);
            continue;
        }

        let m = mask.data_mut();
        let (mut kept, mut kept_sum) = (S::zero(), S::zero());
        for r in layout.runs(s) {
            for i in r {
                let z = (xs[i] - mu) / sigma;
                let f = if z.abs() <= t_sigma { S::one() } else { S::zero() };
                m[i] = f;
                kept += f;
                kept_sum += f * xs[i];
            }
        }
        if kept == S::zero() {
            for r in layout.runs(s) {
                m[r].fill(S::one());
            }
            fallback_slices.push(s);
            filtered_mu.push(mu);
            filtered_var.push(var);
            mask_count.push(n);
            continue;
        }
        let m = &*m;
        let fmu = kept_sum / kept;
        let fvar = slice_sum(xs, &layout, s, |i, v| {
            let d = v - fmu;
            m[i] * d * d
        }) / kept;
        filtered_mu.push(fmu);
        filtered_var.push(fvar);
        mask_count.push(kept);
    }

    let inv_std: Vec<S> = filtered_var
        .iter()
        .map(|&v| S::one() / (v + eps).sqrt())
        .collect();

    let mut centered = Tensor::<S>::zeros(x.shape());
    let mut normalized = Tensor::<S>::zeros(x.shape());
    let mut y = Tensor::<S>::zeros(x.shape());
    let (g, b) = (affine.gamma.data(), affine.beta.data());
    let sp = layout.spatial;
    {
        let (cd, nd, yd) = (centered.data_mut(), normalized.data_mut(), y.data_mut());
        for bn in 0..layout.batch {
            for c in 0..layout.channels {
                let s = layout.slice_of(bn, c);
                let (mu, inv) = (filtered_mu[s], inv_std[s]);
                let start = (bn * layout.channels + c) * sp;
                for i in start..start + sp {
                    let d = xs[i] - mu;
                    let h = d * inv;
                    cd[i] = d;
                    nd[i] = h;
                    yd[i] = g[c] * h + b[c];
                }
            }
        }
    }

    let cache = NormCache {
        layout,
        shape: x.shape().to_vec(),
        candidate_mu,
        candidate_sigma,
        mask,
        mask_count,
        filtered_mu,
        filtered_var,
        inv_std,
        centered,
        normalized,
        fallback_slices,
        grad_mode: cfg.grad_mode,
    };
    Ok((y, cache))
}

/// Filtered moments of one contiguous slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilteredMoments<S: Scalar = f64> {
    pub mean: S,
    /// Biased, without epsilon.
    pub var: S,
    pub kept: usize,
    /// Nothing survived the filter; plain moments were used.
    pub fallback: bool,
}

/// Candidate moments, mask and filtered moments of `values` in four linear
/// passes, with the same arithmetic as the layer forward.
pub fn filtered_moments<S: Scalar>(values: &[S], t_sigma: f64, epsilon: f64) -> Result<FilteredMoments<S>> {
    if values.len() < 2 {
        return Err(Error::DegenerateSlice {
            slice: 0,
            count: values.len(),
        });
    }
    let n: S = cast(values.len() as f64);
    let (eps, t): (S, S) = (cast(epsilon), cast(t_sigma));
    let mut acc = S::zero();
    for &v in values {
        acc += v;
    }
    let mu = acc / n;
    let mut acc = S::zero();
    for &v in values {
        acc += (v - mu) * (v - mu);
    }
    let var = acc / n;
    let sigma = (var + eps).sqrt();
    let (mut sum, mut kept) = (S::zero(), 0usize);
    for &v in values {
        if ((v - mu) / sigma).abs() <= t {
            sum += v;
            kept += 1;
        }
    }
    if kept == 0 {
        return Ok(FilteredMoments {
            mean: mu,
            var,
            kept: values.len(),
            fallback: true,
        });
    }
    let k: S = cast(kept as f64);
    let fmu = sum / k;
    let mut acc = S::zero();
    for &v in values {
        if ((v - mu) / sigma).abs() <= t {
            acc += (v - fmu) * (v - fmu);
        }
    }
    Ok(FilteredMoments {
        mean: fmu,
        var: acc / k,
        kept,
        fallback: false,
    })
}

fn expect_kind(cfg: &NormConfig, allowed: &[NormKind], op: &str) -> Result<()> {
    if allowed.contains(&cfg.kind) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{op} called with a {} configuration",
            cfg.kind.name()
        )))
    }
}

/// Plain batch normalization in training mode. Updates `stats`.
pub fn bn_forward_train<S: Scalar>(
    x: &Tensor<S>,
    affine: &AffineParams<S>,
    cfg: &NormConfig,
    stats: &mut RunningStats<S>,
) -> Result<(Tensor<S>, NormCache<S>)> {
    expect_kind(cfg, &[NormKind::Bn], "bn_forward_train")?;
    forward_train(x, affine, cfg, Some(stats))
}

/// Filtered batch normalization in training mode. Updates `stats` with the
/// filtered moments.
pub fn fbn_forward_train<S: Scalar>(
    x: &Tensor<S>,
    affine: &AffineParams<S>,
    cfg: &NormConfig,
    stats: &mut RunningStats<S>,
) -> Result<(Tensor<S>, NormCache<S>)> {
    expect_kind(cfg, &[NormKind::Fbn], "fbn_forward_train")?;
    forward_train(x, affine, cfg, Some(stats))
}

pub fn gn_forward<S: Scalar>(
    x: &Tensor<S>,
    affine: &AffineParams<S>,
    cfg: &NormConfig,
) -> Result<(Tensor<S>, NormCache<S>)> {
    expect_kind(cfg, &[NormKind::Gn], "gn_forward")?;
    forward_train(x, affine, cfg, None)
}

pub fn fgn_forward<S: Scalar>(
    x: &Tensor<S>,
    affine: &AffineParams<S>,
    cfg: &NormConfig,
) -> Result<(Tensor<S>, NormCache<S>)> {
    expect_kind(cfg, &[NormKind::Fgn], "fgn_forward")?;
    forward_train(x, affine, cfg, None)
}

/// Training-mode forward for any kind. Batch kinds fold the (filtered)
/// batch moments into `stats` when given; group kinds ignore it.
pub fn forward_train<S: Scalar>(
    x: &Tensor<S>,
    affine: &AffineParams<S>,
    cfg: &NormConfig,
    stats: Option<&mut RunningStats<S>>,
) -> Result<(Tensor<S>, NormCache<S>)> {
    let (y, cache) = forward_slices(x, affine, cfg, cfg.kind.is_filtered())?;
    if let (Some(stats), false) = (stats, cfg.kind.is_grouped()) {
        if stats.channels() != cache.layout.channels {
            return Err(Error::ShapeMismatch {
                expected: vec![cache.layout.channels],
                actual: vec![stats.channels()],
            });
        }
        stats.update(&cache.filtered_mu, &cache.filtered_var, cfg.momentum);
    }
    Ok((y, cache))
}

/// Backward pass for every kind, using the mask saved in `cache`.
pub fn norm_backward<S: Scalar>(
    dy: &Tensor<S>,
    cache: &NormCache<S>,
    affine: &AffineParams<S>,
    cfg: &NormConfig,
) -> Result<NormGrads<S>> {
    if dy.shape() != cache.shape.as_slice() {
        return Err(Error::ShapeMismatch {
            expected: cache.shape.clone(),
            actual: dy.shape().to_vec(),
        });
    }
    let layout = &cache.layout;
    check_affine(affine, layout.channels)?;
    let paper = cfg.grad_mode == GradMode::Paper;
    let eps: S = cast(cfg.epsilon);
    let half: S = cast(0.5);
    let two: S = cast(2.0);
    let one = S::one();
    let sp = layout.spatial;
    let ch = layout.channels;
    let gamma = affine.gamma.data();
    let dyd = dy.data();
    let f = cache.mask.data();
    let xc = cache.centered.data();
    let xh = cache.normalized.data();

    let channel_of = |i: usize| (i / sp) % ch;
    // Per-element weight of the adjoint sums: the mask in paper mode,
    // one in exact mode.
    let w = |i: usize| if paper { f[i] } else { one };

    let mut dx = Tensor::<S>::zeros(dy.shape());
    {
        let dxd = dx.data_mut();
        for s in 0..layout.num_slices() {
            let count = cache.mask_count[s];
            let inv = cache.inv_std[s];
            let var_eps = cache.filtered_var[s] + eps;
            let inv3 = S::one() / (var_eps * var_eps.sqrt());

            let dvar = slice_sum(dyd, layout, s, |i, d| w(i) * (d * gamma[channel_of(i)] * xc[i]))
                * (-half * inv3);
            let dmu_direct = slice_sum(dyd, layout, s, |i, d| w(i) * (d * gamma[channel_of(i)] * -inv));
            let centered_sum = slice_sum(xc, layout, s, |i, v| -two * f[i] * v);
            let dmu = dmu_direct + dvar * centered_sum / count;

            for r in layout.runs(s) {
                for i in r {
                    let mean_path = if paper { dmu } else { dmu * f[i] };
                    dxd[i] = dyd[i] * gamma[channel_of(i)] * inv
                        + dvar * (two * f[i] * xc[i]) / count
                        + mean_path / count;
                }
            }
        }
    }

    let mut dgamma = vec![S::zero(); ch];
    let mut dbeta = vec![S::zero(); ch];
    for n in 0..layout.batch {
        for c in 0..ch {
            let start = (n * ch + c) * sp;
            for i in start..start + sp {
                dbeta[c] += w(i) * dyd[i];
                dgamma[c] += w(i) * (dyd[i] * xh[i]);
            }
        }
    }
    Ok(NormGrads {
        dx,
        dgamma: Tensor::vector(&dgamma),
        dbeta: Tensor::vector(&dbeta),
    })
}

/// Backward pass of filtered batch normalization.
pub fn fbn_backward<S: Scalar>(
    dy: &Tensor<S>,
    cache: &NormCache<S>,
    affine: &AffineParams<S>,
    cfg: &NormConfig,
) -> Result<NormGrads<S>> {
    norm_backward(dy, cache, affine, cfg)
}

/// Inference-mode forward.
///
/// Batch kinds normalize with the running statistics and do no moment
/// computation; group kinds recompute their per-instance statistics exactly
/// as in training.
pub fn norm_forward_infer<S: Scalar>(
    x: &Tensor<S>,
    affine: &AffineParams<S>,
    cfg: &NormConfig,
    stats: &RunningStats<S>,
) -> Result<InferOutput<S>> {
    if cfg.kind.is_grouped() {
        let (y, _) = forward_train(x, affine, cfg, None)?;
        return Ok(InferOutput {
            y,
            warnings: Vec::new(),
        });
    }
    let layout = SliceLayout::for_input(x.shape(), cfg)?;
    check_affine(affine, layout.channels)?;
    if stats.channels() != layout.channels {
        return Err(Error::ShapeMismatch {
            expected: vec![layout.channels],
            actual: vec![stats.channels()],
        });
    }
    let mut warnings = Vec::new();
    if stats.updates == 0 {
        log::warn!("normalization inference with never-updated running statistics");
        warnings.push(NormWarning::UninitializedStats);
    }
    let eps: S = cast(cfg.epsilon);
    let (g, b) = (affine.gamma.data(), affine.beta.data());
    let (rm, rv) = (stats.mean.data(), stats.var.data());
    let inv: Vec<S> = rv.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let sp = layout.spatial;
    let mut y = Tensor::<S>::zeros(x.shape());
    {
        let (xs, yd) = (x.data(), y.data_mut());
        for n in 0..layout.batch {
            for c in 0..layout.channels {
                let start = (n * layout.channels + c) * sp;
                for i in start..start + sp {
                    yd[i] = g[c] * ((xs[i] - rm[c]) * inv[c]) + b[c];
                }
            }
        }
    }
    Ok(InferOutput { y, warnings })
}
