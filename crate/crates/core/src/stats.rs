//! Robust-moment baselines, Gaussian tail arithmetic and the activation
//! percentile profiler.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::models::{Mode, Model};
use crate::tensor::{Scalar, Tensor};

/// Thresholds, in standard deviations, at which exceedances are counted.
pub const EXCEEDANCE_THRESHOLDS: [f64; 4] = [2.0, 4.0, 7.0, 14.0];

fn plain_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mut s = 0.0;
    for v in x {
        s += v;
    }
    let mean = s / n;
    let mut q = 0.0;
    for v in x {
        q += (v - mean) * (v - mean);
    }
    (mean, q / n)
}

/// Elements dropped from each tail for `k_percent` of `n`.
fn tail_count(n: usize, k_percent: f64) -> Result<usize> {
    if !(0.0..50.0).contains(&k_percent) {
        return Err(Error::invalid(format!(
            "k must lie in [0, 50), got {k_percent}"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("no samples"));
    }
    // Guard against 20 * 5 / 100 landing just below 1.
    let t = (k_percent * n as f64 / 100.0 + 1e-9).floor() as usize;
    if n < 2 * t + 1 {
        return Err(Error::invalid(format!(
            "trimming {k_percent}% from both tails of {n} samples leaves nothing"
        )));
    }
    Ok(t)
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    v
}

/// Mean and biased variance after dropping the lowest and highest
/// `k_percent` of samples.
pub fn trimmed_moments(x: &[f64], k_percent: f64) -> Result<(f64, f64)> {
    let t = tail_count(x.len(), k_percent)?;
    let v = sorted(x);
    Ok(plain_moments(&v[t..v.len() - t]))
}

/// Mean and biased variance after clamping the lowest and highest
/// `k_percent` of samples to the nearest retained order statistic.
pub fn winsorized_moments(x: &[f64], k_percent: f64) -> Result<(f64, f64)> {
    let t = tail_count(x.len(), k_percent)?;
    let mut v = sorted(x);
    let n = v.len();
    let (lo, hi) = (v[t], v[n - 1 - t]);
    v[..t].fill(lo);
    v[n - t..].fill(hi);
    Ok(plain_moments(&v))
}

/// `P(|Z| > z)` for a standard normal `Z`.
pub fn gaussian_tail_probability(z: f64) -> f64 {
    libm::erfc(z.max(0.0) / std::f64::consts::SQRT_2)
}

/// Expected number of inputs between two exceedances of `z` sigma when each
/// input yields `elements_per_input` activations.
pub fn expected_outlier_rate(z: f64, elements_per_input: u64) -> Result<f64> {
    if elements_per_input == 0 {
        return Err(Error::invalid("elements_per_input must be positive"));
    }
    Ok(1.0 / (elements_per_input as f64 * gaussian_tail_probability(z)))
}

/// Linear-interpolated quantile of sorted data, `q` in [0, 1].
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Distribution summary of one profiled layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PercentileBands {
    pub layer: String,
    pub count: usize,
    pub min: f64,
    pub p1: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p99: f64,
    pub max: f64,
    /// Counts of `|v| > t` for each entry of [`EXCEEDANCE_THRESHOLDS`].
    pub exceedances: [u64; 4],
}

impl PercentileBands {
    pub fn from_values(layer: impl Into<String>, values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no values to profile"));
        }
        let v = sorted(values);
        let mut exceedances = [0u64; 4];
        for x in &v {
            for (c, t) in exceedances.iter_mut().zip(EXCEEDANCE_THRESHOLDS) {
                if x.abs() > t {
                    *c += 1;
                }
            }
        }
        Ok(Self {
            layer: layer.into(),
            count: v.len(),
            min: v[0],
            p1: quantile_sorted(&v, 0.01),
            p25: quantile_sorted(&v, 0.25),
            p50: quantile_sorted(&v, 0.50),
            p75: quantile_sorted(&v, 0.75),
            p99: quantile_sorted(&v, 0.99),
            max: v[v.len() - 1],
            exceedances,
        })
    }

    pub const CSV_HEADER: [&'static str; 13] = [
        "layer", "count", "min", "p1", "p25", "p50", "p75", "p99", "max", "exceed_2", "exceed_4",
        "exceed_7", "exceed_14",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        let mut row = vec![self.layer.clone(), self.count.to_string()];
        row.extend(
            [self.min, self.p1, self.p25, self.p50, self.p75, self.p99, self.max]
                .iter()
                .map(|v| v.to_string()),
        );
        row.extend(self.exceedances.iter().map(|c| c.to_string()));
        row
    }
}

/// Accumulates every observed value per layer; quantiles are exact.
#[derive(Debug, Default, Clone)]
pub struct ActivationProfiler {
    layers: BTreeMap<String, Vec<f64>>,
}

impl ActivationProfiler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, layer: &str, values: impl IntoIterator<Item = f64>) {
        self.layers.entry(layer.to_string()).or_default().extend(values);
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn bands(&self) -> Result<Vec<PercentileBands>> {
        if self.layers.is_empty() {
            return Err(Error::invalid("no hooked layers were profiled"));
        }
        self.layers
            .iter()
            .map(|(name, values)| PercentileBands::from_values(name.clone(), values))
            .collect()
    }
}

/// Profiles the pre-affine normalized activations of `hooks` (every
/// normalization slot when empty) over `batches`.
pub fn profile_activations<'a, S: Scalar>(
    model: &Model<S>,
    batches: impl IntoIterator<Item = &'a Tensor<S>>,
    hooks: &[&str],
    mode: Mode,
) -> Result<Vec<PercentileBands>> {
    for h in hooks {
        if !model.norm_slots().iter().any(|s| s.slot == *h) {
            return Err(Error::invalid(format!("no normalization layer at `{h}`")));
        }
    }
    let mut profiler = ActivationProfiler::new();
    for x in batches {
        let pass = model.forward_frozen(x, mode)?;
        for (slot, values) in model.pre_affine(&pass)? {
            if hooks.is_empty() || hooks.contains(&slot.as_str()) {
                profiler.record(&slot, values.data().iter().map(|v| v.to_f64_lossy()));
            }
        }
    }
    profiler.bands()
}

/// One-sided paired t-test of `mean(a - b) > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub std_diff: f64,
    pub t: f64,
    pub p_value: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("unpaired samples: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("a paired test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let (t, p) = if sd == 0.0 {
        let p = if mean > 0.0 { 0.0 } else if mean < 0.0 { 1.0 } else { 0.5 };
        (mean.signum() * f64::INFINITY, p)
    } else {
        let t = mean / (sd / n.sqrt());
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::invalid(e.to_string()))?;
        (t, dist.sf(t))
    };
    Ok(PairedTest {
        n: d.len(),
        mean_diff: mean,
        std_diff: sd,
        t,
        p_value: p,
    })
}
