use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::norm::{self, AffineParams, NormConfig};
use crate::stats::{quantile_sorted, trimmed_moments};
use crate::tensor::Tensor;

/// Percentage trimmed from each tail by the trimmed-moment baseline.
pub const TRIM_PERCENT: f64 = 5.0;

/// Elements processed per timing sample, so that small sizes are timed over
/// several calls.
const WORK_PER_SAMPLE: usize = 1 << 21;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    pub repeats: usize,
    /// Element counts of the moment-computation sweep.
    pub sizes: Vec<usize>,
    /// Shapes of the matched layer timings.
    pub shapes: Vec<Vec<usize>>,
    pub t_sigma: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repeats: 7,
            sizes: vec![1 << 12, 1 << 14, 1 << 16, 1 << 18, 1 << 20],
            shapes: vec![vec![256, 84], vec![64, 16, 8, 8]],
            t_sigma: norm::DEFAULT_T_SIGMA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub op: String,
    pub shape: Vec<usize>,
    pub elements: usize,
    /// Seconds per call.
    pub median: f64,
    /// Interquartile range in seconds; absent for a single repeat.
    pub iqr: Option<f64>,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Log-log slope of filtered moment time against element count.
    pub fbn_slope: Option<f64>,
    pub trimmed_slope: Option<f64>,
    /// Filtered over plain forward time per matched shape.
    pub fbn_bn_forward_ratio: Vec<(Vec<usize>, f64)>,
}

fn sample_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

fn time(op: &str, shape: &[usize], repeats: usize, mut f: impl FnMut()) -> BenchRow {
    let elements: usize = shape.iter().product();
    let calls = (WORK_PER_SAMPLE / elements.max(1)).max(1);
    f();
    let mut samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..calls {
                f();
            }
            start.elapsed().as_secs_f64() / calls as f64
        })
        .collect();
    samples.sort_unstable_by(f64::total_cmp);
    BenchRow {
        op: op.to_string(),
        shape: shape.to_vec(),
        elements,
        median: quantile_sorted(&samples, 0.5),
        iqr: (repeats > 1).then(|| quantile_sorted(&samples, 0.75) - quantile_sorted(&samples, 0.25)),
        repeats,
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Per-channel trimmed-moment normalization, forward only.
fn trimmed_normalize(x: &Tensor, eps: f64) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let spatial: usize = x.shape()[2..].iter().product();
    let mut y = x.clone();
    let mut buf = Vec::with_capacity(n * spatial);
    for ch in 0..c {
        buf.clear();
        for b in 0..n {
            let start = (b * c + ch) * spatial;
            buf.extend_from_slice(&x.data()[start..start + spatial]);
        }
        let (m, v) = trimmed_moments(&buf, TRIM_PERCENT).expect("non-empty channel");
        let inv = 1.0 / (v + eps).sqrt();
        for b in 0..n {
            let start = (b * c + ch) * spatial;
            for e in &mut y.data_mut()[start..start + spatial] {
                *e = (*e - m) * inv;
            }
        }
    }
    y
}

pub fn bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 {
        return Err(Error::config("repeats must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bn = NormConfig::bn();
    let fbn = NormConfig::fbn(cfg.t_sigma);
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for shape in &cfg.shapes {
        if shape.len() < 2 || shape.iter().product::<usize>() < 2 {
            return Err(Error::config(format!("bench shape {shape:?} is too small")));
        }
        let x = sample_tensor(shape, &mut rng);
        let dy = sample_tensor(shape, &mut rng);
        let affine = AffineParams::new(shape[1]);
        let bn_fwd = time("bn_forward", shape, cfg.repeats, || {
            black_box(norm::forward_train(&x, &affine, &bn, None).unwrap());
        });
        let fbn_fwd = time("fbn_forward", shape, cfg.repeats, || {
            black_box(norm::forward_train(&x, &affine, &fbn, None).unwrap());
        });
        ratios.push((shape.clone(), fbn_fwd.median / bn_fwd.median));
        rows.push(bn_fwd);
        rows.push(fbn_fwd);
        for (name, c) in [("bn_forward_backward", &bn), ("fbn_forward_backward", &fbn)] {
            rows.push(time(name, shape, cfg.repeats, || {
                let (_, cache) = norm::forward_train(&x, &affine, c, None).unwrap();
                black_box(norm::norm_backward(&dy, &cache, &affine, c).unwrap());
            }));
        }
        rows.push(time("trimmed_forward", shape, cfg.repeats, || {
            black_box(trimmed_normalize(&x, bn.epsilon));
        }));
    }

    let (mut fbn_pts, mut trim_pts) = (Vec::new(), Vec::new());
    for &n in &cfg.sizes {
        if n < 2 {
            return Err(Error::config("sweep sizes must be at least 2"));
        }
        let shape = [n];
        let x = sample_tensor(&shape, &mut rng);
        let f = time("fbn_moments", &shape, cfg.repeats, || {
            black_box(norm::filtered_moments(x.data(), cfg.t_sigma, fbn.epsilon).unwrap());
        });
        let t = time("trimmed_moments", &shape, cfg.repeats, || {
            black_box(trimmed_moments(x.data(), TRIM_PERCENT).unwrap());
        });
        fbn_pts.push((n as f64, f.median));
        trim_pts.push((n as f64, t.median));
        rows.push(f);
        rows.push(t);
    }
    Ok(BenchReport {
        rows,
        fbn_slope: log_log_slope(&fbn_pts),
        trimmed_slope: log_log_slope(&trim_pts),
        fbn_bn_forward_ratio: ratios,
    })
}
