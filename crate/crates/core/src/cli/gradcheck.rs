use rand::seq::index;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{finite_difference_check, FdEntry, FdOptions};
use crate::error::{Error, Result};
use crate::norm::{self, AffineParams, GradMode, NormCache, NormConfig, NormKind, SliceLayout};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub kind: NormKind,
    pub trials: usize,
    pub t_sigmas: Vec<f64>,
    /// Elements with `| |z| - T | < band` are moved away before checking.
    pub band: f64,
    pub seed: u64,
    /// Largest `[N, C, H, W]` drawn.
    pub max_shape: [usize; 4],
    /// Input elements checked per trial; every affine parameter is checked.
    pub input_points: usize,
    pub tolerance: f64,
    /// Central-difference step, in units of the candidate standard
    /// deviation of the element's slice. Affine parameters use it as is.
    pub step: f64,
    pub epsilon: f64,
    pub num_groups: Option<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            kind: NormKind::Fbn,
            trials: 100,
            t_sigmas: vec![2.0, 4.0, 7.0],
            band: 0.1,
            seed: 0,
            max_shape: [32, 16, 8, 8],
            input_points: 64,
            tolerance: 1e-5,
            step: 3e-5,
            epsilon: norm::DEFAULT_EPSILON,
            num_groups: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub trial: usize,
    pub shape: Vec<usize>,
    pub t_sigma: f64,
    pub groups: usize,
    pub masked: usize,
    pub repaired: usize,
    pub exact_max_rel_error: f64,
    pub paper_max_rel_error: f64,
    /// Largest `|(dbeta_exact - dbeta_paper) - sum((1 - f) dy)|` over channels.
    pub beta_identity_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub trials: Vec<TrialReport>,
    pub exact_max_rel_error: f64,
    pub exact_failures: usize,
    /// Trials where nothing was masked out.
    pub unmasked_trials: usize,
    /// Unmasked trials where the paper-mode gradient also passed.
    pub unmasked_paper_passes: usize,
    pub beta_identity_max_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.exact_failures == 0
    }
}

fn draw_shape(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> (Vec<usize>, usize) {
    let [mn, mc, mh, mw] = cfg.max_shape;
    let n = rng.random_range(2..=mn.max(2));
    let spatial_rank = rng.random_bool(0.75);
    let (h, w) = if spatial_rank {
        (rng.random_range(1..=mh.max(1)), rng.random_range(1..=mw.max(1)))
    } else {
        (1, 1)
    };
    let (c, g) = if cfg.kind.is_grouped() {
        let g = cfg.num_groups.unwrap_or_else(|| [1, 2, 4][rng.random_range(0..3)]).min(mc.max(1));
        let per = rng.random_range(1..=(mc / g).max(1));
        // Each group slice needs two elements.
        let per = if per * h * w < 2 { 2 } else { per };
        (g * per, g)
    } else {
        (rng.random_range(1..=mc.max(1)), 1)
    };
    let shape = if spatial_rank { vec![n, c, h, w] } else { vec![n, c] };
    (shape, g)
}

fn draw_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    let scale = rng.random_range(0.5..3.0);
    let shift = rng.random_range(-2.0..2.0);
    let data = (0..len)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            let v = if rng.random_bool(0.02) { v * 15.0 } else { v };
            shift + scale * v
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Pushes elements out of the band around the threshold until none remain.
fn repair(x: &mut Tensor, affine: &AffineParams, cfg: &NormConfig, band: f64) -> Result<(NormCache, usize)> {
    let mut moved_total = 0;
    for _ in 0..50 {
        let (_, cache) = norm::forward_train(x, affine, cfg, None)?;
        if !cfg.kind.is_filtered() || cache.min_threshold_gap(cfg.t_sigma) >= band {
            return Ok((cache, moved_total));
        }
        let layout = cache.layout;
        let t = cfg.t_sigma;
        for s in 0..layout.num_slices() {
            let (mu, sigma) = (cache.candidate_mu[s], cache.candidate_sigma[s]);
            for r in layout.runs(s) {
                for i in r {
                    let z = (x.data()[i] - mu) / sigma;
                    if (z.abs() - t).abs() < band {
                        let target = if z.abs() < t { t - 3.0 * band } else { t + 3.0 * band };
                        x.data_mut()[i] = mu + sigma * z.signum() * target.max(0.0);
                        moved_total += 1;
                    }
                }
            }
        }
    }
    Err(Error::invalid("could not clear the threshold band"))
}

fn max_rel(entries: &[FdEntry], analytic: &Tensor, floor: f64) -> f64 {
    entries
        .iter()
        .map(|e| {
            let a = analytic.data()[e.index];
            (a - e.numeric).abs() / a.abs().max(e.numeric.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

fn weighted_output(x: &Tensor, affine: &AffineParams, cfg: &NormConfig, w: &Tensor) -> f64 {
    let (y, _) = norm::forward_train(x, affine, cfg, None).expect("validated input");
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn channel_of(i: usize, layout: &SliceLayout) -> usize {
    (i / layout.spatial) % layout.channels
}

pub fn run_trial(cfg: &GradcheckConfig, trial: usize) -> Result<TrialReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(trial as u64));
    let (shape, groups) = draw_shape(&mut rng, cfg);
    let t_sigma = cfg.t_sigmas[rng.random_range(0..cfg.t_sigmas.len())];
    let mut ncfg = NormConfig::default().with_kind(cfg.kind).with_epsilon(cfg.epsilon);
    ncfg.t_sigma = t_sigma;
    ncfg.num_groups = groups;
    let c = shape[1];
    let gamma: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let affine = AffineParams::from_values(&gamma, &beta)?;
    let mut x = draw_input(&mut rng, &shape);
    let (cache, repaired) = repair(&mut x, &affine, &ncfg, cfg.band)?;
    let w = Tensor::new(shape.clone(), (0..x.len()).map(|_| rng.sample(StandardNormal)).collect())?;

    let exact = norm::norm_backward(&w, &cache, &affine, &ncfg.with_grad_mode(GradMode::Exact))?;
    let paper = norm::norm_backward(&w, &cache, &affine, &ncfg.with_grad_mode(GradMode::Paper))?;

    let points = cfg.input_points.min(x.len());
    let mut idx = index::sample(&mut rng, x.len(), points).into_vec();
    idx.sort_unstable();
    let mut steps = vec![cfg.step; x.len()];
    for s in 0..cache.layout.num_slices() {
        for r in cache.layout.runs(s) {
            steps[r].fill(cfg.step * cache.candidate_sigma[s]);
        }
    }
    let opts = FdOptions {
        step: cfg.step,
        steps: Some(steps),
        tolerance: cfg.tolerance,
        indices: Some(idx),
        ..FdOptions::default()
    };
    let fx = finite_difference_check(|xp| weighted_output(xp, &affine, &ncfg, &w), &x, &exact.dx, &opts);
    let all = FdOptions {
        step: cfg.step,
        tolerance: cfg.tolerance,
        ..FdOptions::default()
    };
    let gamma_t = Tensor::vector(&gamma);
    let beta_t = Tensor::vector(&beta);
    let fg = finite_difference_check(
        |g| weighted_output(&x, &AffineParams::from_values(g.data(), &beta).unwrap(), &ncfg, &w),
        &gamma_t,
        &exact.dgamma,
        &all,
    );
    let fb = finite_difference_check(
        |b| weighted_output(&x, &AffineParams::from_values(&gamma, b.data()).unwrap(), &ncfg, &w),
        &beta_t,
        &exact.dbeta,
        &all,
    );
    let floor = opts.denominator_floor;
    let exact_max = fx.max_rel_error.max(fg.max_rel_error).max(fb.max_rel_error);
    let paper_max = max_rel(&fx.entries, &paper.dx, floor)
        .max(max_rel(&fg.entries, &paper.dgamma, floor))
        .max(max_rel(&fb.entries, &paper.dbeta, floor));

    let mut predicted = vec![0.0; c];
    for (i, (&f, &dy)) in cache.mask.data().iter().zip(w.data()).enumerate() {
        predicted[channel_of(i, &cache.layout)] += (1.0 - f) * dy;
    }
    let beta_identity_error = (0..c)
        .map(|k| ((exact.dbeta.data()[k] - paper.dbeta.data()[k]) - predicted[k]).abs())
        .fold(0.0, f64::max);

    Ok(TrialReport {
        trial,
        shape,
        t_sigma,
        groups,
        masked: cache.num_masked(),
        repaired,
        exact_max_rel_error: exact_max,
        paper_max_rel_error: paper_max,
        beta_identity_error,
    })
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.trials == 0 || cfg.t_sigmas.is_empty() {
        return Err(Error::config("gradcheck needs at least one trial and one threshold"));
    }
    if cfg.band.is_nan() || cfg.band < 0.0 {
        return Err(Error::config("band must be non-negative"));
    }
    let trials = (0..cfg.trials).map(|t| run_trial(cfg, t)).collect::<Result<Vec<_>>>()?;
    let unmasked: Vec<&TrialReport> = trials.iter().filter(|t| t.masked == 0).collect();
    Ok(GradcheckReport {
        exact_max_rel_error: trials.iter().map(|t| t.exact_max_rel_error).fold(0.0, f64::max),
        exact_failures: trials.iter().filter(|t| t.exact_max_rel_error.is_nan() || t.exact_max_rel_error >= cfg.tolerance).count(),
        unmasked_trials: unmasked.len(),
        unmasked_paper_passes: unmasked.iter().filter(|t| t.paper_max_rel_error < cfg.tolerance).count(),
        beta_identity_max_error: trials.iter().map(|t| t.beta_identity_error).fold(0.0, f64::max),
        config: cfg.clone(),
        trials,
    })
}
