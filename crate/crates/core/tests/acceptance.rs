//! End-to-end acceptance report: one PASS/FAIL line per criterion.
//!
//! MNIST is read from `$FILTNORM_DATA_DIR` (or `data/mnist`). The process
//! exits non-zero when a deterministic criterion (1-4, 9) fails or the
//! harness itself errors; the empirical criteria are reported only.

use std::time::Instant;

use filtnorm::cli::bench::{bench, BenchConfig};
use filtnorm::cli::gradcheck::{gradcheck, GradcheckConfig};
use filtnorm::data::{load_mnist_dir, mnist_dir, Dataset};
use filtnorm::models::{Model, ModelSpec};
use filtnorm::norm::{
    bn_forward_train, fbn_forward_train, fgn_forward, filtered_moments, forward_train, gn_forward, norm_backward,
    AffineParams, GradMode, NormCache, NormConfig, NormKind, RunningStats,
};
use filtnorm::stats::{expected_outlier_rate, gaussian_tail_probability, paired_t_test};
use filtnorm::train::{
    self, default_workers, mean_std, moment_consistency_experiment, paired_seeds, parallel_map,
    MomentConsistencyConfig, OptimizerConfig, RunRecord, SyntheticStreams, TrainConfig,
};
use filtnorm::Tensor;
use mimalloc::MiMalloc;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

type Outcome = Result<(bool, String), String>;

type Check = (u32, &'static str, bool, fn() -> Outcome);

struct Report {
    hard_failures: usize,
    results: Vec<(u32, bool)>,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, hard: bool, start: Instant, outcome: Outcome) {
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {tag} {name}: {detail} [{secs:.1}s]");
        if !pass && hard {
            self.hard_failures += 1;
        }
        self.results.push((id, pass));
    }
}

fn gradient_oracle() -> Outcome {
    let r = gradcheck(&GradcheckConfig::default()).map_err(|e| e.to_string())?;
    Ok((
        r.passed() && r.exact_max_rel_error < 1e-5 && r.trials.len() == 100,
        format!(
            "{} trials, exact max rel error {:.3e}, failures {}",
            r.trials.len(),
            r.exact_max_rel_error,
            r.exact_failures
        ),
    ))
}

fn random_case(rng: &mut ChaCha8Rng, grouped: bool) -> (Tensor, Tensor, AffineParams, usize) {
    let n = rng.random_range(2..9usize);
    let groups = [1usize, 2, 4][rng.random_range(0..3)];
    let c = if grouped { groups * rng.random_range(1..4usize) } else { rng.random_range(1..9usize) };
    let spatial = [1usize, 2, 4, 9][rng.random_range(0..4)];
    let (h, w) = if grouped && c / groups * spatial < 2 { (2, 1) } else { (spatial, 1) };
    let shape = vec![n, c, h, w];
    let len: usize = shape.iter().product();
    let scale = rng.random_range(0.1..10.0);
    let mut draw = |len| -> Vec<f64> {
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect()
    };
    let x = Tensor::new(shape.clone(), draw(len)).unwrap();
    let dy = Tensor::new(shape, draw(len)).unwrap();
    let g: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
    let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    (x, dy, AffineParams::from_values(&g, &b).unwrap(), groups)
}

fn grads_equal(dy: &Tensor, a: &NormCache, b: &NormCache, affine: &AffineParams, ca: &NormConfig, cb: &NormConfig) -> bool {
    [GradMode::Exact, GradMode::Paper].into_iter().all(|m| {
        let ga = norm_backward(dy, a, affine, &ca.with_grad_mode(m)).unwrap();
        let gb = norm_backward(dy, b, affine, &cb.with_grad_mode(m)).unwrap();
        ga.dx.data() == gb.dx.data() && ga.dgamma.data() == gb.dgamma.data() && ga.dbeta.data() == gb.dbeta.data()
    })
}

fn empty_filter_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut batch_ok, mut group_ok) = (0, 0);
    let trials = 1000;
    for _ in 0..trials {
        let (x, dy, affine, _) = random_case(&mut rng, false);
        let (bn, fbn) = (NormConfig::bn(), NormConfig::fbn(1e6));
        let c = affine.channels();
        let (mut rb, mut rf) = (RunningStats::new(c), RunningStats::new(c));
        let (yb, cb) = bn_forward_train(&x, &affine, &bn, &mut rb).map_err(|e| e.to_string())?;
        let (yf, cf) = fbn_forward_train(&x, &affine, &fbn, &mut rf).map_err(|e| e.to_string())?;
        if yb.data() == yf.data()
            && rb.mean.data() == rf.mean.data()
            && rb.var.data() == rf.var.data()
            && grads_equal(&dy, &cb, &cf, &affine, &bn, &fbn)
        {
            batch_ok += 1;
        }

        let (x, dy, affine, groups) = random_case(&mut rng, true);
        let (gn, fgn) = (NormConfig::gn(groups), NormConfig::fgn(groups, 1e6));
        let (yg, cg) = gn_forward(&x, &affine, &gn).map_err(|e| e.to_string())?;
        let (yh, ch) = fgn_forward(&x, &affine, &fgn).map_err(|e| e.to_string())?;
        if yg.data() == yh.data() && grads_equal(&dy, &cg, &ch, &affine, &gn, &fgn) {
            group_ok += 1;
        }
    }
    Ok((
        batch_ok == trials && group_ok == trials,
        format!("bit-identical FBN/BN {batch_ok}/{trials}, FGN/GN {group_ok}/{trials}"),
    ))
}

fn masked_subset_invariant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    let mut slices = 0;
    for trial in 0..500 {
        let grouped = trial % 2 == 1;
        let (mut x, _, _, groups) = random_case(&mut rng, grouped);
        let len = x.len();
        for _ in 0..rng.random_range(1..4usize) {
            let i = rng.random_range(0..len);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            x.data_mut()[i] += sign * rng.random_range(20.0..1e4);
        }
        let t = [1.5, 2.0, 3.0][rng.random_range(0..3)];
        let cfg = if grouped { NormConfig::fgn(groups, t) } else { NormConfig::fbn(t) };
        let affine = AffineParams::new(x.shape()[1]);
        let (_, cache) = forward_train(&x, &affine, &cfg, None).map_err(|e| e.to_string())?;
        let layout = cache.layout;
        for s in 0..layout.num_slices() {
            let kept: Vec<f64> = layout
                .runs(s)
                .flatten()
                .filter(|&i| cache.mask.data()[i] == 1.0)
                .map(|i| cache.normalized.data()[i])
                .collect();
            let k = kept.len() as f64;
            let m = kept.iter().sum::<f64>() / k;
            let var = kept.iter().map(|h| (h - m) * (h - m)).sum::<f64>() / k;
            let v = cache.filtered_var[s];
            worst_mean = worst_mean.max(m.abs());
            worst_var = worst_var.max((var - v / (v + cfg.epsilon)).abs());
            slices += 1;
        }
    }
    Ok((
        worst_mean < 1e-10 && worst_var < 1e-10,
        format!("{slices} slices, max |mean| {worst_mean:.2e}, max variance error {worst_var:.2e}"),
    ))
}

fn outlier_robustness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mu0, sd0) = (3.0, 2.0);
    let clean: Vec<f64> = (0..255)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mu0 + sd0 * z
        })
        .collect();
    let n = clean.len() as f64;
    let cm = clean.iter().sum::<f64>() / n;
    let cv = clean.iter().map(|v| (v - cm) * (v - cm)).sum::<f64>() / n;
    let cs = cv.sqrt();
    let outlier = cm + 1e6 * cs;
    let mut with = clean.clone();
    with.push(outlier);

    let fm = filtered_moments(&with, 2.0, 1e-5).map_err(|e| e.to_string())?;
    let dmu = (fm.mean - cm).abs() / cs;
    let dsigma = (fm.var.sqrt() - cs).abs() / cs;

    let x = Tensor::new(vec![256, 1], with).unwrap();
    let affine = AffineParams::new(1);
    let (_, bn) = forward_train(&x, &affine, &NormConfig::bn(), None).map_err(|e| e.to_string())?;
    let shift = bn.filtered_mu[0] - cm;
    let analytic = 1e6 / 256.0 * cs;
    let shift_err = (shift / analytic - 1.0).abs();
    Ok((
        dmu < 1e-6 && dsigma < 1e-6 && shift_err < 0.01,
        format!(
            "FBN relative change mu' {dmu:.2e}, sigma' {dsigma:.2e}; BN shift {:.1} sigma vs analytic {:.1} ({:.3}% off)",
            shift / cs,
            analytic / cs,
            100.0 * shift_err
        ),
    ))
}

fn moment_consistency() -> Outcome {
    let cfg = MomentConsistencyConfig::default();
    let mut src = SyntheticStreams::new(16, cfg.large_batch, cfg.steps, 0.005, (15.0, 20.0), cfg.seed)
        .map_err(|e| e.to_string())?;
    let devs = moment_consistency_experiment(&mut src, &cfg).map_err(|e| e.to_string())?;
    let n = devs.len() as f64;
    let avg = |f: fn(&train::MomentDeviation) -> f64| devs.iter().map(f).sum::<f64>() / n;
    let (bm, fm, bv, fv) = (avg(|d| d.bn_mean), avg(|d| d.fbn_mean), avg(|d| d.bn_var), avg(|d| d.fbn_var));
    let (rm, rv) = (bm / fm, bv / fv);
    Ok((
        devs.len() >= 500 && rm >= 2.0 && rv >= 2.0,
        format!(
            "{} steps; mean deviation BN {bm:.4e} FBN {fm:.4e} (x{rm:.2}); variance deviation BN {bv:.4e} FBN {fv:.4e} (x{rv:.2}); need x2 each",
            devs.len()
        ),
    ))
}

fn tail_constants() -> Outcome {
    let p = gaussian_tail_probability(7.0);
    let rel_p = (p * 390_682_215_445.0 - 1.0).abs();
    let rate = expected_outlier_rate(7.0, 512 * 16 * 16).map_err(|e| e.to_string())?;
    let rel_r = (rate / 2_980_668.0 - 1.0).abs();
    Ok((
        rel_p < 1e-3 && rel_r < 1e-3,
        format!("P(|Z|>7) = {p:.6e} ({:.4}% off), inputs between outliers {rate:.0} ({:.4}% off)", 100.0 * rel_p, 100.0 * rel_r),
    ))
}

fn complexity_shape() -> Outcome {
    let r = bench(&BenchConfig::default()).map_err(|e| e.to_string())?;
    let (f, t) = (r.fbn_slope.ok_or("no slope")?, r.trimmed_slope.ok_or("no slope")?);
    let ratios: Vec<String> = r
        .fbn_bn_forward_ratio
        .iter()
        .map(|(s, q)| format!("{s:?} {q:.2}"))
        .collect();
    Ok((
        (0.9..=1.15).contains(&f) && t > f,
        format!("FBN slope {f:.3}, trimmed slope {t:.3}; FBN/BN forward ratio {}", ratios.join(", ")),
    ))
}

#[derive(Clone, Copy)]
struct Job {
    kind: Option<NormKind>,
    t_sigma: f64,
    batch: usize,
    iterations: u64,
    eval_every: u64,
    probe_every: u64,
    rep: u64,
}

fn run_job(job: Job, data: &(Dataset<f32>, Dataset<f32>)) -> filtnorm::Result<RunRecord> {
    let (model_seed, data_seed) = paired_seeds(0, job.rep);
    let mut spec = ModelSpec::lenet5(model_seed);
    if let Some(kind) = job.kind {
        let mut cfg = NormConfig::default().with_kind(kind);
        if kind.is_filtered() {
            cfg.t_sigma = job.t_sigma;
        }
        spec = spec.with_config(cfg).with_norm("fc84", kind);
    }
    let cfg = TrainConfig {
        iterations: job.iterations,
        batch_size: job.batch,
        eval_every: job.eval_every,
        eval_limit: None,
        eval_batch: 1000,
        data_seed,
        optimizer: OptimizerConfig::sgd(0.01, 0.9),
        probe_every: job.probe_every,
    };
    let mut model = Model::<f32>::build(&spec)?;
    train::train(&mut model, &data.0, &data.1, &cfg)
}

fn run_all(jobs: Vec<Job>, data: &(Dataset<f32>, Dataset<f32>), what: &str) -> Result<Vec<RunRecord>, String> {
    let start = Instant::now();
    let total = jobs.len();
    let out = parallel_map(jobs, default_workers(), |j| run_job(j, data));
    eprintln!("  {what}: {total} runs in {:.0}s", start.elapsed().as_secs_f64());
    out.into_iter().collect::<filtnorm::Result<Vec<_>>>().map_err(|e| e.to_string())
}

const SEEDS: u64 = 10;

fn reps(kind: Option<NormKind>, t_sigma: f64, batch: usize, iterations: u64, eval_every: u64) -> Vec<Job> {
    (0..SEEDS)
        .map(|rep| Job {
            kind,
            t_sigma,
            batch,
            iterations,
            eval_every,
            probe_every: 0,
            rep,
        })
        .collect()
}

fn accuracies(runs: &[RunRecord], iteration: u64) -> Vec<f64> {
    runs.iter().map(|r| r.accuracy_at(iteration).expect("evaluated")).collect()
}

fn range(xs: &[f64]) -> f64 {
    xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_unstable_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

struct Training {
    none: Vec<RunRecord>,
    bn: Vec<RunRecord>,
    fbn: Vec<RunRecord>,
}

fn mnist_training(data: &(Dataset<f32>, Dataset<f32>)) -> Result<(Training, Outcome), String> {
    let none = run_all(reps(None, 0.0, 256, 2000, 1000), data, "no normalization")?;
    let bn = run_all(reps(Some(NormKind::Bn), 0.0, 256, 2000, 1000), data, "BN")?;
    let fbn = run_all(reps(Some(NormKind::Fbn), 4.0, 256, 2000, 1000), data, "FBN T=4")?;
    let (a0, a1, a2) = (accuracies(&none, 2000), accuracies(&bn, 2000), accuracies(&fbn, 2000));
    let (m0, s0) = mean_std(&a0);
    let (m1, s1) = mean_std(&a1);
    let (m2, s2) = mean_std(&a2);
    let test = paired_t_test(&a2, &a0).map_err(|e| e.to_string())?;
    let outcome = Ok((
        m2 >= m1 && m1 >= m0 && test.p_value < 0.05,
        format!(
            "accuracy NO-BN {m0:.4}±{s0:.4}, BN {m1:.4}±{s1:.4}, FBN(T=4) {m2:.4}±{s2:.4}; FBN-NO-BN t={:.2} p={:.2e}",
            test.t, test.p_value
        ),
    ));
    Ok((Training { none, bn, fbn }, outcome))
}

fn t_sigma_robustness(data: &(Dataset<f32>, Dataset<f32>), base: &Training) -> Outcome {
    let mut by_t = Vec::new();
    for t in [2.0, 3.0, 4.0, 5.0, 7.0] {
        let acc = if t == 4.0 {
            accuracies(&base.fbn, 1000)
        } else {
            accuracies(&run_all(reps(Some(NormKind::Fbn), t, 256, 1000, 0), data, &format!("FBN T={t} batch 256"))?, 1000)
        };
        by_t.push((t, mean_std(&acc).0));
    }
    let mut by_batch = Vec::new();
    for b in [16usize, 64] {
        let runs = run_all(reps(Some(NormKind::Fbn), 4.0, b, 1000, 0), data, &format!("FBN T=4 batch {b}"))?;
        by_batch.push((b, mean_std(&accuracies(&runs, 1000)).0));
    }
    by_batch.push((256, by_t[2].1));
    let rt = range(&by_t.iter().map(|c| c.1).collect::<Vec<_>>());
    let rb = range(&by_batch.iter().map(|c| c.1).collect::<Vec<_>>());
    let fmt_t: Vec<String> = by_t.iter().map(|(t, a)| format!("T={t}:{a:.4}")).collect();
    let fmt_b: Vec<String> = by_batch.iter().map(|(b, a)| format!("b={b}:{a:.4}")).collect();
    Ok((
        rt < rb,
        format!(
            "range over T {rt:.4} ({}) vs range over batch {rb:.4} ({})",
            fmt_t.join(" "),
            fmt_b.join(" ")
        ),
    ))
}

fn landscape(data: &(Dataset<f32>, Dataset<f32>)) -> Outcome {
    let seeds = 5;
    let mut jobs = Vec::new();
    for rep in 0..seeds {
        for (kind, t) in [(NormKind::Bn, 0.0), (NormKind::Fbn, 2.0)] {
            jobs.push(Job {
                kind: Some(kind),
                t_sigma: t,
                batch: 64,
                iterations: 3000,
                eval_every: 0,
                probe_every: 1,
                rep,
            });
        }
    }
    let runs = run_all(jobs, data, "landscape")?;
    let series = |r: &RunRecord| -> Vec<f64> { r.probes.iter().map(|p| p.loss_variance).collect() };
    let (mut bn_all, mut fbn_all, mut wins) = (Vec::new(), Vec::new(), 0);
    for pair in runs.chunks(2) {
        let (b, f) = (series(&pair[0]), series(&pair[1]));
        if median(f.clone()) < median(b.clone()) {
            wins += 1;
        }
        bn_all.extend(b);
        fbn_all.extend(f);
    }
    let n = bn_all.len();
    let (mb, mf) = (median(bn_all), median(fbn_all));
    Ok((
        mf < mb,
        format!("median loss variance over {n} probes: BN {mb:.4e}, FBN(T=2) {mf:.4e}; FBN lower in {wins}/{seeds} seeds"),
    ))
}

fn main() {
    let mut report = Report {
        hard_failures: 0,
        results: Vec::new(),
    };
    let checks: [Check; 7] = [
        (1, "gradient oracle", true, gradient_oracle),
        (2, "empty-filter equivalence", true, empty_filter_equivalence),
        (3, "masked-subset normalization", true, masked_subset_invariant),
        (4, "outlier robustness", true, outlier_robustness),
        (9, "tail-probability constants", true, tail_constants),
        (10, "complexity shape", false, complexity_shape),
        (5, "moment consistency", false, moment_consistency),
    ];
    for (id, name, hard, f) in checks {
        let start = Instant::now();
        report.record(id, name, hard, start, f());
    }

    let dir = mnist_dir(None);
    let start = Instant::now();
    match load_mnist_dir::<f32>(&dir) {
        Err(e) => {
            let msg = format!("MNIST unavailable in {} ({e}); set FILTNORM_DATA_DIR", dir.display());
            for (id, name) in [(6, "MNIST training"), (7, "T_sigma robustness"), (8, "landscape smoothness")] {
                report.record(id, name, false, start, Err(msg.clone()));
            }
        }
        Ok(data) => {
            match mnist_training(&data) {
                Ok((base, outcome)) => {
                    report.record(6, "MNIST training", false, start, outcome);
                    let start = Instant::now();
                    report.record(7, "T_sigma robustness", false, start, t_sigma_robustness(&data, &base));
                    drop((base.none, base.bn));
                }
                Err(e) => {
                    report.record(6, "MNIST training", false, start, Err(e.clone()));
                    report.record(7, "T_sigma robustness", false, start, Err(e));
                }
            }
            let start = Instant::now();
            report.record(8, "landscape smoothness", false, start, landscape(&data));
        }
    }

    report.results.sort_unstable();
    let passed = report.results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed}/{} criteria pass", report.results.len());
    if report.hard_failures > 0 {
        eprintln!("{} deterministic criteria failed", report.hard_failures);
        std::process::exit(1);
    }
}
