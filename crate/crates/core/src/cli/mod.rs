//! Command-line driver: option merging, experiment commands and their
//! CSV/JSON outputs.
//!
//! Every CSV file starts with a `# filtnorm-csv v1 <schema>` line followed by
//! a named header row. Exit codes: 0 success, 1 gradient check failure,
//! 2 configuration error, 3 runtime error.

pub mod bench;
pub mod gradcheck;
pub mod options;
pub mod output;

use std::ffi::OsString;
use std::time::Instant;

use clap::Parser;
use serde_json::json;

use crate::data::{load_mnist_dir, mnist_dir, synth_gaussian_with_outliers, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::models::{Mode, Model, ModelSpec};
use crate::norm::NormKind;
use crate::stats::{self, gaussian_tail_probability, PercentileBands, EXCEEDANCE_THRESHOLDS};
use crate::tensor::{DType, Scalar};
use crate::train::{
    self, layer_placement_ablation, mean_std, moment_consistency_experiment, paired_seeds, parallel_map,
    ModelActivations, MomentConsistencyConfig, MomentDeviation, Placement, RunRecord,
    SyntheticStreams, PROBE_STEPS,
};

pub use options::{Cli, Command, Options, Resolved};
use output::{fmt_opt, OutDir};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    let base = match &cli.config {
        Some(path) => Options::from_file(path)?,
        None => Options::default(),
    };
    execute(&Resolved {
        command: cli.command,
        o: base.overlay(cli.options),
    })
}

pub fn execute(r: &Resolved) -> Result<i32> {
    match r.command {
        Command::Gradcheck => cmd_gradcheck(r),
        Command::Bench => cmd_bench(r),
        _ => match r.dtype() {
            DType::F32 => dispatch::<f32>(r),
            DType::F64 => dispatch::<f64>(r),
        },
    }
}

fn dispatch<S: Scalar>(r: &Resolved) -> Result<i32> {
    match r.command {
        Command::Train => cmd_train::<S>(r),
        Command::Grid => cmd_grid::<S>(r),
        Command::MomentConsistency => cmd_moment_consistency::<S>(r),
        Command::Landscape => cmd_landscape::<S>(r),
        Command::Profile => cmd_profile::<S>(r),
        Command::Ablation => cmd_ablation::<S>(r),
        Command::Gradcheck | Command::Bench => unreachable!("handled before dispatch"),
    }
    .map(|()| EXIT_OK)
}

pub fn load_data<S: Scalar>(r: &Resolved) -> Result<(Dataset<S>, Dataset<S>)> {
    let dir = mnist_dir(r.o.data_dir.as_deref());
    if !dir.join("train-images-idx3-ubyte").is_file() {
        return Err(Error::config(format!(
            "no MNIST files in {}; pass --data-dir or set {}",
            dir.display(),
            crate::data::DATA_DIR_ENV
        )));
    }
    load_mnist_dir(&dir)
}

/// One training configuration and repetition.
#[derive(Debug, Clone)]
struct Job {
    kind: Option<NormKind>,
    t_sigma: f64,
    batch: usize,
    rep: u64,
}

fn run_jobs<S: Scalar>(
    r: &Resolved,
    jobs: Vec<Job>,
    data: (&Dataset<S>, &Dataset<S>),
    out: Option<&OutDir>,
) -> Result<Vec<RunRecord>> {
    for j in &jobs {
        r.model_spec(j.kind, j.t_sigma, 0)?;
        r.train_config(j.batch, r.iters(), 0)?;
    }
    let results = parallel_map(jobs, r.workers(), |j| {
        let (model_seed, data_seed) = paired_seeds(r.seed(), j.rep);
        let spec = r.model_spec(j.kind, j.t_sigma, model_seed)?;
        let cfg = r.train_config(j.batch, r.iters(), data_seed)?;
        let mut model = Model::<S>::build(&spec)?;
        let rec = train::train(&mut model, data.0, data.1, &cfg)?;
        if let (Some(out), true) = (out, r.checkpoint()) {
            let name = format!("model-{}-b{}-t{}-rep{}.ckpt", kind_name(j.kind), j.batch, j.t_sigma, j.rep);
            train::save_checkpoint(&out.join(&name), &model, None)?;
        }
        Ok::<_, Error>(rec)
    });
    results.into_iter().collect()
}

/// Effective options without unset keys.
fn options_json(r: &Resolved) -> serde_json::Value {
    let mut v = serde_json::to_value(r.effective()).expect("options serialize");
    if let serde_json::Value::Object(map) = &mut v {
        map.retain(|_, v| !v.is_null());
    }
    v
}

fn kind_name(kind: Option<NormKind>) -> &'static str {
    kind.map_or("none", NormKind::name)
}

fn run_json(rec: &RunRecord) -> serde_json::Value {
    json!({
        "label": rec.label,
        "model_seed": rec.model_seed,
        "data_seed": rec.data_seed,
        "final_accuracy": rec.final_accuracy(),
        "final_loss": rec.losses.last(),
        "evals": rec.evals,
    })
}

fn meta(start: Instant, records: &[RunRecord]) -> serde_json::Value {
    json!({
        "version": env!("CARGO_PKG_VERSION"),
        "wall_seconds": start.elapsed().as_secs_f64(),
        "run_wall_seconds": records.iter().map(|r| r.wall_seconds).collect::<Vec<_>>(),
    })
}

pub const CURVE_HEADER: [&str; 4] = ["seed", "iteration", "loss", "test_accuracy"];

fn curve_rows(records: &[RunRecord], reps: &[u64]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (rec, rep) in records.iter().zip(reps) {
        if rec.losses.is_empty() {
            for e in &rec.evals {
                rows.push(vec![rep.to_string(), e.iteration.to_string(), String::new(), e.accuracy.to_string()]);
            }
        }
        for (i, loss) in rec.losses.iter().enumerate() {
            let it = i as u64 + 1;
            rows.push(vec![
                rep.to_string(),
                it.to_string(),
                loss.to_string(),
                fmt_opt(rec.accuracy_at(it)),
            ]);
        }
    }
    rows
}

fn cmd_train<S: Scalar>(r: &Resolved) -> Result<()> {
    let start = Instant::now();
    let (kind, t, batch, seeds) = (r.norm()?, r.tsigma(), r.batch()?, r.seeds()?);
    let jobs: Vec<Job> = (0..seeds as u64)
        .map(|rep| Job { kind, t_sigma: t, batch, rep })
        .collect();
    r.model_spec(kind, t, 0)?;
    r.train_config(batch, r.iters(), 0)?;
    let (train_set, test_set) = load_data::<S>(r)?;
    let out = OutDir::create(&r.out())?;
    let records = run_jobs(r, jobs, (&train_set, &test_set), Some(&out))?;
    let reps: Vec<u64> = (0..seeds as u64).collect();
    out.write_csv("curve.csv", "curve", &CURVE_HEADER, &curve_rows(&records, &reps))?;
    let accs: Vec<f64> = records.iter().filter_map(RunRecord::final_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    out.write_json(
        "summary.json",
        &json!({
            "command": r.command,
            "options": options_json(r),
            "label": records[0].label,
            "runs": records.iter().map(run_json).collect::<Vec<_>>(),
            "mean_accuracy": mean,
            "std_accuracy": std,
            "meta": meta(start, &records),
        }),
    )?;
    println!(
        "{}: {} run(s), accuracy {:.4} +/- {:.4}; wrote {}",
        records[0].label,
        records.len(),
        mean,
        std,
        out.path().display()
    );
    Ok(())
}

pub const GRID_HEADER: [&str; 5] = ["batch_size", "t_sigma", "mean_acc", "std_acc", "runs"];

fn range(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (lo, hi) = xs
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    hi - lo
}

fn cmd_grid<S: Scalar>(r: &Resolved) -> Result<()> {
    let start = Instant::now();
    let (tsigmas, batches, seeds) = (r.tsigmas()?, r.batches()?, r.seeds()?);
    let kind = r.norm()?.ok_or_else(|| Error::config("grid needs a normalization kind"))?;
    let mut jobs = Vec::new();
    for &batch in &batches {
        for &t in &tsigmas {
            for rep in 0..seeds as u64 {
                jobs.push(Job { kind: Some(kind), t_sigma: t, batch, rep });
            }
        }
    }
    r.train_config(batches[0], r.iters(), 0)?;
    let (train_set, test_set) = load_data::<S>(r)?;
    let out = OutDir::create(&r.out())?;
    let records = run_jobs(r, jobs.clone(), (&train_set, &test_set), Some(&out))?;
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for &batch in &batches {
        for &t in &tsigmas {
            let accs: Vec<f64> = jobs
                .iter()
                .zip(&records)
                .filter(|(j, _)| j.batch == batch && j.t_sigma == t)
                .filter_map(|(_, rec)| rec.final_accuracy())
                .collect();
            let (m, s) = mean_std(&accs);
            cells.push((batch, t, m));
            rows.push(vec![batch.to_string(), t.to_string(), m.to_string(), s.to_string(), accs.len().to_string()]);
        }
    }
    out.write_csv("grid.csv", "grid", &GRID_HEADER, &rows)?;
    let t_ranges: Vec<_> = batches
        .iter()
        .map(|&b| json!({"batch_size": b, "range_over_t_sigma": range(cells.iter().filter(|c| c.0 == b).map(|c| c.2))}))
        .collect();
    let b_ranges: Vec<_> = tsigmas
        .iter()
        .map(|&t| json!({"t_sigma": t, "range_over_batch": range(cells.iter().filter(|c| c.1 == t).map(|c| c.2))}))
        .collect();
    out.write_json(
        "summary.json",
        &json!({
            "command": r.command,
            "options": options_json(r),
            "ranges_over_t_sigma": t_ranges,
            "ranges_over_batch": b_ranges,
            "meta": meta(start, &records),
        }),
    )?;
    println!("{} cells; wrote {}", cells.len(), out.path().display());
    Ok(())
}

pub const MOMENT_HEADER: [&str; 7] = [
    "step",
    "outlier",
    "masked",
    "bn_mean_dev",
    "fbn_mean_dev",
    "bn_var_dev",
    "fbn_var_dev",
];

/// Means of the four deviation columns over `rows`.
pub fn mean_deviations<'a>(rows: impl IntoIterator<Item = &'a MomentDeviation>) -> Option<[f64; 4]> {
    let mut acc = [0.0; 4];
    let mut n = 0usize;
    for d in rows {
        for (a, v) in acc.iter_mut().zip([d.bn_mean, d.fbn_mean, d.bn_var, d.fbn_var]) {
            *a += v;
        }
        n += 1;
    }
    (n > 0).then(|| acc.map(|a| a / n as f64))
}

fn deviation_json(m: Option<[f64; 4]>) -> serde_json::Value {
    match m {
        None => serde_json::Value::Null,
        Some([bm, fm, bv, fv]) => json!({
            "bn_mean_dev": bm, "fbn_mean_dev": fm, "mean_ratio": bm / fm,
            "bn_var_dev": bv, "fbn_var_dev": fv, "var_ratio": bv / fv,
        }),
    }
}

fn cmd_moment_consistency<S: Scalar>(r: &Resolved) -> Result<()> {
    let start = Instant::now();
    let cfg = MomentConsistencyConfig {
        large_batch: r.o.large_batch.unwrap_or(128),
        small_batch: r.o.small_batch.unwrap_or(16),
        t_sigma: r.tsigma(),
        epsilon: r.o.epsilon.unwrap_or(crate::norm::DEFAULT_EPSILON),
        steps: r.o.steps.unwrap_or(500),
        seed: r.seed(),
    };
    if cfg.small_batch > cfg.large_batch || cfg.small_batch < 2 {
        return Err(Error::config(format!(
            "need 2 <= small batch ({}) <= large batch ({})",
            cfg.small_batch, cfg.large_batch
        )));
    }
    let source = r.source()?;
    let devs = if source == "synthetic" {
        let (lo, hi) = r.outlier_band();
        let channels = r.o.channels.unwrap_or(16);
        let mut src = SyntheticStreams::new(channels, cfg.large_batch, cfg.steps, r.outlier_rate(), (lo, hi), cfg.seed)
            .map_err(|e| Error::config(e.to_string()))?;
        moment_consistency_experiment(&mut src, &cfg)?
    } else {
        let slot = r.slot();
        let spec = ModelSpec::new(r.arch(), r.seed()).with_norm(&slot, NormKind::Bn);
        spec.validate()?;
        let (train_set, _) = load_data::<S>(r)?;
        let mut src = ModelActivations::new(&spec, &slot, r.optimizer()?, &train_set, cfg.large_batch, cfg.seed)?;
        moment_consistency_experiment(&mut src, &cfg)?
    };
    let out = OutDir::create(&r.out())?;
    let rows: Vec<Vec<String>> = devs
        .iter()
        .map(|d| {
            vec![
                d.step.to_string(),
                d.outlier.map_or_else(String::new, |o| o.to_string()),
                d.masked.to_string(),
                d.bn_mean.to_string(),
                d.fbn_mean.to_string(),
                d.bn_var.to_string(),
                d.fbn_var.to_string(),
            ]
        })
        .collect();
    out.write_csv("moment_consistency.csv", "moment-consistency", &MOMENT_HEADER, &rows)?;
    let all = mean_deviations(&devs);
    let with = mean_deviations(devs.iter().filter(|d| d.outlier == Some(true)));
    out.write_json(
        "summary.json",
        &json!({
            "command": r.command,
            "options": options_json(r),
            "config": cfg,
            "all_steps": deviation_json(all),
            "outlier_steps": deviation_json(with),
            "outlier_step_count": devs.iter().filter(|d| d.outlier == Some(true)).count(),
            "meta": {"wall_seconds": start.elapsed().as_secs_f64()},
        }),
    )?;
    if let Some([bm, fm, bv, fv]) = all {
        println!("mean deviation bn {bm:.4e} fbn {fm:.4e}; variance deviation bn {bv:.4e} fbn {fv:.4e}");
    }
    Ok(())
}

pub fn landscape_header() -> Vec<String> {
    let mut h: Vec<String> = ["norm", "seed", "iteration", "base_loss"].map(String::from).to_vec();
    h.extend(PROBE_STEPS.iter().map(|s| format!("loss_eta_{s}")));
    h.extend(PROBE_STEPS.iter().map(|s| format!("grad_change_eta_{s}")));
    h.extend(["loss_min", "loss_max", "loss_variance", "grad_change_variance"].map(String::from));
    h
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    if v.is_empty() {
        f64::NAN
    } else {
        stats::quantile_sorted(&v, 0.5)
    }
}

fn cmd_landscape<S: Scalar>(r: &Resolved) -> Result<()> {
    let start = Instant::now();
    let (norms, t, batch, seeds) = (r.norms()?, r.tsigma(), r.batch()?, r.seeds()?);
    let mut jobs = Vec::new();
    for &kind in &norms {
        for rep in 0..seeds as u64 {
            jobs.push(Job { kind, t_sigma: t, batch, rep });
        }
    }
    let (train_set, test_set) = load_data::<S>(r)?;
    let out = OutDir::create(&r.out())?;
    let records = run_jobs(r, jobs.clone(), (&train_set, &test_set), None)?;
    let mut rows = Vec::new();
    for (j, rec) in jobs.iter().zip(&records) {
        for p in &rec.probes {
            let mut row = vec![kind_name(j.kind).to_string(), j.rep.to_string(), p.iteration.to_string(), p.base_loss.to_string()];
            row.extend(p.losses.iter().map(f64::to_string));
            row.extend(p.grad_changes.iter().map(f64::to_string));
            row.extend([p.loss_min, p.loss_max, p.loss_variance, p.grad_change_variance].map(|v| v.to_string()));
            rows.push(row);
        }
    }
    let header = landscape_header();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.write_csv("landscape.csv", "landscape", &header_refs, &rows)?;
    let per_norm: Vec<_> = norms
        .iter()
        .map(|&kind| {
            let recs: Vec<&RunRecord> = jobs.iter().zip(&records).filter(|(j, _)| j.kind == kind).map(|(_, r)| r).collect();
            let lv: Vec<f64> = recs.iter().flat_map(|r| r.probes.iter().map(|p| p.loss_variance)).collect();
            let gv: Vec<f64> = recs.iter().flat_map(|r| r.probes.iter().map(|p| p.grad_change_variance)).collect();
            let per_seed: Vec<f64> = recs
                .iter()
                .map(|r| median(&r.probes.iter().map(|p| p.loss_variance).collect::<Vec<_>>()))
                .collect();
            json!({
                "norm": kind_name(kind),
                "median_loss_variance": median(&lv),
                "median_grad_change_variance": median(&gv),
                "per_seed_median_loss_variance": per_seed,
            })
        })
        .collect();
    out.write_json(
        "summary.json",
        &json!({
            "command": r.command,
            "options": options_json(r),
            "norms": per_norm,
            "runs": records.iter().map(run_json).collect::<Vec<_>>(),
            "meta": meta(start, &records),
        }),
    )?;
    println!("{} probed run(s); wrote {}", records.len(), out.path().display());
    Ok(())
}

fn band_rows(bands: &[PercentileBands]) -> Vec<Vec<String>> {
    bands.iter().map(PercentileBands::csv_row).collect()
}

fn cmd_profile<S: Scalar>(r: &Resolved) -> Result<()> {
    let start = Instant::now();
    let bands = if r.source()? == "synthetic" {
        let (lo, hi) = r.outlier_band();
        let spec = SyntheticSpec {
            mean: 0.0,
            std: 1.0,
            outlier_rate: r.outlier_rate(),
            outlier_low: lo,
            outlier_high: hi,
            len: r.o.samples.unwrap_or(100_000),
            seed: r.seed(),
        };
        let sample = synth_gaussian_with_outliers(&spec).map_err(|e| Error::config(e.to_string()))?;
        vec![PercentileBands::from_values("synthetic", sample.values.data())?]
    } else {
        let kind = r.norm()?.ok_or_else(|| Error::config("profiling needs a normalization kind"))?;
        let (model_seed, data_seed) = paired_seeds(r.seed(), 0);
        let spec = r.model_spec(Some(kind), r.tsigma(), model_seed)?;
        let batch = r.batch()?;
        let cfg = r.train_config(batch, r.iters(), data_seed)?;
        let hooks = r.o.hooks.clone().unwrap_or_default();
        let mut model = Model::<S>::build(&spec)?;
        for h in &hooks {
            if !model.norm_slots().iter().any(|s| s.slot == *h) {
                return Err(Error::config(format!("no normalization layer at hook `{h}`")));
            }
        }
        let (train_set, test_set) = load_data::<S>(r)?;
        train::train(&mut model, &train_set, &test_set, &cfg)?;
        let eval = match r.o.eval_limit {
            Some(n) if n < test_set.len() => test_set.truncated(n),
            _ => test_set,
        };
        let xs: Vec<_> = (0..eval.len())
            .step_by(batch)
            .map(|s| eval.gather(&(s..(s + batch).min(eval.len())).collect::<Vec<_>>()).0)
            .collect();
        let hook_refs: Vec<&str> = hooks.iter().map(String::as_str).collect();
        stats::profile_activations(&model, xs.iter(), &hook_refs, Mode::BatchStats)?
    };
    let out = OutDir::create(&r.out())?;
    out.write_csv("profile.csv", "profile", &PercentileBands::CSV_HEADER, &band_rows(&bands))?;
    let expected: Vec<_> = bands
        .iter()
        .map(|b| {
            let e: Vec<f64> = EXCEEDANCE_THRESHOLDS
                .iter()
                .map(|&t| b.count as f64 * gaussian_tail_probability(t))
                .collect();
            json!({"layer": b.layer, "gaussian_expected_exceedances": e, "observed": b.exceedances})
        })
        .collect();
    out.write_json(
        "summary.json",
        &json!({
            "command": r.command,
            "options": options_json(r),
            "thresholds": EXCEEDANCE_THRESHOLDS,
            "layers": expected,
            "meta": {"wall_seconds": start.elapsed().as_secs_f64()},
        }),
    )?;
    println!("{} layer(s) profiled; wrote {}", bands.len(), out.path().display());
    Ok(())
}

pub const ABLATION_HEADER: [&str; 5] = ["placement", "iteration", "mean_acc", "std_acc", "runs"];

fn cmd_ablation<S: Scalar>(r: &Resolved) -> Result<()> {
    let start = Instant::now();
    let kind = r.norm()?.ok_or_else(|| Error::config("ablation needs a normalization kind"))?;
    let base = ModelSpec::new(r.arch(), 0).with_config(r.norm_config(kind, r.tsigma())?);
    let placements = Placement::standard_set(r.arch());
    let cfg = r.train_config(r.batch()?, r.iters(), 0)?;
    let seeds = r.seeds()?;
    let (train_set, test_set) = load_data::<S>(r)?;
    let (rows, records) =
        layer_placement_ablation(&base, kind, &placements, seeds, &cfg, r.seed(), (&train_set, &test_set), r.workers())?;
    let out = OutDir::create(&r.out())?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            vec![
                row.placement.clone(),
                row.iteration.to_string(),
                row.mean_accuracy.to_string(),
                row.std_accuracy.to_string(),
                row.runs.to_string(),
            ]
        })
        .collect();
    out.write_csv("ablation.csv", "ablation", &ABLATION_HEADER, &csv_rows)?;
    out.write_json(
        "summary.json",
        &json!({
            "command": r.command,
            "options": options_json(r),
            "rows": rows,
            "runs": records.iter().map(run_json).collect::<Vec<_>>(),
            "meta": meta(start, &records),
        }),
    )?;
    println!("{} placement(s) x {seeds} seed(s); wrote {}", placements.len(), out.path().display());
    Ok(())
}

pub const GRADCHECK_HEADER: [&str; 9] = [
    "trial",
    "shape",
    "t_sigma",
    "groups",
    "masked",
    "repaired",
    "exact_max_rel_error",
    "paper_max_rel_error",
    "beta_identity_error",
];

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn cmd_gradcheck(r: &Resolved) -> Result<i32> {
    let kind = r.norm()?.ok_or_else(|| Error::config("gradcheck needs a normalization kind"))?;
    let cfg = gradcheck::GradcheckConfig {
        kind,
        trials: r.o.trials.unwrap_or(100),
        t_sigmas: r.tsigmas()?,
        band: r.o.band.unwrap_or(0.1),
        seed: r.seed(),
        epsilon: r.o.epsilon.unwrap_or(crate::norm::DEFAULT_EPSILON),
        num_groups: r.o.groups,
        ..Default::default()
    };
    let report = gradcheck::gradcheck(&cfg)?;
    let out = OutDir::create(&r.out())?;
    let rows: Vec<Vec<String>> = report
        .trials
        .iter()
        .map(|t| {
            vec![
                t.trial.to_string(),
                shape_str(&t.shape),
                t.t_sigma.to_string(),
                t.groups.to_string(),
                t.masked.to_string(),
                t.repaired.to_string(),
                t.exact_max_rel_error.to_string(),
                t.paper_max_rel_error.to_string(),
                t.beta_identity_error.to_string(),
            ]
        })
        .collect();
    out.write_csv("gradcheck.csv", "gradcheck", &GRADCHECK_HEADER, &rows)?;
    out.write_json(
        "summary.json",
        &json!({
            "command": r.command,
            "options": options_json(r),
            "passed": report.passed(),
            "exact_max_rel_error": report.exact_max_rel_error,
            "exact_failures": report.exact_failures,
            "unmasked_trials": report.unmasked_trials,
            "unmasked_paper_passes": report.unmasked_paper_passes,
            "masked_trials_paper_max_rel_error": report.trials.iter().filter(|t| t.masked > 0)
                .map(|t| t.paper_max_rel_error).fold(0.0, f64::max),
            "beta_identity_max_error": report.beta_identity_max_error,
        }),
    )?;
    println!(
        "{} trials of {}: exact max rel error {:.3e} ({} failure(s)); paper mode passes {}/{} unmasked trials; beta identity error {:.3e}",
        cfg.trials,
        kind.name(),
        report.exact_max_rel_error,
        report.exact_failures,
        report.unmasked_paper_passes,
        report.unmasked_trials,
        report.beta_identity_max_error
    );
    Ok(if report.passed() { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub const BENCH_HEADER: [&str; 6] = ["op", "shape", "elements", "median_seconds", "iqr_seconds", "repeats"];

fn cmd_bench(r: &Resolved) -> Result<i32> {
    let defaults = bench::BenchConfig::default();
    let cfg = bench::BenchConfig {
        repeats: r.o.repeats.unwrap_or(defaults.repeats),
        sizes: r.o.sizes.clone().unwrap_or(defaults.sizes),
        t_sigma: r.tsigma(),
        seed: r.seed(),
        ..defaults
    };
    let report = bench::bench(&cfg)?;
    let out = OutDir::create(&r.out())?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|row| {
            vec![
                row.op.clone(),
                shape_str(&row.shape),
                row.elements.to_string(),
                row.median.to_string(),
                fmt_opt(row.iqr),
                row.repeats.to_string(),
            ]
        })
        .collect();
    out.write_csv("bench.csv", "bench", &BENCH_HEADER, &rows)?;
    out.write_json(
        "summary.json",
        &json!({
            "command": r.command,
            "options": options_json(r),
            "fbn_slope": report.fbn_slope,
            "trimmed_slope": report.trimmed_slope,
            "fbn_bn_forward_ratio": report.fbn_bn_forward_ratio,
        }),
    )?;
    for row in &report.rows {
        println!(
            "{:<22} {:>12} median {:>10.3e} s  iqr {}",
            row.op,
            shape_str(&row.shape),
            row.median,
            row.iqr.map_or_else(|| "-".into(), |v| format!("{v:.2e} s"))
        );
    }
    println!(
        "log-log slope: fbn {} trimmed {}",
        report.fbn_slope.map_or_else(|| "-".into(), |v| format!("{v:.3}")),
        report.trimmed_slope.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
    );
    Ok(EXIT_OK)
}
