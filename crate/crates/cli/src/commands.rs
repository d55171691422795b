use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use pod_core::baselines::{self, SubsampleSettings};
use pod_core::data::parse_predictors_csv;
use pod_core::engine::CrossFit;
use pod_core::sim::{self, FactorRegime, StudyReport};
use pod_core::{
    load_csv, BaselineMethod, BaselineResult, CenterScale, Dataset, LearnerSpec, Loss, PODConfig, PODResult,
    PodError, ReducerFit, ReducerSpec, ResponseSpec, Result, Scenario, StudyConfig, TestResult, DEFAULT_SEED,
};
use serde::Serialize;

use crate::args::{BaselineArgs, PodArgs, ResponseKindArg, SimulateArgs, TestArgs};
use crate::manifest::{read, to_json, BaselineSettings, DataSource, InputDigest, Job};

pub const RESULT_FILE: &str = "result.json";

/// Files to write plus a human-readable summary for stdout.
pub struct Outcome {
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub summary: String,
}

fn flag_error(flag: &str, msg: impl std::fmt::Display) -> PodError {
    let msg = msg.to_string();
    let msg = msg.strip_prefix("invalid configuration: ").unwrap_or(&msg);
    PodError::Config(format!("--{flag}: {msg}"))
}

fn seed_or_default(seed: Option<u64>, notes: &mut Vec<String>) -> u64 {
    seed.unwrap_or_else(|| {
        notes.push(format!("no --seed given, using the default seed {DEFAULT_SEED}"));
        DEFAULT_SEED
    })
}

pub fn resolve_pod(args: &PodArgs, notes: &mut Vec<String>) -> Result<(DataSource, PODConfig)> {
    let categorical = args.data.response_kind == ResponseKindArg::Categorical;
    let loss = match &args.loss {
        Some(text) => text.parse::<Loss>().map_err(|e| flag_error("loss", e))?,
        None if categorical => Loss::cross_entropy(),
        None => Loss::Squared,
    };
    let mut reducer: ReducerSpec = args.reducer.parse().map_err(|e| flag_error("reducer", e))?;
    if let Some(h) = args.slices {
        match &mut reducer {
            ReducerSpec::Sir { slices } | ReducerSpec::Dr { slices } => *slices = h,
            other => return Err(flag_error("slices", format!("does not apply to the {other} reducer"))),
        }
    }
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(flag_error("alpha", format!("must lie in (0, 1), got {}", args.alpha)));
    }
    if !(0.0..1.0).contains(&args.tau) {
        return Err(flag_error("tau", format!("must lie in [0, 1), got {}", args.tau)));
    }
    if args.folds < 2 {
        return Err(flag_error("folds", format!("must be >= 2, got {}", args.folds)));
    }
    if args.dmax < 1 {
        return Err(flag_error("dmax", "must be >= 1"));
    }
    if args.inner_folds < 2 {
        return Err(flag_error("inner-folds", format!("must be >= 2, got {}", args.inner_folds)));
    }
    let learners = match &args.learners {
        Some(text) => LearnerSpec::parse_list(text).map_err(|e| flag_error("learners", e))?,
        None => LearnerSpec::default_candidates(&loss),
    };
    let reducer_fit: ReducerFit = args.reducer_fit.parse().map_err(|e| flag_error("reducer-fit", e))?;
    let config = PODConfig {
        k_folds: args.folds,
        d_max: args.dmax,
        tau: args.tau,
        alpha: args.alpha,
        loss,
        reducer,
        learners,
        reducer_fit,
        inner_folds: args.inner_folds,
        seed: seed_or_default(args.seed, notes),
    };
    config.validate()?;
    let source = DataSource {
        path: args.data.data.clone(),
        response: args.data.response.clone(),
        categorical,
    };
    Ok((source, config))
}

pub fn resolve_determine(args: &PodArgs, notes: &mut Vec<String>) -> Result<Job> {
    let (data, config) = resolve_pod(args, notes)?;
    Ok(Job::Determine { data, config })
}

pub fn resolve_test(args: &TestArgs, notes: &mut Vec<String>) -> Result<Job> {
    let (data, config) = resolve_pod(&args.pod, notes)?;
    if args.d >= config.d_max {
        return Err(flag_error(
            "d",
            format!("must be below --dmax ({}), got {}", config.d_max, args.d),
        ));
    }
    Ok(Job::Test { data, config, d: args.d })
}

pub fn resolve_simulate(args: &SimulateArgs, notes: &mut Vec<String>) -> Result<Job> {
    let text = read(&args.config)?;
    let text = String::from_utf8(text).map_err(|_| PodError::Config(format!("{}: not UTF-8", args.config.display())))?;
    let mut studies = StudyConfig::parse_suite(&text).map_err(|e| {
        let msg = e.to_string();
        let msg = msg.strip_prefix("invalid configuration: ").unwrap_or(&msg).to_owned();
        PodError::Config(format!("{}: {msg}", args.config.display()))
    })?;
    if args.seed.is_none() {
        notes.push(format!("no --seed given, using the config seed {}", studies[0].seed));
    }
    for study in &mut studies {
        if let Some(reps) = args.reps {
            study.reps = reps;
        }
        if let Some(seed) = args.seed {
            study.seed = seed;
        }
        if let Some(vj) = args.weak_vj {
            match &mut study.scenario {
                Scenario::Factor {
                    regime: FactorRegime::Weak,
                    idiosyncratic_sd,
                    ..
                } => *idiosyncratic_sd = Some(vj),
                _ => return Err(flag_error("weak-vj", "applies only to weak-factor scenarios")),
            }
        }
        study.validate()?;
    }
    Ok(Job::Simulate { studies })
}

pub fn resolve_baseline(args: &BaselineArgs, notes: &mut Vec<String>) -> Result<Job> {
    let method: BaselineMethod = args.method.parse().map_err(|e| flag_error("method", e))?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(flag_error("alpha", format!("must lie in (0, 1), got {}", args.alpha)));
    }
    if !(args.fraction > 0.0 && args.fraction < 1.0) {
        return Err(flag_error("fraction", format!("must lie in (0, 1), got {}", args.fraction)));
    }
    if args.kmax < 1 || args.dmax < 1 {
        return Err(flag_error("kmax", "--kmax and --dmax must be >= 1"));
    }
    let settings = BaselineSettings {
        method,
        k_max: args.kmax,
        d_max: args.dmax,
        alpha: args.alpha,
        replicates: args.replicates,
        fraction: args.fraction,
        seed: seed_or_default(args.seed, notes),
    };
    let data = DataSource {
        path: args.data.clone(),
        response: args.response.clone(),
        categorical: false,
    };
    Ok(Job::Baseline { data, settings })
}

/// Files the job reads, for digest recording.
pub fn job_inputs(job: &Job, config_path: Option<&Path>) -> Result<Vec<InputDigest>> {
    match job {
        Job::Determine { data, .. } | Job::Test { data, .. } | Job::Baseline { data, .. } => {
            Ok(vec![InputDigest::of(&data.path)?])
        }
        Job::Simulate { .. } => config_path.map(InputDigest::of).into_iter().collect(),
    }
}

fn load_dataset(source: &DataSource, notes: &mut Vec<String>) -> Result<Dataset> {
    let spec = ResponseSpec {
        columns: source.response.clone(),
        categorical: source.categorical,
    };
    let data = load_csv(&source.path, &spec)?;
    if let Some(names) = data.label_names() {
        let pairs: Vec<String> = names.iter().enumerate().map(|(i, l)| format!("{i}={l}")).collect();
        notes.push(format!("label dictionary: {}", pairs.join(", ")));
    }
    if let Ok(cs) = CenterScale::fit(data.x()) {
        for (name, &flat) in data.feature_names().iter().zip(&cs.degenerate) {
            if flat {
                notes.push(format!("warning: column {name:?} is constant"));
            }
        }
    }
    Ok(data)
}

#[derive(Serialize)]
struct TestOutput<'a> {
    n: usize,
    tau_realized: f64,
    test: &'a TestResult,
    config: &'a PODConfig,
}

pub fn execute(job: &Job, notes: &mut Vec<String>) -> Result<Outcome> {
    match job {
        Job::Determine { data, config } => {
            let dataset = load_dataset(data, notes)?;
            let result = CrossFit::new(&dataset, config)?.select()?;
            Ok(Outcome {
                summary: determine_summary(&dataset, &result),
                artifacts: vec![(RESULT_FILE.into(), to_json(&result)?)],
            })
        }
        Job::Test { data, config, d } => {
            let dataset = load_dataset(data, notes)?;
            let cross_fit = CrossFit::new(&dataset, config)?;
            let test = cross_fit.test(*d)?;
            let output = TestOutput {
                n: dataset.n(),
                tau_realized: cross_fit.plan().tau_realized,
                test: &test,
                config,
            };
            let mut summary = header_line(&dataset, config);
            summary.push_str(&trail_table(std::slice::from_ref(&test)));
            let verdict = if test.reject { "rejected" } else { "not rejected" };
            let _ = writeln!(summary, "H0: order <= {d} {verdict} at alpha = {}", config.alpha);
            Ok(Outcome {
                summary,
                artifacts: vec![(RESULT_FILE.into(), to_json(&output)?)],
            })
        }
        Job::Simulate { studies } => {
            let mut artifacts = Vec::new();
            let mut summary = String::new();
            for study in studies {
                let report = sim::run_study(study)?;
                let mut csv = Vec::new();
                report.write_csv(&mut csv)?;
                summary.push_str(&study_summary(&report));
                artifacts.push((format!("{}.csv", study.name), csv));
            }
            Ok(Outcome { artifacts, summary })
        }
        Job::Baseline { data, settings } => {
            let bytes = read(&data.path)?;
            let (x, _) = parse_predictors_csv(&bytes, &data.response)?;
            let result = run_baseline(&x, settings)?;
            Ok(Outcome {
                summary: baseline_summary(&result, x.nrows(), x.ncols()),
                artifacts: vec![(RESULT_FILE.into(), to_json(&result)?)],
            })
        }
    }
}

fn run_baseline(x: &Array2<f64>, s: &BaselineSettings) -> Result<BaselineResult> {
    let subsample = SubsampleSettings {
        replicates: s.replicates,
        fraction: s.fraction,
    };
    match s.method {
        BaselineMethod::Ic => baselines::ic_p1(x, s.k_max),
        BaselineMethod::Er => baselines::eigenvalue_ratio(x, s.k_max),
        BaselineMethod::Kapetanios => baselines::kapetanios_test(x, s.d_max, s.alpha, subsample, s.seed),
        BaselineMethod::OnatskiStat => baselines::onatski_stats(x, s.d_max),
    }
}

fn header_line(data: &Dataset, config: &PODConfig) -> String {
    let learners: Vec<String> = config.learners.iter().map(ToString::to_string).collect();
    format!(
        "n = {}, p = {}, loss = {}, reducer = {}, learners = {}, K = {}, tau = {}, alpha = {}, seed = {}\n",
        data.n(),
        data.p(),
        config.loss,
        config.reducer,
        learners.join(","),
        config.k_folds,
        config.tau,
        config.alpha,
        config.seed
    )
}

fn trail_table(trail: &[TestResult]) -> String {
    let mut out = format!(
        "{:>3}  {:>12}  {:>12}  {:>9}  {:>8}  {}\n",
        "d", "psi_hat", "nu2_hat", "T", "p-value", "reject"
    );
    for r in trail {
        let _ = writeln!(
            out,
            "{:>3}  {:>12.6}  {:>12.6}  {:>9.3}  {:>8.4}  {}",
            r.d,
            r.psi,
            r.nu2,
            r.t,
            r.p_value,
            if r.reject { "yes" } else { "no" }
        );
    }
    out
}

fn determine_summary(data: &Dataset, result: &PODResult) -> String {
    let mut out = header_line(data, &result.config);
    out.push_str(&trail_table(&result.trail));
    let _ = writeln!(out, "selected order: {}", result.d_hat);
    out
}

fn study_summary(report: &StudyReport) -> String {
    let mut out = String::new();
    let config = report.config();
    let _ = writeln!(out, "study {} ({} replications, seed {})", config.name, config.reps, config.seed);
    match report {
        StudyReport::Rejection { rows, .. } => {
            let _ = writeln!(out, "{:<16} {:>6} {:>3} {:>8}", "method", "alpha", "d", "reject%");
            for r in rows {
                let _ = writeln!(out, "{:<16} {:>6} {:>3} {:>8.1}", r.method, r.alpha, r.d, 100.0 * r.rate());
            }
        }
        StudyReport::Order { rows, .. } => {
            let _ = writeln!(
                out,
                "{:>6} {:<16} {:>6} {:>8} {:>8} {:>8} {:>8}",
                "n", "method", "alpha", "correct", "over", "under", "mean_d"
            );
            for r in rows {
                let alpha = r.alpha.map_or("-".to_owned(), |a| a.to_string());
                let _ = writeln!(
                    out,
                    "{:>6} {:<16} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                    r.n,
                    r.method,
                    alpha,
                    r.p_correct(),
                    r.p_over(),
                    r.p_under(),
                    r.mean_d_hat()
                );
            }
        }
    }
    out
}

fn baseline_summary(result: &BaselineResult, n: usize, p: usize) -> String {
    let mut out = format!("{} on n = {n}, p = {p}\n", result.method);
    if let Some(k) = result.k_hat {
        let _ = writeln!(out, "estimated number of factors: {k}");
    }
    let lead: Vec<String> = result.eigenvalues.iter().take(10).map(|e| format!("{e:.4}")).collect();
    let _ = writeln!(out, "leading eigenvalues: {}", lead.join(" "));
    for (d, v) in result.values.iter().enumerate() {
        let crit = result.critical_values.as_ref().map(|c| format!("  critical {:.4}", c[d]));
        let reject = result.reject.as_ref().map(|r| if r[d] { "  reject" } else { "" });
        let _ = writeln!(out, "{d:>3}  {v:>12.6}{}{}", crit.unwrap_or_default(), reject.unwrap_or_default());
    }
    out
}
