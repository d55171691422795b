//! Data-generating processes and Monte Carlo studies: per-step rejection
//! tables and correct / over / under estimation frequencies.

use std::io::Write;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{eigenvalue_ratio, ic_p1, kapetanios_calibrate, SubsampleSettings};
use crate::data::{Dataset, Response};
use crate::engine::{gaussian_quantile, CrossFit, PODConfig, PODResult, ReducerFit};
use crate::error::{PodError, Result};
use crate::learners::LearnerSpec;
use crate::losses::Loss;
use crate::numerics::cholesky;
use crate::reducers::ReducerSpec;
use crate::rng::{derive_seed, stream, Gaussian};

/// Number of latent factors in the factor-regression designs.
pub const FACTOR_ORDER: usize = 5;
/// Coefficients of `m(f)` in the factor-regression designs.
pub const FACTOR_COEFFICIENTS: [f64; FACTOR_ORDER] = [1.0, 2.0, 1.0, 3.0, 2.0];
/// Variance of the regression noise in the factor designs.
pub const FACTOR_NOISE_VARIANCE: f64 = 0.1;
pub const WEAK_IDIOSYNCRATIC_SD: f64 = 0.55;
pub const PERVASIVE_IDIOSYNCRATIC_SD: f64 = 5.0;
/// Structural orders of the SDR models 1 to 7.
pub const SDR_ORDERS: [usize; 7] = [1, 2, 1, 2, 3, 1, 2];
pub const SDR_P: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorRegime {
    Weak,
    Pervasive,
}

/// `p × 5` loading matrix. Weak loadings are deterministic; pervasive ones
/// are drawn `b_lj ~ Unif(0, j)`.
pub fn factor_loadings(regime: FactorRegime, p: usize, g: &mut Gaussian) -> Result<Array2<f64>> {
    if p < FACTOR_ORDER {
        return Err(PodError::Config(format!("factor designs need p >= {FACTOR_ORDER}, got {p}")));
    }
    Ok(match regime {
        FactorRegime::Weak => Array2::from_shape_fn((p, FACTOR_ORDER), |(l0, j0)| {
            let (l, j) = (l0 + 1, j0 + 1);
            if l <= FACTOR_ORDER {
                (3.0 / (p as f64).sqrt()).sqrt()
            } else {
                let a = if l % j == 0 { -1.0 } else { 1.0 };
                a * (3.0 / (p - j) as f64).sqrt()
            }
        }),
        FactorRegime::Pervasive => {
            Array2::from_shape_fn((p, FACTOR_ORDER), |(_, j0)| g.uniform() * (j0 + 1) as f64)
        }
    })
}

/// Factor regression `Y = m(f) + ε`, `X = B f + u`. Returns the dataset and
/// the latent factors.
pub fn gen_factor(
    regime: FactorRegime,
    n: usize,
    p: usize,
    idiosyncratic_sd: Option<f64>,
    seed: u64,
) -> Result<(Dataset, Array2<f64>)> {
    if n == 0 {
        return Err(PodError::Config("n must be >= 1".into()));
    }
    let mut g = Gaussian::from_seed(derive_seed(seed, &[stream::DATA]));
    let b = factor_loadings(regime, p, &mut g)?;
    let sd = idiosyncratic_sd.unwrap_or(match regime {
        FactorRegime::Weak => WEAK_IDIOSYNCRATIC_SD,
        FactorRegime::Pervasive => PERVASIVE_IDIOSYNCRATIC_SD,
    });
    let f = Array2::from_shape_fn((n, FACTOR_ORDER), |_| g.sample());
    let u = Array2::from_shape_fn((n, p), |_| sd * g.sample());
    let x = f.dot(&b.t()) + u;
    let coef = Array1::from(FACTOR_COEFFICIENTS.to_vec());
    let noise_sd = FACTOR_NOISE_VARIANCE.sqrt();
    let y: Vec<f64> = f.dot(&coef).iter().map(|m| m + noise_sd * g.sample()).collect();
    Ok((Dataset::new(x, Response::scalar(y))?, f))
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// SDR models 1 to 7 with `X ~ N(0, I_10)`. Models 6 and 7 have categorical
/// responses with 3 and 4 classes.
pub fn gen_sdr_model(id: u8, n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if !(1..=7).contains(&id) {
        return Err(PodError::Config(format!("unknown SDR model {id} (expected 1 to 7)")));
    }
    if n == 0 {
        return Err(PodError::Config("n must be >= 1".into()));
    }
    let mut g = Gaussian::from_seed(derive_seed(seed, &[stream::DATA]));
    let x = Array2::from_shape_fn((n, SDR_P), |_| g.sample());
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for row in x.rows() {
        let xs = |j: usize| row[j - 1];
        match id {
            1 => values.push(xs(1) + xs(2) + xs(3) + xs(4) + sigma * g.sample()),
            2 => values.push(
                0.4 * (xs(1) + xs(2) + xs(3)).powi(2)
                    + 3.0 * ((xs(1) + xs(9) + 3.0 * xs(10)) / 4.0).sin()
                    + sigma * g.sample(),
            ),
            3 => values.push(xs(1).sin() + sigma * g.sample()),
            4 => values.push(xs(1).powi(2) + 0.5 * xs(2).sin() + sigma * g.sample()),
            5 => values.push(xs(1).abs() + xs(2) * (xs(2) + xs(3) + 1.0) + sigma * g.sample()),
            6 => {
                let prob = logistic(xs(1));
                let draws = (0..2).filter(|_| g.uniform() < prob).count();
                labels.push(draws);
            }
            _ => {
                let first = (1..=5).map(xs).sum::<f64>() + sigma * g.sample() > 1.0;
                let second = (6..=10).map(xs).sum::<f64>() + sigma * g.sample() > 0.0;
                labels.push(usize::from(first) + 2 * usize::from(second));
            }
        }
    }
    let y = match id {
        6 => Response::Categorical { labels, classes: 3 },
        7 => Response::Categorical { labels, classes: 4 },
        _ => Response::scalar(values),
    };
    Dataset::new(x, y)
}

/// `X ~ N(0, Σ)` with `Σ_ij = 0.5^|i−j|`; `Y = 1` when `X_1 > 0`, otherwise
/// `Y ~ Bernoulli(0.6)`.
pub fn gen_bernoulli(n: usize, p: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || p == 0 {
        return Err(PodError::Config("n and p must be >= 1".into()));
    }
    let sigma = Array2::from_shape_fn((p, p), |(i, j)| 0.5f64.powi((i as i32 - j as i32).abs()));
    let l = cholesky(&sigma)?;
    let mut g = Gaussian::from_seed(derive_seed(seed, &[stream::DATA]));
    let z = Array2::from_shape_fn((n, p), |_| g.sample());
    let x = z.dot(&l.t());
    let labels = x
        .column(0)
        .iter()
        .map(|&x1| usize::from(x1 > 0.0 || g.uniform() < 0.6))
        .collect();
    Dataset::new(x, Response::Categorical { labels, classes: 2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Factor {
        regime: FactorRegime,
        n: usize,
        p: usize,
        /// Overrides the regime's idiosyncratic standard deviation.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        idiosyncratic_sd: Option<f64>,
    },
    SdrModel {
        model: u8,
        n: usize,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    Bernoulli {
        n: usize,
        #[serde(default = "default_bernoulli_p")]
        p: usize,
    },
}

fn default_sigma() -> f64 {
    0.5
}

fn default_bernoulli_p() -> usize {
    10
}

impl Scenario {
    pub fn n(&self) -> usize {
        match self {
            Scenario::Factor { n, .. } | Scenario::SdrModel { n, .. } | Scenario::Bernoulli { n, .. } => *n,
        }
    }

    pub fn with_n(&self, n: usize) -> Scenario {
        let mut s = self.clone();
        match &mut s {
            Scenario::Factor { n: m, .. } | Scenario::SdrModel { n: m, .. } | Scenario::Bernoulli { n: m, .. } => {
                *m = n
            }
        }
        s
    }

    /// Target order of the design under `loss`. Only the Bernoulli design
    /// depends on the loss: the Bayes classifier ignores `X`, so 0-1 loss
    /// targets 0 while cross-entropy targets 1.
    pub fn target_order(&self, loss: Option<&Loss>) -> usize {
        match self {
            Scenario::Factor { .. } => FACTOR_ORDER,
            Scenario::SdrModel { model, .. } => SDR_ORDERS[(*model as usize).clamp(1, 7) - 1],
            Scenario::Bernoulli { .. } => match loss {
                Some(Loss::ZeroOne) => 0,
                _ => 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Scenario::Factor { n, p, .. } if *n == 0 || *p < FACTOR_ORDER => Err(PodError::Config(format!(
                "factor scenario needs n >= 1 and p >= {FACTOR_ORDER}"
            ))),
            Scenario::SdrModel { model, .. } if !(1..=7).contains(model) => {
                Err(PodError::Config(format!("unknown SDR model {model} (expected 1 to 7)")))
            }
            Scenario::SdrModel { n: 0, .. } | Scenario::Bernoulli { n: 0, .. } => {
                Err(PodError::Config("n must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match *self {
            Scenario::Factor {
                regime,
                n,
                p,
                idiosyncratic_sd,
            } => gen_factor(regime, n, p, idiosyncratic_sd, seed).map(|(d, _)| d),
            Scenario::SdrModel { model, n, sigma } => gen_sdr_model(model, n, sigma, seed),
            Scenario::Bernoulli { n, p } => gen_bernoulli(n, p, seed),
        }
    }
}

/// Serde helpers for types configured through their string forms.
mod as_string {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

mod learner_list {
    use serde::{de, Deserialize, Deserializer, Serializer};

    use crate::learners::LearnerSpec;

    pub fn serialize<S: Serializer>(v: &[LearnerSpec], s: S) -> Result<S::Ok, S::Error> {
        let text: Vec<String> = v.iter().map(ToString::to_string).collect();
        s.serialize_str(&text.join(","))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<LearnerSpec>, D::Error> {
        LearnerSpec::parse_list(&String::deserialize(d)?).map_err(de::Error::custom)
    }
}

/// POD settings for a study; `alpha` and `seed` come from the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodMethod {
    pub label: String,
    #[serde(with = "as_string")]
    pub loss: Loss,
    #[serde(with = "as_string")]
    pub reducer: ReducerSpec,
    #[serde(with = "learner_list")]
    pub learners: Vec<LearnerSpec>,
    #[serde(default = "default_folds")]
    pub k_folds: usize,
    #[serde(default = "default_dmax")]
    pub d_max: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub reducer_fit: ReducerFit,
    #[serde(default = "default_inner")]
    pub inner_folds: usize,
}

fn default_folds() -> usize {
    5
}
fn default_dmax() -> usize {
    8
}
fn default_tau() -> f64 {
    0.8
}
fn default_inner() -> usize {
    2
}

impl PodMethod {
    pub fn config(&self, alpha: f64, seed: u64) -> PODConfig {
        PODConfig {
            k_folds: self.k_folds,
            d_max: self.d_max,
            tau: self.tau,
            alpha,
            loss: self.loss,
            reducer: self.reducer,
            learners: self.learners.clone(),
            reducer_fit: self.reducer_fit,
            inner_folds: self.inner_folds,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodConfig {
    Pod(PodMethod),
    Ic {
        k_max: usize,
    },
    Er {
        k_max: usize,
    },
    Kapetanios {
        d_max: usize,
        #[serde(default = "default_replicates")]
        replicates: usize,
        #[serde(default = "default_fraction")]
        fraction: f64,
    },
}

fn default_replicates() -> usize {
    200
}
fn default_fraction() -> f64 {
    0.7
}

impl MethodConfig {
    pub fn label(&self) -> String {
        match self {
            MethodConfig::Pod(m) => m.label.clone(),
            MethodConfig::Ic { .. } => "ic".into(),
            MethodConfig::Er { .. } => "er".into(),
            MethodConfig::Kapetanios { .. } => "kapetanios".into(),
        }
    }

    fn loss(&self) -> Option<&Loss> {
        match self {
            MethodConfig::Pod(m) => Some(&m.loss),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    /// Per-step rejection rates from the full set of tests.
    Rejection,
    /// Frequencies of correct, over- and underestimation of the order.
    Order,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub name: String,
    pub study: StudyKind,
    pub scenario: Scenario,
    /// Sample sizes for order studies; empty means the scenario's own `n`.
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub alphas: Vec<f64>,
    #[serde(default = "default_study_seed")]
    pub seed: u64,
    pub methods: Vec<MethodConfig>,
}

fn default_reps() -> usize {
    200
}
fn default_study_seed() -> u64 {
    crate::engine::DEFAULT_SEED
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: StudyConfig =
            serde_json::from_str(text).map_err(|e| PodError::Config(format!("study config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Parses either one study or an array of studies with distinct names.
    pub fn parse_suite(text: &str) -> Result<Vec<Self>> {
        let studies: Vec<StudyConfig> = if text.trim_start().starts_with('[') {
            serde_json::from_str(text).map_err(|e| PodError::Config(format!("study config: {e}")))?
        } else {
            vec![Self::from_json(text)?]
        };
        if studies.is_empty() {
            return Err(PodError::Config("study list is empty".into()));
        }
        for (i, study) in studies.iter().enumerate() {
            study.validate()?;
            if studies[..i].iter().any(|s| s.name == study.name) {
                return Err(PodError::Config(format!("duplicate study name {:?}", study.name)));
            }
        }
        Ok(studies)
    }

    pub fn validate(&self) -> Result<()> {
        let name_ok = !self.name.is_empty()
            && self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !name_ok {
            return Err(PodError::Config(format!(
                "study name {:?} must be nonempty and use only letters, digits, '-' and '_'",
                self.name
            )));
        }
        self.scenario.validate()?;
        if self.reps == 0 {
            return Err(PodError::Config("reps must be >= 1".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(PodError::Config("alphas must be a nonempty list of values in (0, 1)".into()));
        }
        if self.methods.is_empty() {
            return Err(PodError::Config("at least one method is required".into()));
        }
        for m in &self.methods {
            match m {
                MethodConfig::Pod(p) => p.config(self.alphas[0], self.seed).validate()?,
                MethodConfig::Ic { .. } | MethodConfig::Er { .. } if self.study == StudyKind::Rejection => {
                    return Err(PodError::Config(
                        "rejection studies support the pod and kapetanios methods only".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn grid(&self) -> Vec<usize> {
        if self.n_grid.is_empty() {
            vec![self.scenario.n()]
        } else {
            self.n_grid.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    pub method: String,
    pub alpha: f64,
    pub d: usize,
    pub rejections: usize,
    pub reps: usize,
}

impl RejectionRow {
    pub fn rate(&self) -> f64 {
        self.rejections as f64 / self.reps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub n: usize,
    pub method: String,
    /// `None` for estimators without a level.
    pub alpha: Option<f64>,
    pub target: usize,
    pub reps: usize,
    /// `counts[d]` replications selected `d̂ = d`.
    pub counts: Vec<usize>,
}

impl OrderRow {
    fn share(&self, pick: impl Fn(usize) -> bool) -> f64 {
        let hits: usize = self.counts.iter().enumerate().filter(|(d, _)| pick(*d)).map(|(_, c)| c).sum();
        hits as f64 / self.reps as f64
    }

    pub fn p_correct(&self) -> f64 {
        self.share(|d| d == self.target)
    }

    pub fn p_over(&self) -> f64 {
        self.share(|d| d > self.target)
    }

    pub fn p_under(&self) -> f64 {
        self.share(|d| d < self.target)
    }

    pub fn mean_d_hat(&self) -> f64 {
        let total: usize = self.counts.iter().enumerate().map(|(d, c)| d * c).sum();
        total as f64 / self.reps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "snake_case")]
pub enum StudyReport {
    Rejection { config: StudyConfig, rows: Vec<RejectionRow> },
    Order { config: StudyConfig, rows: Vec<OrderRow> },
}

impl StudyReport {
    pub fn config(&self) -> &StudyConfig {
        match self {
            StudyReport::Rejection { config, .. } | StudyReport::Order { config, .. } => config,
        }
    }

    /// CSV with a leading `# config: {...}` comment carrying every setting.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        let config = serde_json::to_string(self.config()).map_err(|e| PodError::Numerical(e.to_string()))?;
        writeln!(out, "# config: {config}").map_err(io_error)?;
        let mut w = csv::Writer::from_writer(out);
        match self {
            StudyReport::Rejection { rows, .. } => {
                w.write_record(["method", "alpha", "d", "rejections", "reps", "rate"])?;
                for r in rows {
                    w.write_record([
                        r.method.clone(),
                        r.alpha.to_string(),
                        r.d.to_string(),
                        r.rejections.to_string(),
                        r.reps.to_string(),
                        format!("{:.6}", r.rate()),
                    ])?;
                }
            }
            StudyReport::Order { rows, .. } => {
                w.write_record([
                    "n", "method", "alpha", "target", "reps", "p_correct", "p_over", "p_under", "mean_d_hat",
                    "d_hat_counts",
                ])?;
                for r in rows {
                    let counts: Vec<String> = r.counts.iter().map(ToString::to_string).collect();
                    w.write_record([
                        r.n.to_string(),
                        r.method.clone(),
                        r.alpha.map_or(String::new(), |a| a.to_string()),
                        r.target.to_string(),
                        r.reps.to_string(),
                        format!("{:.6}", r.p_correct()),
                        format!("{:.6}", r.p_over()),
                        format!("{:.6}", r.p_under()),
                        format!("{:.6}", r.mean_d_hat()),
                        counts.join(";"),
                    ])?;
                }
            }
        }
        w.flush().map_err(io_error)?;
        Ok(())
    }
}

fn io_error(e: std::io::Error) -> PodError {
    PodError::Io {
        path: "<output>".into(),
        source: e,
    }
}

fn method_seed(study: &StudyConfig, n: usize, rep: usize, method: usize) -> u64 {
    derive_seed(study.seed, &[stream::REPLICATION, n as u64, rep as u64, method as u64])
}

fn data_seed(study: &StudyConfig, n: usize, rep: usize) -> u64 {
    derive_seed(study.seed, &[stream::DATA, n as u64, rep as u64])
}

/// Runs the study described by `config`.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    match config.study {
        StudyKind::Rejection => run_rejection_study(config),
        StudyKind::Order => run_order_study(config),
    }
}

/// Per-step rejection rates for `d = 0..d_max`. Every replication runs the
/// full set of tests rather than the stopped sequence.
pub fn run_rejection_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let n = config.scenario.n();
    // per replication, per method: decisions[alpha][d]
    let per_rep: Vec<Vec<Vec<Vec<bool>>>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            rejection_replicate(config, n, rep).map_err(|e| PodError::Replication {
                rep,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (m, method) in config.methods.iter().enumerate() {
        for (a, &alpha) in config.alphas.iter().enumerate() {
            let d_count = per_rep[0][m][a].len();
            for d in 0..d_count {
                rows.push(RejectionRow {
                    method: method.label(),
                    alpha,
                    d,
                    rejections: per_rep.iter().filter(|r| r[m][a][d]).count(),
                    reps: config.reps,
                });
            }
        }
    }
    Ok(StudyReport::Rejection {
        config: config.clone(),
        rows,
    })
}

fn rejection_replicate(config: &StudyConfig, n: usize, rep: usize) -> Result<Vec<Vec<Vec<bool>>>> {
    let data = config.scenario.generate(data_seed(config, n, rep))?;
    config
        .methods
        .iter()
        .enumerate()
        .map(|(m, method)| {
            let seed = method_seed(config, n, rep, m);
            match method {
                MethodConfig::Pod(pod) => {
                    let pod_config = pod.config(config.alphas[0], seed);
                    let trail = CrossFit::new(&data, &pod_config)?.test_all()?.trail;
                    config
                        .alphas
                        .iter()
                        .map(|&alpha| {
                            let z = gaussian_quantile(1.0 - alpha)?;
                            Ok(trail.iter().map(|r| r.t >= z).collect())
                        })
                        .collect()
                }
                MethodConfig::Kapetanios {
                    d_max,
                    replicates,
                    fraction,
                } => {
                    let settings = SubsampleSettings {
                        replicates: *replicates,
                        fraction: *fraction,
                    };
                    let cal = kapetanios_calibrate(data.x(), *d_max, settings, seed)?;
                    config
                        .alphas
                        .iter()
                        .map(|&alpha| Ok(cal.decide(alpha)?.reject.unwrap_or_default()))
                        .collect()
                }
                MethodConfig::Ic { .. } | MethodConfig::Er { .. } => Err(PodError::Config(
                    "rejection studies support the pod and kapetanios methods only".into(),
                )),
            }
        })
        .collect()
}

/// Frequencies of `d̂` per sample size, method and level. POD runs the
/// sequential tests only as far as the most liberal level requires.
pub fn run_order_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let mut rows = Vec::new();
    for n in config.grid() {
        let scenario = config.scenario.with_n(n);
        // per replication, per method, per level (one entry for estimators)
        let picks: Vec<Vec<Vec<usize>>> = (0..config.reps)
            .into_par_iter()
            .map(|rep| {
                order_replicate(config, &scenario, n, rep).map_err(|e| PodError::Replication {
                    rep,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        for (m, method) in config.methods.iter().enumerate() {
            let levels: Vec<Option<f64>> = match method {
                MethodConfig::Ic { .. } | MethodConfig::Er { .. } => vec![None],
                _ => config.alphas.iter().copied().map(Some).collect(),
            };
            let width = match method {
                MethodConfig::Pod(p) => p.d_max,
                MethodConfig::Ic { k_max } | MethodConfig::Er { k_max } => *k_max,
                MethodConfig::Kapetanios { d_max, .. } => *d_max,
            } + 1;
            for (a, alpha) in levels.into_iter().enumerate() {
                let mut counts = vec![0usize; width];
                for rep in &picks {
                    counts[rep[m][a]] += 1;
                }
                rows.push(OrderRow {
                    n,
                    method: method.label(),
                    alpha,
                    target: scenario.target_order(method.loss()),
                    reps: config.reps,
                    counts,
                });
            }
        }
    }
    Ok(StudyReport::Order {
        config: config.clone(),
        rows,
    })
}

fn order_replicate(config: &StudyConfig, scenario: &Scenario, n: usize, rep: usize) -> Result<Vec<Vec<usize>>> {
    let data = scenario.generate(data_seed(config, n, rep))?;
    config
        .methods
        .iter()
        .enumerate()
        .map(|(m, method)| {
            let seed = method_seed(config, n, rep, m);
            match method {
                MethodConfig::Pod(pod) => {
                    let pod_config = pod.config(config.alphas[0], seed);
                    let levels = config
                        .alphas
                        .iter()
                        .map(|&a| gaussian_quantile(1.0 - a))
                        .collect::<Result<Vec<_>>>()?;
                    let z_stop = levels.iter().copied().fold(f64::INFINITY, f64::min);
                    let trail = CrossFit::new(&data, &pod_config)?.trail_until(z_stop)?;
                    Ok(levels
                        .iter()
                        .map(|&z| PODResult::stop_at_level(&trail, z, pod.d_max))
                        .collect())
                }
                MethodConfig::Ic { k_max } => Ok(vec![ic_p1(data.x(), *k_max)?.k_hat.unwrap_or(0)]),
                MethodConfig::Er { k_max } => Ok(vec![eigenvalue_ratio(data.x(), *k_max)?.k_hat.unwrap_or(0)]),
                MethodConfig::Kapetanios {
                    d_max,
                    replicates,
                    fraction,
                } => {
                    let settings = SubsampleSettings {
                        replicates: *replicates,
                        fraction: *fraction,
                    };
                    let cal = kapetanios_calibrate(data.x(), *d_max, settings, seed)?;
                    config
                        .alphas
                        .iter()
                        .map(|&alpha| Ok(cal.decide(alpha)?.k_hat.unwrap_or(0)))
                        .collect()
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ols_solve;

    fn scalar_y(d: &Dataset) -> Vec<f64> {
        match d.y() {
            Response::Continuous(m) => m.column(0).to_vec(),
            _ => panic!("expected continuous"),
        }
    }

    fn mean_sd(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    }

    #[test]
    fn factor_generator_is_reproducible_and_centered() {
        let (a, _) = gen_factor(FactorRegime::Pervasive, 5000, 20, None, 1).unwrap();
        let (b, _) = gen_factor(FactorRegime::Pervasive, 5000, 20, None, 1).unwrap();
        assert_eq!(a, b);
        let (m, sd) = mean_sd(&scalar_y(&a));
        assert!(m.abs() <= 3.0 * sd / (5000f64).sqrt());
        assert!(gen_factor(FactorRegime::Weak, 10, 4, None, 1).is_err());
    }

    #[test]
    fn weak_loadings_follow_formula() {
        let p = 40;
        let b = factor_loadings(FactorRegime::Weak, p, &mut Gaussian::from_seed(0)).unwrap();
        let top = (3.0 / (p as f64).sqrt()).sqrt();
        for l in 0..5 {
            for j in 0..5 {
                assert_eq!(b[[l, j]], top);
            }
        }
        // l = 6 is a multiple of j = 1, 2, 3 but not of j = 4, 5
        assert_eq!(b[[5, 1]], -(3.0 / (p - 2) as f64).sqrt());
        assert_eq!(b[[5, 3]], (3.0 / (p - 4) as f64).sqrt());
    }

    #[test]
    fn factor_regression_recovers_coefficients() {
        let (data, f) = gen_factor(FactorRegime::Weak, 5000, 30, None, 2).unwrap();
        let y = Array2::from_shape_vec((5000, 1), scalar_y(&data)).unwrap();
        let beta = ols_solve(&f, &y, 0.0).unwrap();
        for (b, c) in beta.column(0).iter().zip(FACTOR_COEFFICIENTS) {
            assert!((b - c).abs() < 0.05, "{b} vs {c}");
        }
    }

    #[test]
    fn model_one_noiseless_is_exact() {
        let d = gen_sdr_model(1, 50, 0.0, 3).unwrap();
        let y = scalar_y(&d);
        for (i, row) in d.x().rows().into_iter().enumerate() {
            assert!((y[i] - (row[0] + row[1] + row[2] + row[3])).abs() < 1e-12);
        }
    }

    #[test]
    fn model_three_variance_matches_closed_form() {
        // Var(sin Z) = E[sin² Z] = (1 − e^{−2}) / 2 for Z ~ N(0, 1)
        let expected = (1.0 - (-2.0f64).exp()) / 2.0 + 0.25;
        let d = gen_sdr_model(3, 100_000, 0.5, 4).unwrap();
        let (_, sd) = mean_sd(&scalar_y(&d));
        assert!((sd * sd - expected).abs() < 0.01, "{} vs {expected}", sd * sd);
    }

    #[test]
    fn model_six_logistic_binomial() {
        assert_eq!(logistic(0.0).powi(2), 0.25);
        let d = gen_sdr_model(6, 20_000, 0.5, 5).unwrap();
        let Response::Categorical { labels, classes } = d.y() else { panic!() };
        assert_eq!(*classes, 3);
        // near X1 = 0 the chance of Y = 2 is about 1/4
        let near: Vec<usize> = d
            .x()
            .column(0)
            .iter()
            .zip(labels)
            .filter(|(x, _)| x.abs() < 0.05)
            .map(|(_, &l)| l)
            .collect();
        let share = near.iter().filter(|&&l| l == 2).count() as f64 / near.len() as f64;
        assert!((share - 0.25).abs() < 4.0 * (0.25f64 * 0.75 / near.len() as f64).sqrt(), "{share}");
    }

    #[test]
    fn model_seven_labels() {
        let d = gen_sdr_model(7, 2000, 0.5, 6).unwrap();
        let Response::Categorical { labels, classes } = d.y() else { panic!() };
        assert_eq!(*classes, 4);
        assert!(labels.iter().all(|&l| l < 4));
        for c in 0..4 {
            assert!(labels.contains(&c));
        }
        assert!(gen_sdr_model(8, 10, 0.5, 0).is_err());
    }

    #[test]
    fn bernoulli_design_moments() {
        let d = gen_bernoulli(2000, 10, 7).unwrap();
        let Response::Categorical { labels, .. } = d.y() else { panic!() };
        let ones = labels.iter().filter(|&&l| l == 1).count() as f64 / 2000.0;
        assert!((ones - 0.8).abs() < 0.03, "{ones}");
        for (x1, &l) in d.x().column(0).iter().zip(labels) {
            if *x1 > 0.0 {
                assert_eq!(l, 1);
            }
        }
        let x = d.x();
        let (c0, c1) = (x.column(0), x.column(1));
        let (m0, m1) = (c0.mean().unwrap(), c1.mean().unwrap());
        let cov = c0.iter().zip(c1.iter()).map(|(a, b)| (a - m0) * (b - m1)).sum::<f64>();
        let corr = cov / (c0.var(0.0).sqrt() * c1.var(0.0).sqrt() * 2000.0);
        assert!((corr - 0.5).abs() < 0.05, "{corr}");
    }

    #[test]
    fn generators_depend_only_on_seed() {
        for id in 1..=7 {
            assert_eq!(gen_sdr_model(id, 30, 0.5, 9).unwrap(), gen_sdr_model(id, 30, 0.5, 9).unwrap());
        }
        assert_ne!(gen_bernoulli(30, 10, 1).unwrap(), gen_bernoulli(30, 10, 2).unwrap());
    }

    fn small_study(kind: StudyKind, reps: usize) -> StudyConfig {
        StudyConfig::from_json(&format!(
            r#"{{
                "name": "small",
                "study": "{}",
                "scenario": {{"kind": "sdr_model", "model": 1, "n": 120}},
                "reps": {reps},
                "alphas": [0.05, 0.1],
                "seed": 3,
                "methods": [{{"method": "pod", "label": "pod", "loss": "squared",
                              "reducer": "sir:10", "learners": "ols", "d_max": 3,
                              "reducer_fit": "once"}}]
            }}"#,
            if kind == StudyKind::Rejection { "rejection" } else { "order" }
        ))
        .unwrap()
    }

    #[test]
    fn single_replication_rates_are_binary() {
        let report = run_study(&small_study(StudyKind::Rejection, 1)).unwrap();
        let StudyReport::Rejection { rows, .. } = &report else { panic!() };
        assert_eq!(rows.len(), 2 * 3);
        assert!(rows.iter().all(|r| r.rate() == 0.0 || r.rate() == 1.0));
    }

    #[test]
    fn order_triples_partition_outcomes() {
        let report = run_study(&small_study(StudyKind::Order, 6)).unwrap();
        let StudyReport::Order { rows, .. } = &report else { panic!() };
        for r in rows {
            assert!((r.p_correct() + r.p_over() + r.p_under() - 1.0).abs() <= 1e-12);
            assert_eq!(r.counts.iter().sum::<usize>(), 6);
        }
        // a larger level never selects a smaller order in the same replication
        assert!(rows[1].mean_d_hat() >= rows[0].mean_d_hat());
    }

    #[test]
    fn reports_are_deterministic_and_documented() {
        let config = small_study(StudyKind::Order, 4);
        let mut a = Vec::new();
        let mut b = Vec::new();
        run_study(&config).unwrap().write_csv(&mut a).unwrap();
        run_study(&config).unwrap().write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("# config: {"));
        assert!(text.lines().nth(1).unwrap().starts_with("n,method,alpha"));
    }

    #[test]
    fn rejection_study_matches_direct_engine_runs() {
        let config = small_study(StudyKind::Rejection, 3);
        let StudyReport::Rejection { rows, .. } = run_study(&config).unwrap() else { panic!() };
        let MethodConfig::Pod(pod) = &config.methods[0] else { panic!() };
        let mut expected = vec![0usize; 3];
        for rep in 0..3 {
            let data = config.scenario.generate(data_seed(&config, 120, rep)).unwrap();
            let result = crate::engine::test_all(&data, &pod.config(0.05, method_seed(&config, 120, rep, 0))).unwrap();
            for r in result.trail {
                expected[r.d] += usize::from(r.reject);
            }
        }
        let got: Vec<usize> = rows.iter().filter(|r| r.alpha == 0.05).map(|r| r.rejections).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn malformed_configs_are_rejected() {
        let err = StudyConfig::from_json("{\"name\": 1").unwrap_err().to_string();
        assert!(err.contains("line 1"));
        let one = small_study(StudyKind::Order, 1);
        let mut two = one.clone();
        two.name = "other".into();
        let text = serde_json::to_string(&vec![one.clone(), two]).unwrap();
        assert_eq!(StudyConfig::parse_suite(&text).unwrap().len(), 2);
        let dup = serde_json::to_string(&vec![one.clone(), one.clone()]).unwrap();
        assert!(StudyConfig::parse_suite(&dup).is_err());
        let mut bad = one;
        bad.name = "a/b".into();
        assert!(bad.validate().is_err());
        let mut c = small_study(StudyKind::Rejection, 1);
        c.methods.push(MethodConfig::Ic { k_max: 4 });
        assert!(c.validate().is_err());
        c.methods.pop();
        c.alphas = vec![1.5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn learner_lists_round_trip_through_json() {
        let config = small_study(StudyKind::Order, 1);
        let text = serde_json::to_string(&config).unwrap();
        assert!(text.contains("\"learners\":\"ols\""));
        assert_eq!(StudyConfig::from_json(&text).unwrap(), config);
    }
}
