//! Cross-fitted predictiveness-gap tests and sequential order selection.
//!
//! Each fold `I_k` is split into disjoint parts `a`, `b` and `o` with
//! `|a| = |b|`. The candidate dimension is scored on `o ∪ a`, the largest
//! dimension on `o ∪ b`, and the two risks are contrasted. The shared `o`
//! part controls how strongly the two arms overlap.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, Response};
use crate::error::{PodError, Result};
use crate::learners::{fit_selected, LearnerSpec};
use crate::losses::Loss;
use crate::reducers::{ReducerSpec, ReductionMap};
use crate::rng::{derive_seed, derived_rng, permutation, stream};

pub const DEFAULT_SEED: u64 = 20_240_917;

/// Whether the reduction map is refitted on every training fold or fitted
/// once on the full sample and shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReducerFit {
    #[default]
    PerFold,
    Once,
}

impl fmt::Display for ReducerFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReducerFit::PerFold => "per-fold",
            ReducerFit::Once => "once",
        })
    }
}

impl FromStr for ReducerFit {
    type Err = PodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-fold" | "per_fold" => Ok(ReducerFit::PerFold),
            "once" => Ok(ReducerFit::Once),
            other => Err(PodError::Config(format!(
                "unknown reducer fit mode {other:?} (expected per-fold or once)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PODConfig {
    pub k_folds: usize,
    pub d_max: usize,
    pub tau: f64,
    pub alpha: f64,
    pub loss: Loss,
    pub reducer: ReducerSpec,
    pub learners: Vec<LearnerSpec>,
    pub reducer_fit: ReducerFit,
    pub inner_folds: usize,
    pub seed: u64,
}

impl PODConfig {
    /// K = 5, d_max = 8, τ = 0.8, α = 0.05, two inner folds, and the default
    /// learner candidates for `loss`.
    pub fn new(loss: Loss, reducer: ReducerSpec) -> Self {
        Self {
            k_folds: 5,
            d_max: 8,
            tau: 0.8,
            alpha: 0.05,
            learners: LearnerSpec::default_candidates(&loss),
            loss,
            reducer,
            reducer_fit: ReducerFit::PerFold,
            inner_folds: 2,
            seed: DEFAULT_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PodError::Config(msg));
        if self.k_folds < 2 {
            return bad(format!("folds must be >= 2, got {}", self.k_folds));
        }
        if self.d_max < 1 {
            return bad("dmax must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1), got {}", self.tau));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.learners.is_empty() {
            return bad("at least one learner is required".into());
        }
        if self.inner_folds < 2 {
            return bad(format!("inner folds must be >= 2, got {}", self.inner_folds));
        }
        Ok(())
    }

    pub fn z_crit(&self) -> f64 {
        gaussian_quantile(1.0 - self.alpha).expect("alpha validated")
    }
}

/// One fold `I_k` split into `a`, `b` and `o`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub o: Vec<usize>,
}

impl FoldSplit {
    pub fn len(&self) -> usize {
        self.a.len() + self.b.len() + self.o.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows in `a`, `b`, `o` order; per-sample losses are aligned with this.
    pub fn rows(&self) -> Vec<usize> {
        self.a.iter().chain(&self.b).chain(&self.o).copied().collect()
    }

    /// `|o| / (|a| + |o|)`.
    pub fn tau(&self) -> f64 {
        self.o.len() as f64 / (self.a.len() + self.o.len()) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub folds: Vec<FoldSplit>,
    pub tau_nominal: f64,
    /// Pooled `Σ|o| / Σ(|a| + |o|)`; equals every per-fold value when the
    /// folds have equal size.
    pub tau_realized: f64,
}

impl FoldPlan {
    /// Builds a plan from explicit splits, checking that they partition
    /// `0..n` and that `|a| = |b| ≥ 1` in every fold.
    pub fn from_splits(n: usize, folds: Vec<FoldSplit>, tau_nominal: f64) -> Result<Self> {
        let mut seen = vec![false; n];
        for (k, f) in folds.iter().enumerate() {
            if f.a.len() != f.b.len() || f.a.is_empty() {
                return Err(PodError::Config(format!("fold {k}: |a| and |b| must be equal and nonzero")));
            }
            for i in f.rows() {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(PodError::Config(format!("fold {k}: row {i} out of range or repeated")));
                }
            }
        }
        if folds.len() < 2 || seen.iter().any(|s| !s) {
            return Err(PodError::Config("folds must be at least two and cover every row".into()));
        }
        let o: usize = folds.iter().map(|f| f.o.len()).sum();
        let ao: usize = folds.iter().map(|f| f.a.len() + f.o.len()).sum();
        Ok(Self {
            n,
            folds,
            tau_nominal,
            tau_realized: o as f64 / ao as f64,
        })
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Training rows for fold `k`: everything outside `I_k`, ascending.
    pub fn training_rows(&self, k: usize) -> Vec<usize> {
        let mut inside = vec![false; self.n];
        for i in self.folds[k].rows() {
            inside[i] = true;
        }
        (0..self.n).filter(|&i| !inside[i]).collect()
    }
}

/// Size of `a` (and `b`) in a fold of size `m`:
/// `round((1 − τ) m / (2 − τ))` clamped to `[1, ⌊m/2⌋]`.
pub fn split_size(m: usize, tau: f64) -> usize {
    let s = ((1.0 - tau) * m as f64 / (2.0 - tau)).round() as usize;
    s.clamp(1, (m / 2).max(1))
}

/// Random partition of `0..n` into `k` folds whose sizes differ by at most
/// one, each split into `a`, `b`, `o`.
pub fn make_fold_plan(n: usize, k: usize, tau: f64, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(PodError::Config(format!("folds must be >= 2, got {k}")));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(PodError::Config(format!("tau must lie in [0, 1), got {tau}")));
    }
    if n < 3 * k {
        return Err(PodError::Data(format!("{n} rows cannot support {k} folds (need at least {})", 3 * k)));
    }
    let perm = permutation(n, &mut derived_rng(seed, &[stream::FOLD_PLAN]));
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let m = base + usize::from(f < extra);
        let rows = &perm[start..start + m];
        start += m;
        let s = split_size(m, tau);
        folds.push(FoldSplit {
            a: rows[..s].to_vec(),
            b: rows[s..2 * s].to_vec(),
            o: rows[2 * s..].to_vec(),
        });
    }
    FoldPlan::from_splits(n, folds, tau)
}

/// Empirical risks of one fitted predictor on one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRisk {
    pub risk_a: f64,
    pub risk_b: f64,
    pub risk_o: f64,
    /// Per-fold overlap `|o| / (|a| + |o|)`.
    pub tau: f64,
    /// Losses aligned with [`FoldSplit::rows`].
    pub losses: Vec<f64>,
    /// `|I_k|⁻¹ Σ (ℓ_i − ℓ̄)²` over the whole fold.
    pub sigma2: f64,
}

impl FoldRisk {
    /// `losses` must be aligned with `split.rows()`.
    pub fn from_losses(split: &FoldSplit, losses: Vec<f64>) -> Result<Self> {
        if losses.len() != split.len() {
            return Err(PodError::Dimension(format!(
                "{} losses for a fold of {} rows",
                losses.len(),
                split.len()
            )));
        }
        let s = split.a.len();
        let avg = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let all = avg(&losses);
        let sigma2 = losses.iter().map(|l| (l - all).powi(2)).sum::<f64>() / losses.len() as f64;
        Ok(Self {
            risk_a: avg(&losses[..s]),
            risk_b: avg(&losses[s..2 * s]),
            risk_o: avg(&losses[2 * s..]),
            tau: split.tau(),
            losses,
            sigma2,
        })
    }

    /// `L̂` for a candidate dimension, scored on `o ∪ a`.
    pub fn risk_candidate(&self) -> f64 {
        self.tau * self.risk_o + (1.0 - self.tau) * self.risk_a
    }

    /// `L̂` for the largest dimension, scored on `o ∪ b`.
    pub fn risk_reference(&self) -> f64 {
        self.tau * self.risk_o + (1.0 - self.tau) * self.risk_b
    }
}

/// `K⁻¹ Σ_k (L̂_{d,k} − L̂_{d_max,k})`.
pub fn psi_hat(candidate: &[FoldRisk], reference: &[FoldRisk]) -> Result<f64> {
    check_folds(candidate, reference)?;
    let total: f64 = candidate
        .iter()
        .zip(reference)
        .map(|(c, r)| c.risk_candidate() - r.risk_reference())
        .sum();
    Ok(total / candidate.len() as f64)
}

/// `(1 − τ) K⁻¹ Σ_k (σ̂²_{d,k} + σ̂²_{d_max,k})`.
pub fn variance_hat(candidate: &[FoldRisk], reference: &[FoldRisk], tau: f64) -> Result<f64> {
    check_folds(candidate, reference)?;
    let total: f64 = candidate.iter().zip(reference).map(|(c, r)| c.sigma2 + r.sigma2).sum();
    Ok(((1.0 - tau) * total / candidate.len() as f64).max(0.0))
}

fn check_folds(candidate: &[FoldRisk], reference: &[FoldRisk]) -> Result<()> {
    if candidate.len() != reference.len() || candidate.is_empty() {
        return Err(PodError::Dimension(format!(
            "{} candidate folds vs {} reference folds",
            candidate.len(),
            reference.len()
        )));
    }
    Ok(())
}

/// `T = √(n / (2 − τ)) ψ / ν` and its upper-tail p-value. With `ν² = 0`
/// the statistic is `0`, `+∞` or `−∞` following the sign of `ψ`.
pub fn t_stat(psi: f64, nu2: f64, n: usize, tau: f64) -> (f64, f64) {
    let t = if nu2 > 0.0 {
        (n as f64 / (2.0 - tau)).sqrt() * psi / nu2.sqrt()
    } else if psi > 0.0 {
        f64::INFINITY
    } else if psi < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    (t, 1.0 - gaussian_cdf(t))
}

fn standard_normal() -> Normal {
    Normal::standard()
}

pub fn gaussian_cdf(x: f64) -> f64 {
    match x {
        f64::INFINITY => 1.0,
        f64::NEG_INFINITY => 0.0,
        _ => standard_normal().cdf(x),
    }
}

pub fn gaussian_quantile(prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(PodError::Config(format!("quantile level must lie in (0, 1), got {prob}")));
    }
    Ok(standard_normal().inverse_cdf(prob))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub d: usize,
    pub psi: f64,
    pub nu2: f64,
    #[serde(with = "extended_f64")]
    pub t: f64,
    pub z_crit: f64,
    pub p_value: f64,
    pub reject: bool,
}

impl TestResult {
    pub fn new(d: usize, psi: f64, nu2: f64, n: usize, tau: f64, alpha: f64) -> Result<Self> {
        let (t, p_value) = t_stat(psi, nu2, n, tau);
        let z_crit = gaussian_quantile(1.0 - alpha)?;
        Ok(Self {
            d,
            psi,
            nu2,
            t,
            z_crit,
            p_value,
            reject: t >= z_crit,
        })
    }
}

/// JSON numbers cannot carry infinities; they are written as the strings
/// `"inf"` and `"-inf"`.
pub mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => s.serialize_str("inf"),
            f64::NEG_INFINITY => s.serialize_str("-inf"),
            x if x.is_nan() => s.serialize_str("nan"),
            x => s.serialize_f64(x),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("expected a number, got {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PODResult {
    pub d_hat: usize,
    pub n: usize,
    pub tau_realized: f64,
    pub trail: Vec<TestResult>,
    pub config: PODConfig,
}

impl PODResult {
    /// First non-rejected dimension in a trail, or `d_max` if every test
    /// rejects. The trail must start at `d = 0`.
    pub fn stop_at(trail: &[TestResult], d_max: usize) -> usize {
        trail.iter().find(|r| !r.reject).map_or(d_max, |r| r.d)
    }

    /// `d̂` at critical value `z`: the first `d` whose statistic is below `z`.
    pub fn stop_at_level(trail: &[TestResult], z: f64, d_max: usize) -> usize {
        trail.iter().find(|r| r.t < z).map_or(d_max, |r| r.d)
    }
}

/// Per-fold state reused for every candidate dimension.
struct FoldContext {
    train_scores: Array2<f64>,
    train_y: Response,
    test_scores: Array2<f64>,
    test_y: Response,
    reference: FoldRisk,
}

/// Cross-fitting state for one dataset, configuration and plan. The
/// reduction maps and the `d_max` predictors are fitted once per fold.
pub struct CrossFit<'a> {
    config: &'a PODConfig,
    plan: FoldPlan,
    folds: Vec<FoldContext>,
}

impl<'a> CrossFit<'a> {
    pub fn new(data: &Dataset, config: &'a PODConfig) -> Result<Self> {
        config.validate()?;
        let plan = make_fold_plan(data.n(), config.k_folds, config.tau, config.seed)?;
        Self::with_plan(data, config, plan)
    }

    pub fn with_plan(data: &Dataset, config: &'a PODConfig, plan: FoldPlan) -> Result<Self> {
        config.validate()?;
        if plan.n != data.n() {
            return Err(PodError::Dimension(format!("plan covers {} rows, data has {}", plan.n, data.n())));
        }
        config.loss.check_response(data.y())?;
        let shared = match config.reducer_fit {
            ReducerFit::Once => Some(config.reducer.fit(data, config.d_max)?),
            ReducerFit::PerFold => None,
        };
        let folds = (0..plan.k())
            .into_par_iter()
            .map(|k| Self::prepare(data, config, &plan, k, shared.as_ref()).map_err(|e| e.in_fold(k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, plan, folds })
    }

    fn prepare(
        data: &Dataset,
        config: &PODConfig,
        plan: &FoldPlan,
        k: usize,
        shared: Option<&ReductionMap>,
    ) -> Result<FoldContext> {
        let train = data.select(&plan.training_rows(k))?;
        let test = data.select(&plan.folds[k].rows())?;
        let fitted;
        let map = match shared {
            Some(m) => m,
            None => {
                fitted = config.reducer.fit(&train, config.d_max)?;
                &fitted
            }
        };
        let mut ctx = FoldContext {
            train_scores: map.apply(train.x())?,
            train_y: train.y().clone(),
            test_scores: map.apply(test.x())?,
            test_y: test.y().clone(),
            reference: FoldRisk {
                risk_a: 0.0,
                risk_b: 0.0,
                risk_o: 0.0,
                tau: 0.0,
                losses: Vec::new(),
                sigma2: 0.0,
            },
        };
        ctx.reference = Self::evaluate(config, &plan.folds[k], &ctx, k, config.d_max)?;
        Ok(ctx)
    }

    fn evaluate(config: &PODConfig, split: &FoldSplit, ctx: &FoldContext, k: usize, d: usize) -> Result<FoldRisk> {
        let seed = derive_seed(config.seed, &[stream::LEARNER, k as u64, d as u64]);
        let predictor = fit_selected(
            &config.learners,
            &ctx.train_scores,
            d,
            &ctx.train_y,
            &config.loss,
            config.inner_folds,
            seed,
        )?;
        let predictions = predictor.predict(&ctx.test_scores)?;
        let losses = config.loss.per_sample(&ctx.test_y, &predictions)?;
        FoldRisk::from_losses(split, losses)
    }

    pub fn plan(&self) -> &FoldPlan {
        &self.plan
    }

    /// Fold risks of the `d_max` predictors.
    pub fn reference_risks(&self) -> Vec<FoldRisk> {
        self.folds.iter().map(|f| f.reference.clone()).collect()
    }

    /// Fold risks of the dimension-`d` predictors.
    pub fn fold_risks(&self, d: usize) -> Result<Vec<FoldRisk>> {
        if d > self.config.d_max {
            return Err(PodError::Config(format!("d = {d} exceeds dmax = {}", self.config.d_max)));
        }
        if d == self.config.d_max {
            return Ok(self.reference_risks());
        }
        self.folds
            .par_iter()
            .enumerate()
            .map(|(k, ctx)| Self::evaluate(self.config, &self.plan.folds[k], ctx, k, d).map_err(|e| e.in_fold(k)))
            .collect()
    }

    pub fn test(&self, d: usize) -> Result<TestResult> {
        let candidate = self.fold_risks(d)?;
        let reference = self.reference_risks();
        let psi = psi_hat(&candidate, &reference)?;
        let nu2 = variance_hat(&candidate, &reference, self.plan.tau_realized)?;
        TestResult::new(d, psi, nu2, self.plan.n, self.plan.tau_realized, self.config.alpha)
    }

    /// Sequential selection: test `d = 0, 1, …` and stop at the first
    /// non-rejection.
    pub fn select(&self) -> Result<PODResult> {
        let mut trail = Vec::new();
        for d in 0..self.config.d_max {
            let result = self.test(d)?;
            let stop = !result.reject;
            trail.push(result);
            if stop {
                break;
            }
        }
        Ok(self.result(trail))
    }

    /// Tests `d = 0, 1, …` until a statistic falls below `z_stop`. The trail
    /// then determines `d̂` for every critical value `z ≥ z_stop`.
    pub fn trail_until(&self, z_stop: f64) -> Result<Vec<TestResult>> {
        let mut trail = Vec::new();
        for d in 0..self.config.d_max {
            let result = self.test(d)?;
            let stop = result.t < z_stop;
            trail.push(result);
            if stop {
                break;
            }
        }
        Ok(trail)
    }

    /// Tests every `d` in `0..d_max` without stopping.
    pub fn test_all(&self) -> Result<PODResult> {
        let trail = (0..self.config.d_max).map(|d| self.test(d)).collect::<Result<Vec<_>>>()?;
        Ok(self.result(trail))
    }

    fn result(&self, trail: Vec<TestResult>) -> PODResult {
        PODResult {
            d_hat: PODResult::stop_at(&trail, self.config.d_max),
            n: self.plan.n,
            tau_realized: self.plan.tau_realized,
            trail,
            config: self.config.clone(),
        }
    }
}

/// Runs the sequential procedure on `data`.
pub fn select_order(data: &Dataset, config: &PODConfig) -> Result<PODResult> {
    CrossFit::new(data, config)?.select()
}

/// Runs every test `d = 0..d_max` and reports the sequential `d̂` derived
/// from the full trail.
pub fn test_all(data: &Dataset, config: &PODConfig) -> Result<PODResult> {
    CrossFit::new(data, config)?.test_all()
}
