//! Eigenvalue-based order estimators and test statistics for factor models.
//!
//! Every statistic has a spectrum-level entry point taking a descending
//! eigenvalue vector, so it can be checked without any linear algebra.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PodError, Result};
use crate::numerics::{sym_eigen, symmetrize};
use crate::rng::{derive_seed, derived_rng, permutation, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    Ic,
    Er,
    Kapetanios,
    OnatskiStat,
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMethod::Ic => "ic",
            BaselineMethod::Er => "er",
            BaselineMethod::Kapetanios => "kapetanios",
            BaselineMethod::OnatskiStat => "onatski-stat",
        })
    }
}

impl FromStr for BaselineMethod {
    type Err = PodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ic" | "ic-p1" | "ic_p1" => Ok(BaselineMethod::Ic),
            "er" => Ok(BaselineMethod::Er),
            "kapetanios" => Ok(BaselineMethod::Kapetanios),
            "onatski-stat" | "onatski" => Ok(BaselineMethod::OnatskiStat),
            other => Err(PodError::Config(format!(
                "unknown baseline method {other:?} (expected ic, er, kapetanios or onatski-stat)"
            ))),
        }
    }
}

/// Outcome of one baseline run. Estimators fill `k_hat` and `values`
/// (criterion values per `k`); tests fill per-`d` statistics and decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: BaselineMethod,
    pub k_hat: Option<usize>,
    pub values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critical_values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reject: Option<Vec<bool>>,
    pub eigenvalues: Vec<f64>,
}

/// Eigenvalues (descending, length `p`) of the 1/n sample covariance. When
/// `p > n` the smaller `n × n` Gram matrix is decomposed and the spectrum is
/// padded with zeros.
pub fn covariance_spectrum(x: &Array2<f64>) -> Result<Vec<f64>> {
    let (n, p) = x.dim();
    if n < 2 {
        return Err(PodError::Data(format!("need at least 2 rows, got {n}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let xc = x - &mean;
    let mut gram = if p > n { xc.dot(&xc.t()) } else { xc.t().dot(&xc) };
    gram.mapv_inplace(|v| v / n as f64);
    symmetrize(&mut gram);
    let mut values = sym_eigen(&gram)?.values.to_vec();
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    values.resize(p, 0.0);
    Ok(values)
}

fn check_kmax(k_max: usize, limit: usize, what: &str) -> Result<()> {
    if k_max < 1 || k_max >= limit {
        return Err(PodError::Config(format!("{what}: kmax must lie in [1, {}), got {k_max}", limit)));
    }
    Ok(())
}

/// Tail sum `V(k) = Σ_{j > k} λ_j` of the eigenvalues of `XᵀX/(np)`.
pub fn residual_mass(eigs: &[f64], k: usize) -> f64 {
    eigs[k.min(eigs.len())..].iter().sum()
}

/// `IC_p1(k) = ln V(k) − k ((n+p)/(np)) ln((n+p)/(np))` for `k = 1..=k_max`,
/// given the eigenvalues of `XᵀX/(np)`. Returns the minimizing `k` (ties to
/// the smallest) and the criterion values.
pub fn ic_p1_from_spectrum(eigs: &[f64], n: usize, p: usize, k_max: usize) -> Result<(usize, Vec<f64>)> {
    check_kmax(k_max, eigs.len().min(n).max(1), "ic")?;
    let c = (n + p) as f64 / (n as f64 * p as f64);
    let mut values = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let v = residual_mass(eigs, k);
        if !(v > 0.0) {
            return Err(PodError::Numerical(format!(
                "residual eigenvalue mass is not positive at k = {k}"
            )));
        }
        values.push(v.ln() - k as f64 * c * c.ln());
    }
    Ok((argmin(&values) + 1, values))
}

/// `IC_p1` on centered `x`.
pub fn ic_p1(x: &Array2<f64>, k_max: usize) -> Result<BaselineResult> {
    let (n, p) = x.dim();
    let eigs: Vec<f64> = covariance_spectrum(x)?.iter().map(|v| v / p as f64).collect();
    let (k_hat, values) = ic_p1_from_spectrum(&eigs, n, p, k_max)?;
    Ok(BaselineResult {
        method: BaselineMethod::Ic,
        k_hat: Some(k_hat),
        values,
        critical_values: None,
        reject: None,
        eigenvalues: eigs,
    })
}

/// `argmax_{1 ≤ k ≤ k_max} λ_k / λ_{k+1}`, ties to the smallest `k`.
pub fn eigenvalue_ratio_from_spectrum(eigs: &[f64], k_max: usize) -> Result<(usize, Vec<f64>)> {
    check_kmax(k_max, eigs.len(), "er")?;
    let mut ratios = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let next = eigs[k];
        if !(next > 0.0) {
            return Err(PodError::Numerical(format!("eigenvalue {} is zero in the ratio range", k + 1)));
        }
        ratios.push(eigs[k - 1] / next);
    }
    let best = argmax(&ratios);
    Ok((best + 1, ratios))
}

pub fn eigenvalue_ratio(x: &Array2<f64>, k_max: usize) -> Result<BaselineResult> {
    let eigs = covariance_spectrum(x)?;
    let (k_hat, values) = eigenvalue_ratio_from_spectrum(&eigs, k_max)?;
    Ok(BaselineResult {
        method: BaselineMethod::Er,
        k_hat: Some(k_hat),
        values,
        critical_values: None,
        reject: None,
        eigenvalues: eigs,
    })
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `λ_{d+1} − λ_{d_max+1}` (1-based eigenvalue indices).
pub fn kapetanios_stat_from_spectrum(eigs: &[f64], d: usize, d_max: usize) -> Result<f64> {
    if d >= d_max || d_max >= eigs.len() {
        return Err(PodError::Config(format!(
            "kapetanios needs d < dmax < {} (got d = {d}, dmax = {d_max})",
            eigs.len()
        )));
    }
    Ok(eigs[d] - eigs[d_max])
}

pub fn kapetanios_stat(x: &Array2<f64>, d: usize, d_max: usize) -> Result<f64> {
    kapetanios_stat_from_spectrum(&covariance_spectrum(x)?, d, d_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSettings {
    pub replicates: usize,
    /// Subsample size as a fraction of `n`.
    pub fraction: f64,
}

impl Default for SubsampleSettings {
    fn default() -> Self {
        Self {
            replicates: 200,
            fraction: 0.7,
        }
    }
}

/// Kapetanios statistics for `d = 0..d_max` together with centered
/// subsampling draws approximating their null law.
#[derive(Debug, Clone, PartialEq)]
pub struct KapetaniosCalibration {
    pub eigenvalues: Vec<f64>,
    pub stats: Vec<f64>,
    /// `draws[d]` holds `√(m/n)·(T*_b − T)` over the subsamples.
    pub draws: Vec<Vec<f64>>,
}

/// Draws `B` subsamples of `m = ⌊fraction·n⌋` rows without replacement and
/// records the centered, rescaled statistic for every `d`.
pub fn kapetanios_calibrate(
    x: &Array2<f64>,
    d_max: usize,
    settings: SubsampleSettings,
    seed: u64,
) -> Result<KapetaniosCalibration> {
    let n = x.nrows();
    let m = (settings.fraction * n as f64).floor() as usize;
    if settings.replicates == 0 || m < 2 || m >= n {
        return Err(PodError::Config(format!(
            "subsampling needs at least one replicate and 2 <= m < n (m = {m}, n = {n})"
        )));
    }
    let eigs = covariance_spectrum(x)?;
    let stats = (0..d_max)
        .map(|d| kapetanios_stat_from_spectrum(&eigs, d, d_max))
        .collect::<Result<Vec<_>>>()?;
    let scale = (m as f64 / n as f64).sqrt();
    let boot: Vec<Vec<f64>> = (0..settings.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = derived_rng(derive_seed(seed, &[stream::SUBSAMPLE]), &[b as u64]);
            let rows = &permutation(n, &mut rng)[..m];
            let sub = covariance_spectrum(&x.select(Axis(0), rows))?;
            (0..d_max)
                .map(|d| Ok(scale * (kapetanios_stat_from_spectrum(&sub, d, d_max)? - stats[d])))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let draws = (0..d_max).map(|d| boot.iter().map(|row| row[d]).collect()).collect();
    Ok(KapetaniosCalibration {
        eigenvalues: eigs,
        stats,
        draws,
    })
}

impl KapetaniosCalibration {
    /// Critical values, per-`d` decisions and the sequential estimate at
    /// level `alpha`.
    pub fn decide(&self, alpha: f64) -> Result<BaselineResult> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(PodError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let critical: Vec<f64> = self
            .draws
            .iter()
            .map(|d| upper_quantile(&mut d.clone(), 1.0 - alpha))
            .collect();
        let reject: Vec<bool> = self.stats.iter().zip(&critical).map(|(t, c)| t > c).collect();
        let k_hat = reject.iter().position(|r| !r).unwrap_or(self.stats.len());
        Ok(BaselineResult {
            method: BaselineMethod::Kapetanios,
            k_hat: Some(k_hat),
            values: self.stats.clone(),
            critical_values: Some(critical),
            reject: Some(reject),
            eigenvalues: self.eigenvalues.clone(),
        })
    }
}

/// Sequential Kapetanios test for `d = 0..d_max`, calibrated by centered
/// subsampling: the null law of the statistic is approximated by
/// `√(m/n)·(T*_b − T)` and `H_d` is rejected when `T` exceeds its `1 − α`
/// quantile.
pub fn kapetanios_test(
    x: &Array2<f64>,
    d_max: usize,
    alpha: f64,
    settings: SubsampleSettings,
    seed: u64,
) -> Result<BaselineResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PodError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    kapetanios_calibrate(x, d_max, settings, seed)?.decide(alpha)
}

/// Empirical quantile: the `⌈q·B⌉`-th smallest draw.
fn upper_quantile(draws: &mut [f64], q: f64) -> f64 {
    draws.sort_by(f64::total_cmp);
    let idx = ((q * draws.len() as f64).ceil() as usize).clamp(1, draws.len()) - 1;
    draws[idx]
}

/// `max_{d < i ≤ d_max} (λ_i − λ_{i+1}) / (λ_{i+1} − λ_{i+2})` (1-based).
/// A zero denominator with a positive numerator gives `+∞`.
pub fn onatski_stat_from_spectrum(eigs: &[f64], d: usize, d_max: usize) -> Result<f64> {
    if d >= d_max || d_max + 2 > eigs.len() {
        return Err(PodError::Config(format!(
            "onatski needs d < dmax and dmax + 2 <= {} (got d = {d}, dmax = {d_max})",
            eigs.len()
        )));
    }
    let mut best = f64::NEG_INFINITY;
    for i in d..d_max {
        let num = eigs[i] - eigs[i + 1];
        let den = eigs[i + 1] - eigs[i + 2];
        let ratio = if den > 0.0 {
            num / den
        } else if num > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        best = best.max(ratio);
    }
    Ok(best)
}

/// Eigenvalues of the Hermitian matrix `h⁻¹ Σ_i z_i z_iᴴ` with
/// `z_i = u_i + √−1 v_i`, through its real `2p × 2p` embedding
/// `[[A, −B], [B, A]]`, whose spectrum is the Hermitian one doubled.
pub fn hermitian_pair_spectrum(u: &Array2<f64>, v: &Array2<f64>) -> Result<Vec<f64>> {
    if u.dim() != v.dim() || u.nrows() == 0 {
        return Err(PodError::Dimension("real and imaginary parts must share a nonempty shape".into()));
    }
    let (h, p) = u.dim();
    let scale = 1.0 / h as f64;
    let a = (u.t().dot(u) + v.t().dot(v)) * scale;
    let b = (v.t().dot(u) - u.t().dot(v)) * scale;
    let mut big = Array2::zeros((2 * p, 2 * p));
    big.slice_mut(s![..p, ..p]).assign(&a);
    big.slice_mut(s![p.., p..]).assign(&a);
    big.slice_mut(s![..p, p..]).assign(&(-&b));
    big.slice_mut(s![p.., ..p]).assign(&b);
    symmetrize(&mut big);
    let values = sym_eigen(&big)?.values;
    Ok(values.iter().step_by(2).copied().collect())
}

/// Spectrum used by the Onatski statistic: rows `i` and `i + ⌊n/2⌋` are
/// paired as real and imaginary parts; an odd final row is dropped. The data
/// are not centered, and the pairing depends on row order.
pub fn onatski_spectrum(x: &Array2<f64>) -> Result<Vec<f64>> {
    let n = x.nrows();
    if n < 4 {
        return Err(PodError::Data(format!("onatski needs at least 4 rows, got {n}")));
    }
    let h = n / 2;
    hermitian_pair_spectrum(&x.slice(s![..h, ..]).to_owned(), &x.slice(s![h..2 * h, ..]).to_owned())
}

pub fn onatski_stat(x: &Array2<f64>, d: usize, d_max: usize) -> Result<f64> {
    onatski_stat_from_spectrum(&onatski_spectrum(x)?, d, d_max)
}

/// Onatski statistics for every `d` in `0..d_max` (no decision rule).
pub fn onatski_stats(x: &Array2<f64>, d_max: usize) -> Result<BaselineResult> {
    let eigs = onatski_spectrum(x)?;
    let values = (0..d_max)
        .map(|d| onatski_stat_from_spectrum(&eigs, d, d_max))
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineResult {
        method: BaselineMethod::OnatskiStat,
        k_hat: None,
        values,
        critical_values: None,
        reject: None,
        eigenvalues: eigs,
    })
}
