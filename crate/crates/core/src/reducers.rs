//! Reduction maps: fitted projections whose score coordinates are ordered by
//! decreasing importance.
//!
//! SIR and DR work on whitened predictors `z = (x - mean) Σ^{-1/2}`. Their
//! direction matrix `w` is orthonormal in that whitened space, and scores are
//! `z w`. Directions in the original predictor space are available through
//! [`ReductionMap::original_directions`].

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{CenterScale, Dataset, Response};
use crate::error::{PodError, Result};
use crate::numerics::{ols_solve, sample_covariance, sym_eigen, symmetrize, Spectrum};

/// Eigenvalues of the predictor covariance below this fraction of the largest
/// are treated as zero when whitening.
const WHITEN_RANK_TOLERANCE: f64 = 1e-10;
/// Squared singular values below this fraction of the largest count as zero
/// for reduced-rank regression.
const RRR_RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ReducerSpec {
    /// Scores are the first `d_max` raw predictor columns.
    Identity,
    Pca { standardize: bool },
    Sir { slices: usize },
    Dr { slices: usize },
    Rrr { ridge: f64 },
}

impl ReducerSpec {
    pub fn fit(&self, data: &Dataset, d_max: usize) -> Result<ReductionMap> {
        match *self {
            ReducerSpec::Identity => ReductionMap::identity(data.p(), d_max),
            ReducerSpec::Pca { standardize } => fit_pca(data.x(), d_max, standardize),
            ReducerSpec::Sir { slices } => fit_sir(data.x(), data.y(), d_max, slices),
            ReducerSpec::Dr { slices } => fit_dr(data.x(), data.y(), d_max, slices),
            ReducerSpec::Rrr { ridge } => match data.y() {
                Response::Continuous(y) => fit_rrr(data.x(), y, d_max, ridge),
                Response::Categorical { .. } => Err(PodError::Config(
                    "reduced-rank regression needs a continuous response".into(),
                )),
            },
        }
    }
}

impl fmt::Display for ReducerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReducerSpec::Identity => write!(f, "identity"),
            ReducerSpec::Pca { standardize: false } => write!(f, "pca"),
            ReducerSpec::Pca { standardize: true } => write!(f, "pca-std"),
            ReducerSpec::Sir { slices } => write!(f, "sir:{slices}"),
            ReducerSpec::Dr { slices } => write!(f, "dr:{slices}"),
            ReducerSpec::Rrr { ridge } => write!(f, "rrr:{ridge}"),
        }
    }
}

impl FromStr for ReducerSpec {
    type Err = PodError;

    /// `pca`, `pca-std`, `sir[:H]`, `dr[:H]`, `rrr[:ridge]`, `identity`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let arg = parts.next();
        if parts.next().is_some() {
            return Err(PodError::Config(format!("too many ':' fields in reducer {s:?}")));
        }
        let slices = |default: usize| -> Result<usize> {
            arg.map_or(Ok(default), |a| {
                a.parse()
                    .map_err(|_| PodError::Config(format!("bad slice count in reducer {s:?}")))
            })
        };
        match name {
            "identity" => Ok(ReducerSpec::Identity),
            "pca" => Ok(ReducerSpec::Pca { standardize: false }),
            "pca-std" => Ok(ReducerSpec::Pca { standardize: true }),
            "sir" => Ok(ReducerSpec::Sir { slices: slices(10)? }),
            "dr" => Ok(ReducerSpec::Dr { slices: slices(4)? }),
            "rrr" => Ok(ReducerSpec::Rrr {
                ridge: arg.map_or(Ok(0.0), |a| {
                    a.parse()
                        .map_err(|_| PodError::Config(format!("bad ridge in reducer {s:?}")))
                })?,
            }),
            other => Err(PodError::Config(format!(
                "unknown reducer {other:?} (expected pca, pca-std, sir, dr, rrr or identity)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ReductionKind {
    Identity,
    Pca,
    Sir { slices: usize },
    Dr { slices: usize },
    Rrr,
}

/// Preprocessing baked into a fitted map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Preprocess {
    None,
    Center { mean: Array1<f64> },
    Standardize(CenterScale),
    /// `(x - mean) · transform`, transform is `p × r`.
    Whiten { mean: Array1<f64>, transform: Array2<f64> },
}

impl Preprocess {
    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Preprocess::None => x.clone(),
            Preprocess::Center { mean } => x - mean,
            Preprocess::Standardize(cs) => cs.apply(x),
            Preprocess::Whiten { mean, transform } => (x - mean).dot(transform),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionMap {
    pub kind: ReductionKind,
    /// Directions as columns, most important first.
    pub w: Array2<f64>,
    pub importance: Array1<f64>,
    pub preprocess: Preprocess,
    /// Multiplier applied to every score.
    pub score_scale: f64,
    /// Number of trailing columns filled in beyond the method's rank.
    pub padded: usize,
    p: usize,
}

impl ReductionMap {
    pub fn identity(p: usize, d_max: usize) -> Result<Self> {
        check_d_max(d_max, p)?;
        Ok(Self {
            kind: ReductionKind::Identity,
            w: Array2::eye(p).slice(s![.., ..d_max]).to_owned(),
            importance: Array1::ones(d_max),
            preprocess: Preprocess::None,
            score_scale: 1.0,
            padded: 0,
            p,
        })
    }

    pub fn d_max(&self) -> usize {
        self.w.ncols()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Surrogate scores, one row per observation.
    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.p {
            return Err(PodError::Dimension(format!(
                "map fitted on {} predictors, got {}",
                self.p,
                x.ncols()
            )));
        }
        let z = self.preprocess.apply(x);
        let mut scores = z.dot(&self.w);
        if self.score_scale != 1.0 {
            scores *= self.score_scale;
        }
        Ok(scores)
    }

    /// Directions expressed in the original predictor coordinates, made
    /// orthonormal by Gram–Schmidt in importance order (so the span of the
    /// first `d` columns is the span of the first `d` fitted directions).
    pub fn original_directions(&self) -> Array2<f64> {
        let raw = match &self.preprocess {
            Preprocess::Whiten { transform, .. } => transform.dot(&self.w),
            Preprocess::Standardize(cs) => {
                let inv = cs.scale.mapv(|s| 1.0 / s);
                &self.w * &inv.insert_axis(Axis(1))
            }
            _ => self.w.clone(),
        };
        gram_schmidt(&raw)
    }
}

fn check_d_max(d_max: usize, limit: usize) -> Result<()> {
    if d_max == 0 || d_max > limit {
        return Err(PodError::Config(format!(
            "d_max must lie in 1..={limit}, got {d_max}"
        )));
    }
    Ok(())
}

pub(crate) fn gram_schmidt(a: &Array2<f64>) -> Array2<f64> {
    let mut q = a.clone();
    for j in 0..q.ncols() {
        for _ in 0..2 {
            for k in 0..j {
                let proj = q.column(k).dot(&q.column(j));
                let qk = q.column(k).to_owned();
                q.column_mut(j).scaled_add(-proj, &qk);
            }
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        if norm > 0.0 {
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
    }
    q
}

/// Principal components of the sample covariance. Scores carry a `p^{-1/2}`
/// factor.
pub fn fit_pca(x: &Array2<f64>, d_max: usize, standardize: bool) -> Result<ReductionMap> {
    let (n, p) = x.dim();
    if n < 2 {
        return Err(PodError::Data("PCA needs at least two rows".into()));
    }
    check_d_max(d_max, p.min(n - 1))?;
    let (z, preprocess) = if standardize {
        let cs = CenterScale::fit(x)?;
        (cs.apply(x), Preprocess::Standardize(cs))
    } else {
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        (x - &mean, Preprocess::Center { mean })
    };

    let (w, importance) = if p > n {
        // eigenvectors of ZᵀZ/n from those of the smaller ZZᵀ/n
        let mut gram = z.dot(&z.t()) / n as f64;
        symmetrize(&mut gram);
        let sp = sym_eigen(&gram)?;
        let mut w = Array2::zeros((p, d_max));
        for j in 0..d_max {
            let lambda = sp.values[j];
            if lambda <= 0.0 {
                return Err(PodError::Numerical(format!(
                    "covariance has rank below d_max = {d_max}"
                )));
            }
            let v = z.t().dot(&sp.vectors.column(j)) / (n as f64 * lambda).sqrt();
            w.column_mut(j).assign(&v);
        }
        let mut w = gram_schmidt(&w);
        sign_columns(&mut w);
        (w, sp.values.slice(s![..d_max]).to_owned())
    } else {
        let cov = sample_covariance(&z)?;
        let sp = sym_eigen(&cov)?;
        (
            sp.vectors.slice(s![.., ..d_max]).to_owned(),
            sp.values.slice(s![..d_max]).to_owned(),
        )
    };

    Ok(ReductionMap {
        kind: ReductionKind::Pca,
        w,
        importance,
        preprocess,
        score_scale: 1.0 / (p as f64).sqrt(),
        padded: 0,
        p,
    })
}

/// Largest-magnitude entry of each column made positive, ties to the lowest
/// index.
fn sign_columns(w: &mut Array2<f64>) {
    for mut col in w.axis_iter_mut(Axis(1)) {
        let mut lead = 0;
        for (k, v) in col.iter().enumerate() {
            if v.abs() > col[lead].abs() {
                lead = k;
            }
        }
        if col[lead] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
}

struct Whitened {
    z: Array2<f64>,
    mean: Array1<f64>,
    transform: Array2<f64>,
}

/// `z = (x - mean) V_r diag(λ_r^{-1/2})` over the numerically nonzero part of
/// the covariance spectrum, so `z` has identity covariance in `r` dimensions.
fn whiten(x: &Array2<f64>) -> Result<Whitened> {
    let n = x.nrows();
    if n < 2 {
        return Err(PodError::Data("inverse regression needs at least two rows".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let cov = sample_covariance(x)?;
    let sp: Spectrum = sym_eigen(&cov)?;
    let top = sp.values[0];
    if top <= 0.0 {
        return Err(PodError::Data("predictors have zero variance".into()));
    }
    let r = sp
        .values
        .iter()
        .take_while(|&&v| v > WHITEN_RANK_TOLERANCE * top)
        .count();
    let mut transform = sp.vectors.slice(s![.., ..r]).to_owned();
    for (j, mut col) in transform.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|v| v / sp.values[j].sqrt());
    }
    let z = (x - &mean).dot(&transform);
    Ok(Whitened { z, mean, transform })
}

/// Row indices of each slice. Continuous responses are cut into `h` slices of
/// near-equal size by rank; categorical responses slice by class, skipping
/// classes absent from the sample.
pub fn slice_indices(y: &Response, h: usize) -> Result<Vec<Vec<usize>>> {
    match y {
        Response::Continuous(m) => {
            if m.ncols() != 1 {
                return Err(PodError::Config(format!(
                    "slicing needs a scalar response, got {} columns",
                    m.ncols()
                )));
            }
            if h < 2 {
                return Err(PodError::Config(format!("need at least 2 slices, got {h}")));
            }
            let n = m.nrows();
            if n < h {
                return Err(PodError::Data(format!(
                    "{n} observations cannot fill {h} slices"
                )));
            }
            let col = m.column(0);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            Ok((0..h)
                .map(|k| order[k * n / h..(k + 1) * n / h].to_vec())
                .collect())
        }
        Response::Categorical { labels, classes } => {
            let mut groups = vec![Vec::new(); *classes];
            for (i, &l) in labels.iter().enumerate() {
                groups[l].push(i);
            }
            groups.retain(|g| !g.is_empty());
            if groups.len() < 2 {
                return Err(PodError::Data(
                    "categorical slicing needs at least two observed classes".into(),
                ));
            }
            Ok(groups)
        }
    }
}

struct SliceMoments {
    weight: f64,
    mean: Array1<f64>,
    second: Option<Array2<f64>>,
}

fn slice_moments(z: &Array2<f64>, slices: &[Vec<usize>], second: bool) -> Vec<SliceMoments> {
    let n = z.nrows() as f64;
    slices
        .iter()
        .map(|rows| {
            let zs = z.select(Axis(0), rows);
            let nh = rows.len() as f64;
            SliceMoments {
                weight: nh / n,
                mean: zs.mean_axis(Axis(0)).expect("non-empty slice"),
                second: second.then(|| zs.t().dot(&zs) / nh),
            }
        })
        .collect()
}

fn from_kernel(
    kind: ReductionKind,
    mut kernel: Array2<f64>,
    whitened: Whitened,
    d_max: usize,
    p: usize,
) -> Result<ReductionMap> {
    let r = whitened.transform.ncols();
    check_d_max(d_max, r)?;
    symmetrize(&mut kernel);
    let sp = sym_eigen(&kernel)?;
    Ok(ReductionMap {
        kind,
        w: sp.vectors.slice(s![.., ..d_max]).to_owned(),
        importance: sp.values.slice(s![..d_max]).to_owned(),
        preprocess: Preprocess::Whiten {
            mean: whitened.mean,
            transform: whitened.transform,
        },
        score_scale: 1.0,
        padded: 0,
        p,
    })
}

/// Sliced inverse regression: kernel `Σ_h p_h m_h m_hᵀ` of whitened slice means.
pub fn fit_sir(x: &Array2<f64>, y: &Response, d_max: usize, n_slices: usize) -> Result<ReductionMap> {
    check_rows(x, y)?;
    let slices = slice_indices(y, n_slices)?;
    let wh = whiten(x)?;
    let r = wh.z.ncols();
    let mut kernel = Array2::<f64>::zeros((r, r));
    for m in slice_moments(&wh.z, &slices, false) {
        let col = m.mean.view().insert_axis(Axis(1));
        kernel.scaled_add(m.weight, &col.dot(&col.t()));
    }
    from_kernel(
        ReductionKind::Sir {
            slices: slices.len(),
        },
        kernel,
        wh,
        d_max,
        x.ncols(),
    )
}

/// Directional regression kernel
/// `2 Σ p_h (V_h − I)² + 2 (Σ p_h U_h U_hᵀ)² + 2 (Σ p_h U_hᵀ U_h)(Σ p_h U_h U_hᵀ)`
/// with `U_h`, `V_h` the first and (uncentered) second slice moments of the
/// whitened predictors.
pub fn fit_dr(x: &Array2<f64>, y: &Response, d_max: usize, n_slices: usize) -> Result<ReductionMap> {
    check_rows(x, y)?;
    let slices = slice_indices(y, n_slices)?;
    let wh = whiten(x)?;
    let r = wh.z.ncols();
    let eye = Array2::<f64>::eye(r);
    let mut first = Array2::<f64>::zeros((r, r));
    let mut second = Array2::<f64>::zeros((r, r));
    let mut trace = 0.0;
    for m in slice_moments(&wh.z, &slices, true) {
        let u = m.mean.view().insert_axis(Axis(1));
        let uu = u.dot(&u.t());
        first.scaled_add(m.weight, &uu);
        trace += m.weight * m.mean.dot(&m.mean);
        let dv = m.second.expect("second moments requested") - &eye;
        second.scaled_add(m.weight, &dv.dot(&dv));
    }
    let kernel = 2.0 * &second + 2.0 * first.dot(&first) + 2.0 * trace * &first;
    from_kernel(
        ReductionKind::Dr {
            slices: slices.len(),
        },
        kernel,
        wh,
        d_max,
        x.ncols(),
    )
}

fn check_rows(x: &Array2<f64>, y: &Response) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(PodError::Dimension(format!(
            "{} predictor rows but {} responses",
            x.nrows(),
            y.len()
        )));
    }
    Ok(())
}

/// Reduced-rank regression directions: left singular vectors of the
/// least-squares coefficient matrix. Columns beyond its rank are filled from
/// the predictor covariance eigenvectors, projected off the fitted span.
pub fn fit_rrr(x: &Array2<f64>, y: &Array2<f64>, d_max: usize, ridge: f64) -> Result<ReductionMap> {
    let (n, p) = x.dim();
    if n != y.nrows() {
        return Err(PodError::Dimension(format!("{n} predictor rows but {} responses", y.nrows())));
    }
    if n < 2 {
        return Err(PodError::Data("reduced-rank regression needs at least two rows".into()));
    }
    check_d_max(d_max, p)?;
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let xc = x - &mean;
    let yc = y - &y.mean_axis(Axis(0)).expect("n >= 2");
    let coef = ols_solve(&xc, &yc, ridge)?;
    let mut outer = coef.dot(&coef.t());
    symmetrize(&mut outer);
    let sp = sym_eigen(&outer)?;
    let top = sp.values[0].max(0.0);
    let rank = sp
        .values
        .iter()
        .take_while(|&&v| top > 0.0 && v > RRR_RANK_TOLERANCE * top)
        .count()
        .min(d_max);

    let mut w = Array2::<f64>::zeros((p, d_max));
    let mut importance = Array1::<f64>::zeros(d_max);
    for j in 0..rank {
        w.column_mut(j).assign(&sp.vectors.column(j));
        importance[j] = sp.values[j].sqrt();
    }
    let mut filled = rank;
    if filled < d_max {
        let cov_sp = sym_eigen(&sample_covariance(x)?)?;
        for cand in cov_sp.vectors.axis_iter(Axis(1)) {
            if filled == d_max {
                break;
            }
            let mut v = cand.to_owned();
            for _ in 0..2 {
                for k in 0..filled {
                    let proj = w.column(k).dot(&v);
                    v.scaled_add(-proj, &w.column(k));
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                w.column_mut(filled).assign(&(v / norm));
                filled += 1;
            }
        }
    }
    Ok(ReductionMap {
        kind: ReductionKind::Rrr,
        w,
        importance,
        preprocess: Preprocess::Center { mean },
        score_scale: 1.0,
        padded: d_max - rank,
        p,
    })
}
