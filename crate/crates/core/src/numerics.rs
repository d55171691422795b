//! Dense linear algebra used by the reducers and baselines.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{PodError, Result};

/// Jacobi stops when the off-diagonal Frobenius norm falls below this
/// fraction of the input's Frobenius norm.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Eigenvalues in descending order with orthonormal eigenvectors as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `V diag(f(λ)) Vᵀ`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Array2<f64> {
        let scaled = &self.vectors * &self.values.mapv(f);
        scaled.dot(&self.vectors.t())
    }
}

/// Sample covariance with the `1/n` normalization.
pub fn sample_covariance(x: &Array2<f64>) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < 2 {
        return Err(PodError::Data(format!("covariance needs n >= 2, got {n}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = x - &mean;
    let mut cov = centered.t().dot(&centered) / n as f64;
    symmetrize(&mut cov);
    Ok(cov)
}

pub(crate) fn symmetrize(s: &mut Array2<f64>) {
    let m = s.nrows();
    for i in 0..m {
        for j in (i + 1)..m {
            let v = 0.5 * (s[[i, j]] + s[[j, i]]);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
}

/// Eigendecomposition of a real symmetric matrix by cyclic Jacobi sweeps.
///
/// Eigenvalues are returned in descending order (stable in the diagonal
/// position for exact ties). Each eigenvector is signed so that its entry of
/// largest magnitude is positive, ties going to the lowest index.
pub fn sym_eigen(s: &Array2<f64>) -> Result<Spectrum> {
    let m = s.nrows();
    if m == 0 || s.ncols() != m {
        return Err(PodError::Dimension(format!(
            "sym_eigen needs a non-empty square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(PodError::Numerical("non-finite entry in symmetric matrix".into()));
    }
    let scale = s.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut asym = 0.0f64;
    for i in 0..m {
        for j in (i + 1)..m {
            asym = asym.max((s[[i, j]] - s[[j, i]]).abs());
        }
    }
    if asym > SYMMETRY_TOLERANCE * scale.max(1.0) {
        return Err(PodError::NotSymmetric(asym));
    }

    let mut a: Vec<f64> = s.iter().copied().collect();
    // row r of `vt` is eigenvector r
    let mut vt = vec![0.0; m * m];
    for i in 0..m {
        vt[i * m + i] = 1.0;
    }
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = JACOBI_TOLERANCE * norm;

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a, m) <= target {
            converged = true;
            break;
        }
        for p in 0..m.saturating_sub(1) {
            for q in (p + 1)..m {
                let apq = a[p * m + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * m + p];
                let aqq = a[q * m + q];
                // annihilation would be lost in rounding: zero it directly
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) {
                    a[p * m + q] = 0.0;
                    a[q * m + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                rotate(&mut a, &mut vt, m, p, q, c, sn);
            }
        }
    }
    if !converged {
        if off_diagonal_norm(&a, m) <= target {
            converged = true;
        }
    }
    if !converged {
        return Err(PodError::NoConvergence(JACOBI_MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| a[j * m + j].total_cmp(&a[i * m + i]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| a[i * m + i]));
    let mut vectors = Array2::zeros((m, m));
    for (col, &src) in order.iter().enumerate() {
        let row = &vt[src * m..(src + 1) * m];
        let mut lead = 0;
        for (k, v) in row.iter().enumerate() {
            if v.abs() > row[lead].abs() {
                lead = k;
            }
        }
        let sign = if row[lead] < 0.0 { -1.0 } else { 1.0 };
        for (k, v) in row.iter().enumerate() {
            vectors[[k, col]] = sign * v;
        }
    }
    Ok(Spectrum { values, vectors })
}

fn off_diagonal_norm(a: &[f64], m: usize) -> f64 {
    let mut ss = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                ss += a[i * m + j] * a[i * m + j];
            }
        }
    }
    ss.sqrt()
}

/// `A <- Jᵀ A J`, `V <- V J` for the plane rotation in (p, q).
fn rotate(a: &mut [f64], vt: &mut [f64], m: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m {
        let akp = a[k * m + p];
        let akq = a[k * m + q];
        a[k * m + p] = c * akp - s * akq;
        a[k * m + q] = s * akp + c * akq;
    }
    let (head, tail) = a.split_at_mut(q * m);
    let row_p = &mut head[p * m..(p + 1) * m];
    let row_q = &mut tail[..m];
    for (ap, aq) in row_p.iter_mut().zip(row_q.iter_mut()) {
        let (x, y) = (*ap, *aq);
        *ap = c * x - s * y;
        *aq = s * x + c * y;
    }
    let (head, tail) = vt.split_at_mut(q * m);
    let vp = &mut head[p * m..(p + 1) * m];
    let vq = &mut tail[..m];
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (u, w) = (*x, *y);
        *x = c * u - s * w;
        *y = s * u + c * w;
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(s: &Array2<f64>) -> Result<Array2<f64>> {
    let m = s.nrows();
    if s.ncols() != m {
        return Err(PodError::Dimension("cholesky needs a square matrix".into()));
    }
    let diag_scale = (0..m).fold(0.0f64, |acc, i| acc.max(s[[i, i]].abs())).max(f64::MIN_POSITIVE);
    let mut l = Array2::<f64>::zeros((m, m));
    for j in 0..m {
        let mut d = s[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d <= 1e-13 * diag_scale {
            return Err(PodError::Singular(format!(
                "matrix not positive definite at pivot {j}"
            )));
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..m {
            let mut v = s[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / d;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` column by column.
fn cholesky_solve(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let m = l.nrows();
    let mut x = b.clone();
    for mut col in x.axis_iter_mut(Axis(1)) {
        for i in 0..m {
            let mut v = col[i];
            for k in 0..i {
                v -= l[[i, k]] * col[k];
            }
            col[i] = v / l[[i, i]];
        }
        for i in (0..m).rev() {
            let mut v = col[i];
            for k in (i + 1)..m {
                v -= l[[k, i]] * col[k];
            }
            col[i] = v / l[[i, i]];
        }
    }
    x
}

/// Minimizer of `‖aβ − b‖² + ridge‖β‖²` via the normal equations.
///
/// With `ridge == 0` a rank-deficient design is reported as
/// [`PodError::Singular`]; callers retry with a positive ridge.
pub fn ols_solve(a: &Array2<f64>, b: &Array2<f64>, ridge: f64) -> Result<Array2<f64>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(PodError::Dimension("ols_solve needs a non-empty design".into()));
    }
    if a.nrows() != b.nrows() {
        return Err(PodError::Dimension(format!(
            "design has {} rows, response has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(PodError::Config(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let mut gram = a.t().dot(a);
    for i in 0..gram.nrows() {
        gram[[i, i]] += ridge;
    }
    let rhs = a.t().dot(b);
    let l = cholesky(&gram)?;
    let mut beta = cholesky_solve(&l, &rhs);
    // one step of iterative refinement
    let resid = &rhs - &gram.dot(&beta);
    beta += &cholesky_solve(&l, &resid);
    Ok(beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Gaussian;
    use ndarray::array;
    use proptest::prelude::*;

    fn random_symmetric(m: usize, seed: u64) -> Array2<f64> {
        let mut g = Gaussian::from_seed(seed);
        let a = Array2::from_shape_fn((m, m), |_| g.sample());
        (&a + &a.t()) / 2.0
    }

    fn frob(a: &Array2<f64>) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_invariants(s: &Array2<f64>, sp: &Spectrum) {
        let m = s.nrows();
        for j in 1..m {
            assert!(sp.values[j - 1] >= sp.values[j]);
        }
        let gram = sp.vectors.t().dot(&sp.vectors);
        assert!(frob(&(gram - Array2::<f64>::eye(m))) <= 1e-8);
        let recon = sp.map_values(|v| v);
        assert!(frob(&(s - &recon)) <= 1e-8 * (1.0 + frob(s)));
    }

    #[test]
    fn covariance_two_points() {
        let x = array![[1.0, 0.0], [-1.0, 0.0]];
        assert_eq!(sample_covariance(&x).unwrap(), array![[1.0, 0.0], [0.0, 0.0]]);
        let c = sample_covariance(&array![[2.0, 3.0], [2.0, 3.0], [2.0, 3.0]]).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        assert!(sample_covariance(&array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn covariance_of_standard_normals() {
        let mut g = Gaussian::from_seed(5);
        let x = Array2::from_shape_fn((20_000, 3), |_| g.sample());
        let c = sample_covariance(&x).unwrap();
        let eye = Array2::<f64>::eye(3);
        assert!(c.iter().zip(eye.iter()).all(|(a, b)| (a - b).abs() < 0.05));
    }

    #[test]
    fn diagonal_matrix() {
        let s = array![[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]];
        let sp = sym_eigen(&s).unwrap();
        assert_eq!(sp.values.to_vec(), vec![3.0, 2.0, 1.0]);
        let expected = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        assert_eq!(sp.vectors, expected);
    }

    #[test]
    fn two_by_two_hand_solution() {
        // eigenpairs of [[2,1],[1,2]]: 3 with (1,1)/√2 and 1 with (1,-1)/√2
        let sp = sym_eigen(&array![[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((sp.values[0] - 3.0).abs() < 1e-14 && (sp.values[1] - 1.0).abs() < 1e-14);
        assert!((sp.vectors[[0, 0]] - h).abs() < 1e-14 && (sp.vectors[[1, 0]] - h).abs() < 1e-14);
        // sign rule: tie in magnitude goes to index 0, which is made positive
        assert!((sp.vectors[[0, 1]] - h).abs() < 1e-14 && (sp.vectors[[1, 1]] + h).abs() < 1e-14);
    }

    #[test]
    fn random_8x8_reconstructs() {
        let s = random_symmetric(8, 42);
        let sp = sym_eigen(&s).unwrap();
        check_invariants(&s, &sp);
    }

    #[test]
    fn matches_nalgebra_spectrum() {
        let s = random_symmetric(30, 9);
        let sp = sym_eigen(&s).unwrap();
        let na = nalgebra::DMatrix::from_fn(30, 30, |i, j| s[[i, j]]);
        let mut reference: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in sp.values.iter().zip(reference) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_asymmetric_and_bad_shapes() {
        assert!(matches!(
            sym_eigen(&array![[1.0, 2.0], [0.0, 1.0]]),
            Err(PodError::NotSymmetric(_))
        ));
        assert!(sym_eigen(&Array2::zeros((2, 3))).is_err());
        let one = sym_eigen(&array![[-4.0]]).unwrap();
        assert_eq!(one.values[0], -4.0);
        assert_eq!(one.vectors[[0, 0]], 1.0);
    }

    #[test]
    fn ols_identity_and_intercept() {
        let beta = ols_solve(&Array2::eye(2), &array![[3.0], [4.0]], 0.0).unwrap();
        assert!((beta[[0, 0]] - 3.0).abs() < 1e-14 && (beta[[1, 0]] - 4.0).abs() < 1e-14);
        let ones = Array2::ones((4, 1));
        let beta = ols_solve(&ones, &array![[1.0], [2.0], [3.0], [4.0]], 0.0).unwrap();
        assert!((beta[[0, 0]] - 2.5).abs() < 1e-14);
    }

    #[test]
    fn ols_closed_form_2x2() {
        // [[2,1],[1,3]] β = (1,2) => β = (1/5, 3/5)
        let a = array![[2.0, 1.0], [1.0, 3.0]];
        let beta = ols_solve(&a, &array![[1.0], [2.0]], 0.0).unwrap();
        assert!((beta[[0, 0]] - 0.2).abs() < 1e-13 && (beta[[1, 0]] - 0.6).abs() < 1e-13);
    }

    #[test]
    fn ols_singular_without_ridge() {
        let a = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let b = array![[1.0], [2.0], [3.0]];
        assert!(matches!(ols_solve(&a, &b, 0.0), Err(PodError::Singular(_))));
        assert!(ols_solve(&a, &b, 1e-6).is_ok());
    }

    #[test]
    fn ridge_shrinks_monotonically() {
        let mut g = Gaussian::from_seed(77);
        let a = Array2::from_shape_fn((40, 4), |_| g.sample());
        let b = Array2::from_shape_fn((40, 1), |_| g.sample());
        let norms: Vec<f64> = [0.0, 1.0, 10.0, 100.0]
            .iter()
            .map(|&r| frob(&ols_solve(&a, &b, r).unwrap()))
            .collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
    }

    #[test]
    fn cholesky_reconstructs() {
        let s = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let l = cholesky(&s).unwrap();
        assert!(frob(&(l.dot(&l.t()) - &s)) < 1e-13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn eigen_invariants(seed in any::<u64>(), m in 1usize..12) {
            let s = random_symmetric(m, seed);
            let sp = sym_eigen(&s).unwrap();
            check_invariants(&s, &sp);
            let trace: f64 = (0..m).map(|i| s[[i, i]]).sum();
            prop_assert!((sp.values.sum() - trace).abs() <= 1e-8 * (1.0 + trace.abs()));
        }

        #[test]
        fn eigenvalues_invariant_under_rotation(seed in any::<u64>(), m in 2usize..9) {
            let s = random_symmetric(m, seed);
            let q = sym_eigen(&random_symmetric(m, seed ^ 0xABCD)).unwrap().vectors;
            let rotated = q.t().dot(&s).dot(&q);
            let mut rotated = rotated;
            symmetrize(&mut rotated);
            let a = sym_eigen(&s).unwrap().values;
            let b = sym_eigen(&rotated).unwrap().values;
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-8);
            }
        }

        #[test]
        fn covariance_row_permutation_invariant(seed in any::<u64>()) {
            let mut g = Gaussian::from_seed(seed);
            let x = Array2::from_shape_fn((15, 3), |_| g.sample());
            let mut rng = crate::rng::rng_from_seed(seed);
            let perm = crate::rng::permutation(15, &mut rng);
            let xp = x.select(Axis(0), &perm);
            let (a, b) = (sample_covariance(&x).unwrap(), sample_covariance(&xp).unwrap());
            prop_assert!(frob(&(a - b)) < 1e-12);
        }

        #[test]
        fn ols_normal_equation_residual(seed in any::<u64>()) {
            let mut g = Gaussian::from_seed(seed);
            let a = Array2::from_shape_fn((30, 5), |_| g.sample());
            let b = Array2::from_shape_fn((30, 2), |_| g.sample());
            let beta = ols_solve(&a, &b, 0.0).unwrap();
            let r = a.t().dot(&(a.dot(&beta) - &b));
            prop_assert!(frob(&r) <= 1e-8 * (1.0 + frob(&a.t().dot(&b))));
        }
    }
}
