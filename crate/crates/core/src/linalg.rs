//! Dense numerical kernel: Riccati and Stein/Lyapunov solvers, spectral
//! utilities and PSD square roots.
//!
//! All routines work on dynamically sized `nalgebra` matrices and are pure
//! functions of their inputs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type CMatrix = DMatrix<Complex64>;

const DARE_TOL: f64 = 1e-12;
const DARE_MAX_ITER: usize = 100_000;
const SERIES_REL_TOL: f64 = 1e-12;
const SERIES_MAX_TERMS: usize = 1_000_000;
/// Eigenvector bases worse conditioned than this are treated as defective.
const EIGVEC_COND_LIMIT: f64 = 1e8;

pub fn ensure_square(m: &Matrix, context: &'static str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::dims(context, "square matrix", format!("{}x{}", m.nrows(), m.ncols())));
    }
    Ok(m.nrows())
}

pub fn ensure_shape(m: &Matrix, rows: usize, cols: usize, context: &'static str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::dims(
            context,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

pub fn ensure_finite(m: &Matrix, name: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::validation(format!("{name} contains non-finite entries")))
    }
}

pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.nrows() == m.ncols() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn ensure_psd(m: &Matrix, name: &str) -> Result<()> {
    ensure_finite(m, name)?;
    if !is_symmetric(m, 1e-9) {
        return Err(Error::validation(format!("{name} is not symmetric")));
    }
    let min = min_symmetric_eigenvalue(m);
    if min < -1e-10 * (1.0 + m.amax()) {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    Ok(())
}

pub fn ensure_pd(m: &Matrix, name: &str) -> Result<()> {
    ensure_finite(m, name)?;
    if !is_symmetric(m, 1e-9) {
        return Err(Error::validation(format!("{name} is not symmetric")));
    }
    if symmetrize(m).cholesky().is_none() {
        return Err(Error::validation(format!("{name} is not positive definite")));
    }
    Ok(())
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(m: &Matrix, name: &str) -> Result<Matrix> {
    symmetrize(m)
        .cholesky()
        .map(|c| symmetrize(&c.inverse()))
        .ok_or_else(|| Error::validation(format!("{name} is not positive definite")))
}

/// `ln |m|` for a symmetric positive definite matrix.
pub fn spd_log_det(m: &Matrix, name: &str) -> Result<f64> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::validation(format!("{name} is not positive definite")))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Residual of the filter-form Riccati equation
/// `P = A P Aᵀ + Q − A P Cᵀ (C P Cᵀ + R)⁻¹ C P Aᵀ` (Frobenius norm).
pub fn dare_residual(a: &Matrix, c: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> f64 {
    match riccati_map(a, c, q, r, p) {
        Some(next) => (p - next).norm(),
        None => f64::INFINITY,
    }
}

fn riccati_map(a: &Matrix, c: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Option<Matrix> {
    let apct = a * p * c.transpose();
    let s = c * p * c.transpose() + r;
    let s_inv_capt = symmetrize(&s).cholesky()?.solve(&apct.transpose());
    Some(symmetrize(&(a * p * a.transpose() + q - &apct * s_inv_capt)))
}

/// Stabilizing solution of the discrete algebraic Riccati equation in filter form,
/// `P = A P Aᵀ + Q − A P Cᵀ (C P Cᵀ + R)⁻¹ C P Aᵀ`.
///
/// The control Riccati equation is obtained with `A → Aᵀ, C → Bᵀ, Q → W, R → U`.
/// Solved by fixed-point iteration of the Riccati recursion from `P₀ = Q`.
pub fn solve_dare(a: &Matrix, c: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = ensure_square(a, "solve_dare A")?;
    let m = c.nrows();
    ensure_shape(c, m, n, "solve_dare C")?;
    ensure_shape(q, n, n, "solve_dare Q")?;
    ensure_shape(r, m, m, "solve_dare R")?;
    ensure_finite(a, "A")?;
    ensure_finite(c, "C")?;
    ensure_psd(q, "Q")?;
    ensure_pd(r, "R")?;

    let mut p = symmetrize(q);
    let mut last_step = f64::INFINITY;
    for _ in 0..DARE_MAX_ITER {
        let next = riccati_map(a, c, q, r, &p).ok_or_else(|| Error::SolverFailure {
            solver: "solve_dare",
            reason: "innovation covariance lost positive definiteness".into(),
            residual: last_step,
        })?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::SolverFailure {
                solver: "solve_dare",
                reason: "iteration diverged (is (A, C) detectable?)".into(),
                residual: last_step,
            });
        }
        last_step = (&next - &p).norm();
        p = next;
        if last_step < DARE_TOL * p.norm().max(1.0) {
            let residual = dare_residual(a, c, q, r, &p);
            if residual > 1e-9 * (1.0 + p.norm()) {
                return Err(Error::SolverFailure {
                    solver: "solve_dare",
                    reason: "converged iterate fails the residual check".into(),
                    residual,
                });
            }
            return Ok(p);
        }
    }
    Err(Error::SolverFailure {
        solver: "solve_dare",
        reason: format!("no convergence in {DARE_MAX_ITER} iterations"),
        residual: last_step,
    })
}

/// Solution `X` of the Stein (discrete Lyapunov) equation `X = A X Aᵀ + Q`.
///
/// Solved exactly through the Kronecker system `(I − A⊗A) vec(X) = vec(Q)`.
/// Transposed variants (`X = Aᵀ X A + Q`) are obtained by passing `Aᵀ`.
pub fn solve_dlyap(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = ensure_square(a, "solve_dlyap A")?;
    ensure_shape(q, n, n, "solve_dlyap Q")?;
    ensure_finite(a, "A")?;
    ensure_finite(q, "Q")?;
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let radius = spectral_radius(a)?;
    if radius >= 1.0 {
        return Err(Error::Unstable {
            what: "Lyapunov system matrix".into(),
            radius,
        });
    }
    let system = Matrix::identity(n * n, n * n) - a.kronecker(a);
    // nalgebra storage is column-major, so the raw slice is vec(Q).
    let rhs = Vector::from_column_slice(q.as_slice());
    let sol = system.lu().solve(&rhs).ok_or_else(|| Error::SolverFailure {
        solver: "solve_dlyap",
        reason: "singular Kronecker system".into(),
        residual: f64::INFINITY,
    })?;
    let mut x = Matrix::from_column_slice(n, n, sol.as_slice());
    if is_symmetric(q, 1e-12) {
        x = symmetrize(&x);
    }
    let residual = (&x - a * &x * a.transpose() - q).norm();
    if residual > 1e-10 * (1.0 + x.norm()) {
        return Err(Error::SolverFailure {
            solver: "solve_dlyap",
            reason: "solution fails the residual check".into(),
            residual,
        });
    }
    Ok(x)
}

/// Eigenvalues of a real square matrix.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex64>> {
    ensure_square(m, "eigenvalues")?;
    ensure_finite(m, "matrix")?;
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let values = m.complex_eigenvalues();
    if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::SolverFailure {
            solver: "eigenvalues",
            reason: "Schur iteration produced non-finite eigenvalues".into(),
            residual: f64::INFINITY,
        });
    }
    Ok(values.iter().copied().collect())
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().map(|v| v.norm()).fold(0.0, f64::max))
}

/// Eigen-decomposition `M = V diag(values) V⁻¹` of a real square matrix.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<Complex64>,
    /// Column `i` is the unit-norm eigenvector for `values[i]`.
    pub vectors: CMatrix,
    /// Some cluster of repeated eigenvalues lacks a full set of eigenvectors.
    pub defective: bool,
}

impl EigenDecomposition {
    /// 2-norm condition number of the eigenvector matrix (∞ if singular).
    pub fn condition_number(&self) -> f64 {
        if self.defective {
            return f64::INFINITY;
        }
        if self.vectors.is_empty() {
            return 1.0;
        }
        let sv = self.vectors.clone().singular_values();
        let max = sv.iter().copied().fold(0.0, f64::max);
        let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn vectors_inverse(&self) -> Option<CMatrix> {
        self.vectors.clone().try_inverse()
    }
}

/// Eigenvalues via Schur, eigenvectors via the null space of `M − λI`.
///
/// Eigenvalues that agree to a relative 1e-8 are treated as one cluster and
/// receive as many null vectors as their multiplicity. A cluster whose null
/// space is too small is flagged as defective.
pub fn eigen_decompose(m: &Matrix) -> Result<EigenDecomposition> {
    let n = ensure_square(m, "eigen_decompose")?;
    let mut values = eigenvalues(m)?;
    values.sort_by(|a, b| {
        b.norm()
            .partial_cmp(&a.norm())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.re.partial_cmp(&b.re).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.im.partial_cmp(&b.im).unwrap_or(std::cmp::Ordering::Equal))
    });
    let scale = m.amax().max(1.0);
    let cm: CMatrix = m.map(|v| Complex64::new(v, 0.0));
    let mut vectors = CMatrix::zeros(n, n);
    let mut out_values = Vec::with_capacity(n);
    let mut used = vec![false; n];
    let mut defective = false;
    let mut col = 0;
    for i in 0..n {
        if used[i] {
            continue;
        }
        let lambda = values[i];
        let cluster: Vec<usize> = (i..n)
            .filter(|&j| !used[j] && (values[j] - lambda).norm() <= 1e-8 * scale)
            .collect();
        for &j in &cluster {
            used[j] = true;
        }
        let mean = cluster.iter().map(|&j| values[j]).sum::<Complex64>() / cluster.len() as f64;
        let shifted = &cm - CMatrix::identity(n, n) * mean;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| Error::SolverFailure {
            solver: "eigen_decompose",
            reason: "SVD did not return right singular vectors".into(),
            residual: f64::INFINITY,
        })?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[a]
                .partial_cmp(&svd.singular_values[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for (&j, &k) in cluster.iter().zip(order.iter()) {
            if svd.singular_values[k] > 1e-7 * scale {
                defective = true;
            }
            let v: Vec<Complex64> = v_t.row(k).iter().map(|z| z.conj()).collect();
            let mut v = nalgebra::DVector::from_vec(v);
            let norm = v.norm();
            if norm > 0.0 {
                v /= Complex64::new(norm, 0.0);
            }
            vectors.set_column(col, &v);
            out_values.push(values[j]);
            col += 1;
        }
    }
    Ok(EigenDecomposition {
        values: out_values,
        vectors,
        defective,
    })
}

/// `S` with `S Sᵀ = Σ` for a symmetric PSD `Σ`; eigenvalues within tolerance
/// below zero are clamped.
pub fn psd_sqrt(sigma: &Matrix) -> Result<Matrix> {
    ensure_square(sigma, "psd_sqrt")?;
    ensure_finite(sigma, "Sigma")?;
    if !is_symmetric(sigma, 1e-9) {
        return Err(Error::validation("psd_sqrt input is not symmetric"));
    }
    if sigma.is_empty() {
        return Ok(sigma.clone());
    }
    let eig = SymmetricEigen::new(symmetrize(sigma));
    let scale = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&roots))
}

/// Orthonormal basis of the range of a symmetric PSD matrix (eigenvectors
/// with eigenvalue above `rel_tol · λ_max`), with the matching eigenvalues.
pub fn psd_range_basis(sigma: &Matrix, rel_tol: f64) -> (Matrix, Vector) {
    let n = sigma.nrows();
    if n == 0 {
        return (Matrix::zeros(0, 0), Vector::zeros(0));
    }
    let eig = SymmetricEigen::new(symmetrize(sigma));
    let max = eig.eigenvalues.max();
    let keep: Vec<usize> = (0..n)
        .filter(|&i| max > 0.0 && eig.eigenvalues[i] > rel_tol * max)
        .collect();
    let mut basis = Matrix::zeros(n, keep.len());
    let mut values = Vector::zeros(keep.len());
    for (c, &i) in keep.iter().enumerate() {
        basis.set_column(c, &eig.eigenvectors.column(i));
        values[c] = eig.eigenvalues[i];
    }
    (basis, values)
}

/// `Σ_{i≥0} Fⁱ X Gⁱ` for strictly stable `F` and `G`.
///
/// Uses the diagonal form `U_F T_a U_G⁻¹` with
/// `[T_a]_jk = [U_F⁻¹ X U_G]_jk / (1 − λ_F,j λ_G,k)` when both matrices have
/// well-conditioned eigenvector bases, and the truncated series otherwise.
pub fn sandwich_series(f: &Matrix, x: &Matrix, g: &Matrix) -> Result<Matrix> {
    let n = ensure_square(f, "sandwich_series F")?;
    let m = ensure_square(g, "sandwich_series G")?;
    ensure_shape(x, n, m, "sandwich_series X")?;
    for (mat, name) in [(f, "F"), (g, "G")] {
        let radius = spectral_radius(mat)?;
        if radius >= 1.0 {
            return Err(Error::Unstable {
                what: format!("series factor {name}"),
                radius,
            });
        }
    }
    if let Some(result) = sandwich_series_eigen(f, x, g)? {
        return Ok(result);
    }
    sandwich_series_truncated(f, x, g)
}

/// Diagonal-form evaluation; `None` when either factor is (nearly) defective
/// or the result is not numerically real.
pub fn sandwich_series_eigen(f: &Matrix, x: &Matrix, g: &Matrix) -> Result<Option<Matrix>> {
    let ef = eigen_decompose(f)?;
    let eg = eigen_decompose(g)?;
    if ef.condition_number() > EIGVEC_COND_LIMIT || eg.condition_number() > EIGVEC_COND_LIMIT {
        return Ok(None);
    }
    let (Some(uf_inv), Some(ug_inv)) = (ef.vectors_inverse(), eg.vectors_inverse()) else {
        return Ok(None);
    };
    let cx: CMatrix = x.map(|v| Complex64::new(v, 0.0));
    let mut t = &uf_inv * cx * &eg.vectors;
    for j in 0..t.nrows() {
        for k in 0..t.ncols() {
            t[(j, k)] /= Complex64::new(1.0, 0.0) - ef.values[j] * eg.values[k];
        }
    }
    let full = &ef.vectors * t * ug_inv;
    let real = full.map(|z| z.re);
    let imag = full.map(|z| z.im).norm();
    if imag > 1e-8 * real.norm().max(f64::MIN_POSITIVE) && imag > 1e-14 {
        return Ok(None);
    }
    Ok(Some(real))
}

/// Truncated series, stopped once the newest term is below 1e-12 of the sum.
pub fn sandwich_series_truncated(f: &Matrix, x: &Matrix, g: &Matrix) -> Result<Matrix> {
    let mut term = x.clone();
    let mut sum = x.clone();
    for _ in 0..SERIES_MAX_TERMS {
        term = f * term * g;
        sum += &term;
        let tn = term.norm();
        if tn <= SERIES_REL_TOL * sum.norm() || tn == 0.0 {
            return Ok(sum);
        }
    }
    Err(Error::Convergence {
        iterations: SERIES_MAX_TERMS,
        reason: "series tail did not fall below 1e-12".into(),
    })
}

/// Eigenvector of the symmetric-definite pencil `(A, B)` with the largest
/// generalized eigenvalue, normalized so that `vᵀ B v = 1`.
///
/// Reduced to the standard problem on `B^{-1/2} A B^{-1/2}`.
pub fn top_generalized_eigenvector(a: &Matrix, b: &Matrix) -> Result<(f64, Vector)> {
    let n = ensure_square(b, "generalized eigenproblem B")?;
    ensure_shape(a, n, n, "generalized eigenproblem A")?;
    ensure_pd(b, "B")?;
    let eb = SymmetricEigen::new(symmetrize(b));
    let inv_sqrt = &eb.eigenvectors
        * Matrix::from_diagonal(&eb.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * eb.eigenvectors.transpose();
    let reduced = symmetrize(&(&inv_sqrt * a * &inv_sqrt));
    let er = SymmetricEigen::new(reduced);
    let (imax, lambda) = er
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, l)| if l > acc.1 { (i, l) } else { acc });
    let mut v = &inv_sqrt * er.eigenvectors.column(imax);
    let scale = (v.transpose() * b * &v)[(0, 0)].sqrt();
    v /= scale;
    canonical_sign(&mut v);
    Ok((lambda, v))
}

/// Flip `v` so its largest-magnitude entry is positive.
pub fn canonical_sign(v: &mut Vector) {
    if let Some((i, _)) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap_or(std::cmp::Ordering::Equal))
    {
        if v[i] < 0.0 {
            v.neg_mut();
        }
    }
}

/// Numerical rank with relative singular value tolerance.
pub fn rank(m: &Matrix, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    sv.iter().filter(|&&s| s > rel_tol * max && s > 0.0).count()
}
