//! Steady-state Kalman filter and LQG controller synthesis.

use crate::error::{Error, Result};
use crate::linalg::{
    ensure_pd, ensure_psd, ensure_shape, ensure_square, solve_dare, spd_inverse, spectral_radius,
    Matrix, Vector,
};

/// Plant, noise and LQG weights.
///
/// `x' = A x + B u + w`, `w ~ N(0, Q)`; `y = C x + v`, `v ~ N(0, R)`;
/// stage cost `xᵀ W x + uᵀ U u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    pub w: Matrix,
    pub u: Matrix,
}

fn ensure_pd_diagonal(m: &Matrix, name: &str) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return Err(Error::validation(format!("{name} must be diagonal")));
            }
        }
    }
    if m.diagonal().iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::validation(format!("{name} must have positive diagonal entries")));
    }
    Ok(())
}

impl PlantModel {
    pub fn new(a: Matrix, b: Matrix, c: Matrix, q: Matrix, r: Matrix, w: Matrix, u: Matrix) -> Result<Self> {
        let plant = PlantModel { a, b, c, q, r, w, u };
        plant.validate()?;
        Ok(plant)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn p(&self) -> usize {
        self.b.ncols()
    }

    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = ensure_square(&self.a, "plant A")?;
        if n == 0 {
            return Err(Error::validation("plant state dimension must be positive"));
        }
        let p = self.b.ncols();
        let m = self.c.nrows();
        if p == 0 || m == 0 {
            return Err(Error::validation("plant needs at least one input and one output"));
        }
        ensure_shape(&self.b, n, p, "plant B")?;
        ensure_shape(&self.c, m, n, "plant C")?;
        ensure_shape(&self.q, n, n, "plant Q")?;
        ensure_shape(&self.r, m, m, "plant R")?;
        ensure_shape(&self.w, n, n, "plant W")?;
        ensure_shape(&self.u, p, p, "plant U")?;
        for (mat, name) in [(&self.a, "A"), (&self.b, "B"), (&self.c, "C")] {
            crate::linalg::ensure_finite(mat, name)?;
        }
        ensure_psd(&self.q, "Q")?;
        ensure_pd(&self.r, "R")?;
        ensure_pd_diagonal(&self.w, "W")?;
        ensure_pd_diagonal(&self.u, "U")?;
        Ok(())
    }

    /// Stage cost `xᵀ W x + uᵀ U u`.
    pub fn stage_cost(&self, x: &Vector, u: &Vector) -> f64 {
        x.dot(&(&self.w * x)) + u.dot(&(&self.u * u))
    }
}

/// Steady-state filter and controller quantities.
#[derive(Debug, Clone)]
pub struct ControllerSolution {
    /// Prediction error covariance.
    pub p: Matrix,
    /// Kalman gain.
    pub k: Matrix,
    /// Control Riccati solution.
    pub s: Matrix,
    /// LQG feedback gain, `u = L x̂`.
    pub l: Matrix,
    pub sigma_gamma: Matrix,
    pub sigma_gamma_inv: Matrix,
    /// `A + B L`.
    pub a_cl: Matrix,
    /// `(I − K C)(A + B L)`.
    pub script_a: Matrix,
    /// `I − K C`.
    pub i_minus_kc: Matrix,
    /// The plant matrices the solution was built from.
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

pub fn build_lqg(plant: &PlantModel) -> Result<ControllerSolution> {
    plant.validate()?;
    let (a, b, c) = (&plant.a, &plant.b, &plant.c);
    let n = plant.n();

    let p = solve_dare(a, c, &plant.q, &plant.r)?;
    let sigma_gamma = c * &p * c.transpose() + &plant.r;
    let sigma_gamma_inv = spd_inverse(&sigma_gamma, "innovation covariance")?;
    let k = &p * c.transpose() * &sigma_gamma_inv;

    let s = solve_dare(&a.transpose(), &b.transpose(), &plant.w, &plant.u)?;
    let btsb_u = b.transpose() * &s * b + &plant.u;
    let l = -spd_inverse(&btsb_u, "BᵀSB + U")? * b.transpose() * &s * a;

    let a_cl = a + b * &l;
    let i_minus_kc = Matrix::identity(n, n) - &k * c;
    let script_a = &i_minus_kc * &a_cl;

    for (mat, name) in [(&a_cl, "closed-loop matrix A+BL"), (&script_a, "estimator matrix (I-KC)(A+BL)")] {
        let radius = spectral_radius(mat)?;
        if radius >= 1.0 {
            return Err(Error::Unstable {
                what: name.into(),
                radius,
            });
        }
    }
    Ok(ControllerSolution {
        p,
        k,
        s,
        l,
        sigma_gamma,
        sigma_gamma_inv,
        a_cl,
        script_a,
        i_minus_kc,
        a: a.clone(),
        b: b.clone(),
        c: c.clone(),
    })
}

impl ControllerSolution {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    pub fn p(&self) -> usize {
        self.b.ncols()
    }

    /// One steady-state filter step; returns `(x̂_{k|k}, γ_k)`.
    pub fn kf_step(&self, x_hat_prev: &Vector, u_prev: &Vector, obs: &Vector) -> Result<(Vector, Vector)> {
        if x_hat_prev.len() != self.n() {
            return Err(Error::dims("kf_step state", self.n(), x_hat_prev.len()));
        }
        if u_prev.len() != self.p() {
            return Err(Error::dims("kf_step input", self.p(), u_prev.len()));
        }
        if obs.len() != self.m() {
            return Err(Error::dims("kf_step observation", self.m(), obs.len()));
        }
        let pred = &self.a * x_hat_prev + &self.b * u_prev;
        let gamma = obs - &self.c * &pred;
        let x_hat = pred + &self.k * &gamma;
        Ok((x_hat, gamma))
    }

    /// `L x̂ + e`.
    pub fn control(&self, x_hat: &Vector, e: &Vector) -> Vector {
        &self.l * x_hat + e
    }

    /// `C B`, the direct watermark-to-innovation coupling.
    pub fn cb(&self) -> Matrix {
        &self.c * &self.b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn scalar_plant() -> PlantModel {
        PlantModel::new(
            dmatrix![0.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![1.0],
        )
        .unwrap()
    }

    #[test]
    fn scalar_synthesis() {
        let ctrl = build_lqg(&scalar_plant()).unwrap();
        assert!((ctrl.p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((ctrl.k[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((ctrl.sigma_gamma[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kf_step_examples() {
        let ctrl = build_lqg(&scalar_plant()).unwrap();
        let (x, g) = ctrl.kf_step(&dvector![0.0], &dvector![0.0], &dvector![0.0]).unwrap();
        assert_eq!((x[0], g[0]), (0.0, 0.0));
        let (x, g) = ctrl.kf_step(&dvector![0.0], &dvector![0.0], &dvector![2.0]).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-15 && (x[0] - 1.0).abs() < 1e-12);
        assert!(ctrl.kf_step(&dvector![0.0, 1.0], &dvector![0.0], &dvector![0.0]).is_err());
    }

    #[test]
    fn gains_satisfy_defining_identities() {
        let plant = PlantModel::new(
            dmatrix![0.75, 0.2; 0.2, 1.0],
            dmatrix![0.9, 0.5; 0.1, 1.2],
            dmatrix![1.0, -1.0],
            Matrix::identity(2, 2),
            dmatrix![1.0],
            dmatrix![1.0, 0.0; 0.0, 2.0],
            dmatrix![0.4, 0.0; 0.0, 0.7],
        )
        .unwrap();
        let ctrl = build_lqg(&plant).unwrap();
        let c = &plant.c;
        let k_lhs = &ctrl.k * (c * &ctrl.p * c.transpose() + &plant.r);
        assert!((k_lhs - &ctrl.p * c.transpose()).norm() < 1e-9);
        let b = &plant.b;
        let l_lhs = (b.transpose() * &ctrl.s * b + &plant.u) * &ctrl.l;
        assert!((l_lhs + b.transpose() * &ctrl.s * &plant.a).norm() < 1e-9);
        let sg_minus_r = &ctrl.sigma_gamma - &plant.r;
        assert!(sg_minus_r[(0, 0)] >= 0.0);
        assert!(spectral_radius(&ctrl.a_cl).unwrap() < 1.0);
        assert!(spectral_radius(&ctrl.script_a).unwrap() < 1.0);
    }

    #[test]
    fn rejects_non_diagonal_weights() {
        let mut plant = scalar_plant();
        plant.w = dmatrix![1.0, 0.1; 0.1, 1.0];
        assert!(plant.validate().is_err());
        let mut plant = scalar_plant();
        plant.u = dmatrix![0.0];
        assert!(matches!(plant.validate(), Err(Error::Validation(_))));
    }
}
