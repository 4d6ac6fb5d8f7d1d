//! Stationary fake-observation generator used by the deception attacker.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{ensure_psd, ensure_square, psd_sqrt, solve_dlyap, spectral_radius, Matrix, Vector};
use crate::watermark::standard_normal_vector;

/// `z_k = A_a z_{k−1} + w_a`, `w_a ~ N(0, Q_a)`, started from its stationary law.
#[derive(Debug, Clone)]
pub struct AttackModel {
    pub a_a: Matrix,
    pub q_a: Matrix,
    /// Stationary covariance, `E_zz0 = A_a E_zz0 A_aᵀ + Q_a`.
    pub e_zz0: Matrix,
    q_a_sqrt: Matrix,
    e_zz0_sqrt: Matrix,
}

pub fn build_attack(a_a: Matrix, q_a: Matrix) -> Result<AttackModel> {
    let m = ensure_square(&a_a, "attack A_a")?;
    if q_a.shape() != (m, m) {
        return Err(Error::dims("attack Q_a", format!("{m}x{m}"), format!("{}x{}", q_a.nrows(), q_a.ncols())));
    }
    crate::linalg::ensure_finite(&a_a, "A_a")?;
    ensure_psd(&q_a, "Q_a")?;
    let radius = spectral_radius(&a_a)?;
    if radius >= 1.0 {
        return Err(Error::validation(format!(
            "attack generator A_a must be strictly stable (spectral radius {radius})"
        )));
    }
    let e_zz0 = solve_dlyap(&a_a, &q_a)?;
    let q_a_sqrt = psd_sqrt(&q_a)?;
    let e_zz0_sqrt = psd_sqrt(&e_zz0)?;
    Ok(AttackModel {
        a_a,
        q_a,
        e_zz0,
        q_a_sqrt,
        e_zz0_sqrt,
    })
}

/// Scalar attack `A_a = ρ`, `Q_a = (1 − ρ²) σ_z²`, so that `E_zz0 = σ_z²`.
pub fn miso_attack(rho: f64, sigma_z_sq: f64) -> Result<AttackModel> {
    if !(rho.abs() < 1.0) {
        return Err(Error::validation(format!("rho must satisfy |rho| < 1, got {rho}")));
    }
    if !(sigma_z_sq >= 0.0) || !sigma_z_sq.is_finite() {
        return Err(Error::validation(format!("sigma_z_sq must be nonnegative, got {sigma_z_sq}")));
    }
    build_attack(
        Matrix::from_element(1, 1, rho),
        Matrix::from_element(1, 1, (1.0 - rho * rho) * sigma_z_sq),
    )
}

impl AttackModel {
    pub fn m(&self) -> usize {
        self.a_a.nrows()
    }

    /// First fake observation, drawn from the stationary law.
    pub fn initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        &self.e_zz0_sqrt * standard_normal_vector(self.m(), rng)
    }

    pub fn step<R: Rng + ?Sized>(&self, z_prev: &Vector, rng: &mut R) -> Result<Vector> {
        if z_prev.len() != self.m() {
            return Err(Error::dims("attack_step", self.m(), z_prev.len()));
        }
        Ok(&self.a_a * z_prev + &self.q_a_sqrt * standard_normal_vector(self.m(), rng))
    }
}
