//! iid Gaussian watermarks and the LQG cost they add.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::control::{ControllerSolution, PlantModel};
use crate::error::{Error, Result};
use crate::linalg::{ensure_psd, psd_sqrt, solve_dlyap, Matrix, Vector};

pub(crate) fn standard_normal_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vector {
    Vector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `e_k ~ N(0, Σ_e)` iid.
#[derive(Debug, Clone)]
pub struct WatermarkSpec {
    pub sigma_e: Matrix,
    sqrt: Matrix,
}

impl WatermarkSpec {
    pub fn new(sigma_e: Matrix) -> Result<Self> {
        ensure_psd(&sigma_e, "Sigma_e")?;
        let sqrt = psd_sqrt(&sigma_e)?;
        Ok(WatermarkSpec { sigma_e, sqrt })
    }

    pub fn zero(p: usize) -> Self {
        WatermarkSpec {
            sigma_e: Matrix::zeros(p, p),
            sqrt: Matrix::zeros(p, p),
        }
    }

    pub fn p(&self) -> usize {
        self.sigma_e.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        &self.sqrt * standard_normal_vector(self.p(), rng)
    }
}

/// Cost sensitivity of watermarking.
#[derive(Debug, Clone)]
pub struct LqgPenalty {
    /// `H = Bᵀ Σ_L B + U`.
    pub h: Matrix,
    /// `Σ_L = (A+BL)ᵀ Σ_L (A+BL) + Lᵀ U L + W`.
    pub sigma_l: Matrix,
    /// `tr(H Σ_e)`.
    pub delta_lqg: f64,
}

/// `H = Bᵀ Σ_L B + U`, independent of `Σ_e`.
pub fn cost_sensitivity(plant: &PlantModel, ctrl: &ControllerSolution) -> Result<(Matrix, Matrix)> {
    let rhs = ctrl.l.transpose() * &plant.u * &ctrl.l + &plant.w;
    let sigma_l = solve_dlyap(&ctrl.a_cl.transpose(), &rhs)?;
    let h = plant.b.transpose() * &sigma_l * &plant.b + &plant.u;
    Ok((crate::linalg::symmetrize(&h), sigma_l))
}

pub fn delta_lqg(plant: &PlantModel, ctrl: &ControllerSolution, sigma_e: &Matrix) -> Result<LqgPenalty> {
    let p = plant.p();
    if sigma_e.shape() != (p, p) {
        return Err(Error::dims("delta_lqg Sigma_e", format!("{p}x{p}"), format!("{}x{}", sigma_e.nrows(), sigma_e.ncols())));
    }
    ensure_psd(sigma_e, "Sigma_e")?;
    let (h, sigma_l) = cost_sensitivity(plant, ctrl)?;
    let delta = (&h * sigma_e).trace();
    Ok(LqgPenalty {
        h,
        sigma_l,
        delta_lqg: delta,
    })
}

/// Stationary average stage cost of the watermarked loop, from the
/// covariance of the joint process `(x_k, x̂_{k|k})`.
pub fn stationary_lqg_cost(plant: &PlantModel, ctrl: &ControllerSolution, sigma_e: &Matrix) -> Result<f64> {
    let n = plant.n();
    let m = plant.m();
    let p = plant.p();
    let kc = &ctrl.k * &plant.c;
    let mut f = Matrix::zeros(2 * n, 2 * n);
    f.view_mut((0, 0), (n, n)).copy_from(&plant.a);
    f.view_mut((0, n), (n, n)).copy_from(&(&plant.b * &ctrl.l));
    f.view_mut((n, 0), (n, n)).copy_from(&(&kc * &plant.a));
    f.view_mut((n, n), (n, n)).copy_from(&(&ctrl.i_minus_kc * &plant.a + &plant.b * &ctrl.l));
    let mut g = Matrix::zeros(2 * n, n + m + p);
    g.view_mut((0, 0), (n, n)).copy_from(&Matrix::identity(n, n));
    g.view_mut((0, n + m), (n, p)).copy_from(&plant.b);
    g.view_mut((n, 0), (n, n)).copy_from(&kc);
    g.view_mut((n, n), (n, m)).copy_from(&ctrl.k);
    g.view_mut((n, n + m), (n, p)).copy_from(&plant.b);
    let mut noise = Matrix::zeros(n + m + p, n + m + p);
    noise.view_mut((0, 0), (n, n)).copy_from(&plant.q);
    noise.view_mut((n, n), (m, m)).copy_from(&plant.r);
    noise.view_mut((n + m, n + m), (p, p)).copy_from(sigma_e);
    let cov = solve_dlyap(&f, &(&g * noise * g.transpose()))?;
    let sxx = cov.view((0, 0), (n, n));
    let shh = cov.view((n, n), (n, n));
    Ok((&plant.w * sxx).trace()
        + (&plant.u * (&ctrl.l * shh * ctrl.l.transpose() + sigma_e)).trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::system_a;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_and_linear() {
        let pre = system_a();
        let ctrl = crate::control::build_lqg(&pre.plant).unwrap();
        let zero = delta_lqg(&pre.plant, &ctrl, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(zero.delta_lqg, 0.0);
        let s = dmatrix![1.0, 0.3; 0.3, 2.0];
        let one = delta_lqg(&pre.plant, &ctrl, &s).unwrap().delta_lqg;
        let two = delta_lqg(&pre.plant, &ctrl, &(&s * 2.0)).unwrap().delta_lqg;
        assert!((two - 2.0 * one).abs() < 1e-12 * one);
        let pen = delta_lqg(&pre.plant, &ctrl, &s).unwrap();
        let lhs = ctrl.a_cl.transpose() * &pen.sigma_l * &ctrl.a_cl - &pen.sigma_l
            + ctrl.l.transpose() * &pre.plant.u * &ctrl.l
            + &pre.plant.w;
        assert!(lhs.norm() < 1e-10 * (1.0 + pen.sigma_l.norm()));
    }

    #[test]
    fn cost_increase_matches_augmented_loop() {
        let pre = system_a();
        let ctrl = crate::control::build_lqg(&pre.plant).unwrap();
        let s = dmatrix![1.0, 0.3; 0.3, 2.0];
        let base = stationary_lqg_cost(&pre.plant, &ctrl, &Matrix::zeros(2, 2)).unwrap();
        let marked = stationary_lqg_cost(&pre.plant, &ctrl, &s).unwrap();
        let pred = delta_lqg(&pre.plant, &ctrl, &s).unwrap().delta_lqg;
        assert!(((marked - base) - pred).abs() < 1e-8 * pred);
    }

    #[test]
    fn zero_watermark_is_silent() {
        let spec = WatermarkSpec::new(Matrix::zeros(2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(spec.sample(&mut rng).norm(), 0.0);
        }
    }

    #[test]
    fn rank_one_samples_are_parallel() {
        let v = dmatrix![1.0; 2.0];
        let spec = WatermarkSpec::new(&v * v.transpose()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let e = spec.sample(&mut rng);
            assert!((e[0] * 2.0 - e[1]).abs() < 1e-9 * (1.0 + e.norm()));
        }
    }

    #[test]
    fn sample_covariance_and_independence() {
        let sigma = dmatrix![2.0, 0.5; 0.5, 1.0];
        let spec = WatermarkSpec::new(sigma.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut acc = Matrix::zeros(2, 2);
        let mut lag = Matrix::zeros(2, 2);
        let mut prev = spec.sample(&mut rng);
        for _ in 0..n {
            let e = spec.sample(&mut rng);
            acc += &e * e.transpose();
            lag += &e * prev.transpose();
            prev = e;
        }
        acc /= n as f64;
        lag /= n as f64;
        assert!((&acc - &sigma).norm() < 0.02 * sigma.norm());
        assert!(lag.amax() < 0.02);
    }
}
