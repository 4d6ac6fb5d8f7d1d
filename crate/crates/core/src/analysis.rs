//! Closed-form post-attack innovation statistics, divergences and delay
//! predictions.

use crate::attack::AttackModel;
use crate::control::{ControllerSolution, PlantModel};
use crate::error::{Error, Result};
use crate::linalg::{
    ensure_psd, sandwich_series, solve_dlyap, spd_log_det, symmetrize, Matrix,
};
use crate::watermark::delta_lqg;

/// `E[x̂^F_{k−1|k−1} z_kᵀ]` for the filter driven by stationary fake data,
/// `Σ_{i≥0} 𝓐ⁱ K E_zz0 (A_aᵀ)^{i+1}`.
pub fn exz_minus1(ctrl: &ControllerSolution, attack: &AttackModel) -> Result<Matrix> {
    check_attack_dims(ctrl, attack)?;
    let x = &ctrl.k * &attack.e_zz0 * attack.a_a.transpose();
    sandwich_series(&ctrl.script_a, &x, &attack.a_a.transpose())
}

fn check_attack_dims(ctrl: &ControllerSolution, attack: &AttackModel) -> Result<()> {
    if attack.m() != ctrl.m() {
        return Err(Error::dims("attack model", ctrl.m(), attack.m()));
    }
    Ok(())
}

fn check_sigma_e(ctrl: &ControllerSolution, sigma_e: &Matrix) -> Result<()> {
    let p = ctrl.p();
    if sigma_e.shape() != (p, p) {
        return Err(Error::dims(
            "Sigma_e",
            format!("{p}x{p}"),
            format!("{}x{}", sigma_e.nrows(), sigma_e.ncols()),
        ));
    }
    ensure_psd(sigma_e, "Sigma_e")
}

/// Stationary covariance of the fake-data part of `x̂^F`.
pub fn sigma_xf_z(ctrl: &ControllerSolution, attack: &AttackModel, exz: &Matrix) -> Result<Matrix> {
    let cross = &ctrl.script_a * exz * ctrl.k.transpose();
    let rhs = &ctrl.k * &attack.e_zz0 * ctrl.k.transpose() + &cross + cross.transpose();
    solve_dlyap(&ctrl.script_a, &symmetrize(&rhs))
}

/// Stationary covariance of the watermark part of `x̂^F`.
pub fn sigma_xf_e(ctrl: &ControllerSolution, sigma_e: &Matrix) -> Result<Matrix> {
    let g = &ctrl.i_minus_kc * &ctrl.b;
    solve_dlyap(&ctrl.script_a, &symmetrize(&(&g * sigma_e * g.transpose())))
}

/// Covariance of the innovation once the filter is fed by the attacker.
pub fn sigma_gamma_tilde(ctrl: &ControllerSolution, attack: &AttackModel, sigma_e: &Matrix) -> Result<Matrix> {
    check_attack_dims(ctrl, attack)?;
    check_sigma_e(ctrl, sigma_e)?;
    let exz = exz_minus1(ctrl, attack)?;
    let ca = &ctrl.c * &ctrl.a_cl;
    let cross = &ca * &exz;
    let cb = ctrl.cb();
    let sz = sigma_xf_z(ctrl, attack, &exz)?;
    let se = sigma_xf_e(ctrl, sigma_e)?;
    let out = &attack.e_zz0 - &cross - cross.transpose()
        + &cb * sigma_e * cb.transpose()
        + &ca * (sz + se) * ca.transpose();
    Ok(symmetrize(&out))
}

/// `½{tr(Σ_γ⁻¹Σ_γ̃) − m − ln(|Q_a|/|Σ_γ|)}`.
pub fn expected_kld_optimal(ctrl: &ControllerSolution, attack: &AttackModel, sgt: &Matrix) -> Result<f64> {
    check_attack_dims(ctrl, attack)?;
    let ld_qa = spd_log_det(&attack.q_a, "Q_a").map_err(|_| Error::SingularAttackNoise)?;
    let ld_sg = spd_log_det(&ctrl.sigma_gamma, "Sigma_gamma")?;
    let m = ctrl.m() as f64;
    Ok(0.5 * ((&ctrl.sigma_gamma_inv * sgt).trace() - m - (ld_qa - ld_sg)))
}

/// `Σ_γ̃ − C B Σ_e Bᵀ Cᵀ`, the innovation covariance left once the
/// watermark is known.
pub fn residual_covariance(ctrl: &ControllerSolution, sgt: &Matrix, sigma_e: &Matrix) -> Matrix {
    let cb = ctrl.cb();
    symmetrize(&(sgt - &cb * sigma_e * cb.transpose()))
}

/// `½{tr(Σ_γ⁻¹Σ_γ̃) − m − ln(|Σ_γ̃ − CBΣ_eBᵀCᵀ|/|Σ_γ|)}`.
pub fn kld_suboptimal(ctrl: &ControllerSolution, sgt: &Matrix, sigma_e: &Matrix) -> Result<f64> {
    check_sigma_e(ctrl, sigma_e)?;
    let resid = residual_covariance(ctrl, sgt, sigma_e);
    let ld_r = spd_log_det(&resid, "Sigma_gamma_tilde - CB Sigma_e BᵀCᵀ")?;
    let ld_sg = spd_log_det(&ctrl.sigma_gamma, "Sigma_gamma")?;
    let m = ctrl.m() as f64;
    Ok(0.5 * ((&ctrl.sigma_gamma_inv * sgt).trace() - m - (ld_r - ld_sg)))
}

/// `−C(A+BL) 𝓐^{j−2} (I−KC) B Σ_e` for `j > 1`, zero otherwise.
fn e_gamma_e(ctrl: &ControllerSolution, script_pows: &[Matrix], sigma_e: &Matrix, j: usize) -> Matrix {
    if j <= 1 {
        return Matrix::zeros(ctrl.m(), ctrl.p());
    }
    -(&ctrl.c * &ctrl.a_cl * &script_pows[j - 2] * &ctrl.i_minus_kc * &ctrl.b * sigma_e)
}

/// Expected divergence of a test that conditions on past innovations only,
/// evaluated at time index `k` with all sums cut at their finite limits.
pub fn kld_innovation_only(
    ctrl: &ControllerSolution,
    attack: &AttackModel,
    sigma_e: &Matrix,
    sgt: &Matrix,
    k: usize,
) -> Result<f64> {
    if k < 3 {
        return Err(Error::validation("innovation-only divergence needs k >= 3"));
    }
    check_attack_dims(ctrl, attack)?;
    check_sigma_e(ctrl, sigma_e)?;
    let n = ctrl.n();
    let acl = &ctrl.a_cl;
    let mut acl_pows = vec![Matrix::identity(n, n)];
    let mut script_pows = vec![Matrix::identity(n, n)];
    for i in 1..=k {
        acl_pows.push(acl * &acl_pows[i - 1]);
        script_pows.push(&ctrl.script_a * &script_pows[i - 1]);
    }
    let b = &ctrl.b;
    let bsb = b * sigma_e * b.transpose();
    let d = &attack.a_a * &ctrl.c - &ctrl.c * acl;

    let mut g = Matrix::zeros(n, n);
    for i in 2..k {
        g += &acl_pows[i - 1] * &bsb * acl_pows[i - 1].transpose();
    }

    let mut inner = Matrix::zeros(n, n);
    for j in 1..k {
        for i in 2..=j + 1 {
            let eg = e_gamma_e(ctrl, &script_pows, sigma_e, j + 1 - i);
            inner += &acl_pows[i - 1] * &ctrl.k * eg * b.transpose() * acl_pows[j - 1].transpose();
        }
    }
    let mut second = Matrix::zeros(ctrl.m(), n);
    for j in 1..k {
        second += e_gamma_e(ctrl, &script_pows, sigma_e, j) * b.transpose() * acl_pows[j - 1].transpose();
    }
    let lead = &attack.a_a - &ctrl.c * acl * &ctrl.k;
    let e_mu = &d * inner * d.transpose() + lead * second * d.transpose();

    let cb = ctrl.cb();
    let cond = symmetrize(&(&attack.q_a + &d * &g * d.transpose() + &cb * sigma_e * cb.transpose()));
    let ld_cond = spd_log_det(&cond, "conditional innovation covariance").map_err(|_| Error::SingularAttackNoise)?;
    let ld_sg = spd_log_det(&ctrl.sigma_gamma, "Sigma_gamma")?;
    let m = ctrl.m() as f64;
    let adjusted = sgt - &e_mu - e_mu.transpose();
    Ok(0.5 * ((&ctrl.sigma_gamma_inv * adjusted).trace() - m - (ld_cond - ld_sg)))
}

/// `ln(arl_h) / kld`.
pub fn predict_sadd(kld: f64, arl_h: f64) -> Result<f64> {
    if !(arl_h > 1.0) {
        return Err(Error::validation(format!("arl_h must exceed 1, got {arl_h}")));
    }
    if !(kld > 0.0) {
        return Err(Error::Undetectable { kld });
    }
    Ok(arl_h.ln() / kld)
}

#[derive(Debug, Clone)]
pub struct KldReport {
    pub sigma_gamma_tilde: Matrix,
    pub expected_kld_optimal: f64,
    pub kld_suboptimal: f64,
    pub optimality_gap: f64,
    pub delta_lqg: f64,
    /// Infinite when the matching divergence is not positive.
    pub sadd_pred_optimal: f64,
    pub sadd_pred_suboptimal: f64,
    pub arl_h: f64,
}

pub fn analyze(
    plant: &PlantModel,
    ctrl: &ControllerSolution,
    attack: &AttackModel,
    sigma_e: &Matrix,
    arl_h: f64,
) -> Result<KldReport> {
    let sgt = sigma_gamma_tilde(ctrl, attack, sigma_e)?;
    let opt = expected_kld_optimal(ctrl, attack, &sgt)?;
    let sub = kld_suboptimal(ctrl, &sgt, sigma_e)?;
    let dl = delta_lqg(plant, ctrl, sigma_e)?.delta_lqg;
    let sadd = |kld: f64| match predict_sadd(kld, arl_h) {
        Ok(v) => Ok(v),
        Err(Error::Undetectable { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    };
    Ok(KldReport {
        sigma_gamma_tilde: sgt,
        expected_kld_optimal: opt,
        kld_suboptimal: sub,
        optimality_gap: opt - sub,
        delta_lqg: dl,
        sadd_pred_optimal: sadd(opt)?,
        sadd_pred_suboptimal: sadd(sub)?,
        arl_h,
    })
}

/// Scalar-output specialization.
#[derive(Debug, Clone)]
pub struct MisoAnalysis {
    pub m_z: f64,
    pub m_e: Matrix,
    pub sigma_gamma_sq: f64,
    pub sigma_gamma_tilde_sq: f64,
    pub sigma_z_star_opt: f64,
    pub sigma_z_star_subopt: f64,
    pub rho: f64,
    pub sigma_z_sq: f64,
    /// `Bᵀ Cᵀ C B`.
    pub cb_sq: Matrix,
    trace_me_sigma_e: f64,
    trace_cb_sigma_e: f64,
}

pub fn miso_analysis(
    plant: &PlantModel,
    ctrl: &ControllerSolution,
    rho: f64,
    sigma_z_sq: f64,
    sigma_e: &Matrix,
) -> Result<MisoAnalysis> {
    if plant.m() != 1 {
        return Err(Error::validation(format!(
            "scalar-output analysis needs one output, plant has {}",
            plant.m()
        )));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::validation(format!("rho must satisfy |rho| < 1, got {rho}")));
    }
    check_sigma_e(ctrl, sigma_e)?;
    let n = ctrl.n();
    let sa = &ctrl.script_a;
    let ca = &ctrl.c * &ctrl.a_cl;
    let resolvent_k = (Matrix::identity(n, n) - sa * rho)
        .lu()
        .solve(&ctrl.k)
        .ok_or_else(|| Error::Numeric("I - rho*script_A is singular".into()))?
        * rho;
    let kkt = &ctrl.k * ctrl.k.transpose();
    let cross = sa * &resolvent_k * ctrl.k.transpose();
    let sz = solve_dlyap(sa, &symmetrize(&(&kkt + &cross + cross.transpose())))?;
    let m_z = 1.0 - 2.0 * (&ca * &resolvent_k)[(0, 0)] + (&ca * &sz * ca.transpose())[(0, 0)];

    let se = solve_dlyap(&sa.transpose(), &(ca.transpose() * &ca))?;
    let g = &ctrl.i_minus_kc * &ctrl.b;
    let cb = ctrl.cb();
    let cb_sq = cb.transpose() * &cb;
    let m_e = symmetrize(&(g.transpose() * se * &g + &cb_sq));

    let sigma_gamma_sq = ctrl.sigma_gamma[(0, 0)];
    let tr_me = (&m_e * sigma_e).trace();
    let tr_cb = (&cb_sq * sigma_e).trace();
    Ok(MisoAnalysis {
        m_z,
        sigma_gamma_sq,
        sigma_gamma_tilde_sq: m_z * sigma_z_sq + tr_me,
        sigma_z_star_opt: sigma_gamma_sq / m_z,
        sigma_z_star_subopt: (sigma_gamma_sq - (tr_me - tr_cb)) / m_z,
        rho,
        sigma_z_sq,
        m_e,
        cb_sq,
        trace_me_sigma_e: tr_me,
        trace_cb_sigma_e: tr_cb,
    })
}

impl MisoAnalysis {
    fn tilde_at(&self, sigma_z_sq: f64) -> f64 {
        self.m_z * sigma_z_sq + self.trace_me_sigma_e
    }

    /// Optimal-test divergence as a function of the attack power.
    pub fn kld_optimal_at(&self, sigma_z_sq: f64) -> f64 {
        let sg = self.sigma_gamma_sq;
        0.5 * (self.tilde_at(sigma_z_sq) / sg - 1.0 - ((1.0 - self.rho * self.rho) * sigma_z_sq / sg).ln())
    }

    /// Sub-optimal-test divergence as a function of the attack power.
    pub fn kld_suboptimal_at(&self, sigma_z_sq: f64) -> f64 {
        let sg = self.sigma_gamma_sq;
        let t = self.tilde_at(sigma_z_sq);
        0.5 * (t / sg - 1.0 - ((t - self.trace_cb_sigma_e) / sg).ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{build_attack, miso_attack};
    use crate::control::build_lqg;
    use crate::presets::{system_a, system_b};
    use nalgebra::dmatrix;

    fn scalar_ctrl() -> ControllerSolution {
        let plant = PlantModel::new(
            dmatrix![0.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![1.0],
        )
        .unwrap();
        build_lqg(&plant).unwrap()
    }

    #[test]
    fn exz_vanishes_without_generator_memory() {
        let pre = system_b();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let at = build_attack(Matrix::zeros(2, 2), Matrix::identity(2, 2)).unwrap();
        assert_eq!(exz_minus1(&ctrl, &at).unwrap().amax(), 0.0);
    }

    #[test]
    fn exz_scalar_reading() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        // the scalar case of the series, using the MISO resolvent form
        let n = 2;
        let rho = 0.5;
        let expected = (Matrix::identity(n, n) - &ctrl.script_a * rho)
            .try_inverse()
            .unwrap()
            * &ctrl.k
            * (rho * 10.0);
        let got = exz_minus1(&ctrl, &pre.attack).unwrap();
        assert!((got - expected).norm() < 1e-10);
    }

    #[test]
    fn scalar_kld_substitutions() {
        // Σ_γ = 1 for this plant since P = Q = 0
        let ctrl = scalar_ctrl();
        assert!((ctrl.sigma_gamma[(0, 0)] - 1.0).abs() < 1e-12);
        let at = build_attack(dmatrix![0.0], dmatrix![1.0]).unwrap();
        assert!(expected_kld_optimal(&ctrl, &at, &dmatrix![1.0]).unwrap().abs() < 1e-12);
        assert!((expected_kld_optimal(&ctrl, &at, &dmatrix![2.0]).unwrap() - 0.5).abs() < 1e-12);
        // CB = 1, so Σ_e = 0.5 gives CBΣ_eBᵀCᵀ = 0.5
        let sub = kld_suboptimal(&ctrl, &dmatrix![2.0], &dmatrix![0.5]).unwrap();
        assert!((sub - 0.5 * (1.0 - 1.5f64.ln())).abs() < 1e-12);
        assert!((sub - 0.2973).abs() < 1e-4);
        assert!(kld_suboptimal(&ctrl, &dmatrix![1.0], &dmatrix![0.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn singular_attack_noise_is_reported() {
        let ctrl = scalar_ctrl();
        let at = build_attack(dmatrix![0.5], dmatrix![0.0]).unwrap();
        assert!(matches!(
            expected_kld_optimal(&ctrl, &at, &dmatrix![1.0]),
            Err(Error::SingularAttackNoise)
        ));
    }

    #[test]
    fn predict_sadd_examples() {
        assert!((predict_sadd(1000f64.ln(), 1000.0).unwrap() - 1.0).abs() < 1e-15);
        let a = predict_sadd(0.3, 1000.0).unwrap();
        let b = predict_sadd(0.6, 1000.0).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-12);
        assert!(matches!(predict_sadd(0.0, 1000.0), Err(Error::Undetectable { .. })));
    }

    #[test]
    fn zero_watermark_removes_its_terms() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let zero = sigma_gamma_tilde(&ctrl, &pre.attack, &Matrix::zeros(2, 2)).unwrap();
        let exz = exz_minus1(&ctrl, &pre.attack).unwrap();
        let ca = &ctrl.c * &ctrl.a_cl;
        let sz = sigma_xf_z(&ctrl, &pre.attack, &exz).unwrap();
        let direct = &pre.attack.e_zz0 - &ca * &exz - (&ca * &exz).transpose() + &ca * sz * ca.transpose();
        assert!((zero - direct).norm() < 1e-12);
    }

    #[test]
    fn trace_monotone_in_watermark() {
        let pre = system_b();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let s1 = dmatrix![1.0, 0.2; 0.2, 0.5];
        let d = dmatrix![0.3, -0.1; -0.1, 0.4];
        let t1 = sigma_gamma_tilde(&ctrl, &pre.attack, &s1).unwrap().trace();
        let t2 = sigma_gamma_tilde(&ctrl, &pre.attack, &(&s1 + d)).unwrap().trace();
        assert!(t2 >= t1);
    }

    #[test]
    fn miso_matches_general_path() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let se = dmatrix![2.0, 0.4; 0.4, 1.0];
        let ma = miso_analysis(&pre.plant, &ctrl, 0.5, 10.0, &se).unwrap();
        let sgt = sigma_gamma_tilde(&ctrl, &pre.attack, &se).unwrap()[(0, 0)];
        assert!((ma.sigma_gamma_tilde_sq - sgt).abs() < 1e-8 * sgt);
        let general = expected_kld_optimal(&ctrl, &pre.attack, &dmatrix![sgt]).unwrap();
        assert!((ma.kld_optimal_at(10.0) - general).abs() < 1e-8);
    }

    #[test]
    fn miso_zero_correlation() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let ma = miso_analysis(&pre.plant, &ctrl, 0.0, 4.0, &Matrix::zeros(2, 2)).unwrap();
        let at = miso_attack(0.0, 4.0).unwrap();
        assert!((at.q_a[(0, 0)] - 4.0).abs() < 1e-15);
        let ca = &ctrl.c * &ctrl.a_cl;
        let sz = solve_dlyap(&ctrl.script_a, &(&ctrl.k * ctrl.k.transpose())).unwrap();
        assert!((ma.m_z - 1.0 - (&ca * sz * ca.transpose())[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn miso_rejects_multi_output() {
        let pre = system_b();
        let ctrl = build_lqg(&pre.plant).unwrap();
        assert!(miso_analysis(&pre.plant, &ctrl, 0.5, 1.0, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn innovation_only_reduces_without_watermark() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let z = Matrix::zeros(2, 2);
        let sgt = sigma_gamma_tilde(&ctrl, &pre.attack, &z).unwrap();
        let opt = expected_kld_optimal(&ctrl, &pre.attack, &sgt).unwrap();
        let inno = kld_innovation_only(&ctrl, &pre.attack, &z, &sgt, 20).unwrap();
        assert!((opt - inno).abs() < 1e-12);
    }

    #[test]
    fn report_is_consistent() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let r = analyze(&pre.plant, &ctrl, &pre.attack, &Matrix::identity(2, 2), 1000.0).unwrap();
        assert!(r.optimality_gap >= -1e-9);
        assert!((r.sadd_pred_optimal * r.expected_kld_optimal - 1000f64.ln()).abs() < 1e-9);
        let z = analyze(&pre.plant, &ctrl, &pre.attack, &Matrix::zeros(2, 2), 1000.0).unwrap();
        assert_eq!(z.delta_lqg, 0.0);
    }
}
