//! Watermark covariance design: maximize detectability under a cap on the
//! added LQG cost, searching over rank-one `Σ_e = v vᵀ`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{expected_kld_optimal, kld_suboptimal, sigma_gamma_tilde};
use crate::attack::AttackModel;
use crate::control::{ControllerSolution, PlantModel};
use crate::error::{Error, Result};
use crate::linalg::{
    canonical_sign, solve_dlyap, spd_inverse, spd_log_det, symmetrize, top_generalized_eigenvector, Matrix,
    Vector,
};
use crate::watermark::{cost_sensitivity, delta_lqg, standard_normal_vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DesignVariant {
    OptimalKld,
    SuboptKld,
}

impl DesignVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            DesignVariant::OptimalKld => "optimal-kld",
            DesignVariant::SuboptKld => "subopt-kld",
        }
    }
}

impl fmt::Display for DesignVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DesignVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal-kld" | "optimal" => Ok(DesignVariant::OptimalKld),
            "subopt-kld" | "subopt" | "suboptimal" => Ok(DesignVariant::SuboptKld),
            other => Err(Error::validation(format!(
                "unknown design variant '{other}' (expected optimal-kld or subopt-kld)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub budget_j: f64,
    pub variant: DesignVariant,
    pub max_iterations: usize,
    /// Bound on the KKT residual `‖∇f − 2μHv‖`.
    pub tolerance: f64,
    pub initial_mu: f64,
    pub initial_v: Option<Vector>,
    /// Random restarts in addition to the supplied and eigen starting points.
    pub starts: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn new(budget_j: f64) -> Self {
        OptimizerConfig {
            budget_j,
            variant: DesignVariant::SuboptKld,
            max_iterations: 5000,
            tolerance: 1e-6,
            initial_mu: 0.0,
            initial_v: None,
            starts: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WatermarkDesign {
    pub sigma_e_star: Matrix,
    pub v_lambda: Vector,
    /// Divergence reached at `Σ_e*` under the targeted test; NaN for the
    /// optimal-test designs until [`evaluate_design`] has seen the attack.
    pub achieved_kld: f64,
    pub achieved_delta_lqg: f64,
    /// Objective maximized by the search (for the optimal test,
    /// `tr(H_KLD Σ_e)` with the innovation-weighted `H_KLD`).
    pub objective: f64,
    /// Lagrange multiplier of the cost constraint.
    pub mu: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The unwatermarked loop scores higher than the returned boundary point.
    pub interior_better: bool,
}

fn budget_check(budget: f64) -> Result<()> {
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(Error::validation(format!("budget J must be positive, got {budget}")));
    }
    Ok(())
}

/// `Bᵀ(I−KC)ᵀ 𝓛 (I−KC)B + BᵀCᵀ X C B` with `𝓛 = 𝓐ᵀ𝓛𝓐 + (A+BL)ᵀCᵀ X C(A+BL)`.
///
/// This is the linear map `X ↦ N(X)` with `tr(X · Δ) = tr(N(X) Σ_e)` for the
/// watermark part `Δ` of `Σ_γ̃` when the direct `CB` term is included.
fn sensitivity(ctrl: &ControllerSolution, x: &Matrix, with_direct: bool) -> Result<Matrix> {
    let ca = &ctrl.c * &ctrl.a_cl;
    let l = solve_dlyap(&ctrl.script_a.transpose(), &symmetrize(&(ca.transpose() * x * &ca)))?;
    let g = &ctrl.i_minus_kc * &ctrl.b;
    let mut out = g.transpose() * l * &g;
    if with_direct {
        let cb = ctrl.cb();
        out += cb.transpose() * x * cb;
    }
    Ok(symmetrize(&out))
}

/// `Bᵀ(I−KC)ᵀ𝓛_e(I−KC)B + BᵀCᵀCB` with `𝓛_e = 𝓐ᵀ𝓛_e𝓐 + (A+BL)ᵀCᵀC(A+BL)`.
pub fn h_kld(_plant: &PlantModel, ctrl: &ControllerSolution) -> Result<Matrix> {
    sensitivity(ctrl, &Matrix::identity(ctrl.m(), ctrl.m()), true)
}

/// [`h_kld`] with `CᵀC` replaced by `CᵀΣ_γ⁻¹C`; the expected optimal-test
/// divergence is `½ tr(H Σ_e) + const` for this matrix.
pub fn h_kld_weighted(ctrl: &ControllerSolution) -> Result<Matrix> {
    sensitivity(ctrl, &ctrl.sigma_gamma_inv, true)
}

/// Closed-form design for the optimal test: top generalized eigenvector of
/// `(H_KLD, H)` scaled onto `vᵀ H v = J`.
pub fn optimize_optimal(plant: &PlantModel, ctrl: &ControllerSolution, budget: f64) -> Result<WatermarkDesign> {
    budget_check(budget)?;
    let (h, _) = cost_sensitivity(plant, ctrl)?;
    let hk = h_kld_weighted(ctrl)?;
    if hk.amax() <= 1e-14 * (1.0 + h.amax()) {
        return Err(Error::validation("watermarking gives no divergence benefit (H_KLD = 0)"));
    }
    let (lambda, v_hat) = top_generalized_eigenvector(&hk, &h)?;
    let mut v = v_hat * budget.sqrt();
    canonical_sign(&mut v);
    let sigma_e = &v * v.transpose();
    let dl = delta_lqg(plant, ctrl, &sigma_e)?.delta_lqg;
    let objective = (&hk * &sigma_e).trace();
    Ok(WatermarkDesign {
        achieved_kld: f64::NAN,
        achieved_delta_lqg: dl,
        objective,
        mu: lambda,
        kkt_residual: (&hk * &v - &h * &v * lambda).norm(),
        iterations: 0,
        converged: true,
        interior_better: false,
        sigma_e_star: sigma_e,
        v_lambda: v,
    })
}

/// Fill in the divergence reached by a design against a concrete attack.
pub fn evaluate_design(
    ctrl: &ControllerSolution,
    attack: &AttackModel,
    variant: DesignVariant,
    design: &mut WatermarkDesign,
) -> Result<()> {
    let sgt = sigma_gamma_tilde(ctrl, attack, &design.sigma_e_star)?;
    design.achieved_kld = match variant {
        DesignVariant::OptimalKld => expected_kld_optimal(ctrl, attack, &sgt)?,
        DesignVariant::SuboptKld => kld_suboptimal(ctrl, &sgt, &design.sigma_e_star)?,
    };
    Ok(())
}

/// Design for `cfg.variant` with the divergence against `attack` filled in.
pub fn design_watermark(
    plant: &PlantModel,
    ctrl: &ControllerSolution,
    attack: &AttackModel,
    cfg: &OptimizerConfig,
) -> Result<WatermarkDesign> {
    let mut design = match cfg.variant {
        DesignVariant::OptimalKld => optimize_optimal(plant, ctrl, cfg.budget_j)?,
        DesignVariant::SuboptKld => optimize_subopt(plant, ctrl, attack, cfg.budget_j, cfg)?,
    };
    evaluate_design(ctrl, attack, cfg.variant, &mut design)?;
    Ok(design)
}

/// Smooth objective of `v` with gradient.
trait Objective {
    fn value(&self, v: &Vector) -> Result<f64>;
    fn gradient(&self, v: &Vector) -> Result<Vector>;
}

/// `½ vᵀ H_KLD v` for the optimal test (constant dropped).
struct Quadratic {
    hk: Matrix,
}

impl Objective for Quadratic {
    fn value(&self, v: &Vector) -> Result<f64> {
        Ok(0.5 * v.dot(&(&self.hk * v)))
    }

    fn gradient(&self, v: &Vector) -> Result<Vector> {
        Ok(&self.hk * v)
    }
}

/// Sub-optimal test divergence at `Σ_e = v vᵀ`:
/// `½{tr(Σ_γ⁻¹ S) − m − ln|D| + ln|Σ_γ|}` with `D = Σ̃₀ + T(vvᵀ)` and
/// `S = D + CBvvᵀBᵀCᵀ`.
struct SuboptKld {
    ctrl: ControllerSolution,
    base: Matrix,
    n_sg: Matrix,
    ld_sg: f64,
    m: f64,
}

impl SuboptKld {
    fn new(ctrl: &ControllerSolution, attack: &AttackModel) -> Result<Self> {
        let p = ctrl.p();
        let base = sigma_gamma_tilde(ctrl, attack, &Matrix::zeros(p, p))?;
        Ok(SuboptKld {
            ctrl: ctrl.clone(),
            base,
            n_sg: sensitivity(ctrl, &ctrl.sigma_gamma_inv, true)?,
            ld_sg: spd_log_det(&ctrl.sigma_gamma, "Sigma_gamma")?,
            m: ctrl.m() as f64,
        })
    }

    fn d(&self, v: &Vector) -> Result<Matrix> {
        let ca = &self.ctrl.c * &self.ctrl.a_cl;
        let g = &self.ctrl.i_minus_kc * &self.ctrl.b * v;
        let sx = solve_dlyap(&self.ctrl.script_a, &(&g * g.transpose()))?;
        Ok(symmetrize(&(&self.base + &ca * sx * ca.transpose())))
    }
}

impl Objective for SuboptKld {
    fn value(&self, v: &Vector) -> Result<f64> {
        let d = self.d(v)?;
        let cbv = self.ctrl.cb() * v;
        let s = &d + &cbv * cbv.transpose();
        let ld_d = spd_log_det(&d, "Sigma_gamma_tilde - CB Sigma_e BᵀCᵀ")?;
        Ok(0.5 * ((&self.ctrl.sigma_gamma_inv * s).trace() - self.m - ld_d + self.ld_sg))
    }

    fn gradient(&self, v: &Vector) -> Result<Vector> {
        let d_inv = spd_inverse(&self.d(v)?, "Sigma_gamma_tilde - CB Sigma_e BᵀCᵀ")?;
        let n_d = sensitivity(&self.ctrl, &d_inv, false)?;
        Ok((&self.n_sg - n_d) * v)
    }
}

struct AscentResult {
    v: Vector,
    value: f64,
    mu: f64,
    kkt: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;

/// Projected gradient ascent on the ellipsoid `vᵀ H v = J`.
///
/// Works in `y = H^{1/2} v`, where the constraint is a sphere of radius `√J`;
/// each step moves along the tangent gradient and retracts radially, with a
/// backtracking line search. The multiplier estimate is `μ = vᵀ∇f / (2J)`.
fn ascend(
    obj: &dyn Objective,
    h: &Matrix,
    budget: f64,
    v0: &Vector,
    max_iter: usize,
    tol: f64,
) -> Result<AscentResult> {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(h));
    let h_half = &eig.eigenvectors * Matrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * eig.eigenvectors.transpose();
    let h_inv_half =
        &eig.eigenvectors * Matrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * eig.eigenvectors.transpose();
    let radius = budget.sqrt();
    let to_sphere = |y: Vector| -> Vector {
        let n = y.norm();
        y * (radius / n)
    };
    let mut y = h_half * v0;
    if y.norm() == 0.0 {
        return Err(Error::validation("optimizer start point must be nonzero"));
    }
    y = to_sphere(y);
    let mut v = &h_inv_half * &y;
    let mut f = obj.value(&v)?;
    let mut history = vec![f];
    let mut step = 1.0;
    let mut kkt = f64::INFINITY;
    let mut mu = 0.0;
    for it in 0..max_iter {
        let grad_v = obj.gradient(&v)?;
        mu = v.dot(&grad_v) / (2.0 * budget);
        kkt = (&grad_v - h * &v * (2.0 * mu)).norm();
        if kkt <= tol {
            return Ok(AscentResult {
                v,
                value: f,
                mu,
                kkt,
                iterations: it,
                converged: true,
                history,
            });
        }
        let g_y = &h_inv_half * &grad_v;
        let tangent = &g_y - &y * (y.dot(&g_y) / budget);
        let slope = tangent.norm_squared();
        let mut s = step;
        let mut accepted = false;
        for _ in 0..200 {
            let y_new = to_sphere(&y + &tangent * s);
            let v_new = &h_inv_half * &y_new;
            if let Ok(f_new) = obj.value(&v_new) {
                if f_new >= f + ARMIJO_C * s * slope {
                    y = y_new;
                    v = v_new;
                    f = f_new;
                    accepted = true;
                    break;
                }
            }
            s *= SHRINK;
        }
        history.push(f);
        if !accepted {
            break;
        }
        step = (s * 2.0).min(1e12);
    }
    Ok(AscentResult {
        v,
        value: f,
        mu,
        kkt,
        iterations: max_iter,
        converged: false,
        history,
    })
}

fn starting_points(p: usize, h: &Matrix, budget: f64, cfg: &OptimizerConfig, extra: &[Vector]) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts: Vec<Vector> = extra.to_vec();
    if let Some(v) = &cfg.initial_v {
        starts.insert(0, v.clone());
    }
    for _ in 0..cfg.starts {
        starts.push(standard_normal_vector(p, &mut rng));
    }
    starts
        .into_iter()
        .filter(|v| v.len() == p && v.norm() > 0.0)
        .map(|v| {
            let scale = (budget / v.dot(&(h * &v))).sqrt();
            v * scale
        })
        .collect()
}

fn run_search(
    obj: &dyn Objective,
    plant: &PlantModel,
    ctrl: &ControllerSolution,
    budget: f64,
    cfg: &OptimizerConfig,
    extra: &[Vector],
) -> Result<(AscentResult, Vec<AscentResult>)> {
    budget_check(budget)?;
    let (h, _) = cost_sensitivity(plant, ctrl)?;
    let starts = starting_points(plant.p(), &h, budget, cfg, extra);
    if starts.is_empty() {
        return Err(Error::validation("no usable optimizer start point"));
    }
    let mut runs = Vec::with_capacity(starts.len());
    for v0 in &starts {
        runs.push(ascend(obj, &h, budget, v0, cfg.max_iterations, cfg.tolerance)?);
    }
    let best_idx = runs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.value.total_cmp(&b.1.value))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let best = runs.swap_remove(best_idx);
    Ok((best, runs))
}

fn finish(
    plant: &PlantModel,
    ctrl: &ControllerSolution,
    best: AscentResult,
    objective_at_zero: f64,
) -> Result<WatermarkDesign> {
    let mut v = best.v;
    canonical_sign(&mut v);
    let sigma_e = &v * v.transpose();
    let dl = delta_lqg(plant, ctrl, &sigma_e)?.delta_lqg;
    Ok(WatermarkDesign {
        achieved_kld: best.value,
        achieved_delta_lqg: dl,
        objective: best.value,
        mu: best.mu,
        kkt_residual: best.kkt,
        iterations: best.iterations,
        converged: best.converged,
        interior_better: objective_at_zero > best.value,
        sigma_e_star: sigma_e,
        v_lambda: v,
    })
}

/// Iterative design for the sub-optimal test divergence; returns the best
/// KKT point over all starts (a local optimum in general).
pub fn optimize_subopt(
    plant: &PlantModel,
    ctrl: &ControllerSolution,
    attack: &AttackModel,
    budget: f64,
    cfg: &OptimizerConfig,
) -> Result<WatermarkDesign> {
    let obj = SuboptKld::new(ctrl, attack)?;
    let eigen = optimize_optimal(plant, ctrl, budget).map(|d| vec![d.v_lambda]).unwrap_or_default();
    let (best, _) = run_search(&obj, plant, ctrl, budget, cfg, &eigen)?;
    let at_zero = obj.value(&Vector::zeros(plant.p()))?;
    finish(plant, ctrl, best, at_zero)
}

/// The same ascent applied to the optimal-test objective, without the
/// closed-form eigenvector as a start; used to cross-check [`optimize_optimal`].
pub fn optimize_optimal_iterative(
    plant: &PlantModel,
    ctrl: &ControllerSolution,
    budget: f64,
    cfg: &OptimizerConfig,
) -> Result<WatermarkDesign> {
    let obj = Quadratic {
        hk: h_kld_weighted(ctrl)?,
    };
    let (best, _) = run_search(&obj, plant, ctrl, budget, cfg, &[])?;
    let mut design = finish(plant, ctrl, best, 0.0)?;
    design.objective *= 2.0;
    design.mu *= 2.0;
    design.achieved_kld = f64::NAN;
    Ok(design)
}

/// Objective history of one ascent run, for inspecting the line search.
pub fn subopt_ascent_history(
    plant: &PlantModel,
    ctrl: &ControllerSolution,
    attack: &AttackModel,
    budget: f64,
    v0: &Vector,
    max_iterations: usize,
) -> Result<Vec<f64>> {
    budget_check(budget)?;
    let obj = SuboptKld::new(ctrl, attack)?;
    let (h, _) = cost_sensitivity(plant, ctrl)?;
    Ok(ascend(&obj, &h, budget, v0, max_iterations, 0.0)?.history)
}

/// Sub-optimal test divergence at `Σ_e = v vᵀ` through the same code path the
/// optimizer uses.
pub fn subopt_objective(ctrl: &ControllerSolution, attack: &AttackModel, v: &Vector) -> Result<f64> {
    SuboptKld::new(ctrl, attack)?.value(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::build_lqg;
    use crate::linalg::rank;
    use crate::presets::{system_a, system_b};
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn h_kld_loses_direct_term_when_cb_vanishes() {
        // C B = 0: B drives the second state, C reads the first
        let plant = PlantModel::new(
            dmatrix![0.5, 0.3; 0.0, 0.4],
            dmatrix![0.0; 1.0],
            dmatrix![1.0, 0.0],
            Matrix::identity(2, 2),
            dmatrix![1.0],
            Matrix::identity(2, 2),
            dmatrix![1.0],
        )
        .unwrap();
        let ctrl = build_lqg(&plant).unwrap();
        assert_eq!(ctrl.cb()[(0, 0)], 0.0);
        let full = h_kld(&plant, &ctrl).unwrap();
        let no_direct = sensitivity(&ctrl, &Matrix::identity(1, 1), false).unwrap();
        assert!((full - no_direct).norm() < 1e-15);
    }

    #[test]
    fn h_kld_zero_without_output() {
        let pre = system_a();
        let mut ctrl = build_lqg(&pre.plant).unwrap();
        ctrl.c = Matrix::zeros(1, 2);
        assert!(h_kld(&pre.plant, &ctrl).unwrap().amax() == 0.0);
    }

    #[test]
    fn h_kld_matches_finite_differences() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let hk = h_kld_weighted(&ctrl).unwrap();
        let base = Matrix::identity(2, 2);
        let f = |s: &Matrix| {
            let sgt = sigma_gamma_tilde(&ctrl, &pre.attack, s).unwrap();
            expected_kld_optimal(&ctrl, &pre.attack, &sgt).unwrap()
        };
        let f0 = f(&base);
        let step = 1e-3;
        for (i, j) in [(0, 0), (1, 1), (0, 1)] {
            let mut d = Matrix::zeros(2, 2);
            d[(i, j)] = step;
            d[(j, i)] = step;
            let fd = (f(&(&base + &d)) - f0) / step;
            let exact = 0.5 * (&hk * &d).trace() / step;
            assert!((fd - exact).abs() < 1e-8 * (1.0 + exact.abs()), "{i}{j}: {fd} vs {exact}");
        }
        let unweighted = h_kld(&pre.plant, &ctrl).unwrap();
        assert!((unweighted / ctrl.sigma_gamma[(0, 0)] - hk).norm() < 1e-12);
    }

    #[test]
    fn optimal_design_is_rank_one_and_binding() {
        for pre in [system_a(), system_b()] {
            let ctrl = build_lqg(&pre.plant).unwrap();
            let d = optimize_optimal(&pre.plant, &ctrl, 50.0).unwrap();
            assert_eq!(rank(&d.sigma_e_star, 1e-9), 1);
            assert!((d.achieved_delta_lqg - 50.0).abs() < 1e-8 * 50.0);
        }
    }

    #[test]
    fn optimal_design_scales_linearly() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let a = optimize_optimal(&pre.plant, &ctrl, 10.0).unwrap().objective;
        let b = optimize_optimal(&pre.plant, &ctrl, 20.0).unwrap().objective;
        assert!((b - 2.0 * a).abs() < 1e-9 * b);
    }

    #[test]
    fn zero_budget_rejected() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        assert!(matches!(optimize_optimal(&pre.plant, &ctrl, 0.0), Err(Error::Validation(_))));
    }

    #[test]
    fn subopt_gradient_matches_finite_differences() {
        let pre = system_b();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let obj = SuboptKld::new(&ctrl, &pre.attack).unwrap();
        let v = dvector![1.3, -0.7];
        let g = obj.gradient(&v).unwrap();
        for i in 0..2 {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[i] += 1e-5;
            vm[i] -= 1e-5;
            let fd = (obj.value(&vp).unwrap() - obj.value(&vm).unwrap()) / 2e-5;
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "{fd} vs {}", g[i]);
        }
        let sgt = sigma_gamma_tilde(&ctrl, &pre.attack, &(&v * v.transpose())).unwrap();
        let direct = kld_suboptimal(&ctrl, &sgt, &(&v * v.transpose())).unwrap();
        assert!((obj.value(&v).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn subopt_sign_invariant() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let mut cfg = OptimizerConfig::new(30.0);
        cfg.starts = 0;
        cfg.initial_v = Some(dvector![1.0, 0.4]);
        let a = optimize_subopt(&pre.plant, &ctrl, &pre.attack, 30.0, &cfg).unwrap();
        cfg.initial_v = Some(dvector![-1.0, -0.4]);
        let b = optimize_subopt(&pre.plant, &ctrl, &pre.attack, 30.0, &cfg).unwrap();
        assert!((&a.v_lambda - &b.v_lambda).norm() < 1e-6 * a.v_lambda.norm());
    }

    #[test]
    fn ascent_never_decreases_objective() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let hist = subopt_ascent_history(&pre.plant, &ctrl, &pre.attack, 40.0, &dvector![0.2, 1.0], 200).unwrap();
        assert!(hist.windows(2).all(|w| w[1] >= w[0]));
    }

    fn single_input_system_a() -> PlantModel {
        let mut plant = system_a().plant;
        plant.b = plant.b.columns(0, 1).into_owned();
        plant.u = Matrix::from_element(1, 1, 0.4);
        plant
    }

    #[test]
    fn single_input_matches_grid_search() {
        let plant = single_input_system_a();
        let attack = system_a().attack;
        let ctrl = build_lqg(&plant).unwrap();
        let (h, _) = cost_sensitivity(&plant, &ctrl).unwrap();
        let budget = 5.0;
        let top = budget / h[(0, 0)];
        let mut best_sub = f64::NEG_INFINITY;
        let mut arg_sub = 0.0;
        for i in 0..=500 {
            let s2 = top * i as f64 / 500.0;
            let s = Matrix::from_element(1, 1, s2);
            let sgt = sigma_gamma_tilde(&ctrl, &attack, &s).unwrap();
            let f = kld_suboptimal(&ctrl, &sgt, &s).unwrap();
            if f > best_sub {
                best_sub = f;
                arg_sub = s2;
            }
        }
        let opt = optimize_optimal(&plant, &ctrl, budget).unwrap();
        assert!((opt.sigma_e_star[(0, 0)] - top).abs() < 1e-9 * top);
        let sub = optimize_subopt(&plant, &ctrl, &attack, budget, &OptimizerConfig::new(budget)).unwrap();
        assert!((sub.sigma_e_star[(0, 0)] - arg_sub).abs() <= top / 500.0);
        assert!((sub.achieved_kld - best_sub).abs() < 1e-9);
    }

    #[test]
    fn eigen_and_ascent_agree_on_system_a() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let eig = optimize_optimal(&pre.plant, &ctrl, 10.0).unwrap();
        let it = optimize_optimal_iterative(&pre.plant, &ctrl, 10.0, &OptimizerConfig::new(10.0)).unwrap();
        assert!((it.objective - eig.objective).abs() < 0.01 * eig.objective);
        assert!(it.converged);
        assert!((it.mu - eig.mu).abs() < 1e-4 * eig.mu);
    }

    #[test]
    fn single_start_close_to_multi_start() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let best = optimize_subopt(&pre.plant, &ctrl, &pre.attack, 10.0, &OptimizerConfig::new(10.0)).unwrap();
        assert!(best.converged && best.kkt_residual <= 1e-6);
        let mut cfg = OptimizerConfig::new(10.0);
        cfg.starts = 0;
        cfg.initial_v = Some(dvector![0.3, 1.0]);
        let one = optimize_subopt(&pre.plant, &ctrl, &pre.attack, 10.0, &cfg).unwrap();
        assert!(one.achieved_kld >= 0.99 * best.achieved_kld);
        assert!(best.achieved_kld >= one.achieved_kld - 1e-12);
    }

    #[test]
    fn optimized_beats_equal_power() {
        for pre in [system_a(), system_b()] {
            let ctrl = build_lqg(&pre.plant).unwrap();
            let (h, _) = cost_sensitivity(&pre.plant, &ctrl).unwrap();
            let budget = 8.0;
            let eq = Matrix::identity(h.nrows(), h.nrows()) * (budget / h.trace());
            let sgt_eq = sigma_gamma_tilde(&ctrl, &pre.attack, &eq).unwrap();
            let cfg = |v| {
                let mut c = OptimizerConfig::new(budget);
                c.variant = v;
                c
            };
            let o = design_watermark(&pre.plant, &ctrl, &pre.attack, &cfg(DesignVariant::OptimalKld)).unwrap();
            assert!(o.achieved_kld >= expected_kld_optimal(&ctrl, &pre.attack, &sgt_eq).unwrap());
            let s = design_watermark(&pre.plant, &ctrl, &pre.attack, &cfg(DesignVariant::SuboptKld)).unwrap();
            assert!(s.achieved_kld >= kld_suboptimal(&ctrl, &sgt_eq, &eq).unwrap());
            assert!(s.achieved_delta_lqg <= budget * (1.0 + 1e-6));
        }
    }

    #[test]
    fn no_benefit_without_output() {
        let pre = system_a();
        let mut plant = pre.plant.clone();
        plant.c = Matrix::zeros(1, 2);
        let mut ctrl = build_lqg(&pre.plant).unwrap();
        ctrl.c = Matrix::zeros(1, 2);
        assert!(matches!(optimize_optimal(&plant, &ctrl, 1.0), Err(Error::Validation(_))));
    }

    #[test]
    fn reported_cost_reproducible() {
        let pre = system_b();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let d = optimize_subopt(&pre.plant, &ctrl, &pre.attack, 4.0, &OptimizerConfig::new(4.0)).unwrap();
        assert_eq!(delta_lqg(&pre.plant, &ctrl, &d.sigma_e_star).unwrap().delta_lqg, d.achieved_delta_lqg);
        assert!((&d.v_lambda * d.v_lambda.transpose() - &d.sigma_e_star).norm() == 0.0);
    }

    #[test]
    fn h_kld_system_a_regression() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let hk = h_kld(&pre.plant, &ctrl).unwrap();
        let pinned = dmatrix![0.6400590207680918, -0.560211400454552; -0.560211400454552, 0.49305822138213357];
        assert!((hk - pinned).norm() < 1e-9);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [DesignVariant::OptimalKld, DesignVariant::SuboptKld] {
            assert_eq!(v.as_str().parse::<DesignVariant>().unwrap(), v);
        }
    }
}
