//! Sequential detectors fed by the controller-side observation stream and
//! the watermark applied one step earlier.
//!
//! Every detector carries its own copy of the steady-state filter, so it only
//! needs `(obs_k, e_{k−1})` per step.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Cholesky;

use crate::analysis::{residual_covariance, sigma_gamma_tilde};
use crate::attack::AttackModel;
use crate::control::{ControllerSolution, PlantModel};
use crate::error::{Error, Result};
use crate::linalg::{psd_range_basis, solve_dlyap, symmetrize, Matrix, Vector};
use crate::simulator::ClosedLoop;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectorVariant {
    OptimalCusum,
    SuboptCusum,
    Np,
}

impl DetectorVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            DetectorVariant::OptimalCusum => "optimal-cusum",
            DetectorVariant::SuboptCusum => "subopt-cusum",
            DetectorVariant::Np => "np",
        }
    }
}

impl fmt::Display for DetectorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DetectorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal-cusum" | "optimal" => Ok(DetectorVariant::OptimalCusum),
            "subopt-cusum" | "subopt" | "suboptimal" => Ok(DetectorVariant::SuboptCusum),
            "np" => Ok(DetectorVariant::Np),
            other => Err(Error::validation(format!(
                "unknown detector '{other}' (expected optimal-cusum, subopt-cusum or np)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub variant: DetectorVariant,
    /// Threshold parameter; CUSUM alarms at `ln(arl_h)`.
    pub arl_h: f64,
    /// NP per-step false-alarm probability, `1/arl_h` when unset.
    pub np_alpha: Option<f64>,
    /// Calibrated NP threshold.
    pub np_eta: Option<f64>,
}

impl DetectorConfig {
    pub fn new(variant: DetectorVariant, arl_h: f64) -> Result<Self> {
        let cfg = DetectorConfig {
            variant,
            arl_h,
            np_alpha: None,
            np_eta: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.arl_h > 1.0) {
            return Err(Error::validation(format!("arl_h must exceed 1, got {}", self.arl_h)));
        }
        if let Some(a) = self.np_alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::validation(format!("np_alpha must lie in (0, 1), got {a}")));
            }
        }
        Ok(())
    }

    pub fn cusum_threshold(&self) -> f64 {
        self.arl_h.ln()
    }

    pub fn alpha(&self) -> f64 {
        self.np_alpha.unwrap_or(1.0 / self.arl_h)
    }
}

/// Log-density of `N(0, Σ)` with the factorization done once.
#[derive(Debug, Clone)]
pub struct GaussianLogPdf {
    chol: Cholesky<f64, nalgebra::Dyn>,
    log_norm: f64,
}

impl GaussianLogPdf {
    pub fn new(cov: &Matrix, name: &str) -> Result<Self> {
        let d = cov.nrows() as f64;
        let chol = symmetrize(cov)
            .cholesky()
            .ok_or_else(|| Error::validation(format!("{name} is not positive definite")))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(GaussianLogPdf {
            chol,
            log_norm: -0.5 * (log_det + d * (2.0 * PI).ln()),
        })
    }

    /// `xᵀ Σ⁻¹ x`.
    pub fn mahalanobis(&self, x: &Vector) -> f64 {
        let mut y = x.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut y);
        y.norm_squared()
    }

    pub fn log_pdf(&self, x: &Vector) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis(x)
    }
}

/// Filter copy used by every detector.
#[derive(Debug, Clone)]
struct Tracker {
    x_hat: Vector,
    prev_obs: Vector,
}

impl Tracker {
    fn new(ctrl: &ControllerSolution) -> Self {
        Tracker {
            x_hat: Vector::zeros(ctrl.n()),
            prev_obs: Vector::zeros(ctrl.m()),
        }
    }

    /// Returns the prediction `x̂_{k|k−1}` and innovation, and advances.
    fn advance(&mut self, ctrl: &ControllerSolution, obs: &Vector, e_prev: &Vector) -> Result<(Vector, Vector)> {
        let u_prev = ctrl.control(&self.x_hat, e_prev);
        let pred = &ctrl.a * &self.x_hat + &ctrl.b * &u_prev;
        let (x_hat, gamma) = ctrl.kf_step(&self.x_hat, &u_prev, obs)?;
        self.x_hat = x_hat;
        Ok((pred, gamma))
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Optimal {
        a_a: Matrix,
        h1: GaussianLogPdf,
        h0: GaussianLogPdf,
    },
    Subopt {
        /// Orthonormal basis of the range of `Σ_e`.
        basis: Matrix,
        h1: GaussianLogPdf,
        h0: GaussianLogPdf,
    },
    Np {
        f: Vector,
        sigma_gamma: GaussianLogPdf,
        widened: GaussianLogPdf,
        eta: Option<f64>,
    },
}

/// Outcome of one detector step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorStep {
    pub statistic: f64,
    pub increment: f64,
    pub alarm: bool,
}

#[derive(Debug, Clone)]
pub struct Detector {
    ctrl: ControllerSolution,
    tracker: Tracker,
    kind: Kind,
    threshold: f64,
    statistic: f64,
    steps: u64,
    alarm_time: Option<u64>,
}

/// Covariance of `[γ; V_rᵀ e_{k−1}]` under attack and without, for the
/// sub-optimal test.
pub fn joint_covariances(
    ctrl: &ControllerSolution,
    sgt: &Matrix,
    sigma_e: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let m = ctrl.m();
    let (basis, _) = psd_range_basis(sigma_e, 1e-10);
    let r = basis.ncols();
    let se_r = symmetrize(&(basis.transpose() * sigma_e * &basis));
    let coupling = -(ctrl.cb() * sigma_e * &basis);
    let mut h1 = Matrix::zeros(m + r, m + r);
    h1.view_mut((0, 0), (m, m)).copy_from(sgt);
    h1.view_mut((0, m), (m, r)).copy_from(&coupling);
    h1.view_mut((m, 0), (r, m)).copy_from(&coupling.transpose());
    h1.view_mut((m, m), (r, r)).copy_from(&se_r);
    let mut h0 = Matrix::zeros(m + r, m + r);
    h0.view_mut((0, 0), (m, m)).copy_from(&ctrl.sigma_gamma);
    h0.view_mut((m, m), (r, r)).copy_from(&se_r);
    (basis, h1, h0)
}

/// `Σ_f = C 𝓛_f Cᵀ` with `𝓛_f = 𝓐 𝓛_f 𝓐ᵀ + B Σ_e Bᵀ`.
pub fn np_sigma_f(ctrl: &ControllerSolution, sigma_e: &Matrix) -> Result<Matrix> {
    let rhs = &ctrl.b * sigma_e * ctrl.b.transpose();
    let lf = solve_dlyap(&ctrl.script_a, &symmetrize(&rhs))?;
    Ok(symmetrize(&(&ctrl.c * lf * ctrl.c.transpose())))
}

impl Detector {
    pub fn optimal_cusum(ctrl: &ControllerSolution, attack: &AttackModel, arl_h: f64) -> Result<Self> {
        if attack.m() != ctrl.m() {
            return Err(Error::dims("attack model", ctrl.m(), attack.m()));
        }
        let h1 = GaussianLogPdf::new(&attack.q_a, "Q_a").map_err(|_| Error::SingularAttackNoise)?;
        let h0 = GaussianLogPdf::new(&ctrl.sigma_gamma, "Sigma_gamma")?;
        Ok(Self::with_kind(
            ctrl,
            Kind::Optimal {
                a_a: attack.a_a.clone(),
                h1,
                h0,
            },
            arl_h.ln(),
        ))
    }

    pub fn subopt_cusum(
        ctrl: &ControllerSolution,
        attack: &AttackModel,
        sigma_e: &Matrix,
        arl_h: f64,
    ) -> Result<Self> {
        let sgt = sigma_gamma_tilde(ctrl, attack, sigma_e)?;
        let resid = residual_covariance(ctrl, &sgt, sigma_e);
        if resid.clone().cholesky().is_none() {
            return Err(Error::validation(
                "sub-optimal joint covariance is singular (Sigma_gamma_tilde - CB Sigma_e BᵀCᵀ not positive definite)",
            ));
        }
        let (basis, h1, h0) = joint_covariances(ctrl, &sgt, sigma_e);
        let h1 = GaussianLogPdf::new(&h1, "attack joint covariance")?;
        let h0 = GaussianLogPdf::new(&h0, "nominal joint covariance")?;
        Ok(Self::with_kind(ctrl, Kind::Subopt { basis, h1, h0 }, arl_h.ln()))
    }

    /// NP detector; `eta` may be filled in later by [`Detector::set_eta`].
    pub fn np(ctrl: &ControllerSolution, sigma_e: &Matrix, eta: Option<f64>) -> Result<Self> {
        let sf = np_sigma_f(ctrl, sigma_e)?;
        let sigma_gamma = GaussianLogPdf::new(&ctrl.sigma_gamma, "Sigma_gamma")?;
        let widened = GaussianLogPdf::new(&(&ctrl.sigma_gamma + sf), "Sigma_gamma + Sigma_f")?;
        Ok(Self::with_kind(
            ctrl,
            Kind::Np {
                f: Vector::zeros(ctrl.n()),
                sigma_gamma,
                widened,
                eta,
            },
            eta.unwrap_or(f64::INFINITY),
        ))
    }

    pub fn from_config(
        cfg: &DetectorConfig,
        ctrl: &ControllerSolution,
        attack: &AttackModel,
        sigma_e: &Matrix,
    ) -> Result<Self> {
        cfg.validate()?;
        match cfg.variant {
            DetectorVariant::OptimalCusum => Self::optimal_cusum(ctrl, attack, cfg.arl_h),
            DetectorVariant::SuboptCusum => Self::subopt_cusum(ctrl, attack, sigma_e, cfg.arl_h),
            DetectorVariant::Np => Self::np(ctrl, sigma_e, cfg.np_eta),
        }
    }

    fn with_kind(ctrl: &ControllerSolution, kind: Kind, threshold: f64) -> Self {
        Detector {
            ctrl: ctrl.clone(),
            tracker: Tracker::new(ctrl),
            kind,
            threshold,
            statistic: 0.0,
            steps: 0,
            alarm_time: None,
        }
    }

    pub fn set_eta(&mut self, value: f64) {
        if let Kind::Np { eta, .. } = &mut self.kind {
            *eta = Some(value);
            self.threshold = value;
        }
    }

    pub fn variant(&self) -> DetectorVariant {
        match self.kind {
            Kind::Optimal { .. } => DetectorVariant::OptimalCusum,
            Kind::Subopt { .. } => DetectorVariant::SuboptCusum,
            Kind::Np { .. } => DetectorVariant::Np,
        }
    }

    pub fn statistic(&self) -> f64 {
        self.statistic
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn alarm_time(&self) -> Option<u64> {
        self.alarm_time
    }

    /// Current filtered estimate held by the detector.
    pub fn x_hat(&self) -> &Vector {
        &self.tracker.x_hat
    }

    /// NP watermark-convolution state.
    pub fn np_state(&self) -> Option<&Vector> {
        match &self.kind {
            Kind::Np { f, .. } => Some(f),
            _ => None,
        }
    }

    /// Zero the statistic and forget any alarm, keeping the filter state.
    pub fn arm(&mut self) {
        self.statistic = 0.0;
        self.steps = 0;
        self.alarm_time = None;
    }

    /// Feed `obs_k` and the watermark `e_{k−1}` applied with the previous input.
    pub fn update(&mut self, obs: &Vector, e_prev: &Vector) -> Result<DetectorStep> {
        if e_prev.len() != self.ctrl.p() {
            return Err(Error::dims("detector watermark", self.ctrl.p(), e_prev.len()));
        }
        let (pred, gamma) = self.tracker.advance(&self.ctrl, obs, e_prev)?;
        let increment = match &mut self.kind {
            Kind::Optimal { a_a, h1, h0 } => {
                let mu = &*a_a * &self.tracker.prev_obs - &self.ctrl.c * &pred;
                h1.log_pdf(&(&gamma - mu)) - h0.log_pdf(&gamma)
            }
            Kind::Subopt { basis, h1, h0 } => {
                let m = gamma.len();
                let r = basis.ncols();
                let mut joint = Vector::zeros(m + r);
                joint.rows_mut(0, m).copy_from(&gamma);
                joint.rows_mut(m, r).copy_from(&(basis.transpose() * e_prev));
                h1.log_pdf(&joint) - h0.log_pdf(&joint)
            }
            Kind::Np {
                f,
                sigma_gamma,
                widened,
                eta,
            } => {
                if eta.is_none() {
                    return Err(Error::validation("NP detector used before calibration"));
                }
                *f = &self.ctrl.script_a * &*f + &self.ctrl.b * e_prev;
                let mu = -(&self.ctrl.c * &*f);
                sigma_gamma.mahalanobis(&gamma) - widened.mahalanobis(&(&gamma - mu))
            }
        };
        self.tracker.prev_obs = obs.clone();
        if !increment.is_finite() {
            return Err(Error::Numeric(format!("non-finite detector increment {increment}")));
        }
        self.steps += 1;
        self.statistic = match self.kind {
            Kind::Np { .. } => increment,
            _ => (self.statistic + increment).max(0.0),
        };
        let alarm = self.statistic >= self.threshold;
        if alarm && self.alarm_time.is_none() {
            self.alarm_time = Some(self.steps);
        }
        Ok(DetectorStep {
            statistic: self.statistic,
            increment,
            alarm,
        })
    }

    /// NP statistic with the threshold check skipped, used for calibration.
    fn np_raw(&mut self, obs: &Vector, e_prev: &Vector) -> Result<f64> {
        if let Kind::Np { eta, .. } = &mut self.kind {
            if eta.is_none() {
                *eta = Some(f64::INFINITY);
            }
        }
        Ok(self.update(obs, e_prev)?.increment)
    }
}

/// Default length of the no-attack run used to calibrate the NP threshold.
pub const NP_CALIBRATION_STEPS: usize = 1_000_000;

/// `(1 − α)` empirical quantile of the NP statistic over a no-attack run of
/// `steps` samples taken after `burn_in` steps.
pub fn np_calibrate(
    plant: &PlantModel,
    ctrl: &ControllerSolution,
    sigma_e: &Matrix,
    alpha: f64,
    steps: usize,
    burn_in: usize,
    seed: u64,
    stream: u64,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if (steps as f64) < 100.0 / alpha {
        return Err(Error::Estimation(format!(
            "{steps} calibration samples are too few for alpha = {alpha} (need at least {})",
            (100.0 / alpha).ceil()
        )));
    }
    let mut det = Detector::np(ctrl, sigma_e, None)?;
    let mut sim = ClosedLoop::new(plant, ctrl, sigma_e, seed, stream)?;
    let mut samples = Vec::with_capacity(steps);
    for k in 0..burn_in + steps {
        let out = sim.step(None)?;
        let g = det.np_raw(&out.obs, &out.e_prev)?;
        if k >= burn_in {
            samples.push(g);
        }
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    let idx = (((1.0 - alpha) * steps as f64).ceil() as usize).clamp(1, steps) - 1;
    Ok(samples[idx])
}
