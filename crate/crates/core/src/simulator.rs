//! Closed-loop Monte Carlo: trajectories, attack injection, detector runs,
//! delay and run-length estimates, and cost/delay sweeps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{analyze, KldReport};
use crate::attack::AttackModel;
use crate::control::{build_lqg, ControllerSolution, PlantModel};
use crate::detectors::{np_calibrate, Detector, DetectorConfig, DetectorVariant, NP_CALIBRATION_STEPS};
use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, Matrix, Vector};
use crate::optimizer::{design_watermark, DesignVariant, OptimizerConfig};
use crate::watermark::{cost_sensitivity, delta_lqg, standard_normal_vector, WatermarkSpec};

/// State norm beyond which the plant is frozen and the run marked diverged.
pub const DIVERGENCE_GUARD: f64 = 1e9;
pub const DEFAULT_BURN_IN: usize = 200;
pub const DEFAULT_NU: usize = 500;
/// Random stream reserved for NP calibration; trials use their index.
const CALIBRATION_STREAM: u64 = u64::MAX;

/// Everything produced by one closed-loop step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub k: u64,
    /// What the filter saw: `y_k`, or `z_k` under attack.
    pub obs: Vector,
    /// Watermark carried by `u_{k−1}`.
    pub e_prev: Vector,
    pub gamma: Vector,
    pub x_hat: Vector,
    pub u: Vector,
    /// `x_kᵀ W x_k + u_kᵀ U u_k`.
    pub stage_cost: f64,
    pub state_norm: f64,
}

/// Plant, filter, controller and watermark advanced one sample at a time.
///
/// Per step: observe (true sensor or attacker), filter, draw `e_k`, apply
/// `u_k = L x̂_{k|k} + e_k`, propagate the plant.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    plant: PlantModel,
    ctrl: ControllerSolution,
    watermark: WatermarkSpec,
    q_sqrt: Matrix,
    r_sqrt: Matrix,
    rng: ChaCha8Rng,
    x: Vector,
    x_hat: Vector,
    u_prev: Vector,
    e_prev: Vector,
    z: Option<Vector>,
    k: u64,
    diverged: bool,
}

impl ClosedLoop {
    pub fn new(
        plant: &PlantModel,
        ctrl: &ControllerSolution,
        sigma_e: &Matrix,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(ClosedLoop {
            plant: plant.clone(),
            ctrl: ctrl.clone(),
            watermark: WatermarkSpec::new(sigma_e.clone())?,
            q_sqrt: psd_sqrt(&plant.q)?,
            r_sqrt: psd_sqrt(&plant.r)?,
            rng,
            x: Vector::zeros(plant.n()),
            x_hat: Vector::zeros(plant.n()),
            u_prev: Vector::zeros(plant.p()),
            e_prev: Vector::zeros(plant.p()),
            z: None,
            k: 0,
            diverged: false,
        })
    }

    /// Switch off process and measurement noise (watermark and attack stay).
    pub fn without_noise(mut self) -> Self {
        self.q_sqrt.fill(0.0);
        self.r_sqrt.fill(0.0);
        self
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn state(&self) -> &Vector {
        &self.x
    }

    pub fn step(&mut self, attack: Option<&AttackModel>) -> Result<StepOutput> {
        self.k += 1;
        let m = self.plant.m();
        let obs = match attack {
            Some(at) => {
                let z = match &self.z {
                    None => at.initial(&mut self.rng),
                    Some(prev) => at.step(prev, &mut self.rng)?,
                };
                self.z = Some(z.clone());
                z
            }
            None => {
                let v = &self.r_sqrt * standard_normal_vector(m, &mut self.rng);
                &self.plant.c * &self.x + v
            }
        };
        let (x_hat, gamma) = self.ctrl.kf_step(&self.x_hat, &self.u_prev, &obs)?;
        let e = self.watermark.sample(&mut self.rng);
        let u = self.ctrl.control(&x_hat, &e);
        let stage_cost = self.plant.stage_cost(&self.x, &u);
        let w = &self.q_sqrt * standard_normal_vector(self.plant.n(), &mut self.rng);
        if !self.diverged {
            let next = &self.plant.a * &self.x + &self.plant.b * &u + w;
            if next.norm() > DIVERGENCE_GUARD || !next.iter().all(|v| v.is_finite()) {
                self.diverged = true;
            } else {
                self.x = next;
            }
        }
        let e_prev = std::mem::replace(&mut self.e_prev, e);
        self.u_prev = u.clone();
        self.x_hat = x_hat.clone();
        Ok(StepOutput {
            k: self.k,
            obs,
            e_prev,
            gamma,
            x_hat,
            u,
            stage_cost,
            state_norm: self.x.norm(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub plant: PlantModel,
    pub attack: AttackModel,
    pub sigma_e: Matrix,
    /// First attacked sample.
    pub nu: usize,
    pub burn_in: usize,
    pub max_steps: usize,
    pub trials: usize,
    pub seed: u64,
    pub detector: DetectorConfig,
    pub np_calibration_steps: usize,
}

impl SimConfig {
    pub fn new(plant: PlantModel, attack: AttackModel, sigma_e: Matrix, detector: DetectorConfig) -> Self {
        SimConfig {
            plant,
            attack,
            sigma_e,
            nu: DEFAULT_NU,
            burn_in: DEFAULT_BURN_IN,
            max_steps: 20_000,
            trials: 1000,
            seed: 0,
            detector,
            np_calibration_steps: NP_CALIBRATION_STEPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.detector.validate()?;
        if !(self.burn_in < self.nu && self.nu < self.max_steps) {
            return Err(Error::validation(format!(
                "need burn_in < nu < max_steps, got {} / {} / {}",
                self.burn_in, self.nu, self.max_steps
            )));
        }
        if self.trials == 0 {
            return Err(Error::validation("trials must be positive"));
        }
        if self.attack.m() != self.plant.m() {
            return Err(Error::dims("attack model", self.plant.m(), self.attack.m()));
        }
        let p = self.plant.p();
        if self.sigma_e.shape() != (p, p) {
            return Err(Error::dims(
                "Sigma_e",
                format!("{p}x{p}"),
                format!("{}x{}", self.sigma_e.nrows(), self.sigma_e.ncols()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialResult {
    pub detection_time: Option<u64>,
    /// `detection_time − nu` when the alarm comes at or after the attack.
    pub delay: Option<u64>,
    pub false_alarm: bool,
    pub diverged: bool,
}

/// One row of a detector trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub k: u64,
    pub statistic: f64,
    pub threshold: f64,
    pub alarm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaddEstimate {
    pub mean: f64,
    pub ci_halfwidth: f64,
    pub detected: usize,
    pub false_alarms: usize,
    pub censored: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArlEstimate {
    /// Lower bound when some runs were censored.
    pub mean: f64,
    pub ci_halfwidth: f64,
    pub censored: usize,
}

/// Prepared experiment: controller synthesized and detector calibrated once.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub cfg: SimConfig,
    pub ctrl: ControllerSolution,
    detector: Detector,
}

fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let ctrl = build_lqg(&cfg.plant)?;
        let mut detector = Detector::from_config(&cfg.detector, &ctrl, &cfg.attack, &cfg.sigma_e)?;
        if cfg.detector.variant == DetectorVariant::Np && cfg.detector.np_eta.is_none() {
            let eta = np_calibrate(
                &cfg.plant,
                &ctrl,
                &cfg.sigma_e,
                cfg.detector.alpha(),
                cfg.np_calibration_steps,
                cfg.burn_in,
                cfg.seed,
                CALIBRATION_STREAM,
            )?;
            detector.set_eta(eta);
        }
        Ok(Simulation { cfg, ctrl, detector })
    }

    pub fn detector_threshold(&self) -> f64 {
        self.detector.threshold()
    }

    pub fn closed_loop(&self, trial: u64) -> Result<ClosedLoop> {
        ClosedLoop::new(&self.cfg.plant, &self.ctrl, &self.cfg.sigma_e, self.cfg.seed, trial)
    }

    fn run(&self, trial: u64, attack_from: Option<usize>, stop_at_alarm: bool, mut trace: Option<&mut Vec<TraceRow>>) -> Result<TrialResult> {
        let cfg = &self.cfg;
        let mut sim = self.closed_loop(trial)?;
        let mut det = self.detector.clone();
        let mut detection = None;
        for k in 1..=cfg.max_steps {
            let attacked = attack_from.is_some_and(|nu| k >= nu);
            let out = sim.step(attacked.then_some(&cfg.attack))?;
            let st = det.update(&out.obs, &out.e_prev)?;
            if k == cfg.burn_in {
                det.arm();
                continue;
            }
            if k < cfg.burn_in {
                continue;
            }
            if let Some(rows) = trace.as_deref_mut() {
                rows.push(TraceRow {
                    k: k as u64,
                    statistic: st.statistic,
                    threshold: det.threshold(),
                    alarm: st.alarm,
                });
            }
            if st.alarm && detection.is_none() {
                detection = Some(k as u64);
                if stop_at_alarm {
                    break;
                }
            }
        }
        let (delay, false_alarm) = match (detection, attack_from) {
            (Some(t), Some(nu)) if t >= nu as u64 => (Some(t - nu as u64), false),
            (Some(_), _) => (None, true),
            (None, _) => (None, false),
        };
        Ok(TrialResult {
            detection_time: detection,
            delay,
            false_alarm,
            diverged: sim.diverged(),
        })
    }

    /// Attack from `nu`; ends at the first alarm or `max_steps`.
    pub fn run_trial(&self, trial: u64) -> Result<TrialResult> {
        self.run(trial, Some(self.cfg.nu), true, None)
    }

    /// No attack; ends at the first alarm (a false alarm) or `max_steps`.
    pub fn run_trial_h0(&self, trial: u64) -> Result<TrialResult> {
        self.run(trial, None, true, None)
    }

    /// Per-step detector statistics after burn-in, optionally with the attack,
    /// running to `max_steps` regardless of alarms.
    pub fn trace(&self, trial: u64, with_attack: bool) -> Result<(TrialResult, Vec<TraceRow>)> {
        let mut rows = Vec::new();
        let res = self.run(trial, with_attack.then_some(self.cfg.nu), false, Some(&mut rows))?;
        Ok((res, rows))
    }

    fn trials<T: Send>(&self, f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        (0..self.cfg.trials as u64).into_par_iter().map(f).collect()
    }

    pub fn run_trials(&self) -> Result<Vec<TrialResult>> {
        self.trials(|t| self.run_trial(t))
    }

    pub fn run_trials_h0(&self) -> Result<Vec<TrialResult>> {
        self.trials(|t| self.run_trial_h0(t))
    }

    pub fn estimate_sadd(&self) -> Result<SaddEstimate> {
        summarize_delays(&self.run_trials()?)
    }

    /// Mean first-alarm time after burn-in with no attack.
    pub fn estimate_arl(&self) -> Result<ArlEstimate> {
        let horizon = (self.cfg.max_steps - self.cfg.burn_in) as f64;
        let runs = self.run_trials_h0()?;
        let mut censored = 0;
        let lengths: Vec<f64> = runs
            .iter()
            .map(|r| match r.detection_time {
                Some(t) => (t - self.cfg.burn_in as u64) as f64,
                None => {
                    censored += 1;
                    horizon
                }
            })
            .collect();
        let (mean, ci) = mean_ci(&lengths);
        Ok(ArlEstimate {
            mean,
            ci_halfwidth: ci,
            censored,
        })
    }

    /// State norms after the attack starts, detector ignored.
    pub fn post_attack_state_norms(&self, trial: u64, steps: usize) -> Result<Vec<f64>> {
        let mut sim = self.closed_loop(trial)?;
        let mut out = Vec::with_capacity(steps);
        for k in 1..self.cfg.nu + steps {
            let s = sim.step((k >= self.cfg.nu).then_some(&self.cfg.attack))?;
            if k >= self.cfg.nu {
                out.push(s.state_norm);
            }
        }
        Ok(out)
    }
}

pub fn summarize_delays(results: &[TrialResult]) -> Result<SaddEstimate> {
    let delays: Vec<f64> = results.iter().filter_map(|r| r.delay.map(|d| d as f64)).collect();
    let false_alarms = results.iter().filter(|r| r.false_alarm).count();
    let censored = results.iter().filter(|r| r.detection_time.is_none()).count();
    let diverged = results.iter().filter(|r| r.diverged).count();
    if delays.is_empty() {
        return Err(Error::Estimation(format!(
            "no trial detected the attack ({} false alarms, {} censored)",
            false_alarms, censored
        )));
    }
    let (mean, ci) = mean_ci(&delays);
    Ok(SaddEstimate {
        mean,
        ci_halfwidth: ci,
        detected: delays.len(),
        false_alarms,
        censored,
        diverged,
    })
}

/// Equal-power diagonal watermark with `tr(H Σ_e) = J`.
pub fn equal_power_watermark(h: &Matrix, budget: f64) -> Matrix {
    let p = h.nrows();
    Matrix::identity(p, p) * (budget / h.trace())
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub budget_j: f64,
    pub delta_lqg: f64,
    pub kld_opt: f64,
    pub kld_subopt: f64,
    pub sadd_pred_opt: f64,
    pub sadd_pred_subopt: f64,
    pub sadd_emp: f64,
    pub sadd_ci: f64,
    pub sigma_e: Matrix,
}

impl SweepPoint {
    fn from_report(budget: f64, r: &KldReport, sigma_e: Matrix, emp: Option<SaddEstimate>) -> Self {
        SweepPoint {
            budget_j: budget,
            delta_lqg: r.delta_lqg,
            kld_opt: r.expected_kld_optimal,
            kld_subopt: r.kld_suboptimal,
            sadd_pred_opt: r.sadd_pred_optimal,
            sadd_pred_subopt: r.sadd_pred_suboptimal,
            sadd_emp: emp.map_or(f64::NAN, |e| e.mean),
            sadd_ci: emp.map_or(f64::NAN, |e| e.ci_halfwidth),
            sigma_e,
        }
    }
}

/// Watermark for a budget: optimized rank-one design or equal-power diagonal.
pub fn watermark_for_budget(
    plant: &PlantModel,
    ctrl: &ControllerSolution,
    attack: &AttackModel,
    budget: f64,
    optimize: bool,
    variant: DesignVariant,
) -> Result<Matrix> {
    let p = plant.p();
    if !(budget >= 0.0) || !budget.is_finite() {
        return Err(Error::validation(format!("budget must be nonnegative, got {budget}")));
    }
    if budget == 0.0 {
        return Ok(Matrix::zeros(p, p));
    }
    if !optimize {
        let (h, _) = cost_sensitivity(plant, ctrl)?;
        return Ok(equal_power_watermark(&h, budget));
    }
    let mut cfg = OptimizerConfig::new(budget);
    cfg.variant = variant;
    Ok(design_watermark(plant, ctrl, attack, &cfg)?.sigma_e_star)
}

/// Theory and Monte Carlo columns per budget. `empirical = false` skips the
/// trials and leaves the empirical columns as NaN.
pub fn sweep_tradeoff(
    cfg: &SimConfig,
    budgets: &[f64],
    optimize: bool,
    variant: DesignVariant,
    empirical: bool,
) -> Result<Vec<SweepPoint>> {
    if budgets.iter().any(|b| !(*b >= 0.0)) {
        return Err(Error::validation("budgets must be nonnegative"));
    }
    if budgets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("budgets must be strictly increasing"));
    }
    cfg.validate()?;
    let ctrl = build_lqg(&cfg.plant)?;
    let mut points = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let sigma_e = watermark_for_budget(&cfg.plant, &ctrl, &cfg.attack, budget, optimize, variant)?;
        let report = analyze(&cfg.plant, &ctrl, &cfg.attack, &sigma_e, cfg.detector.arl_h)?;
        let emp = if empirical {
            let mut run = cfg.clone();
            run.sigma_e = sigma_e.clone();
            Some(Simulation::new(run)?.estimate_sadd()?)
        } else {
            None
        };
        points.push(SweepPoint::from_report(budget, &report, sigma_e, emp));
    }
    Ok(points)
}

/// Long-run average stage cost of the undetected, unattacked loop.
pub fn average_cost(
    plant: &PlantModel,
    ctrl: &ControllerSolution,
    sigma_e: &Matrix,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<f64> {
    let mut sim = ClosedLoop::new(plant, ctrl, sigma_e, seed, 0)?;
    let mut total = 0.0;
    for k in 0..burn_in + steps {
        let out = sim.step(None)?;
        if k >= burn_in {
            total += out.stage_cost;
        }
    }
    Ok(total / steps as f64)
}

/// Cost increase predicted for `Σ_e` next to its Monte Carlo estimate with
/// common random numbers.
pub fn empirical_delta_lqg(
    plant: &PlantModel,
    ctrl: &ControllerSolution,
    sigma_e: &Matrix,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let pred = delta_lqg(plant, ctrl, sigma_e)?.delta_lqg;
    let p = plant.p();
    let base = average_cost(plant, ctrl, &Matrix::zeros(p, p), steps, DEFAULT_BURN_IN, seed)?;
    let marked = average_cost(plant, ctrl, sigma_e, steps, DEFAULT_BURN_IN, seed)?;
    Ok((pred, marked - base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::build_attack;
    use crate::presets::system_a;
    use nalgebra::dmatrix;

    fn quiet_plant() -> PlantModel {
        PlantModel::new(
            dmatrix![0.5],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![1.0],
        )
        .unwrap()
    }

    #[test]
    fn noiseless_loop_stays_at_rest() {
        let plant = quiet_plant();
        let ctrl = build_lqg(&plant).unwrap();
        let at = build_attack(dmatrix![0.5], dmatrix![1.0]).unwrap();
        let mut det = Detector::optimal_cusum(&ctrl, &at, 1000.0).unwrap();
        let mut sim = ClosedLoop::new(&plant, &ctrl, &dmatrix![0.0], 1, 0).unwrap().without_noise();
        for _ in 0..100 {
            let out = sim.step(None).unwrap();
            assert_eq!(out.state_norm, 0.0);
            assert_eq!(det.update(&out.obs, &out.e_prev).unwrap().statistic, 0.0);
        }
    }

    #[test]
    fn same_seed_same_trial() {
        let pre = system_a();
        let mut cfg = SimConfig::new(
            pre.plant,
            pre.attack,
            Matrix::identity(2, 2) * 5.0,
            DetectorConfig::new(DetectorVariant::OptimalCusum, 1000.0).unwrap(),
        );
        cfg.seed = 17;
        cfg.trials = 4;
        let sim = Simulation::new(cfg).unwrap();
        assert_eq!(sim.run_trial(2).unwrap(), sim.run_trial(2).unwrap());
    }

    #[test]
    fn rejects_bad_schedule() {
        let pre = system_a();
        let mut cfg = SimConfig::new(
            pre.plant,
            pre.attack,
            Matrix::zeros(2, 2),
            DetectorConfig::new(DetectorVariant::OptimalCusum, 1000.0).unwrap(),
        );
        cfg.nu = 100;
        cfg.burn_in = 200;
        assert!(matches!(Simulation::new(cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn infinite_threshold_never_alarms() {
        let pre = system_a();
        let mut cfg = SimConfig::new(
            pre.plant,
            pre.attack,
            Matrix::identity(2, 2),
            DetectorConfig::new(DetectorVariant::OptimalCusum, f64::INFINITY).unwrap(),
        );
        cfg.trials = 8;
        cfg.max_steps = 1500;
        let sim = Simulation::new(cfg).unwrap();
        let arl = sim.estimate_arl().unwrap();
        assert_eq!(arl.censored, 8);
        assert_eq!(arl.mean, 1300.0);
    }

    #[test]
    fn all_censored_is_an_error() {
        let results = vec![
            TrialResult {
                detection_time: None,
                delay: None,
                false_alarm: false,
                diverged: false,
            };
            3
        ];
        assert!(matches!(summarize_delays(&results), Err(Error::Estimation(_))));
    }

    #[test]
    fn equal_power_hits_budget() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let (h, _) = cost_sensitivity(&pre.plant, &ctrl).unwrap();
        let s = equal_power_watermark(&h, 37.0);
        assert!(((&h * s).trace() - 37.0).abs() < 1e-10);
    }

    #[test]
    fn sweep_rows_match_budgets() {
        let pre = system_a();
        let cfg = SimConfig::new(
            pre.plant,
            pre.attack,
            Matrix::zeros(2, 2),
            DetectorConfig::new(DetectorVariant::OptimalCusum, 1000.0).unwrap(),
        );
        let pts = sweep_tradeoff(&cfg, &[0.0, 10.0, 20.0, 50.0], false, DesignVariant::OptimalKld, false).unwrap();
        assert_eq!(pts.len(), 4);
        assert!(pts[0].kld_opt > 0.0);
        assert!(pts.windows(2).all(|w| w[1].sadd_pred_opt < w[0].sadd_pred_opt));
        assert!(sweep_tradeoff(&cfg, &[10.0, 5.0], false, DesignVariant::OptimalKld, false).is_err());
    }

    #[test]
    fn attack_replaces_observations() {
        let pre = system_a();
        let ctrl = build_lqg(&pre.plant).unwrap();
        let at = build_attack(dmatrix![0.0], dmatrix![0.0]).unwrap();
        let mut sim = ClosedLoop::new(&pre.plant, &ctrl, &Matrix::identity(2, 2), 3, 0).unwrap();
        for _ in 0..5 {
            assert_eq!(sim.step(Some(&at)).unwrap().obs[0], 0.0);
        }
    }
}
