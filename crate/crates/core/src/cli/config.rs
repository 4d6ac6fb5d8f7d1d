//! Experiment configuration files (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::attack::{build_attack, miso_attack, AttackModel};
use crate::control::{ControllerSolution, PlantModel};
use crate::detectors::{DetectorConfig, DetectorVariant, NP_CALIBRATION_STEPS};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::optimizer::{design_watermark, DesignVariant, OptimizerConfig, WatermarkDesign};
use crate::presets::{by_name, Preset, DEFAULT_ARL_H};
use crate::simulator::{SimConfig, DEFAULT_BURN_IN, DEFAULT_NU};

pub const DEFAULT_MAX_STEPS: usize = 20_000;
pub const DEFAULT_TRIALS: usize = 1000;

type Rows = Spanned<Vec<Vec<f64>>>;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watermark: Option<WatermarkSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimSection>,
    /// Written by `optimize`; informational, ignored on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignSection>,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub A: Rows,
    pub B: Rows,
    pub C: Rows,
    pub Q: Rows,
    pub R: Rows,
    pub W: Rows,
    pub U: Rows,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub A_a: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub Q_a: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_z_sq: Option<f64>,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub Sigma_e: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_J: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimize: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arl_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub np_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub np_calibration_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub variant: String,
    pub budget_J: f64,
    pub v_lambda: Vec<f64>,
    pub achieved_kld: f64,
    pub achieved_delta_lqg: f64,
    pub objective: f64,
    pub mu: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub interior_better: bool,
}

impl DesignSection {
    pub fn new(variant: DesignVariant, budget: f64, d: &WatermarkDesign) -> Self {
        DesignSection {
            variant: variant.as_str().into(),
            budget_J: budget,
            v_lambda: d.v_lambda.iter().copied().collect(),
            achieved_kld: d.achieved_kld,
            achieved_delta_lqg: d.achieved_delta_lqg,
            objective: d.objective,
            mu: d.mu,
            kkt_residual: d.kkt_residual,
            iterations: d.iterations,
            converged: d.converged,
            interior_better: d.interior_better,
        }
    }
}

/// Where the watermark covariance comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum WatermarkSource {
    Fixed(Matrix),
    Budget {
        budget: f64,
        optimize: bool,
        variant: DesignVariant,
    },
}

/// A fully resolved experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub plant: PlantModel,
    pub attack: AttackModel,
    /// `(ρ, σ_z²)` when the attack was given in scalar form.
    pub miso: Option<(f64, f64)>,
    pub watermark: WatermarkSource,
    pub detector: DetectorConfig,
    pub nu: usize,
    pub burn_in: usize,
    pub max_steps: usize,
    pub trials: usize,
    pub seed: u64,
    pub np_calibration_steps: usize,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn matrix(text: &str, rows: &Rows, name: &str) -> Result<Matrix> {
    let line = Some(line_of(text, rows.span().start));
    let data = rows.get_ref();
    let ncols = data.first().map_or(0, Vec::len);
    if data.is_empty() || ncols == 0 {
        return Err(Error::Parse {
            line,
            message: format!("{name} is empty"),
        });
    }
    if let Some((i, r)) = data.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::Parse {
            line,
            message: format!("{name} is ragged: row {} has {} entries, row 1 has {ncols}", i + 1, r.len()),
        });
    }
    Ok(Matrix::from_fn(data.len(), ncols, |i, j| data[i][j]))
}

fn rows(m: &Matrix) -> Rows {
    Spanned::new(0..0, m.row_iter().map(|r| r.iter().copied().collect()).collect())
}

fn design_variant_for(detector: DetectorVariant) -> DesignVariant {
    match detector {
        DetectorVariant::OptimalCusum => DesignVariant::OptimalKld,
        _ => DesignVariant::SuboptKld,
    }
}

impl Experiment {
    /// A preset with no watermark and the default detector and schedule.
    pub fn from_preset(preset: &Preset) -> Self {
        Experiment {
            plant: preset.plant.clone(),
            attack: preset.attack.clone(),
            miso: preset.miso,
            watermark: WatermarkSource::Fixed(Matrix::zeros(preset.plant.p(), preset.plant.p())),
            detector: DetectorConfig {
                variant: DetectorVariant::OptimalCusum,
                arl_h: preset.arl_h,
                np_alpha: None,
                np_eta: None,
            },
            nu: DEFAULT_NU,
            burn_in: DEFAULT_BURN_IN,
            max_steps: DEFAULT_MAX_STEPS,
            trials: DEFAULT_TRIALS,
            seed: 0,
            np_calibration_steps: NP_CALIBRATION_STEPS,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        by_name(name)
            .map(|p| Self::from_preset(&p))
            .ok_or_else(|| Error::validation(format!("unknown preset '{name}' (expected system-a or system-b)")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        let base = match &file.preset {
            Some(name) => Some(by_name(name).ok_or_else(|| Error::Parse {
                line: Some(1),
                message: format!("unknown preset '{name}'"),
            })?),
            None => None,
        };

        let plant = match (&file.plant, &base) {
            (Some(s), _) => PlantModel::new(
                matrix(text, &s.A, "A")?,
                matrix(text, &s.B, "B")?,
                matrix(text, &s.C, "C")?,
                matrix(text, &s.Q, "Q")?,
                matrix(text, &s.R, "R")?,
                matrix(text, &s.W, "W")?,
                matrix(text, &s.U, "U")?,
            )?,
            (None, Some(p)) => p.plant.clone(),
            (None, None) => return Err(Error::validation("config needs a [plant] section or a preset")),
        };

        let (attack, miso) = match (&file.attack, &base) {
            (Some(s), _) => match (&s.A_a, &s.Q_a, s.rho, s.sigma_z_sq) {
                (Some(a), Some(q), None, None) => (build_attack(matrix(text, a, "A_a")?, matrix(text, q, "Q_a")?)?, None),
                (None, None, Some(rho), Some(sz)) => {
                    if plant.m() != 1 {
                        return Err(Error::validation(format!(
                            "rho/sigma_z_sq shorthand needs a single output, plant has {}",
                            plant.m()
                        )));
                    }
                    (miso_attack(rho, sz)?, Some((rho, sz)))
                }
                _ => {
                    return Err(Error::validation(
                        "[attack] needs either A_a and Q_a, or rho and sigma_z_sq",
                    ))
                }
            },
            (None, Some(p)) => (p.attack.clone(), p.miso),
            (None, None) => return Err(Error::validation("config needs an [attack] section or a preset")),
        };
        if attack.m() != plant.m() {
            return Err(Error::dims("attack model", plant.m(), attack.m()));
        }

        let det = file.detector.clone().unwrap_or_default();
        let variant = match &det.variant {
            Some(v) => v.parse()?,
            None => DetectorVariant::OptimalCusum,
        };
        let detector = DetectorConfig {
            variant,
            arl_h: det.arl_h.or(base.as_ref().map(|p| p.arl_h)).unwrap_or(DEFAULT_ARL_H),
            np_alpha: det.np_alpha,
            np_eta: None,
        };
        detector.validate()?;

        let p = plant.p();
        let watermark = match file.watermark {
            None => WatermarkSource::Fixed(Matrix::zeros(p, p)),
            Some(w) => match (&w.Sigma_e, w.budget_J) {
                (Some(s), None) => {
                    if w.optimize.is_some() || w.variant.is_some() {
                        return Err(Error::validation("optimize/variant only apply together with budget_J"));
                    }
                    WatermarkSource::Fixed(matrix(text, s, "Sigma_e")?)
                }
                (None, Some(budget)) => WatermarkSource::Budget {
                    budget,
                    optimize: w.optimize.unwrap_or(true),
                    variant: match &w.variant {
                        Some(v) => v.parse()?,
                        None => design_variant_for(variant),
                    },
                },
                (None, None) => WatermarkSource::Fixed(Matrix::zeros(p, p)),
                (Some(_), Some(_)) => return Err(Error::validation("give either Sigma_e or budget_J, not both")),
            },
        };

        let sim = file.sim.unwrap_or_default();
        let exp = Experiment {
            plant,
            attack,
            miso,
            watermark,
            detector,
            nu: sim.nu.unwrap_or(DEFAULT_NU),
            burn_in: sim.burn_in.unwrap_or(DEFAULT_BURN_IN),
            max_steps: sim.max_steps.unwrap_or(DEFAULT_MAX_STEPS),
            trials: sim.trials.unwrap_or(DEFAULT_TRIALS),
            seed: sim.seed.unwrap_or(0),
            np_calibration_steps: det.np_calibration_steps.unwrap_or(NP_CALIBRATION_STEPS),
        };
        exp.validate()?;
        Ok(exp)
    }

    pub fn validate(&self) -> Result<()> {
        if let WatermarkSource::Fixed(s) = &self.watermark {
            let p = self.plant.p();
            if s.shape() != (p, p) {
                return Err(Error::dims("Sigma_e", format!("{p}x{p}"), format!("{}x{}", s.nrows(), s.ncols())));
            }
            crate::linalg::ensure_psd(s, "Sigma_e")?;
        }
        if let WatermarkSource::Budget { budget, .. } = self.watermark {
            if !(budget >= 0.0) || !budget.is_finite() {
                return Err(Error::validation(format!("budget_J must be nonnegative, got {budget}")));
            }
        }
        self.sim_config(Matrix::zeros(self.plant.p(), self.plant.p())).validate()
    }

    /// Watermark covariance, optimizing if the config asks for it.
    pub fn sigma_e(&self, ctrl: &ControllerSolution) -> Result<Matrix> {
        match &self.watermark {
            WatermarkSource::Fixed(s) => Ok(s.clone()),
            WatermarkSource::Budget {
                budget,
                optimize,
                variant,
            } => crate::simulator::watermark_for_budget(&self.plant, ctrl, &self.attack, *budget, *optimize, *variant),
        }
    }

    /// Design variant used for budgets: from the config or matched to the detector.
    pub fn design_variant(&self) -> DesignVariant {
        match &self.watermark {
            WatermarkSource::Budget { variant, .. } => *variant,
            WatermarkSource::Fixed(_) => design_variant_for(self.detector.variant),
        }
    }

    pub fn design(&self, ctrl: &ControllerSolution, budget: f64, variant: DesignVariant) -> Result<WatermarkDesign> {
        let mut cfg = OptimizerConfig::new(budget);
        cfg.variant = variant;
        cfg.seed = self.seed;
        design_watermark(&self.plant, ctrl, &self.attack, &cfg)
    }

    pub fn sim_config(&self, sigma_e: Matrix) -> SimConfig {
        SimConfig {
            plant: self.plant.clone(),
            attack: self.attack.clone(),
            sigma_e,
            nu: self.nu,
            burn_in: self.burn_in,
            max_steps: self.max_steps,
            trials: self.trials,
            seed: self.seed,
            detector: self.detector.clone(),
            np_calibration_steps: self.np_calibration_steps,
        }
    }

    /// Self-contained config text with the watermark pinned to `sigma_e`.
    pub fn to_toml(&self, sigma_e: &Matrix, design: Option<DesignSection>) -> Result<String> {
        let p = &self.plant;
        let attack = match self.miso {
            Some((rho, sz)) => AttackSection {
                rho: Some(rho),
                sigma_z_sq: Some(sz),
                ..Default::default()
            },
            None => AttackSection {
                A_a: Some(rows(&self.attack.a_a)),
                Q_a: Some(rows(&self.attack.q_a)),
                ..Default::default()
            },
        };
        let file = ConfigFile {
            preset: None,
            plant: Some(PlantSection {
                A: rows(&p.a),
                B: rows(&p.b),
                C: rows(&p.c),
                Q: rows(&p.q),
                R: rows(&p.r),
                W: rows(&p.w),
                U: rows(&p.u),
            }),
            attack: Some(attack),
            watermark: Some(WatermarkSection {
                Sigma_e: Some(rows(sigma_e)),
                ..Default::default()
            }),
            detector: Some(DetectorSection {
                variant: Some(self.detector.variant.as_str().into()),
                arl_h: Some(self.detector.arl_h),
                np_alpha: self.detector.np_alpha,
                np_calibration_steps: Some(self.np_calibration_steps),
            }),
            sim: Some(SimSection {
                nu: Some(self.nu),
                burn_in: Some(self.burn_in),
                max_steps: Some(self.max_steps),
                trials: Some(self.trials),
                seed: Some(self.seed),
            }),
            design,
        };
        toml::to_string(&file).map_err(|e| Error::Numeric(format!("cannot serialize config: {e}")))
    }
}

/// `m` as nested row lists, for messages.
pub fn matrix_list(m: &Matrix) -> String {
    let parts: Vec<String> = m.row_iter().map(|r| vector_list(&r.transpose())).collect();
    format!("[{}]", parts.join(", "))
}

/// `v` as a plain list, for messages.
pub fn vector_list(v: &Vector) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(", "))
}
