//! Command line front end: `analyze`, `optimize`, `simulate`, `sweep`.
//!
//! Every command writes its artifact (CSV, or TOML for `optimize`) to
//! `--out` or stdout and a short human summary to stderr.

pub mod config;
pub mod csv;

use std::fmt::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{analyze, miso_analysis};
use crate::control::build_lqg;
use crate::detectors::DetectorVariant;
use crate::error::{Error, Result};
use crate::optimizer::DesignVariant;
use crate::simulator::{summarize_delays, sweep_tradeoff, Simulation};

pub use config::{Experiment, WatermarkSource};

#[derive(Debug, Parser)]
#[command(name = "wmdetect", version, about = "Watermarked LQG loops and quickest detection of deception attacks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in system: system-a or system-b.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form divergences, cost increase and predicted delays.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Design a rank-one watermark for a cost budget; writes a config.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: Option<f64>,
        /// optimal-kld or subopt-kld.
        #[arg(long)]
        variant: Option<DesignVariant>,
    },
    /// Monte Carlo trials: per-trial CSV, or a detector trace.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// optimal-cusum, subopt-cusum or np.
        #[arg(long)]
        detector: Option<DetectorVariant>,
        /// Per-step statistics of trial 0 instead of per-trial results.
        #[arg(long)]
        trace: bool,
        /// Run without the attack (false-alarm runs).
        #[arg(long)]
        no_attack: bool,
    },
    /// Cost/delay tradeoff over watermark budgets.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<f64>,
        #[arg(long)]
        detector: Option<DetectorVariant>,
        #[arg(long)]
        variant: Option<DesignVariant>,
        /// Diagonal equal-power watermark instead of the optimized one.
        #[arg(long)]
        equal_power: bool,
        /// Skip the Monte Carlo columns (left as NaN).
        #[arg(long)]
        theory_only: bool,
    },
}

/// Artifact text plus a summary for the terminal.
#[derive(Debug, Clone)]
pub struct Output {
    pub artifact: String,
    pub summary: String,
    pub out: Option<PathBuf>,
}

fn load(common: &Common) -> Result<Experiment> {
    let mut exp = match (&common.config, &common.preset) {
        (Some(path), _) => Experiment::load(path)?,
        (None, Some(name)) => Experiment::preset(name)?,
        (None, None) => return Err(Error::validation("pass --config FILE or --preset NAME")),
    };
    if let Some(seed) = common.seed {
        exp.seed = seed;
    }
    if let Some(trials) = common.trials {
        exp.trials = trials;
    }
    exp.validate()?;
    Ok(exp)
}

pub fn execute(command: &Command) -> Result<Output> {
    match command {
        Command::Analyze { common } => cmd_analyze(common),
        Command::Optimize { common, budget, variant } => cmd_optimize(common, *budget, *variant),
        Command::Simulate {
            common,
            detector,
            trace,
            no_attack,
        } => cmd_simulate(common, *detector, *trace, *no_attack),
        Command::Sweep {
            common,
            budgets,
            detector,
            variant,
            equal_power,
            theory_only,
        } => cmd_sweep(common, budgets, *detector, *variant, *equal_power, *theory_only),
    }
}

pub fn cmd_analyze(common: &Common) -> Result<Output> {
    let exp = load(common)?;
    let ctrl = build_lqg(&exp.plant)?;
    let sigma_e = exp.sigma_e(&ctrl)?;
    let r = analyze(&exp.plant, &ctrl, &exp.attack, &sigma_e, exp.detector.arl_h)?;
    let mut summary = String::new();
    writeln!(summary, "expected KLD (optimal test)     {}", r.expected_kld_optimal).unwrap();
    writeln!(summary, "KLD (sub-optimal test)          {}", r.kld_suboptimal).unwrap();
    writeln!(summary, "optimality gap                  {}", r.optimality_gap).unwrap();
    writeln!(summary, "delta LQG                       {}", r.delta_lqg).unwrap();
    writeln!(summary, "predicted SADD, optimal         {}", r.sadd_pred_optimal).unwrap();
    writeln!(summary, "predicted SADD, sub-optimal     {}", r.sadd_pred_suboptimal).unwrap();
    if let Some((rho, sz)) = exp.miso {
        let m = miso_analysis(&exp.plant, &ctrl, rho, sz, &sigma_e)?;
        writeln!(summary, "M_z {}  M_e {}", m.m_z, config::matrix_list(&m.m_e)).unwrap();
        writeln!(
            summary,
            "least detectable sigma_z^2: optimal {}, sub-optimal {}",
            m.sigma_z_star_opt, m.sigma_z_star_subopt
        )
        .unwrap();
    }
    Ok(Output {
        artifact: csv::report_csv(&r),
        summary,
        out: common.out.clone(),
    })
}

pub fn cmd_optimize(common: &Common, budget: Option<f64>, variant: Option<DesignVariant>) -> Result<Output> {
    let exp = load(common)?;
    let budget = match (budget, &exp.watermark) {
        (Some(b), _) => b,
        (None, WatermarkSource::Budget { budget, .. }) => *budget,
        (None, _) => return Err(Error::validation("pass --budget J or set watermark.budget_J")),
    };
    if !(budget > 0.0) {
        return Err(Error::validation(format!("budget must be positive, got {budget}")));
    }
    let variant = variant.unwrap_or_else(|| exp.design_variant());
    let ctrl = build_lqg(&exp.plant)?;
    let d = exp.design(&ctrl, budget, variant)?;
    let mut summary = String::new();
    writeln!(summary, "variant {variant}, budget {budget}").unwrap();
    writeln!(summary, "v_lambda {}", config::vector_list(&d.v_lambda)).unwrap();
    writeln!(summary, "achieved KLD {}  delta LQG {}", d.achieved_kld, d.achieved_delta_lqg).unwrap();
    writeln!(summary, "KKT residual {}  converged {}", d.kkt_residual, d.converged).unwrap();
    if d.interior_better {
        writeln!(summary, "warning: no watermark scores higher than the boundary optimum").unwrap();
    }
    let design = config::DesignSection::new(variant, budget, &d);
    Ok(Output {
        artifact: exp.to_toml(&d.sigma_e_star, Some(design))?,
        summary,
        out: common.out.clone(),
    })
}

pub fn cmd_simulate(
    common: &Common,
    detector: Option<DetectorVariant>,
    trace: bool,
    no_attack: bool,
) -> Result<Output> {
    let mut exp = load(common)?;
    if let Some(v) = detector {
        exp.detector.variant = v;
    }
    let ctrl = build_lqg(&exp.plant)?;
    let sigma_e = exp.sigma_e(&ctrl)?;
    let sim = Simulation::new(exp.sim_config(sigma_e))?;
    let mut summary = String::new();
    writeln!(summary, "detector {} threshold {}", exp.detector.variant, sim.detector_threshold()).unwrap();
    if trace {
        let (res, rows) = sim.trace(0, !no_attack)?;
        writeln!(summary, "trial 0 first alarm {:?}", res.detection_time).unwrap();
        return Ok(Output {
            artifact: csv::trace_csv(&rows),
            summary,
            out: common.out.clone(),
        });
    }
    let results = if no_attack {
        sim.run_trials_h0()?
    } else {
        sim.run_trials()?
    };
    if no_attack {
        let alarms = results.iter().filter(|r| r.false_alarm).count();
        writeln!(summary, "{alarms} of {} runs raised a false alarm", results.len()).unwrap();
    } else {
        match summarize_delays(&results) {
            Ok(s) => writeln!(
                summary,
                "mean delay {} ± {} ({} detected, {} false alarms, {} censored)",
                s.mean, s.ci_halfwidth, s.detected, s.false_alarms, s.censored
            )
            .unwrap(),
            Err(e) => writeln!(summary, "{e}").unwrap(),
        }
    }
    Ok(Output {
        artifact: csv::trials_csv(&results),
        summary,
        out: common.out.clone(),
    })
}

pub fn cmd_sweep(
    common: &Common,
    budgets: &[f64],
    detector: Option<DetectorVariant>,
    variant: Option<DesignVariant>,
    equal_power: bool,
    theory_only: bool,
) -> Result<Output> {
    let mut exp = load(common)?;
    if let Some(v) = detector {
        exp.detector.variant = v;
    }
    let optimize = match exp.watermark {
        WatermarkSource::Budget { optimize, .. } => optimize && !equal_power,
        WatermarkSource::Fixed(_) => !equal_power,
    };
    let variant = variant.unwrap_or_else(|| exp.design_variant());
    let cfg = exp.sim_config(crate::linalg::Matrix::zeros(exp.plant.p(), exp.plant.p()));
    let points = sweep_tradeoff(&cfg, budgets, optimize, variant, !theory_only)?;
    let mut summary = String::new();
    let kind = if optimize { variant.as_str() } else { "equal-power" };
    writeln!(summary, "{} budgets, {kind} watermark, detector {}", points.len(), exp.detector.variant).unwrap();
    Ok(Output {
        artifact: csv::sweep_csv(&points),
        summary,
        out: common.out.clone(),
    })
}

/// Parse arguments, run, write outputs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = execute(&cli.command).and_then(|o| {
        match &o.out {
            Some(path) => std::fs::write(path, &o.artifact)?,
            None => print!("{}", o.artifact),
        }
        eprint!("{}", o.summary);
        Ok(())
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
