//! CSV emission. Floats use Rust's shortest round-trip formatting
//! (`NaN`, `inf` for the non-finite cases), booleans are `true`/`false`,
//! absent values are empty fields. Lines end with `\n`.

use std::fmt::Write;

use crate::analysis::KldReport;
use crate::simulator::{SweepPoint, TraceRow, TrialResult};

pub const SWEEP_HEADER: &str = "budget_J,delta_lqg,kld_opt,kld_subopt,sadd_pred_opt,sadd_pred_subopt,sadd_emp,sadd_ci";
pub const TRACE_HEADER: &str = "k,statistic,threshold,alarm";
pub const TRIALS_HEADER: &str = "trial,detection_time,delay,false_alarm,diverged";
pub const REPORT_HEADER: &str = "quantity,value";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.budget_j, p.delta_lqg, p.kld_opt, p.kld_subopt, p.sadd_pred_opt, p.sadd_pred_subopt, p.sadd_emp, p.sadd_ci
        )
        .unwrap();
    }
    out
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.k, r.statistic, r.threshold, r.alarm).unwrap();
    }
    out
}

pub fn trials_csv(results: &[TrialResult]) -> String {
    let mut out = format!("{TRIALS_HEADER}\n");
    for (i, r) in results.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{}",
            i,
            opt(r.detection_time),
            opt(r.delay),
            r.false_alarm,
            r.diverged
        )
        .unwrap();
    }
    out
}

/// Scalars first, then `sigma_gamma_tilde[i][j]` row-major.
pub fn report_csv(r: &KldReport) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for (name, v) in [
        ("expected_kld_optimal", r.expected_kld_optimal),
        ("kld_suboptimal", r.kld_suboptimal),
        ("optimality_gap", r.optimality_gap),
        ("delta_lqg", r.delta_lqg),
        ("sadd_pred_optimal", r.sadd_pred_optimal),
        ("sadd_pred_suboptimal", r.sadd_pred_suboptimal),
        ("arl_h", r.arl_h),
    ] {
        writeln!(out, "{name},{v}").unwrap();
    }
    let s = &r.sigma_gamma_tilde;
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            writeln!(out, "sigma_gamma_tilde[{i}][{j}],{}", s[(i, j)]).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trials_rows_are_rectangular() {
        let rows = [
            TrialResult {
                detection_time: Some(510),
                delay: Some(10),
                false_alarm: false,
                diverged: false,
            },
            TrialResult {
                detection_time: None,
                delay: None,
                false_alarm: false,
                diverged: true,
            },
        ];
        let text = trials_csv(&rows);
        assert_eq!(text, format!("{TRIALS_HEADER}\n0,510,10,false,false\n1,,,false,true\n"));
        assert!(text.lines().all(|l| l.split(',').count() == 5));
    }

    #[test]
    fn float_formatting() {
        let rows = [TraceRow {
            k: 201,
            statistic: 0.1,
            threshold: f64::INFINITY,
            alarm: false,
        }];
        assert_eq!(trace_csv(&rows), format!("{TRACE_HEADER}\n201,0.1,inf,false\n"));
    }
}
