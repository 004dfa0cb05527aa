//! Result records and their CSV and table renderings.

use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
    /// Reported for reference, not judged.
    Info,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Skip => "skip",
            Status::Info => "info",
        }
    }

    pub fn judged(pass: bool) -> Status {
        if pass {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub check: String,
    pub value: Option<f64>,
    pub reference: Option<f64>,
    /// Largest accepted `|value - reference|`.
    pub tolerance: Option<f64>,
    pub status: Status,
    pub runtime_ms: u128,
}

impl Record {
    /// `|value - reference| <= tolerance`.
    pub fn within(check: impl Into<String>, value: f64, reference: f64, tolerance: f64) -> Record {
        let pass = (value - reference).abs() <= tolerance;
        Record::new(check, Some(value), Some(reference), Some(tolerance), Status::judged(pass))
    }

    pub fn info(check: impl Into<String>, value: f64, reference: Option<f64>) -> Record {
        Record::new(check, Some(value), reference, None, Status::Info)
    }

    pub fn skip(check: impl Into<String>) -> Record {
        Record::new(check, None, None, None, Status::Skip)
    }

    pub fn new(
        check: impl Into<String>,
        value: Option<f64>,
        reference: Option<f64>,
        tolerance: Option<f64>,
        status: Status,
    ) -> Record {
        Record { check: check.into(), value, reference, tolerance, status, runtime_ms: 0 }
    }
}

pub const CSV_HEADER: &str = "scenario_id,check,value,reference,tolerance,pass,runtime_ms";

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

pub fn results_csv(scenario_id: &str, records: &[Record]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            scenario_id,
            r.check,
            num(r.value),
            num(r.reference),
            num(r.tolerance),
            r.status.as_str(),
            r.runtime_ms
        );
    }
    out
}

fn short(v: Option<f64>) -> String {
    match v {
        None => "-".into(),
        Some(x) if x != 0.0 && (x.abs() < 1e-3 || x.abs() >= 1e5) => format!("{x:.3e}"),
        Some(x) => format!("{x:.6}"),
    }
}

pub fn table(records: &[Record]) -> String {
    let width = records.iter().map(|r| r.check.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>13}  {:>13}  {:>11}  {:<6}", "check", "value", "reference", "tolerance", "result");
    for r in records {
        let _ = writeln!(
            out,
            "{:<width$}  {:>13}  {:>13}  {:>11}  {:<6}",
            r.check,
            short(r.value),
            short(r.reference),
            short(r.tolerance),
            r.status.as_str()
        );
    }
    let count = |s: Status| records.iter().filter(|r| r.status == s).count();
    let _ = writeln!(
        out,
        "{} pass, {} fail, {} skip, {} info",
        count(Status::Pass),
        count(Status::Fail),
        count(Status::Skip),
        count(Status::Info)
    );
    out
}
