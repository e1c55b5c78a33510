//! Fixed-schema report rows and seed aggregation.

use std::path::Path;

use crate::error::{HarnessError, Result};

pub const REPORT_COLUMNS: [&str; 14] = [
    "case",
    "priors",
    "metric",
    "seeds",
    "baseline",
    "baseline_std",
    "weight_decay",
    "weight_decay_std",
    "wd_opt",
    "tuned",
    "tuned_std",
    "lambda_opt",
    "theta_opt",
    "flags",
];

/// One line of a report. Per-seed rows carry the chosen hyperparameters;
/// aggregate rows carry means over seeds and sample standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub case: String,
    pub priors: String,
    /// `test_mse` for PDE tasks, `energy` for Hamiltonian ones.
    pub metric: String,
    pub seeds: Vec<u64>,
    pub baseline: f64,
    pub baseline_std: Option<f64>,
    pub weight_decay: Option<f64>,
    pub weight_decay_std: Option<f64>,
    pub wd_opt: Option<f64>,
    pub tuned: f64,
    pub tuned_std: Option<f64>,
    pub lambda_opt: Vec<f64>,
    pub theta_opt: Vec<(String, f64)>,
    pub flags: Vec<String>,
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(";")
}

impl ReportRow {
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.case.clone(),
            self.priors.clone(),
            self.metric.clone(),
            join(&self.seeds, |s| s.to_string()),
            num(self.baseline),
            opt(self.baseline_std),
            opt(self.weight_decay),
            opt(self.weight_decay_std),
            opt(self.wd_opt),
            num(self.tuned),
            opt(self.tuned_std),
            join(&self.lambda_opt, |l| num(*l)),
            join(&self.theta_opt, |(k, v)| format!("{k}={}", num(*v))),
            self.flags.join(";"),
        ]
    }

    pub fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        if rec.len() != REPORT_COLUMNS.len() {
            return Err(HarnessError::Config(format!(
                "report row has {} fields, expected {}",
                rec.len(),
                REPORT_COLUMNS.len()
            )));
        }
        let bad = |what: &str, s: &str| HarnessError::Config(format!("bad {what} field {s:?}"));
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad("number", s));
        let o = |s: &str| if s.is_empty() { Ok(None) } else { f(s).map(Some) };
        let list = |s: &str| -> Vec<String> {
            if s.is_empty() {
                vec![]
            } else {
                s.split(';').map(str::to_string).collect()
            }
        };
        Ok(ReportRow {
            case: rec[0].to_string(),
            priors: rec[1].to_string(),
            metric: rec[2].to_string(),
            seeds: list(&rec[3])
                .iter()
                .map(|s| s.parse().map_err(|_| bad("seed", s)))
                .collect::<Result<_>>()?,
            baseline: f(&rec[4])?,
            baseline_std: o(&rec[5])?,
            weight_decay: o(&rec[6])?,
            weight_decay_std: o(&rec[7])?,
            wd_opt: o(&rec[8])?,
            tuned: f(&rec[9])?,
            tuned_std: o(&rec[10])?,
            lambda_opt: list(&rec[11]).iter().map(|s| f(s)).collect::<Result<_>>()?,
            theta_opt: list(&rec[12])
                .iter()
                .map(|kv| {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad("coefficient", kv))?;
                    Ok((k.to_string(), f(v)?))
                })
                .collect::<Result<_>>()?,
            flags: list(&rec[13]),
        })
    }

    /// Baseline over tuned; above 1 means tuning helped.
    pub fn improvement(&self) -> f64 {
        self.baseline / self.tuned
    }
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for r in rows {
        w.write_record(r.to_record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(REPORT_COLUMNS) {
        return Err(HarnessError::Config(format!(
            "{} does not have the report header",
            path.display()
        )));
    }
    r.records().map(|rec| ReportRow::from_record(&rec?)).collect()
}

/// Mean and sample standard deviation; the deviation is `None` for fewer
/// than two values.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Collapses per-seed rows of one case into a single row of means.
pub fn aggregate(rows: &[ReportRow]) -> Result<ReportRow> {
    let first = rows
        .first()
        .ok_or_else(|| HarnessError::Config("nothing to aggregate".into()))?;
    let (baseline, baseline_std) = mean_std(&rows.iter().map(|r| r.baseline).collect::<Vec<_>>());
    let (tuned, tuned_std) = mean_std(&rows.iter().map(|r| r.tuned).collect::<Vec<_>>());
    let wds: Option<Vec<f64>> = rows.iter().map(|r| r.weight_decay).collect();
    let (weight_decay, weight_decay_std) = match wds {
        Some(w) => {
            let (m, s) = mean_std(&w);
            (Some(m), s)
        }
        None => (None, None),
    };
    let mut flags: Vec<String> = vec!["aggregate".into()];
    if rows.len() < 2 {
        flags.push("single_seed".into());
    }
    Ok(ReportRow {
        case: first.case.clone(),
        priors: first.priors.clone(),
        metric: first.metric.clone(),
        seeds: rows.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        baseline,
        baseline_std,
        weight_decay,
        weight_decay_std,
        wd_opt: None,
        tuned,
        tuned_std,
        lambda_opt: vec![],
        theta_opt: vec![],
        flags,
    })
}
