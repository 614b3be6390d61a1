//! `report.json` and `series.csv`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

pub const REPORT_FILE: &str = "report.json";
pub const SERIES_FILE: &str = "series.csv";

pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(report)? + "\n")?;
    let mut w = csv::Writer::from_path(dir.join(SERIES_FILE))?;
    w.write_record(["round", "cumulative_ctr", "regret"])?;
    for (r, ctr) in report.ctr_series.iter().enumerate() {
        let regret = report
            .regret_series
            .as_ref()
            .and_then(|s| s.get(r))
            .map(|v| v.to_string())
            .unwrap_or_default();
        w.write_record([r.to_string(), ctr.to_string(), regret])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(dir.join(REPORT_FILE))?;
    serde_json::from_str(&text).map_err(Error::from)
}

/// Per-round `(cumulative_ctr, regret)` rows of a `series.csv`.
pub fn read_series(dir: &Path) -> Result<Vec<(f64, Option<f64>)>> {
    let mut r = csv::Reader::from_path(dir.join(SERIES_FILE))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        };
        let ctr = parse(&rec[1])?;
        let regret = if rec[2].is_empty() { None } else { Some(parse(&rec[2])?) };
        out.push((ctr, regret));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_and_series_round_trip() {
        let report = MetricsReport {
            model: "Hybrid UCB".into(),
            run_id: "abc".into(),
            seed: 3,
            config_digest: "d".into(),
            rounds: 3,
            impressions: 21,
            retrains: 1,
            cumulative_ctr: 0.25,
            random_ctr: 0.2,
            ctr_uplift_pct: Some(25.000000000000004),
            train_pr_auc: Some(0.1 + 0.2),
            test_pr_auc: None,
            roc_auc: Some(0.5),
            rce_pct: Some(-3.0),
            log_loss: Some(0.6),
            warm_start_pr_auc: None,
            early_stop: None,
            ctr_series: vec![0.1, 1.0 / 3.0, 0.25],
            regret_series: Some(vec![0.5, 0.75, 1.0 / 7.0]),
        };
        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path()).unwrap();
        assert_eq!(read_report(dir.path()).unwrap(), report);
        let text = fs::read_to_string(dir.path().join(SERIES_FILE)).unwrap();
        assert!(text.starts_with("round,cumulative_ctr,regret\n0,0.1,0.5\n"));
        let series = read_series(dir.path()).unwrap();
        assert_eq!(series[1], (1.0 / 3.0, Some(0.75)));
        assert_eq!(series[2].1, Some(1.0 / 7.0));
    }
}
