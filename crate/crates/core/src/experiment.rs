//! Run directories and multi-seed sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{table1_cells, ExperimentConfig, WarmStartConfig};
use crate::dataio::artifacts::{prepare_run_dir, RunArtifacts};
use crate::dataio::catalog::write_holdout;
use crate::dataio::report::write_report;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::policy::PolicyKind;
use crate::posterior::SamplerKind;
use crate::rng::{derive_seed, stream};
use crate::simulation::{config_digest, prepare_catalog, run_experiment_to, RunOutcome};

pub const CONFIG_FILE: &str = "config.json";
pub const HOLDOUT_FILE: &str = "holdout.csv";

/// Run `config` into a fresh directory: config, impression log,
/// checkpoints, report, series and manifest.
pub fn run_to_dir(config: &ExperimentConfig, dir: &Path, overwrite: bool) -> Result<(RunOutcome, RunArtifacts)> {
    config.validate()?;
    prepare_run_dir(dir, overwrite)?;
    fs::write(dir.join(CONFIG_FILE), config.to_json_pretty() + "\n")?;
    let catalog = prepare_catalog(config)?;
    write_holdout(&catalog, dir.join(HOLDOUT_FILE))?;
    let outcome = run_experiment_to(config, &catalog, Some(dir))?;
    write_report(&outcome.report, dir)?;
    let artifacts = RunArtifacts::record(dir, config_digest(config)?)?;
    Ok((outcome, artifacts))
}

/// One column of overrides applied on top of the base config.
pub type Overrides = Vec<(String, Value)>;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub cells: Vec<Overrides>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// Cross product of `axes` (key, candidate values).
    pub fn grid(axes: &[(String, Vec<Value>)], seeds: Vec<u64>) -> Self {
        let mut cells: Vec<Overrides> = vec![Vec::new()];
        for (key, values) in axes {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        Self { cells, seeds }
    }

    /// Named presets: `table1` (twelve policy/sampler rows) and `table2`
    /// (warm-started hybrid at 100/200/500 pretraining epochs).
    pub fn preset(name: &str, seeds: Vec<u64>) -> Result<Self> {
        let kind = |p: PolicyKind, s: SamplerKind| -> Overrides {
            vec![
                ("policy.kind".into(), serde_json::to_value(p).expect("enum")),
                ("sampler.kind".into(), serde_json::to_value(s).expect("enum")),
            ]
        };
        let cells = match name {
            "table1" => table1_cells().into_iter().map(|(p, s)| kind(p, s)).collect(),
            "table2" => {
                let warm = |epochs: usize| {
                    serde_json::to_value(WarmStartConfig {
                        pretrain_epochs: epochs,
                        ..WarmStartConfig::default()
                    })
                    .expect("struct")
                };
                let mut cells = vec![kind(PolicyKind::Random, SamplerKind::Hybrid)];
                let mut eps = kind(PolicyKind::EpsilonGreedy, SamplerKind::Hybrid);
                eps.push(("warm_start".into(), warm(100)));
                cells.push(eps);
                for epochs in [100, 200, 500] {
                    let mut c = kind(PolicyKind::Ucb, SamplerKind::Hybrid);
                    c.push(("warm_start".into(), warm(epochs)));
                    cells.push(c);
                }
                cells
            }
            other => {
                return Err(Error::config(format!(
                    "unknown sweep preset `{other}` (expected table1 or table2)"
                )))
            }
        };
        Ok(Self { cells, seeds })
    }
}

/// Seed of the run for `seed` in any cell; cells share seeds so that rows
/// are compared on the same holdouts and initializations.
pub fn sweep_run_seed(master: u64, seed: u64) -> u64 {
    derive_seed(master, &[stream::SWEEP, seed])
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        self.sd / (self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub overrides: Vec<(String, Value)>,
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<String>,
}

impl CellResult {
    pub fn stat(&self, f: impl Fn(&MetricsReport) -> Option<f64>) -> Option<Stat> {
        Stat::of(&self.reports.iter().filter_map(f).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<CellResult>,
}

impl SweepResult {
    pub fn failure_count(&self) -> usize {
        self.cells.iter().map(|c| c.failures.len()).sum()
    }

    const COLUMNS: [&'static str; 5] = ["CTR", "CTR (+%)", "PR-AUC", "train PR-AUC", "warm-start PR-AUC"];

    fn stats(cell: &CellResult) -> [Option<Stat>; 5] {
        [
            cell.stat(|r| Some(r.cumulative_ctr)),
            cell.stat(|r| r.ctr_uplift_pct),
            cell.stat(|r| r.test_pr_auc),
            cell.stat(|r| r.train_pr_auc),
            cell.stat(|r| r.warm_start_pr_auc),
        ]
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string(), "runs".into(), "failures".into()];
        for c in ["ctr", "ctr_uplift_pct", "test_pr_auc", "train_pr_auc", "warm_start_pr_auc"] {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_sd"));
        }
        w.write_record(&header)?;
        for cell in &self.cells {
            let mut row = vec![
                cell.label.clone(),
                cell.reports.len().to_string(),
                cell.failures.len().to_string(),
            ];
            for s in Self::stats(cell) {
                match s {
                    Some(s) => row.extend([s.mean.to_string(), s.sd.to_string()]),
                    None => row.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Fixed-width table, one row per cell, `mean ± sd` per column.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = vec![std::iter::once("Model".to_string())
            .chain(Self::COLUMNS.iter().map(|c| c.to_string()))
            .collect()];
        for cell in &self.cells {
            let mut row = vec![cell.label.clone()];
            for (i, s) in Self::stats(cell).into_iter().enumerate() {
                row.push(match s {
                    None => "-".into(),
                    Some(s) if i == 1 => format!("{:.2} ± {:.2}", s.mean, s.sd),
                    Some(s) => format!("{:.4} ± {:.4}", s.mean, s.sd),
                });
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (cell, &w))| {
                    let pad = w - cell.chars().count();
                    if j == 0 {
                        format!("{cell}{}", " ".repeat(pad))
                    } else {
                        format!("{}{cell}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Label for a cell: the model label, plus the overrides that are not
/// already expressed by it.
fn cell_label(config: &ExperimentConfig, overrides: &Overrides) -> String {
    let extra: Vec<String> = overrides
        .iter()
        .filter(|(k, _)| k != "policy.kind" && k != "sampler.kind")
        .map(|(k, v)| match (k.as_str(), v) {
            ("warm_start", Value::Object(m)) => format!(
                "{}",
                m.get("pretrain_epochs").cloned().unwrap_or(Value::Null)
            ),
            _ => format!("{k}={v}"),
        })
        .collect();
    if extra.is_empty() {
        config.model_label()
    } else {
        format!("{} ({})", config.model_label(), extra.join(", "))
    }
}

fn apply(base: &ExperimentConfig, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    for (k, v) in overrides {
        c = c.with_override(k, v.clone())?;
    }
    c.validate()?;
    Ok(c)
}

/// Run every (cell, seed) pair. A failed run is recorded and the sweep
/// continues. With `out_dir`, each run gets its own directory
/// `cell_<i>/seed_<s>`.
pub fn run_sweep(
    base: &ExperimentConfig,
    spec: &SweepSpec,
    out_dir: Option<&Path>,
    overwrite: bool,
    jobs: usize,
) -> Result<SweepResult> {
    if spec.seeds.is_empty() || spec.cells.is_empty() {
        return Err(Error::config("a sweep needs at least one cell and one seed"));
    }
    let configs = spec
        .cells
        .iter()
        .map(|o| apply(base, o))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out_dir {
        prepare_run_dir(dir, overwrite)?;
    }
    let jobs_list: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let run_one = |&(c, s): &(usize, u64)| -> (usize, std::result::Result<MetricsReport, String>) {
        let mut config = configs[c].clone();
        config.seed = sweep_run_seed(base.seed, s);
        let result = match out_dir {
            Some(dir) => {
                let run_dir: PathBuf = dir.join(format!("cell_{c}")).join(format!("seed_{s}"));
                run_to_dir(&config, &run_dir, true).map(|(o, _)| o.report)
            }
            None => prepare_catalog(&config)
                .and_then(|cat| crate::simulation::run_experiment(&config, &cat))
                .map(|o| o.report),
        };
        match &result {
            Ok(r) => info!("{} seed {s}: ctr {:.4}", r.model, r.cumulative_ctr),
            Err(e) => error!("cell {c} seed {s} failed: {e}"),
        }
        (c, result.map_err(|e| e.to_string()))
    };
    let results: Vec<(usize, std::result::Result<MetricsReport, String>)> = if jobs <= 1 {
        jobs_list.iter().map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Usage(e.to_string()))?;
        pool.install(|| jobs_list.par_iter().map(run_one).collect())
    };
    let mut cells: Vec<CellResult> = configs
        .iter()
        .zip(&spec.cells)
        .map(|(c, o)| CellResult {
            label: cell_label(c, o),
            overrides: o.clone(),
            reports: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    for (c, r) in results {
        match r {
            Ok(report) => cells[c].reports.push(report),
            Err(e) => cells[c].failures.push(e),
        }
    }
    let result = SweepResult { cells };
    if let Some(dir) = out_dir {
        fs::write(dir.join("sweep.csv"), result.to_csv()?)?;
        fs::write(dir.join("sweep.txt"), result.to_table())?;
        fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&result)?)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SynthSpec;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.environment.synthetic = Some(SynthSpec {
            users: 10,
            ads: 30,
            ..SynthSpec::default()
        });
        c.sampler.layer_sizes = vec![6];
        c.sampler.hybrid_units = 3;
        c.sampler.member_count = 3;
        c.policy.ucb_samples = 3;
        c.run_loop.bootstrap_users = 3;
        c.run_loop.retrain_every_users = 3;
        c.run_loop.epochs = 2;
        c.run_loop.total_user_visits = 9;
        c
    }

    #[test]
    fn grid_is_a_cross_product() {
        let g = SweepSpec::grid(
            &[
                ("policy.kind".into(), vec!["ucb".into(), "thompson".into()]),
                ("loop.epochs".into(), vec![1.into(), 2.into(), 3.into()]),
            ],
            vec![1],
        );
        assert_eq!(g.cells.len(), 6);
        assert_eq!(g.cells[5][1], ("loop.epochs".to_string(), Value::from(3)));
        assert_eq!(SweepSpec::preset("table1", vec![1]).unwrap().cells.len(), 12);
        assert_eq!(SweepSpec::preset("table2", vec![1]).unwrap().cells.len(), 5);
        assert!(SweepSpec::preset("table9", vec![1]).is_err());
    }

    #[test]
    fn stats() {
        let s = Stat::of(&[1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.sd), (1.0, 0.0));
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.sd), (2.0, 1.0));
        assert_eq!(Stat::of(&[4.0]).unwrap().sd, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn repeated_seed_gives_zero_spread_and_matches_single_run() {
        let base = tiny();
        let spec = SweepSpec::preset("table1", vec![1, 1]).unwrap();
        let spec = SweepSpec {
            cells: spec.cells[5..7].to_vec(),
            seeds: spec.seeds,
        };
        let res = run_sweep(&base, &spec, None, false, 1).unwrap();
        assert_eq!(res.failure_count(), 0);
        let cell = &res.cells[1];
        assert_eq!(cell.label, "Bootstrap UCB");
        assert_eq!(cell.stat(|r| Some(r.cumulative_ctr)).unwrap().sd, 0.0);

        let mut single = apply(&base, &spec.cells[1]).unwrap();
        single.seed = sweep_run_seed(base.seed, 1);
        let cat = prepare_catalog(&single).unwrap();
        let alone = crate::simulation::run_experiment(&single, &cat).unwrap();
        assert_eq!(alone.report, cell.reports[0]);

        let table = res.to_table();
        assert!(table.lines().next().unwrap().starts_with("Model"));
        assert_eq!(table.lines().count(), 3);
        assert!(res.to_csv().unwrap().starts_with("model,runs,failures,ctr_mean,ctr_sd"));
    }

    #[test]
    fn failures_are_recorded_and_the_sweep_continues() {
        let base = tiny();
        let missing = vec![
            ("environment.synthetic".to_string(), Value::Null),
            ("environment.catalog_dir".to_string(), Value::from("/nonexistent/catalog")),
        ];
        let spec = SweepSpec {
            cells: vec![Vec::new(), missing],
            seeds: vec![1, 2],
        };
        let res = run_sweep(&base, &spec, None, false, 2).unwrap();
        assert_eq!(res.cells[0].reports.len(), 2);
        assert_eq!(res.cells[1].failures.len(), 2);
        assert_eq!(res.failure_count(), 2);
        assert!(res.to_table().lines().nth(2).unwrap().contains('-'));

        let bad = SweepSpec::grid(
            &[("sampler.layer_sizes".into(), vec![Value::from(vec![4]), Value::from(vec![0])])],
            vec![1],
        );
        assert!(run_sweep(&base, &bad, None, false, 1).unwrap_err().is_config());
    }

    #[test]
    fn oversized_slate_stops_early_without_failing() {
        let spec = SweepSpec::grid(&[("policy.slate_size".into(), vec![26.into()])], vec![1]);
        let res = run_sweep(&tiny(), &spec, None, false, 1).unwrap();
        assert_eq!(res.cells[0].reports[0].rounds, 0);
        assert!(res.cells[0].reports[0].early_stop.is_some());
    }

    #[test]
    fn run_dir_contents_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        let (out, art) = run_to_dir(&tiny(), &run, false).unwrap();
        for f in ["config.json", "report.json", "series.csv", "impressions.jsonl", "holdout.csv", "manifest.json"] {
            assert!(run.join(f).exists(), "{f}");
        }
        art.verify().unwrap();
        assert_eq!(art.config_digest, out.report.config_digest);
        assert!(matches!(run_to_dir(&tiny(), &run, false), Err(Error::AlreadyExists(_))));
    }
}
