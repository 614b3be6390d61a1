//! `bsim`: generate catalogs, run experiments and sweeps, evaluate checkpoints.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use bsim_core::config::ExperimentConfig;
use bsim_core::dataio::artifacts::prepare_run_dir;
use bsim_core::dataio::catalog::{load_catalog_dir, read_holdout, write_catalog, DEFAULT_RATING_THRESHOLD};
use bsim_core::dataio::checkpoint::load_checkpoint;
use bsim_core::env::{synth_generate, SynthSpec};
use bsim_core::experiment::{run_sweep, run_to_dir, SweepSpec};
use bsim_core::metrics;
use bsim_core::rng::{derive_seed, stream};
use bsim_core::simulation::{predict_cells, run_id};
use bsim_core::Error;

#[derive(Parser)]
#[command(name = "bsim", version, about = "Offline simulator for neural contextual-bandit ad recommendation")]
struct Cli {
    /// Master seed (overrides the config file's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Validate inputs and stop.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Parallel runs in a sweep.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic catalog (users.csv, ads.csv, labels.csv, truth.csv).
    Generate {
        #[arg(long, default_value_t = 120)]
        users: usize,
        #[arg(long, default_value_t = 300)]
        ads: usize,
        #[arg(long)]
        user_dim: Option<usize>,
        #[arg(long)]
        ad_dim: Option<usize>,
        #[arg(long)]
        truth_hidden: Option<usize>,
        #[arg(long)]
        logit_scale: Option<f64>,
        #[arg(long)]
        base_rate: Option<f64>,
    },
    /// Run one experiment from a JSON config.
    Simulate { config: PathBuf },
    /// Run a grid of configs over several seeds and tabulate mean ± sd.
    Sweep {
        config: PathBuf,
        /// Named cell list: table1 or table2.
        #[arg(long)]
        preset: Option<String>,
        /// Grid axis `key=v1,v2,...` (values parsed as JSON, else strings).
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Use seeds 1..=N when --seeds is not given.
        #[arg(long, default_value_t = 10)]
        num_seeds: u64,
    },
    /// Score catalog cells with a saved checkpoint.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Holdout)]
        split: Split,
        /// Holdout cells written by a run (`holdout.csv`); drawn from --seed otherwise.
        #[arg(long)]
        holdout: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        holdout_per_user: usize,
        #[arg(long, default_value_t = DEFAULT_RATING_THRESHOLD)]
        rating_threshold: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Holdout,
    All,
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::config(msg).into()
}

fn load_config(path: &Path, cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn generate(cli: &Cli, spec: SynthSpec) -> Result<()> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems).into());
    }
    let out = cli.out.as_ref().ok_or_else(|| config_error("generate needs --out"))?;
    if cli.dry_run {
        println!("ok: {} users x {} ads", spec.users, spec.ads);
        return Ok(());
    }
    let catalog = synth_generate(&spec)?;
    prepare_run_dir(out, cli.force)?;
    write_catalog(&catalog, out)?;
    println!(
        "wrote {} users x {} ads to {} (mean CTR {:.4})",
        catalog.users(),
        catalog.ads(),
        out.display(),
        catalog.labels.iter().map(|&l| l as f64).sum::<f64>() / catalog.labels.len() as f64
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".into(), |x| format!("{x:.digits$}"))
}

fn simulate(cli: &Cli, path: &Path) -> Result<()> {
    let config = load_config(path, cli)?;
    let dir = match &config.output_dir {
        Some(d) => d.clone(),
        None => PathBuf::from("runs").join(run_id(&config)?),
    };
    if cli.dry_run {
        println!("ok: {} -> {}", config.model_label(), dir.display());
        return Ok(());
    }
    let (outcome, _) = run_to_dir(&config, &dir, cli.force)?;
    let r = &outcome.report;
    println!("{:<20}  {:>9}  {:>7}", "Model", "CTR (+%)", "PR-AUC");
    println!(
        "{:<20}  {:>9}  {:>7}",
        r.model,
        fmt_opt(r.ctr_uplift_pct, 2),
        fmt_opt(r.test_pr_auc, 4)
    );
    if let Some(msg) = &r.early_stop {
        eprintln!("stopped early: {msg}");
    }
    log::info!("run written to {}", dir.display());
    Ok(())
}

fn parse_axis(set: &str) -> Result<(String, Vec<Value>)> {
    let (key, values) = set
        .split_once('=')
        .ok_or_else(|| config_error(format!("--set expects key=v1,v2, got `{set}`")))?;
    let values = values
        .split(',')
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
        .collect();
    Ok((key.to_string(), values))
}

fn sweep(cli: &Cli, path: &Path, preset: Option<&str>, sets: &[String], seeds: &[u64], num_seeds: u64) -> Result<bool> {
    let config = load_config(path, cli)?;
    let seeds: Vec<u64> = if seeds.is_empty() {
        (1..=num_seeds).collect()
    } else {
        seeds.to_vec()
    };
    let axes = sets.iter().map(|s| parse_axis(s)).collect::<Result<Vec<_>>>()?;
    let mut spec = match preset {
        Some(name) => SweepSpec::preset(name, seeds.clone())?,
        None => SweepSpec::grid(&[], seeds.clone()),
    };
    if !axes.is_empty() {
        let grid = SweepSpec::grid(&axes, seeds);
        spec.cells = spec
            .cells
            .iter()
            .flat_map(|base| {
                grid.cells.iter().map(move |g| {
                    let mut c = base.clone();
                    c.extend(g.iter().cloned());
                    c
                })
            })
            .collect();
    }
    for cell in &spec.cells {
        let mut c = config.clone();
        for (k, v) in cell {
            c = c.with_override(k, v.clone())?;
        }
        c.validate()?;
    }
    if cli.dry_run {
        println!("ok: {} cells x {} seeds", spec.cells.len(), spec.seeds.len());
        return Ok(true);
    }
    let result = run_sweep(&config, &spec, config.output_dir.as_deref(), cli.force, cli.jobs.max(1))?;
    print!("{}", result.to_table());
    let failures = result.failure_count();
    if failures > 0 {
        for cell in &result.cells {
            for f in &cell.failures {
                eprintln!("{}: {f}", cell.label);
            }
        }
        eprintln!("{failures} run(s) failed");
    }
    Ok(failures == 0)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    cli: &Cli,
    checkpoint: &Path,
    catalog_dir: &Path,
    split: Split,
    holdout: Option<&Path>,
    holdout_per_user: usize,
    rating_threshold: f64,
) -> Result<()> {
    let sampler = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut catalog = load_catalog_dir(catalog_dir, rating_threshold)?;
    if sampler.input_dim() != catalog.feature_dim() {
        return Err(Error::Compatibility(format!(
            "checkpoint expects {} features, catalog provides {}",
            sampler.input_dim(),
            catalog.feature_dim()
        ))
        .into());
    }
    if let Split::Holdout = split {
        catalog = match holdout {
            Some(p) => {
                read_holdout(&mut catalog, p)?;
                catalog
            }
            None => catalog.split_holdout(holdout_per_user, derive_seed(cli.seed.unwrap_or(1), &[stream::HOLDOUT]))?,
        };
    }
    if cli.dry_run {
        println!("ok");
        return Ok(());
    }
    let cells = match split {
        Split::Holdout => catalog.holdout_cells(),
        Split::All => catalog.all_cells(),
    };
    let scores = predict_cells(Some(&sampler), &catalog, &cells)?;
    let labels: Vec<u8> = cells.iter().map(|&(u, a)| catalog.label(u, a)).collect();
    let row = [
        ("cells", cells.len() as f64),
        ("PR-AUC", metrics::pr_auc(&scores, &labels).unwrap_or(f64::NAN)),
        ("ROC-AUC", metrics::roc_auc(&scores, &labels).unwrap_or(f64::NAN)),
        ("RCE", metrics::rce(&scores, &labels).unwrap_or(f64::NAN)),
        ("log-loss", metrics::log_loss(&scores, &labels).unwrap_or(f64::NAN)),
    ];
    println!("{}", row.iter().map(|(k, _)| format!("{k:>10}")).collect::<String>());
    println!(
        "{}",
        row.iter()
            .enumerate()
            .map(|(i, (_, v))| if i == 0 { format!("{v:>10}") } else { format!("{v:>10.4}") })
            .collect::<String>()
    );
    if let Some(out) = &cli.out {
        std::fs::create_dir_all(out)?;
        let doc: serde_json::Map<String, Value> = row
            .iter()
            .map(|(k, v)| (k.to_string(), serde_json::Number::from_f64(*v).map_or(Value::Null, Value::Number)))
            .collect();
        std::fs::write(out.join("evaluation.json"), serde_json::to_string_pretty(&doc)?)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Generate {
            users,
            ads,
            user_dim,
            ad_dim,
            truth_hidden,
            logit_scale,
            base_rate,
        } => {
            let d = SynthSpec::default();
            let spec = SynthSpec {
                users: *users,
                ads: *ads,
                user_dim: user_dim.unwrap_or(d.user_dim),
                ad_dim: ad_dim.unwrap_or(d.ad_dim),
                truth_hidden: truth_hidden.unwrap_or(d.truth_hidden),
                logit_scale: logit_scale.unwrap_or(d.logit_scale),
                base_rate: base_rate.unwrap_or(d.base_rate),
                seed: cli.seed.unwrap_or(d.seed),
            };
            generate(cli, spec)?;
        }
        Command::Simulate { config } => simulate(cli, config)?,
        Command::Sweep {
            config,
            preset,
            sets,
            seeds,
            num_seeds,
        } => return sweep(cli, config, preset.as_deref(), sets, seeds, *num_seeds),
        Command::Evaluate {
            checkpoint,
            catalog,
            split,
            holdout,
            holdout_per_user,
            rating_threshold,
        } => evaluate(
            cli,
            checkpoint,
            catalog,
            *split,
            holdout.as_deref(),
            *holdout_per_user,
            *rating_threshold,
        )?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BSIM_LOG", "error")).init();
    let cli = Cli::parse();
    if cli.jobs == 0 {
        eprintln!("error: --jobs must be >= 1");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let invalid = matches!(
                e.downcast_ref::<Error>(),
                Some(Error::Config(_) | Error::Compatibility(_))
            );
            ExitCode::from(if invalid { 2 } else { 1 })
        }
    }
}
