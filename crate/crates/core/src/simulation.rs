//! Continuous self-training loop.
//!
//! A run serves uniformly random slates to the first `bootstrap_users`
//! visits, trains the sampler on them, then alternates between serving with
//! the configured policy and warm-started retraining every
//! `retrain_every_users` visits.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{plain_sampler, ExperimentConfig};
use crate::dataio::checkpoint::save_checkpoint;
use crate::dataio::impressions::ImpressionWriter;
use crate::env::{random_policy_ctr, Catalog, EnvState};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::policy::{self, PolicyKind};
use crate::posterior::{Sampler, ScoreSamples, TrainExample, TrainOptions};
use crate::rng::{derive_seed, rng_from, stream, SimRng};

/// One served (user, ad) pair and its observed label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Impression {
    pub round: u64,
    pub user_id: usize,
    pub ad_id: usize,
    /// Score the policy ranked by (point, sampled or UCB score).
    pub served_score: f64,
    /// Point estimate of the serving model; 0.5 when no model exists.
    pub point_score: f64,
    pub label: u8,
    pub policy_tag: String,
    pub impression_id: u64,
    pub run_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BufferMode {
    /// Retrain on the impressions logged since the previous retrain.
    #[default]
    Window,
    /// Retrain on every impression of the run.
    Cumulative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UserOrder {
    /// Visit every active user once per pass, in a fresh random order each pass.
    #[default]
    RoundRobinShuffled,
    /// Draw each visit uniformly from the active users.
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub bootstrap_users: usize,
    pub retrain_every_users: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub buffer_mode: BufferMode,
    pub user_order: UserOrder,
    pub total_user_visits: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            bootstrap_users: 20,
            retrain_every_users: 20,
            epochs: 100,
            batch_size: 64,
            buffer_mode: BufferMode::Window,
            user_order: UserOrder::RoundRobinShuffled,
            total_user_visits: 600,
        }
    }
}

impl LoopConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [
            ("bootstrap_users", self.bootstrap_users),
            ("retrain_every_users", self.retrain_every_users),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("total_user_visits", self.total_user_visits),
        ] {
            if v == 0 {
                p.push(format!("loop.{name} must be >= 1"));
            }
        }
        if self.bootstrap_users > self.total_user_visits {
            p.push(format!(
                "loop.bootstrap_users ({}) exceeds loop.total_user_visits ({})",
                self.bootstrap_users, self.total_user_visits
            ));
        }
        p
    }
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub impressions: Vec<Impression>,
    /// Final model; `None` for the random policy.
    pub sampler: Option<Sampler>,
}

/// Output locations of a run writing to disk.
pub const IMPRESSIONS_FILE: &str = "impressions.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SAMPLER_FILE: &str = "sampler.bsim";
pub const FINAL_CHECKPOINT: &str = "final.bsim";

/// Catalog for `config`, with holdout cells drawn from the experiment seed.
pub fn prepare_catalog(config: &ExperimentConfig) -> Result<Catalog> {
    config
        .environment
        .load(derive_seed(config.seed, &[stream::HOLDOUT]))
}

/// Digest of everything that determines a run's outcome; the output
/// location is left out.
pub fn config_digest(config: &ExperimentConfig) -> Result<String> {
    crate::dataio::canonical_config_digest(&ExperimentConfig {
        output_dir: None,
        ..config.clone()
    })
}

/// Stable run identifier: a prefix of the config digest.
pub fn run_id(config: &ExperimentConfig) -> Result<String> {
    Ok(config_digest(config)?[..16].to_string())
}

struct UserCycle {
    order: UserOrder,
    active: Vec<usize>,
    queue: Vec<usize>,
    rng: SimRng,
}

impl UserCycle {
    fn new(order: UserOrder, users: usize, seed: u64) -> Self {
        Self {
            order,
            active: (0..users).collect(),
            queue: Vec::new(),
            rng: rng_from(seed, &[stream::USER_ORDER]),
        }
    }

    fn retire(&mut self, user: usize) {
        self.active.retain(|&u| u != user);
        self.queue.retain(|&u| u != user);
    }

    fn next(&mut self) -> Option<usize> {
        if self.active.is_empty() {
            return None;
        }
        match self.order {
            UserOrder::UniformRandom => Some(self.active[self.rng.random_range(0..self.active.len())]),
            UserOrder::RoundRobinShuffled => {
                if self.queue.is_empty() {
                    self.queue = self.active.clone();
                    self.queue.shuffle(&mut self.rng);
                    self.queue.reverse();
                }
                self.queue.pop()
            }
        }
    }
}

fn train_options(config: &ExperimentConfig, epochs: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        batch_size: config.run_loop.batch_size,
        optimizer: config.optimizer.clone(),
    }
}

fn examples(catalog: &Catalog, log: &[Impression]) -> Result<Vec<TrainExample>> {
    log.iter()
        .map(|imp| {
            Ok(TrainExample {
                id: imp.impression_id,
                features: catalog.context_features(imp.user_id, imp.ad_id)?,
                label: imp.label as f64,
            })
        })
        .collect()
}

/// Offline pretraining on a fixed dataset; returns the training PR-AUC of the
/// resulting point predictor (`None` when the dataset has no clicks).
pub fn warm_start_pretrain(
    sampler: &mut Sampler,
    catalog: &Catalog,
    dataset: &[Impression],
    epochs: usize,
    batch_size: usize,
    optimizer: &crate::nn::OptimizerConfig,
) -> Result<Option<f64>> {
    if dataset.is_empty() {
        return Err(Error::Usage("warm start needs a nonempty dataset".into()));
    }
    let data = examples(catalog, dataset)?;
    sampler.retrain(
        &data,
        &TrainOptions {
            epochs,
            batch_size,
            optimizer: optimizer.clone(),
        },
    )?;
    let contexts: Vec<&[f64]> = data.iter().map(|e| e.features.as_slice()).collect();
    let scores = sampler.point_predict(&contexts)?;
    let labels: Vec<u8> = dataset.iter().map(|i| i.label).collect();
    Ok(metrics::pr_auc(&scores, &labels).ok())
}

/// Log of a single-network greedy self-training loop over `n_users` visits,
/// with the cadence and hyperparameters of `config`.
pub fn collect_greedy_dataset(
    config: &ExperimentConfig,
    catalog: &Catalog,
    n_users: usize,
    seed: u64,
) -> Result<Vec<Impression>> {
    if n_users == 0 {
        return Err(Error::Usage("n_users must be >= 1".into()));
    }
    let mut greedy = config.clone();
    greedy.seed = seed;
    greedy.policy.kind = PolicyKind::Greedy;
    greedy.warm_start = None;
    greedy.run_loop.total_user_visits = n_users;
    greedy.run_loop.bootstrap_users = config.run_loop.bootstrap_users.min(n_users);
    let sampler = Sampler::build(plain_sampler(
        catalog.feature_dim(),
        config.sampler.layer_sizes.clone(),
        derive_seed(seed, &[stream::SAMPLER]),
    ))?;
    let state = serve_loop(&greedy, catalog, Some(sampler), true, None)?;
    Ok(state.log)
}

/// Run one experiment in memory.
pub fn run_experiment(config: &ExperimentConfig, catalog: &Catalog) -> Result<RunOutcome> {
    run_experiment_to(config, catalog, None)
}

/// Run one experiment, streaming the impression log and per-retrain
/// checkpoints into `out_dir` when given.
pub fn run_experiment_to(
    config: &ExperimentConfig,
    catalog: &Catalog,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    config.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    }
    let k = config.policy.slate_size;
    let mut warm_start_pr_auc = None;
    let (sampler, random_phase) = if config.policy.kind == PolicyKind::Random {
        (None, true)
    } else {
        let mut sampler = Sampler::build(config.sampler_config(catalog.feature_dim()))?;
        match &config.warm_start {
            Some(ws) => {
                let data_seed = derive_seed(config.seed, &[stream::WARM_START]);
                let dataset = collect_greedy_dataset(config, catalog, ws.dataset_users, data_seed)?;
                info!("warm start: {} greedy impressions, {} epochs", dataset.len(), ws.pretrain_epochs);
                warm_start_pr_auc = warm_start_pretrain(
                    &mut sampler,
                    catalog,
                    &dataset,
                    ws.pretrain_epochs,
                    config.run_loop.batch_size,
                    &ws.optimizer,
                )?;
                (Some(sampler), false)
            }
            None => (Some(sampler), true),
        }
    };

    let state = serve_loop(config, catalog, sampler, random_phase, out_dir)?;

    let run_id = run_id(config)?;
    let clicks: u64 = state.log.iter().map(|i| i.label as u64).sum();
    let cumulative_ctr = if state.log.is_empty() {
        0.0
    } else {
        clicks as f64 / state.log.len() as f64
    };
    let random_ctr = random_policy_ctr(catalog);

    let holdout = catalog.holdout_cells();
    let test_labels: Vec<u8> = holdout.iter().map(|&(u, a)| catalog.label(u, a)).collect();
    let test_scores = predict_cells(state.sampler.as_ref(), catalog, &holdout)?;
    let train_cells: Vec<(usize, usize)> = state.log.iter().map(|i| (i.user_id, i.ad_id)).collect();
    let train_labels: Vec<u8> = state.log.iter().map(|i| i.label).collect();
    let train_scores = predict_cells(state.sampler.as_ref(), catalog, &train_cells)?;

    let regret_series = match metrics::regret(&state.log, catalog, k) {
        Ok(r) => Some(r.cumulative),
        Err(Error::Unsupported(_)) => None,
        Err(e) => return Err(e),
    };
    let report = MetricsReport {
        model: config.model_label(),
        run_id: run_id.clone(),
        seed: config.seed,
        config_digest: config_digest(config)?,
        rounds: state.rounds,
        impressions: state.log.len() as u64,
        retrains: state.retrains,
        cumulative_ctr,
        random_ctr,
        ctr_uplift_pct: metrics::ctr_uplift(cumulative_ctr, random_ctr).ok(),
        train_pr_auc: metrics::pr_auc(&train_scores, &train_labels).ok(),
        test_pr_auc: metrics::pr_auc(&test_scores, &test_labels).ok(),
        roc_auc: metrics::roc_auc(&test_scores, &test_labels).ok(),
        rce_pct: metrics::rce(&test_scores, &test_labels).ok(),
        log_loss: metrics::log_loss(&test_scores, &test_labels).ok(),
        warm_start_pr_auc,
        early_stop: state.early_stop,
        ctr_series: metrics::cumulative_ctr_series(&state.log),
        regret_series,
    };
    if let (Some(dir), Some(s)) = (out_dir, &state.sampler) {
        save_checkpoint(s, dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT))?;
    }
    Ok(RunOutcome {
        report,
        impressions: state.log,
        sampler: state.sampler,
    })
}

/// Point predictions for catalog cells; the uninformative 0.5 without a model.
pub fn predict_cells(
    sampler: Option<&Sampler>,
    catalog: &Catalog,
    cells: &[(usize, usize)],
) -> Result<Vec<f64>> {
    match sampler {
        None => Ok(vec![0.5; cells.len()]),
        Some(s) => {
            let contexts = cells
                .iter()
                .map(|&(u, a)| catalog.context_features(u, a))
                .collect::<Result<Vec<_>>>()?;
            s.point_predict(&contexts)
        }
    }
}

struct LoopState {
    log: Vec<Impression>,
    sampler: Option<Sampler>,
    rounds: u64,
    retrains: u64,
    early_stop: Option<String>,
}

/// Serve `total_user_visits` visits. With `random_phase` the first
/// `bootstrap_users` visits get uniform slates and the initial training
/// follows them; otherwise the given sampler serves from the first visit.
fn serve_loop(
    config: &ExperimentConfig,
    catalog: &Catalog,
    mut sampler: Option<Sampler>,
    random_phase: bool,
    out_dir: Option<&Path>,
) -> Result<LoopState> {
    let lc = &config.run_loop;
    let pc = &config.policy;
    let k = pc.slate_size;
    let seed = config.seed;
    let tag = config.model_label();
    let run_id = run_id(config)?;
    let mut env = EnvState::new(
        catalog,
        config.environment.label_mode,
        config.environment.exclude_shown,
        derive_seed(seed, &[stream::ENV]),
    )?;
    let mut users = UserCycle::new(lc.user_order, catalog.users(), seed);
    let mut policy_rng = match pc.rng_seed {
        Some(s) => rng_from(s, &[]),
        None => rng_from(seed, &[stream::POLICY]),
    };
    let mut slate_rng = rng_from(seed, &[stream::BOOTSTRAP_SLATES]);
    let mut score_rng = rng_from(seed, &[stream::SCORING]);
    let mut writer = out_dir
        .map(|d| ImpressionWriter::create(d.join(IMPRESSIONS_FILE)))
        .transpose()?;

    let bootstrap = if random_phase { lc.bootstrap_users } else { 0 };
    let mut log: Vec<Impression> = Vec::new();
    let mut window_start = 0usize;
    let mut retrains = 0u64;
    let mut early_stop = None;
    let mut visits = 0usize;

    while visits < lc.total_user_visits {
        let Some(user) = users.next() else {
            early_stop = Some(format!(
                "every user exhausted after {visits} of {} visits",
                lc.total_user_visits
            ));
            break;
        };
        let eligible = env.eligible_ads(user);
        if eligible.len() < k {
            debug!("user {user} exhausted ({} eligible ads)", eligible.len());
            users.retire(user);
            continue;
        }
        let contexts = eligible
            .iter()
            .map(|&a| catalog.context_features(user, a))
            .collect::<Result<Vec<_>>>()?;
        let local: Vec<usize> = (0..eligible.len()).collect();
        let random_visit = visits < bootstrap || pc.kind == PolicyKind::Random;
        let (picks, served): (Vec<usize>, Vec<f64>) = if random_visit {
            let picks = policy::select_random(k, &local, &mut slate_rng)?;
            (picks, Vec::new())
        } else {
            let s = sampler.as_ref().expect("model policies have a sampler");
            match pc.kind {
                PolicyKind::Greedy | PolicyKind::EpsilonGreedy => {
                    let scores = s.point_predict(&contexts)?;
                    let picks = if pc.kind == PolicyKind::Greedy {
                        policy::select_greedy(&scores, k, &local)?
                    } else {
                        policy::select_epsilon_greedy(&scores, k, pc.epsilon, &local, &mut policy_rng)?
                    };
                    let served = picks.iter().map(|&i| scores[i]).collect();
                    (picks, served)
                }
                PolicyKind::Thompson => {
                    let draws = s.sample_scores(&contexts, 1, &mut score_rng)?;
                    let picks = policy::select_thompson(&draws, k, &local)?;
                    let served = picks.iter().map(|&i| draws.get(i, 0)).collect();
                    (picks, served)
                }
                PolicyKind::Ucb => {
                    let draws: ScoreSamples = s.sample_scores(&contexts, pc.ucb_samples, &mut score_rng)?;
                    let ucb = policy::ucb_scores(&draws, pc.ucb_order_k)?;
                    let picks = policy::select_greedy(&ucb, k, &local)?;
                    let served = picks.iter().map(|&i| ucb[i]).collect();
                    (picks, served)
                }
                PolicyKind::Random => unreachable!("handled above"),
            }
        };
        let slate: Vec<usize> = picks.iter().map(|&i| eligible[i]).collect();
        let chosen: Vec<&Vec<f64>> = picks.iter().map(|&i| &contexts[i]).collect();
        let point = match &sampler {
            Some(s) => s.point_predict(&chosen)?,
            None => vec![0.5; k],
        };
        let served = if served.is_empty() { point.clone() } else { served };
        let labels = env.step(user, &slate)?;
        for j in 0..k {
            let imp = Impression {
                round: visits as u64,
                user_id: user,
                ad_id: slate[j],
                served_score: served[j],
                point_score: point[j],
                label: labels[j],
                policy_tag: tag.clone(),
                impression_id: log.len() as u64,
                run_id: run_id.clone(),
            };
            if let Some(w) = writer.as_mut() {
                w.append(&imp)?;
            }
            log.push(imp);
        }
        visits += 1;

        let due = visits >= bootstrap && (visits - bootstrap).is_multiple_of(lc.retrain_every_users);
        if let (true, Some(s)) = (due, sampler.as_mut()) {
            let buffer = match lc.buffer_mode {
                BufferMode::Window => &log[window_start..],
                BufferMode::Cumulative => &log[..],
            };
            if let Some(foreign) = buffer.iter().find(|i| i.run_id != run_id) {
                return Err(Error::Contract(format!(
                    "impression {} belongs to run {}",
                    foreign.impression_id, foreign.run_id
                )));
            }
            let data = examples(catalog, buffer)?;
            let stats = s.retrain(&data, &train_options(config, lc.epochs))?;
            retrains += 1;
            info!(
                "retrain {retrains} after {visits} visits on {} impressions (loss {:?})",
                data.len(),
                stats.final_loss
            );
            window_start = log.len();
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            if let Some(dir) = out_dir {
                let cdir = dir.join(CHECKPOINT_DIR).join(format!("round_{visits}"));
                fs::create_dir_all(&cdir)?;
                save_checkpoint(s, cdir.join(SAMPLER_FILE))?;
            }
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    Ok(LoopState {
        log,
        sampler,
        rounds: visits as u64,
        retrains,
        early_stop,
    })
}
