//! Posterior-approximation samplers.
//!
//! Six schemes share one contract: [`Sampler::sample_scores`] returns a
//! candidates x samples matrix of CTR draws and [`Sampler::point_predict`]
//! a point estimate per candidate.
//!
//! - `bootstrap` / `sgd_ensemble`: B independent networks, trained on
//!   Bernoulli-masked subsets or on all data.
//! - `multihead` / `multihead_sgd`: one network with B heads over a shared
//!   trunk, heads trained on masked subsets or on all data.
//! - `mc_dropout`: dropout after every hidden layer, kept on at sampling time.
//! - `hybrid`: a single dropout layer on top of the trunk; the trunk runs once
//!   per candidate and only the dropout layer and head are replayed per sample.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    DropoutPlacement, MaskSource, NetworkConfig, NetworkParams, OptimizerConfig, OptimizerState,
};
use crate::rng::{rng_from, stream, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Bootstrap,
    Multihead,
    SgdEnsemble,
    MultiheadSgd,
    McDropout,
    Hybrid,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 6] = [
        SamplerKind::Bootstrap,
        SamplerKind::Multihead,
        SamplerKind::SgdEnsemble,
        SamplerKind::MultiheadSgd,
        SamplerKind::McDropout,
        SamplerKind::Hybrid,
    ];

    pub fn is_ensemble(self) -> bool {
        matches!(self, SamplerKind::Bootstrap | SamplerKind::SgdEnsemble)
    }

    pub fn is_multihead(self) -> bool {
        matches!(self, SamplerKind::Multihead | SamplerKind::MultiheadSgd)
    }

    pub fn is_dropout(self) -> bool {
        matches!(self, SamplerKind::McDropout | SamplerKind::Hybrid)
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            SamplerKind::Bootstrap => "Bootstrap",
            SamplerKind::Multihead => "Multihead",
            SamplerKind::SgdEnsemble => "SGD",
            SamplerKind::MultiheadSgd => "Multihead SGD",
            SamplerKind::McDropout => "Dropout",
            SamplerKind::Hybrid => "Hybrid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataScheme {
    BernoulliMask { p_keep: f64 },
    FullData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub member_count: usize,
    pub data_scheme: DataScheme,
    pub net: NetworkConfig,
    pub seed: u64,
    /// Draw a fresh dropout mask per (candidate, sample); otherwise one mask
    /// per sample is shared by all candidates.
    #[serde(default = "default_true")]
    pub per_candidate_masks: bool,
}

fn default_true() -> bool {
    true
}

impl SamplerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.member_count == 0 {
            p.push("sampler.member_count must be >= 1".into());
        }
        if let DataScheme::BernoulliMask { p_keep } = self.data_scheme {
            if !(p_keep > 0.0 && p_keep <= 1.0) {
                p.push(format!("sampler p_keep must be in (0, 1], got {p_keep}"));
            }
        }
        match (self.kind, self.data_scheme) {
            (SamplerKind::Bootstrap | SamplerKind::Multihead, DataScheme::FullData) => p.push(format!(
                "{:?} sampler requires the bernoulli_mask data scheme",
                self.kind
            )),
            (SamplerKind::SgdEnsemble | SamplerKind::MultiheadSgd, DataScheme::BernoulliMask { .. }) => {
                p.push(format!("{:?} sampler requires the full_data scheme", self.kind))
            }
            _ => {}
        }
        match self.kind {
            SamplerKind::McDropout => {
                if self.net.dropout_placement != DropoutPlacement::AllHidden {
                    p.push("mc_dropout sampler requires dropout on all hidden layers".into());
                }
            }
            SamplerKind::Hybrid => {
                if self.net.dropout_rate <= 0.0 {
                    p.push("hybrid sampler requires dropout_rate > 0".into());
                }
                if self.net.dropout_placement != DropoutPlacement::SecondToLast {
                    p.push("hybrid sampler requires second_to_last dropout placement".into());
                }
            }
            _ => {}
        }
        if let Err(Error::Config(mut net)) = self.net.validate() {
            p.append(&mut net);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Number of independently trained units (networks or heads).
    pub fn unit_count(&self) -> usize {
        if self.kind.is_dropout() {
            1
        } else {
            self.member_count
        }
    }

    fn normalized_net(&self) -> NetworkConfig {
        let mut net = self.net.clone();
        net.head_count = if self.kind.is_multihead() {
            self.member_count
        } else {
            1
        };
        net
    }
}

/// Candidates x samples matrix of CTR draws, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSamples {
    candidates: usize,
    samples: usize,
    data: Vec<f64>,
}

const SCORE_FLOOR: f64 = 1e-12;

impl ScoreSamples {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let samples = rows.first().map_or(1, Vec::len);
        if samples == 0 {
            return Err(Error::Shape("score samples need at least one column".into()));
        }
        if rows.iter().any(|r| r.len() != samples) {
            return Err(Error::Shape("ragged score sample rows".into()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !(v.is_finite() && *v > 0.0 && *v < 1.0)) {
            return Err(Error::Input("score samples must lie strictly inside (0, 1)".into()));
        }
        Ok(Self {
            candidates: data.len() / samples,
            samples,
            data,
        })
    }

    pub fn candidate_count(&self) -> usize {
        self.candidates
    }

    pub fn sample_count(&self) -> usize {
        self.samples
    }

    pub fn get(&self, candidate: usize, sample: usize) -> f64 {
        self.data[candidate * self.samples + sample]
    }

    pub fn row(&self, candidate: usize) -> &[f64] {
        &self.data[candidate * self.samples..(candidate + 1) * self.samples]
    }

    pub fn row_mean(&self, candidate: usize) -> f64 {
        self.row(candidate).iter().sum::<f64>() / self.samples as f64
    }
}

fn clamp_score(p: f64) -> f64 {
    p.clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR)
}

/// A labelled example with a stable id used for membership assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrainStats {
    /// Examples seen by each network or head.
    pub unit_sizes: Vec<usize>,
    /// Mean loss over the last epoch, averaged over trained networks.
    pub final_loss: Option<f64>,
}

/// A trained posterior approximation.
#[derive(Debug)]
pub struct Sampler {
    config: SamplerConfig,
    members: Vec<NetworkParams>,
    optimizers: Vec<Option<OptimizerState>>,
    retrain_count: u64,
    shared_forwards: AtomicU64,
}

impl Clone for Sampler {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            members: self.members.clone(),
            optimizers: self.optimizers.clone(),
            retrain_count: self.retrain_count,
            shared_forwards: AtomicU64::new(self.shared_forward_count()),
        }
    }
}

impl Sampler {
    pub fn build(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let net = config.normalized_net();
        let networks = if config.kind.is_ensemble() {
            config.member_count
        } else {
            1
        };
        let members = (0..networks)
            .map(|b| {
                NetworkParams::init(
                    net.clone(),
                    crate::rng::derive_seed(config.seed, &[stream::MEMBER_INIT, b as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let config = SamplerConfig { net, ..config };
        Ok(Self {
            optimizers: vec![None; members.len()],
            config,
            members,
            retrain_count: 0,
            shared_forwards: AtomicU64::new(0),
        })
    }

    /// Reassemble a sampler from stored parts (optimizer state starts fresh).
    pub fn from_parts(config: SamplerConfig, members: Vec<NetworkParams>) -> Result<Self> {
        config.validate()?;
        let expected = if config.kind.is_ensemble() {
            config.member_count
        } else {
            1
        };
        if members.len() != expected {
            return Err(Error::Shape(format!(
                "{:?} sampler needs {expected} networks, got {}",
                config.kind,
                members.len()
            )));
        }
        let net = config.normalized_net();
        if members.iter().any(|m| *m.config() != net) {
            return Err(Error::Shape("member network config does not match sampler".into()));
        }
        let config = SamplerConfig { net, ..config };
        Ok(Self {
            optimizers: vec![None; members.len()],
            config,
            members,
            retrain_count: 0,
            shared_forwards: AtomicU64::new(0),
        })
    }

    /// Restore the number of completed retrains (it seeds later rounds).
    pub fn with_retrain_count(mut self, count: u64) -> Self {
        self.retrain_count = count;
        self
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn members(&self) -> &[NetworkParams] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [NetworkParams] {
        &mut self.members
    }

    pub fn input_dim(&self) -> usize {
        self.config.net.input_dim
    }

    pub fn retrain_count(&self) -> u64 {
        self.retrain_count
    }

    /// How many times the layers below the sampling point were evaluated.
    pub fn shared_forward_count(&self) -> u64 {
        self.shared_forwards.load(Ordering::Relaxed)
    }

    pub fn reset_shared_forward_count(&self) {
        self.shared_forwards.store(0, Ordering::Relaxed);
    }

    /// Which networks/heads train on example `example_id`.
    pub fn assign_membership(&self, example_id: u64) -> Vec<bool> {
        let units = self.config.unit_count();
        match self.config.data_scheme {
            DataScheme::FullData => vec![true; units],
            _ if self.config.kind.is_dropout() => vec![true; units],
            DataScheme::BernoulliMask { p_keep } => {
                let mut rng = rng_from(self.config.seed, &[stream::MEMBERSHIP, example_id]);
                let draw = |rng: &mut SimRng| -> Vec<bool> {
                    (0..units).map(|_| rng.random::<f64>() < p_keep).collect()
                };
                let mut mask = draw(&mut rng);
                if !mask.contains(&true) {
                    mask = draw(&mut rng);
                }
                if !mask.contains(&true) {
                    mask[rng.random_range(0..units)] = true;
                }
                mask
            }
        }
    }

    fn check_contexts<C: AsRef<[f64]>>(&self, contexts: &[C]) -> Result<()> {
        let dim = self.input_dim();
        for c in contexts {
            let c = c.as_ref();
            if c.len() != dim {
                return Err(Error::Shape(format!(
                    "context has length {}, sampler expects {dim}",
                    c.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input("non-finite feature value".into()));
            }
        }
        Ok(())
    }

    /// Which ensemble members or heads provide the `s` sample columns: all of
    /// them in order when `s == B`, otherwise a uniformly drawn subset.
    fn pick_units(&self, s: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
        let b = self.config.member_count;
        if s > b {
            return Err(Error::config(format!(
                "{s} samples requested from a {:?} sampler with {b} members",
                self.config.kind
            )));
        }
        Ok(if s == b {
            (0..b).collect()
        } else {
            index::sample(rng, b, s).into_vec()
        })
    }

    /// Draw `s` posterior CTR samples for each context.
    pub fn sample_scores<C: AsRef<[f64]>>(
        &self,
        contexts: &[C],
        s: usize,
        rng: &mut SimRng,
    ) -> Result<ScoreSamples> {
        if s == 0 {
            return Err(Error::Usage("at least one sample per candidate required".into()));
        }
        self.check_contexts(contexts)?;
        let n = contexts.len();
        let mut data = Vec::with_capacity(n * s);
        let kind = self.config.kind;
        if kind.is_ensemble() {
            let picks = self.pick_units(s, rng)?;
            for c in contexts {
                for &m in &picks {
                    data.push(clamp_score(self.members[m].forward_unchecked(c.as_ref(), None)));
                }
            }
            self.shared_forwards
                .fetch_add((n * picks.len()) as u64, Ordering::Relaxed);
        } else if kind.is_multihead() {
            let picks = self.pick_units(s, rng)?;
            let net = &self.members[0];
            for c in contexts {
                let shared = net.shared_features(c.as_ref())?;
                for &h in &picks {
                    data.push(clamp_score(net.head_from_shared(&shared, None, Some(h))));
                }
            }
            self.shared_forwards.fetch_add(n as u64, Ordering::Relaxed);
        } else {
            let net = &self.members[0];
            let shared_seeds: Option<Vec<u64>> =
                (!self.config.per_candidate_masks).then(|| (0..s).map(|_| rng.random()).collect());
            let mask_rng = |j: usize| -> Option<SimRng> {
                shared_seeds.as_ref().map(|seeds| rng_from(seeds[j], &[]))
            };
            for c in contexts {
                let c = c.as_ref();
                if kind == SamplerKind::Hybrid {
                    let shared = net.shared_features(c)?;
                    self.shared_forwards.fetch_add(1, Ordering::Relaxed);
                    for j in 0..s {
                        let p = match mask_rng(j) {
                            Some(mut r) => net.head_from_shared(&shared, Some(&mut r), None),
                            None => net.head_from_shared(&shared, Some(rng), None),
                        };
                        data.push(clamp_score(p));
                    }
                } else {
                    for j in 0..s {
                        let p = match mask_rng(j) {
                            Some(mut r) => net.forward_mc_with(c, &mut r, None),
                            None => net.forward_mc_with(c, rng, None),
                        };
                        data.push(clamp_score(p));
                    }
                    self.shared_forwards.fetch_add(s as u64, Ordering::Relaxed);
                }
            }
        }
        Ok(ScoreSamples {
            candidates: n,
            samples: s,
            data,
        })
    }

    /// Point CTR estimate per context: dropout off for dropout kinds, the
    /// mean over members or heads otherwise.
    pub fn point_predict<C: AsRef<[f64]>>(&self, contexts: &[C]) -> Result<Vec<f64>> {
        self.check_contexts(contexts)?;
        Ok(contexts
            .iter()
            .map(|c| {
                let c = c.as_ref();
                let sum: f64 = self.members.iter().map(|m| m.forward_unchecked(c, None)).sum();
                clamp_score(sum / self.members.len() as f64)
            })
            .collect())
    }

    /// Warm-started fine-tuning on `data`.
    ///
    /// Each network or head trains only on examples whose membership mask
    /// includes it. Shuffling and dropout streams are derived from the
    /// sampler seed, the retrain index and the unit index, so the result does
    /// not depend on how members are scheduled.
    pub fn retrain(&mut self, data: &[TrainExample], opts: &TrainOptions) -> Result<RetrainStats> {
        if data.is_empty() {
            return Err(Error::Usage("retrain called with no data".into()));
        }
        if opts.batch_size == 0 {
            return Err(Error::Usage("batch_size must be >= 1".into()));
        }
        self.check_contexts(&data.iter().map(|e| e.features.as_slice()).collect::<Vec<_>>())?;
        let masks: Vec<Vec<bool>> = data.iter().map(|e| self.assign_membership(e.id)).collect();
        let units = self.config.unit_count();
        let unit_sizes: Vec<usize> = (0..units)
            .map(|u| masks.iter().filter(|m| m[u]).count())
            .collect();
        if opts.epochs == 0 {
            return Ok(RetrainStats {
                unit_sizes,
                final_loss: None,
            });
        }

        let round = self.retrain_count;
        let seed = self.config.seed;
        let param_count = self.members[0].values().len();
        for slot in &mut self.optimizers {
            if slot.as_ref().is_none_or(|o| o.config != opts.optimizer) {
                *slot = Some(OptimizerState::new(opts.optimizer.clone(), param_count)?);
            }
        }

        let losses: Vec<Option<f64>> = if self.config.kind.is_ensemble() {
            self.members
                .par_iter_mut()
                .zip(self.optimizers.par_iter_mut())
                .enumerate()
                .map(|(b, (net, opt))| {
                    let subset: Vec<&TrainExample> =
                        data.iter().zip(&masks).filter(|(_, m)| m[b]).map(|(e, _)| e).collect();
                    if subset.is_empty() {
                        return Ok(None);
                    }
                    train_network(
                        net,
                        opt.as_mut().expect("optimizer initialised"),
                        &subset,
                        None,
                        opts,
                        (seed, round, b as u64),
                    )
                    .map(Some)
                })
                .collect::<Result<_>>()?
        } else {
            let (subset, head_masks): (Vec<&TrainExample>, Vec<Vec<bool>>) = data
                .iter()
                .zip(masks)
                .filter(|(_, m)| m.contains(&true))
                .unzip();
            let head_masks = self.config.kind.is_multihead().then_some(head_masks);
            let loss = train_network(
                &mut self.members[0],
                self.optimizers[0].as_mut().expect("optimizer initialised"),
                &subset,
                head_masks.as_deref(),
                opts,
                (seed, round, 0),
            )?;
            vec![Some(loss)]
        };
        self.retrain_count += 1;
        let trained: Vec<f64> = losses.into_iter().flatten().collect();
        Ok(RetrainStats {
            unit_sizes,
            final_loss: (!trained.is_empty()).then(|| trained.iter().sum::<f64>() / trained.len() as f64),
        })
    }
}

/// Mini-batch training of one network; returns the last epoch's mean loss.
fn train_network(
    net: &mut NetworkParams,
    opt: &mut OptimizerState,
    data: &[&TrainExample],
    head_masks: Option<&[Vec<bool>]>,
    opts: &TrainOptions,
    (seed, round, unit): (u64, u64, u64),
) -> Result<f64> {
    let mut shuffle_rng = rng_from(seed, &[stream::SHUFFLE, round, unit]);
    let mut dropout_rng = rng_from(seed, &[stream::TRAIN_DROPOUT, round, unit]);
    let has_dropout = net.config().has_dropout();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = 0.0;
    for _ in 0..opts.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut weight = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<(&[f64], f64)> = chunk
                .iter()
                .map(|&i| (data[i].features.as_slice(), data[i].label))
                .collect();
            let hm: Option<Vec<Vec<bool>>> =
                head_masks.map(|hm| chunk.iter().map(|&i| hm[i].clone()).collect());
            let masks = if has_dropout {
                MaskSource::Random(&mut dropout_rng)
            } else {
                MaskSource::Off
            };
            let loss = net.train_step(opt, &batch, hm.as_deref(), masks)?;
            total += loss * chunk.len() as f64;
            weight += chunk.len();
        }
        last = total / weight as f64;
    }
    Ok(last)
}
