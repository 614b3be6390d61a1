//! Experiment configuration: one JSON document with the standard hyperparameters as defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{Catalog, LabelMode, SynthSpec};
use crate::error::{Error, Result};
use crate::nn::{DropoutPlacement, NetworkConfig, OptimizerConfig};
use crate::policy::{PolicyConfig, PolicyKind};
use crate::posterior::{DataScheme, SamplerConfig, SamplerKind};
use crate::rng::{derive_seed, stream};
use crate::simulation::LoopConfig;

/// Where the user-ad matrix comes from and how it is served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentConfig {
    /// Generate a synthetic catalog from this recipe.
    pub synthetic: Option<SynthSpec>,
    /// Directory holding users.csv, ads.csv, labels.csv (and optionally truth.csv).
    pub catalog_dir: Option<PathBuf>,
    pub rating_threshold: f64,
    pub holdout_per_user: usize,
    pub exclude_shown: bool,
    pub label_mode: LabelMode,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SynthSpec::default()),
            catalog_dir: None,
            rating_threshold: crate::dataio::catalog::DEFAULT_RATING_THRESHOLD,
            holdout_per_user: 5,
            exclude_shown: true,
            label_mode: LabelMode::Frozen,
        }
    }
}

impl EnvironmentConfig {
    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        match (&self.synthetic, &self.catalog_dir) {
            (Some(spec), None) => {
                p.extend(spec.problems().into_iter().map(|m| format!("environment.{m}")));
                if self.holdout_per_user >= spec.ads {
                    p.push(format!(
                        "environment.holdout_per_user ({}) must be below the number of ads ({})",
                        self.holdout_per_user, spec.ads
                    ));
                }
            }
            (None, Some(_)) => {}
            _ => p.push("environment: set exactly one of `synthetic` and `catalog_dir`".into()),
        }
        if !self.rating_threshold.is_finite() {
            p.push("environment.rating_threshold must be finite".into());
        }
        p
    }

    /// Build or load the catalog and mark the holdout cells.
    pub fn load(&self, seed: u64) -> Result<Catalog> {
        let catalog = match (&self.synthetic, &self.catalog_dir) {
            (Some(spec), None) => crate::env::synth_generate(spec)?,
            (None, Some(dir)) => crate::dataio::catalog::load_catalog_dir(dir, self.rating_threshold)?,
            _ => return Err(Error::Config(self.problems())),
        };
        catalog.split_holdout(self.holdout_per_user, seed)
    }
}

/// Posterior sampler settings; the network shape is derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    pub kind: SamplerKind,
    /// Networks or heads (B).
    pub member_count: usize,
    /// Bernoulli keep probability for bootstrap memberships.
    pub p_keep: f64,
    pub layer_sizes: Vec<usize>,
    /// Width of the extra dropout layer added for the hybrid sampler.
    pub hybrid_units: usize,
    pub dropout_rate: f64,
    pub per_candidate_masks: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Hybrid,
            member_count: 10,
            p_keep: 0.5,
            layer_sizes: vec![100, 50],
            hybrid_units: 20,
            dropout_rate: 0.5,
            per_candidate_masks: false,
        }
    }
}

/// Offline warm start on a greedily collected dataset before the online loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartConfig {
    /// User visits served by the greedy collector.
    pub dataset_users: usize,
    pub pretrain_epochs: usize,
    /// Optimizer for the offline pretraining only; the online loop keeps `optimizer`.
    pub optimizer: OptimizerConfig,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            dataset_users: 120,
            pretrain_epochs: 100,
            optimizer: OptimizerConfig::rmsprop(0.001, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub environment: EnvironmentConfig,
    pub sampler: SamplerSettings,
    pub policy: PolicyConfig,
    #[serde(rename = "loop")]
    pub run_loop: LoopConfig,
    pub optimizer: OptimizerConfig,
    pub warm_start: Option<WarmStartConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: None,
            environment: EnvironmentConfig::default(),
            sampler: SamplerSettings::default(),
            policy: PolicyConfig::default(),
            run_loop: LoopConfig::default(),
            optimizer: OptimizerConfig::default(),
            warm_start: None,
        }
    }
}

fn json_problem(e: &serde_json::Error) -> Error {
    Error::Config(vec![e.to_string()])
}

impl ExperimentConfig {
    /// Parse and validate; every violated invariant is reported at once.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| json_problem(&e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Set `key` (dotted path such as `policy.kind`) to `value`. The key must
    /// already exist in the serialized config.
    pub fn with_override(&self, key: &str, value: Value) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        let config: Self = serde_json::from_value(doc).map_err(|e| json_problem(&e))?;
        Ok(config)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.environment.problems();
        let s = &self.sampler;
        if s.layer_sizes.is_empty() || s.layer_sizes.contains(&0) {
            p.push("sampler.layer_sizes must be a nonempty list of positive widths".into());
        }
        if s.kind == SamplerKind::Hybrid && s.hybrid_units == 0 {
            p.push("sampler.hybrid_units must be >= 1".into());
        }
        if !(0.0..1.0).contains(&s.dropout_rate) {
            p.push(format!("sampler.dropout_rate must be in [0, 1), got {}", s.dropout_rate));
        }
        let shape_ok = !s.layer_sizes.is_empty()
            && !s.layer_sizes.contains(&0)
            && (0.0..1.0).contains(&s.dropout_rate)
            && (s.kind != SamplerKind::Hybrid || s.hybrid_units > 0);
        if shape_ok {
            p.extend(self.sampler_config(1).problems());
        } else if s.member_count == 0 {
            p.push("sampler.member_count must be >= 1".into());
        }
        p.extend(self.policy.problems());
        if self.policy.kind == PolicyKind::Ucb
            && !s.kind.is_dropout()
            && self.policy.ucb_samples > s.member_count
        {
            p.push(format!(
                "policy.ucb_samples ({}) exceeds the {} networks/heads of the {:?} sampler",
                self.policy.ucb_samples, s.member_count, s.kind
            ));
        }
        p.extend(self.run_loop.problems());
        p.extend(self.optimizer.problems());
        if let Some(w) = &self.warm_start {
            if w.dataset_users == 0 {
                p.push("warm_start.dataset_users must be >= 1".into());
            }
            p.extend(w.optimizer.problems().into_iter().map(|m| format!("warm_start.{m}")));
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

    /// Sampler for contexts of width `input_dim`. Greedy and epsilon-greedy
    /// use a single plain network whatever sampler is configured.
    pub fn sampler_config(&self, input_dim: usize) -> SamplerConfig {
        let s = &self.sampler;
        let seed = derive_seed(self.seed, &[stream::SAMPLER]);
        let point_only = matches!(
            self.policy.kind,
            PolicyKind::Random | PolicyKind::Greedy | PolicyKind::EpsilonGreedy
        );
        if point_only {
            return plain_sampler(input_dim, s.layer_sizes.clone(), seed);
        }
        let (layers, rate, placement) = match s.kind {
            SamplerKind::Hybrid => {
                let mut l = s.layer_sizes.clone();
                l.push(s.hybrid_units);
                (l, s.dropout_rate, DropoutPlacement::SecondToLast)
            }
            SamplerKind::McDropout => (s.layer_sizes.clone(), s.dropout_rate, DropoutPlacement::AllHidden),
            _ => (s.layer_sizes.clone(), 0.0, DropoutPlacement::None),
        };
        let data_scheme = match s.kind {
            SamplerKind::Bootstrap | SamplerKind::Multihead => DataScheme::BernoulliMask { p_keep: s.p_keep },
            _ => DataScheme::FullData,
        };
        SamplerConfig {
            kind: s.kind,
            member_count: s.member_count,
            data_scheme,
            net: NetworkConfig {
                dropout_rate: rate,
                dropout_placement: placement,
                ..NetworkConfig::plain(input_dim, layers)
            },
            seed,
            per_candidate_masks: s.per_candidate_masks,
        }
    }

    /// Row label used in comparison tables.
    pub fn model_label(&self) -> String {
        match self.policy.kind {
            PolicyKind::Random => "Random".into(),
            PolicyKind::Greedy => "Greedy".into(),
            PolicyKind::EpsilonGreedy => "ϵ-greedy".into(),
            PolicyKind::Thompson => format!("{} TS", self.sampler.kind.label()),
            PolicyKind::Ucb => format!("{} UCB", self.sampler.kind.label()),
        }
    }
}

/// A single plain network (no dropout, one head) used for point-score policies.
pub fn plain_sampler(input_dim: usize, layer_sizes: Vec<usize>, seed: u64) -> SamplerConfig {
    SamplerConfig {
        kind: SamplerKind::SgdEnsemble,
        member_count: 1,
        data_scheme: DataScheme::FullData,
        net: NetworkConfig {
            dropout_rate: 0.0,
            dropout_placement: DropoutPlacement::None,
            ..NetworkConfig::plain(input_dim, layer_sizes)
        },
        seed,
        per_candidate_masks: true,
    }
}

/// The twelve (policy, sampler) combinations of the main comparison,
/// in table order.
pub fn table1_cells() -> Vec<(PolicyKind, SamplerKind)> {
    use PolicyKind::*;
    use SamplerKind::*;
    vec![
        (Random, Hybrid),
        (Greedy, Hybrid),
        (EpsilonGreedy, Hybrid),
        (Thompson, McDropout),
        (Ucb, McDropout),
        (Thompson, Bootstrap),
        (Ucb, Bootstrap),
        (Ucb, SgdEnsemble),
        (Ucb, Multihead),
        (Ucb, MultiheadSgd),
        (Thompson, Hybrid),
        (Ucb, Hybrid),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_json_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.optimizer, OptimizerConfig::rmsprop(0.1, 0.5));
        assert_eq!(c.run_loop.batch_size, 64);
        assert_eq!(c.run_loop.epochs, 100);
        assert_eq!(c.policy.epsilon, 0.1);
        assert_eq!(c.policy.ucb_samples, 10);
        assert_eq!(c.policy.ucb_order_k, 2);
        assert_eq!(c.sampler.dropout_rate, 0.5);
        assert_eq!(c.sampler.layer_sizes, vec![100, 50]);
        assert_eq!(c.sampler.hybrid_units, 20);
        assert_eq!(c.run_loop.bootstrap_users, 20);
        assert_eq!(c.policy.slate_size, 7);
    }

    #[test]
    fn warm_start_has_its_own_optimizer() {
        let c = ExperimentConfig::from_json_str(r#"{"warm_start": {}}"#).unwrap();
        let ws = c.warm_start.unwrap();
        assert_eq!(ws.optimizer, OptimizerConfig::rmsprop(0.001, 0.5));
        assert_eq!(ws.pretrain_epochs, 100);

        let text = r#"{"optimizer": {"learning_rate": -1.0},
                       "warm_start": {"optimizer": {"learning_rate": -1.0}}}"#;
        match ExperimentConfig::from_json_str(text) {
            Err(Error::Config(p)) => {
                assert!(p.iter().any(|m| m.starts_with("optimizer.learning_rate")), "{p:?}");
                assert!(p.iter().any(|m| m.starts_with("warm_start.optimizer.learning_rate")), "{p:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_json_str(r#"{"policy": {"epsilonn": 0.2}}"#).unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("epsilonn"));
    }

    #[test]
    fn every_violation_is_listed() {
        let text = r#"{"policy": {"epsilon": 1.5, "ucb_order_k": 11},
                       "sampler": {"dropout_rate": 1.0},
                       "loop": {"batch_size": 0}}"#;
        match ExperimentConfig::from_json_str(text) {
            Err(Error::Config(p)) => {
                let all = p.join("\n");
                assert!(all.contains("policy.epsilon"), "{all}");
                assert!(all.contains("policy.ucb_order_k"), "{all}");
                assert!(all.contains("sampler.dropout_rate"), "{all}");
                assert!(all.contains("loop.batch_size"), "{all}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cross_module_checks() {
        let mut c = ExperimentConfig::default();
        c.sampler.kind = SamplerKind::Bootstrap;
        c.sampler.member_count = 5;
        assert!(c.validate().is_err());
        c.sampler.kind = SamplerKind::Hybrid;
        c.sampler.dropout_rate = 0.0;
        assert!(c.problems().iter().any(|m| m.contains("hybrid")));
        c.sampler.dropout_rate = 0.5;
        c.environment.catalog_dir = Some("x".into());
        assert!(c.problems().iter().any(|m| m.contains("exactly one")));
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let c = ExperimentConfig::default();
        let d = c.with_override("policy.kind", Value::from("thompson")).unwrap();
        assert_eq!(d.policy.kind, PolicyKind::Thompson);
        let d = d.with_override("loop.epochs", Value::from(7)).unwrap();
        assert_eq!(d.run_loop.epochs, 7);
        assert!(c.with_override("policy.nope", Value::from(1)).is_err());
        assert!(c.with_override("policy.kind", Value::from("sideways")).is_err());
    }

    #[test]
    fn round_trip_and_labels() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json_str(&c.to_json_pretty()).unwrap(), c);
        let labels: Vec<String> = table1_cells()
            .into_iter()
            .map(|(p, s)| {
                let mut c = ExperimentConfig::default();
                c.policy.kind = p;
                c.sampler.kind = s;
                c.model_label()
            })
            .collect();
        assert_eq!(
            labels,
            [
                "Random",
                "Greedy",
                "ϵ-greedy",
                "Dropout TS",
                "Dropout UCB",
                "Bootstrap TS",
                "Bootstrap UCB",
                "SGD UCB",
                "Multihead UCB",
                "Multihead SGD UCB",
                "Hybrid TS",
                "Hybrid UCB"
            ]
        );
    }

    #[test]
    fn sampler_shapes() {
        let mut c = ExperimentConfig::default();
        let h = c.sampler_config(20);
        assert_eq!(h.net.layer_sizes, vec![100, 50, 20]);
        assert_eq!(h.net.dropout_placement, DropoutPlacement::SecondToLast);
        c.policy.kind = PolicyKind::Greedy;
        let g = c.sampler_config(20);
        assert_eq!(g.member_count, 1);
        assert!(!g.net.has_dropout());
        c.policy.kind = PolicyKind::Ucb;
        c.sampler.kind = SamplerKind::Bootstrap;
        assert_eq!(
            c.sampler_config(20).data_scheme,
            DataScheme::BernoulliMask { p_keep: 0.5 }
        );
    }
}
