//! Simulated ad-serving environment.
//!
//! A [`Catalog`] holds the full user x ad label matrix plus features; it is
//! either loaded from CSV files or generated from a [`SynthSpec`] whose
//! ground-truth CTRs are kept for regret computation. [`EnvState`] tracks what
//! each user has already been served.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Mode, NetworkConfig, NetworkParams};
use crate::rng::{rng_from, stream, SimRng};

pub use crate::dataio::catalog::load_catalog;

/// Users, ads, the dense binary label matrix and the holdout mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub user_ids: Vec<String>,
    pub ad_ids: Vec<String>,
    pub user_feature_names: Vec<String>,
    pub ad_feature_names: Vec<String>,
    /// Row-major `users x user_dim`.
    pub user_features: Vec<f64>,
    /// Row-major `ads x ad_dim`.
    pub ad_features: Vec<f64>,
    /// Row-major `users x ads`, 0 or 1.
    pub labels: Vec<u8>,
    /// Row-major `users x ads`; true marks a test cell.
    pub holdout: Vec<bool>,
    /// Ground-truth click probabilities (synthetic catalogs only).
    pub truth_ctr: Option<Vec<f64>>,
}

impl Catalog {
    pub fn users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn ads(&self) -> usize {
        self.ad_ids.len()
    }

    pub fn user_dim(&self) -> usize {
        self.user_feature_names.len()
    }

    pub fn ad_dim(&self) -> usize {
        self.ad_feature_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.user_dim() + self.ad_dim()
    }

    fn cell(&self, user: usize, ad: usize) -> usize {
        user * self.ads() + ad
    }

    pub fn label(&self, user: usize, ad: usize) -> u8 {
        self.labels[self.cell(user, ad)]
    }

    pub fn is_holdout(&self, user: usize, ad: usize) -> bool {
        self.holdout[self.cell(user, ad)]
    }

    pub fn truth(&self, user: usize, ad: usize) -> Option<f64> {
        self.truth_ctr.as_ref().map(|t| t[self.cell(user, ad)])
    }

    pub fn user_row(&self, user: usize) -> &[f64] {
        let d = self.user_dim();
        &self.user_features[user * d..(user + 1) * d]
    }

    pub fn ad_row(&self, ad: usize) -> &[f64] {
        let d = self.ad_dim();
        &self.ad_features[ad * d..(ad + 1) * d]
    }

    /// `[user features; ad features]`.
    pub fn context_features(&self, user: usize, ad: usize) -> Result<Vec<f64>> {
        if user >= self.users() {
            return Err(Error::Lookup(format!("unknown user index {user}")));
        }
        if ad >= self.ads() {
            return Err(Error::Lookup(format!("unknown ad index {ad}")));
        }
        let mut v = Vec::with_capacity(self.feature_dim());
        v.extend_from_slice(self.user_row(user));
        v.extend_from_slice(self.ad_row(ad));
        Ok(v)
    }

    /// Mark exactly `h` uniformly chosen ads per user as holdout.
    pub fn split_holdout(mut self, h: usize, seed: u64) -> Result<Self> {
        if h >= self.ads() {
            return Err(Error::config(format!(
                "holdout size {h} must be smaller than the {} ads",
                self.ads()
            )));
        }
        let mut rng = rng_from(seed, &[stream::HOLDOUT]);
        let ads = self.ads();
        self.holdout = vec![false; self.users() * ads];
        for u in 0..self.users() {
            for a in index::sample(&mut rng, ads, h) {
                self.holdout[u * ads + a] = true;
            }
        }
        Ok(self)
    }

    pub fn holdout_cells(&self) -> Vec<(usize, usize)> {
        (0..self.users())
            .flat_map(|u| (0..self.ads()).map(move |a| (u, a)))
            .filter(|&(u, a)| self.is_holdout(u, a))
            .collect()
    }

    pub fn all_cells(&self) -> Vec<(usize, usize)> {
        (0..self.users())
            .flat_map(|u| (0..self.ads()).map(move |a| (u, a)))
            .collect()
    }

    /// Non-holdout ads of `user`.
    pub fn servable_ads(&self, user: usize) -> Vec<usize> {
        (0..self.ads()).filter(|&a| !self.is_holdout(user, a)).collect()
    }

    /// Ids of the `k` servable ads with the highest ground-truth CTR per user.
    pub fn oracle_top_k(&self, k: usize) -> Option<Vec<Vec<usize>>> {
        let truth = self.truth_ctr.as_ref()?;
        Some(
            (0..self.users())
                .map(|u| {
                    let mut ads = self.servable_ads(u);
                    let row = &truth[u * self.ads()..(u + 1) * self.ads()];
                    ads.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                    ads.truncate(k);
                    ads
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (u, a) = (self.users(), self.ads());
        let mut p = Vec::new();
        if self.user_features.len() != u * self.user_dim() {
            p.push("user feature matrix has wrong size".to_string());
        }
        if self.ad_features.len() != a * self.ad_dim() {
            p.push("ad feature matrix has wrong size".to_string());
        }
        if self.labels.len() != u * a || self.holdout.len() != u * a {
            p.push("label or holdout matrix is not users x ads".to_string());
        }
        if self.labels.iter().any(|&l| l > 1) {
            p.push("labels must be binary".to_string());
        }
        if self
            .user_features
            .iter()
            .chain(&self.ad_features)
            .any(|v| !v.is_finite())
        {
            p.push("non-finite feature value".to_string());
        }
        if let Some(t) = &self.truth_ctr {
            if t.len() != u * a || t.iter().any(|c| !(*c > 0.0 && *c < 1.0)) {
                p.push("ground-truth CTRs must be users x ads values in (0, 1)".to_string());
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Integrity(p.join("; ")))
        }
    }
}

/// Expected CTR of uniformly random slates: the mean label over non-holdout cells.
pub fn random_policy_ctr(catalog: &Catalog) -> f64 {
    let (sum, n) = catalog
        .labels
        .iter()
        .zip(&catalog.holdout)
        .filter(|(_, &h)| !h)
        .fold((0u64, 0u64), |(s, n), (&l, _)| (s + l as u64, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

/// Recipe for a synthetic catalog with a known ground-truth CTR function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub users: usize,
    pub ads: usize,
    pub user_dim: usize,
    pub ad_dim: usize,
    /// Hidden width of the random ground-truth network.
    pub truth_hidden: usize,
    /// Standard deviation of the ground-truth logits before calibration.
    pub logit_scale: f64,
    /// Target mean CTR; a constant logit shift is solved to hit it.
    pub base_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 120,
            ads: 300,
            user_dim: 5,
            ad_dim: 5,
            truth_hidden: 16,
            logit_scale: 4.0,
            base_rate: 0.2,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [
            ("users", self.users),
            ("ads", self.ads),
            ("user_dim", self.user_dim),
            ("ad_dim", self.ad_dim),
            ("truth_hidden", self.truth_hidden),
        ] {
            if v == 0 {
                p.push(format!("synthetic.{name} must be >= 1"));
            }
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            p.push(format!("synthetic.base_rate must be in (0, 1), got {}", self.base_rate));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale >= 0.0) {
            p.push(format!("synthetic.logit_scale must be >= 0, got {}", self.logit_scale));
        }
        p
    }
}

fn min_max_columns(m: &mut [f64], cols: usize) {
    if m.is_empty() {
        return;
    }
    for c in 0..cols {
        let col = m.iter().skip(c).step_by(cols);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        for v in m.iter_mut().skip(c).step_by(cols) {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
    }
}

/// Shift `s` such that the mean of `sigmoid(logit + s)` equals `target`.
fn calibration_shift(logits: &[f64], target: f64) -> f64 {
    let mean_at = |s: f64| logits.iter().map(|&z| sigmoid(z + s)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generate a synthetic catalog: min-max scaled uniform features, ground-truth
/// `CTR = sigmoid(truth_net(features) + shift)`, labels drawn once and frozen.
pub fn synth_generate(spec: &SynthSpec) -> Result<Catalog> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rng = rng_from(spec.seed, &[stream::ENV]);
    let mut user_features: Vec<f64> = (0..spec.users * spec.user_dim).map(|_| rng.random()).collect();
    let mut ad_features: Vec<f64> = (0..spec.ads * spec.ad_dim).map(|_| rng.random()).collect();
    min_max_columns(&mut user_features, spec.user_dim);
    min_max_columns(&mut ad_features, spec.ad_dim);

    let truth_net = NetworkParams::init(
        NetworkConfig::plain(spec.user_dim + spec.ad_dim, vec![spec.truth_hidden]),
        crate::rng::derive_seed(spec.seed, &[stream::MEMBER_INIT]),
    )?;
    let mut logits = Vec::with_capacity(spec.users * spec.ads);
    let mut x = Vec::with_capacity(spec.user_dim + spec.ad_dim);
    for u in 0..spec.users {
        for a in 0..spec.ads {
            x.clear();
            x.extend_from_slice(&user_features[u * spec.user_dim..(u + 1) * spec.user_dim]);
            x.extend_from_slice(&ad_features[a * spec.ad_dim..(a + 1) * spec.ad_dim]);
            logits.push(truth_net.forward_logits(&x, Mode::Deterministic)?[0]);
        }
    }
    let n = logits.len() as f64;
    let mean = logits.iter().sum::<f64>() / n;
    let sd = (logits.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n).sqrt();
    let gain = if sd > 0.0 { spec.logit_scale / sd } else { 0.0 };
    for z in &mut logits {
        *z = (*z - mean) * gain;
    }
    let shift = calibration_shift(&logits, spec.base_rate);
    let truth: Vec<f64> = logits
        .iter()
        .map(|&z| sigmoid(z + shift).clamp(1e-9, 1.0 - 1e-9))
        .collect();
    let labels: Vec<u8> = truth.iter().map(|&p| (rng.random::<f64>() < p) as u8).collect();

    let catalog = Catalog {
        user_ids: (0..spec.users).map(|u| format!("u{u}")).collect(),
        ad_ids: (0..spec.ads).map(|a| format!("a{a}")).collect(),
        user_feature_names: (0..spec.user_dim).map(|j| format!("n_u{j}")).collect(),
        ad_feature_names: (0..spec.ad_dim).map(|j| format!("n_a{j}")).collect(),
        user_features,
        ad_features,
        holdout: vec![false; labels.len()],
        labels,
        truth_ctr: Some(truth),
    };
    catalog.validate()?;
    Ok(catalog)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Replay the stored label matrix.
    #[default]
    Frozen,
    /// Draw a fresh Bernoulli(truth CTR) per impression (synthetic only).
    Resample,
}

/// Per-run serving state over an immutable catalog.
#[derive(Debug, Clone)]
pub struct EnvState<'c> {
    catalog: &'c Catalog,
    shown: Vec<Vec<bool>>,
    rng: SimRng,
    round: u64,
    label_mode: LabelMode,
    exclude_shown: bool,
}

impl<'c> EnvState<'c> {
    pub fn new(catalog: &'c Catalog, label_mode: LabelMode, exclude_shown: bool, seed: u64) -> Result<Self> {
        if label_mode == LabelMode::Resample && catalog.truth_ctr.is_none() {
            return Err(Error::Unsupported(
                "resampled labels need a catalog with ground-truth CTRs".into(),
            ));
        }
        Ok(Self {
            catalog,
            shown: vec![vec![false; catalog.ads()]; catalog.users()],
            rng: rng_from(seed, &[stream::ENV]),
            round: 0,
            label_mode,
            exclude_shown,
        })
    }

    pub fn catalog(&self) -> &'c Catalog {
        self.catalog
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn shown_count(&self, user: usize) -> usize {
        self.shown[user].iter().filter(|&&s| s).count()
    }

    /// Ads that may be served to `user` now: not held out and, when
    /// re-exposure exclusion is on, not already shown.
    pub fn eligible_ads(&self, user: usize) -> Vec<usize> {
        (0..self.catalog.ads())
            .filter(|&a| !self.catalog.is_holdout(user, a) && !(self.exclude_shown && self.shown[user][a]))
            .collect()
    }

    /// Serve `slate` to `user` and return one label per ad.
    pub fn step(&mut self, user: usize, slate: &[usize]) -> Result<Vec<u8>> {
        if user >= self.catalog.users() {
            return Err(Error::Lookup(format!("unknown user index {user}")));
        }
        for (i, &a) in slate.iter().enumerate() {
            if a >= self.catalog.ads() {
                return Err(Error::Lookup(format!("unknown ad index {a}")));
            }
            if self.catalog.is_holdout(user, a) {
                return Err(Error::Contract(format!("ad {a} is held out for user {user}")));
            }
            if self.exclude_shown && self.shown[user][a] {
                return Err(Error::Contract(format!("ad {a} was already shown to user {user}")));
            }
            if slate[..i].contains(&a) {
                return Err(Error::Contract(format!("ad {a} appears twice in the slate")));
            }
        }
        let labels = slate
            .iter()
            .map(|&a| match self.label_mode {
                LabelMode::Frozen => self.catalog.label(user, a),
                LabelMode::Resample => {
                    let p = self.catalog.truth(user, a).expect("checked at construction");
                    (self.rng.random::<f64>() < p) as u8
                }
            })
            .collect();
        for &a in slate {
            self.shown[user][a] = true;
        }
        self.round += 1;
        Ok(labels)
    }
}
