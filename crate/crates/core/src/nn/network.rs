use rand::distr::{Distribution, Uniform};
use rand::{Rng, RngCore};

use super::config::NetworkConfig;
use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::rng::{rng_from, SimRng};

/// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(z)` against `y`, computed from the logit.
#[inline]
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn weights<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.w..self.w + self.fan_in * self.fan_out]
    }

    fn biases<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.b..self.b + self.fan_out]
    }

    fn affine(&self, v: &[f64], x: &[f64], out: &mut Vec<f64>) {
        let w = self.weights(v);
        out.clear();
        out.extend(
            self.biases(v)
                .iter()
                .zip(w.chunks_exact(self.fan_in))
                .map(|(b, row)| b + dot(row, x)),
        );
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn build_layout(config: &NetworkConfig) -> Vec<Dense> {
    let mut layout = Vec::with_capacity(config.layer_sizes.len() + 1);
    let mut offset = 0;
    let mut prev = config.input_dim;
    for &width in config.layer_sizes.iter().chain(std::iter::once(&config.head_count)) {
        let w = offset;
        let b = w + prev * width;
        offset = b + width;
        layout.push(Dense {
            fan_in: prev,
            fan_out: width,
            w,
            b,
        });
        prev = width;
    }
    layout
}

/// How a forward pass treats dropout units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout disabled; raw activations.
    Deterministic,
    /// One Bernoulli keep-mask per dropout unit drawn from the given seed.
    Mc(u64),
}

/// Per-hidden-layer dropout scale vectors for one example. A layer without
/// dropout has an empty vector; otherwise entries are `0` or `1 / (1 - p)`.
pub type LayerMasks = Vec<Vec<f64>>;

/// Where training-time dropout masks come from.
pub enum MaskSource<'a> {
    Off,
    Random(&'a mut dyn RngCore),
    /// One `LayerMasks` per example of the batch.
    Fixed(&'a [LayerMasks]),
}

/// A labelled training example borrowed from the caller.
pub type Example<'a> = (&'a [f64], f64);

/// Parameters of one feed-forward CTR network.
///
/// All weights and biases live in one flat vector, in layer order: for each
/// hidden layer the row-major `(out, in)` weight matrix then the bias vector,
/// followed by the head weights (one row per head) and head biases.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    config: NetworkConfig,
    values: Vec<f64>,
    step_count: u64,
    layout: Vec<Dense>,
}

struct Workspace {
    pre: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
    scales: Vec<Vec<f64>>,
    logits: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn new(layers: usize) -> Self {
        Self {
            pre: vec![Vec::new(); layers],
            acts: vec![Vec::new(); layers],
            scales: vec![Vec::new(); layers],
            logits: Vec::new(),
            delta: Vec::new(),
            delta_prev: Vec::new(),
        }
    }
}

impl NetworkParams {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        let mut values = vec![0.0; config.param_count()];
        let mut rng = rng_from(seed, &[]);
        for d in &layout {
            let bound = glorot_bound(d.fan_in, d.fan_out);
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for w in &mut values[d.w..d.w + d.fan_in * d.fan_out] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(Self {
            config,
            values,
            step_count: 0,
            layout,
        })
    }

    pub fn from_parts(config: NetworkConfig, values: Vec<f64>, step_count: u64) -> Result<Self> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters for config, got {}",
                config.param_count(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        let layout = build_layout(&config);
        Ok(Self {
            config,
            values,
            step_count,
            layout,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for tests and direct parameter surgery.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn hidden(&self) -> &[Dense] {
        &self.layout[..self.layout.len() - 1]
    }

    fn head_layer(&self) -> &Dense {
        self.layout.last().expect("layout always has a head")
    }

    /// (weight slice, bias slice) ranges of layer `k`; `k == hidden count` is the head.
    pub fn layer_ranges(&self, k: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let d = &self.layout[k];
        (d.w..d.w + d.fan_in * d.fan_out, d.b..d.b + d.fan_out)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.config.input_dim
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite feature value".into()));
        }
        Ok(())
    }

    fn check_head(&self, head: Option<usize>) -> Result<()> {
        match head {
            Some(h) if h >= self.config.head_count => Err(Error::Shape(format!(
                "head {h} out of range for {} heads",
                self.config.head_count
            ))),
            _ => Ok(()),
        }
    }

    /// Draw a fresh set of dropout scale vectors.
    pub fn sample_masks<R: Rng + ?Sized>(&self, rng: &mut R) -> LayerMasks {
        (0..self.config.layer_sizes.len())
            .map(|k| {
                if self.config.dropout_on(k) {
                    let mut m = vec![1.0; self.config.layer_sizes[k]];
                    self.apply_dropout(&mut m, rng);
                    m
                } else {
                    Vec::new()
                }
            })
            .collect()
    }

    fn apply_dropout<R: Rng + ?Sized>(&self, units: &mut [f64], rng: &mut R) {
        let p = self.config.dropout_rate;
        let scale = 1.0 / (1.0 - p);
        for u in units {
            if rng.random::<f64>() < p {
                *u = 0.0;
            } else {
                *u *= scale;
            }
        }
    }

    /// Hidden layers `0..upto`, applying dropout through `rng` when given.
    fn propagate(&self, input: &[f64], upto: usize, mut rng: Option<&mut SimRng>) -> Vec<f64> {
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for (k, d) in self.hidden()[..upto].iter().enumerate() {
            d.affine(&self.values, &cur, &mut next);
            for v in next.iter_mut() {
                *v = v.max(0.0);
            }
            if let Some(r) = rng.as_deref_mut() {
                if self.config.dropout_on(k) {
                    self.apply_dropout(&mut next, r);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    fn head_logits(&self, top: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        self.head_layer().affine(&self.values, top, &mut out);
        out
    }

    fn combine_heads(&self, logits: &[f64], head: Option<usize>) -> f64 {
        match head {
            Some(h) => sigmoid(logits[h]),
            None => logits.iter().map(|&z| sigmoid(z)).sum::<f64>() / logits.len() as f64,
        }
    }

    /// Per-head pre-sigmoid outputs.
    pub fn forward_logits(&self, input: &[f64], mode: Mode) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let top = match mode {
            Mode::Deterministic => self.propagate(input, self.hidden().len(), None),
            Mode::Mc(seed) => {
                let mut rng = rng_from(seed, &[]);
                self.propagate(input, self.hidden().len(), Some(&mut rng))
            }
        };
        Ok(self.head_logits(&top))
    }

    /// Predicted CTR; `head = None` averages the heads' probabilities.
    pub fn forward(&self, input: &[f64], mode: Mode, head: Option<usize>) -> Result<f64> {
        self.check_head(head)?;
        let logits = self.forward_logits(input, mode)?;
        Ok(self.combine_heads(&logits, head))
    }

    /// Monte-Carlo forward drawing masks directly from `rng`.
    pub(crate) fn forward_mc_with(&self, input: &[f64], rng: &mut SimRng, head: Option<usize>) -> f64 {
        let top = self.propagate(input, self.hidden().len(), Some(rng));
        self.combine_heads(&self.head_logits(&top), head)
    }

    /// Deterministic forward with inputs already validated.
    pub(crate) fn forward_unchecked(&self, input: &[f64], head: Option<usize>) -> f64 {
        let top = self.propagate(input, self.hidden().len(), None);
        self.combine_heads(&self.head_logits(&top), head)
    }

    /// Output of every hidden layer with dropout off: the representation that
    /// enters the top dropout layer. Only meaningful when no layer below the
    /// top one carries dropout.
    pub fn shared_features(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        if (0..self.hidden().len().saturating_sub(1)).any(|k| self.config.dropout_on(k)) {
            return Err(Error::Usage(
                "shared features require dropout only on the top hidden layer".into(),
            ));
        }
        Ok(self.propagate(input, self.hidden().len(), None))
    }

    /// Apply the top dropout layer (if any) and the heads to precomputed shared features.
    pub fn head_from_shared(&self, shared: &[f64], rng: Option<&mut SimRng>, head: Option<usize>) -> f64 {
        let last = self.hidden().len();
        match rng {
            Some(r) if last > 0 && self.config.dropout_on(last - 1) => {
                let mut dropped = shared.to_vec();
                self.apply_dropout(&mut dropped, r);
                self.combine_heads(&self.head_logits(&dropped), head)
            }
            _ => self.combine_heads(&self.head_logits(shared), head),
        }
    }

    fn check_batch(&self, batch: &[Example<'_>], head_masks: Option<&[Vec<bool>]>) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Usage("empty training batch".into()));
        }
        for (x, y) in batch {
            self.check_input(x)?;
            if *y != 0.0 && *y != 1.0 {
                return Err(Error::Input(format!("label {y} is not binary")));
            }
        }
        if let Some(hm) = head_masks {
            if hm.len() != batch.len() {
                return Err(Error::Shape(format!(
                    "{} head masks for a batch of {}",
                    hm.len(),
                    batch.len()
                )));
            }
            if let Some(m) = hm.iter().find(|m| m.len() != self.config.head_count) {
                return Err(Error::Shape(format!(
                    "head mask of length {}, network has {} heads",
                    m.len(),
                    self.config.head_count
                )));
            }
        }
        Ok(())
    }

    /// Mean binary cross-entropy over (example, assigned head) pairs and its
    /// gradient with respect to every parameter.
    pub fn loss_and_gradient(
        &self,
        batch: &[Example<'_>],
        head_masks: Option<&[Vec<bool>]>,
        mut masks: MaskSource<'_>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_batch(batch, head_masks)?;
        if let MaskSource::Fixed(m) = &masks {
            if m.len() != batch.len() {
                return Err(Error::Shape("one mask set per example required".into()));
            }
        }
        let pairs: usize = match head_masks {
            Some(hm) => hm.iter().map(|m| m.iter().filter(|&&b| b).count()).sum(),
            None => batch.len() * self.config.head_count,
        };
        if pairs == 0 {
            return Err(Error::Usage("no (example, head) pairs in batch".into()));
        }
        let inv = 1.0 / pairs as f64;
        let mut grad = vec![0.0; self.values.len()];
        let mut ws = Workspace::new(self.hidden().len());
        let mut loss = 0.0;
        for (i, (x, y)) in batch.iter().enumerate() {
            let heads = head_masks.map(|hm| hm[i].as_slice());
            if let Some(h) = heads {
                if !h.iter().any(|&b| b) {
                    continue;
                }
            }
            let (fixed, rng): (Option<&LayerMasks>, Option<&mut dyn RngCore>) = match &mut masks {
                MaskSource::Off => (None, None),
                MaskSource::Random(r) => (None, Some(&mut **r as &mut dyn RngCore)),
                MaskSource::Fixed(m) => (Some(&m[i]), None),
            };
            loss += self.accumulate(x, *y, heads, fixed, rng, inv, &mut grad, &mut ws);
        }
        Ok((loss * inv, grad))
    }

    #[allow(clippy::too_many_arguments)]
    fn accumulate(
        &self,
        x: &[f64],
        y: f64,
        heads: Option<&[bool]>,
        fixed: Option<&LayerMasks>,
        mut rng: Option<&mut dyn RngCore>,
        inv: f64,
        grad: &mut [f64],
        ws: &mut Workspace,
    ) -> f64 {
        let hidden = self.hidden();
        let v = &self.values;

        for (k, d) in hidden.iter().enumerate() {
            let input: &[f64] = if k == 0 { x } else { &ws.acts[k - 1] };
            let mut pre = std::mem::take(&mut ws.pre[k]);
            d.affine(v, input, &mut pre);
            let scales = &mut ws.scales[k];
            scales.clear();
            if self.config.dropout_on(k) {
                match (fixed, rng.as_deref_mut()) {
                    (Some(m), _) => scales.extend_from_slice(&m[k]),
                    (None, Some(r)) => {
                        scales.resize(d.fan_out, 1.0);
                        self.apply_dropout(scales, r);
                    }
                    (None, None) => scales.resize(d.fan_out, 1.0),
                }
            } else {
                scales.resize(d.fan_out, 1.0);
            }
            let acts = &mut ws.acts[k];
            acts.clear();
            acts.extend(pre.iter().zip(scales.iter()).map(|(z, s)| z.max(0.0) * s));
            ws.pre[k] = pre;
        }

        let head = self.head_layer();
        let top: &[f64] = if hidden.is_empty() { x } else { &ws.acts[hidden.len() - 1] };
        head.affine(v, top, &mut ws.logits);

        let mut loss = 0.0;
        ws.delta.clear();
        ws.delta.resize(head.fan_in, 0.0);
        let hw = head.weights(v);
        for (h, &z) in ws.logits.iter().enumerate() {
            if heads.is_some_and(|m| !m[h]) {
                continue;
            }
            loss += bce_from_logit(z, y);
            let dz = (sigmoid(z) - y) * inv;
            let row = h * head.fan_in;
            for (j, &a) in top.iter().enumerate() {
                grad[head.w + row + j] += dz * a;
                ws.delta[j] += dz * hw[row + j];
            }
            grad[head.b + h] += dz;
        }

        for k in (0..hidden.len()).rev() {
            let d = &hidden[k];
            // delta: dL/d(acts[k]) -> dL/d(pre[k])
            for ((dl, z), s) in ws.delta.iter_mut().zip(&ws.pre[k]).zip(&ws.scales[k]) {
                *dl = if *z > 0.0 { *dl * s } else { 0.0 };
            }
            let input: &[f64] = if k == 0 { x } else { &ws.acts[k - 1] };
            let w = d.weights(v);
            if k > 0 {
                ws.delta_prev.clear();
                ws.delta_prev.resize(d.fan_in, 0.0);
            }
            for (o, &dz) in ws.delta.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                let row = o * d.fan_in;
                let g = &mut grad[d.w + row..d.w + row + d.fan_in];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += dz * xi;
                }
                grad[d.b + o] += dz;
                if k > 0 {
                    for (dp, wi) in ws.delta_prev.iter_mut().zip(&w[row..row + d.fan_in]) {
                        *dp += dz * wi;
                    }
                }
            }
            if k > 0 {
                std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
            }
        }
        loss
    }

    /// One optimizer update on `batch`; returns the mean loss before the update.
    pub fn train_step(
        &mut self,
        optimizer: &mut OptimizerState,
        batch: &[Example<'_>],
        head_masks: Option<&[Vec<bool>]>,
        masks: MaskSource<'_>,
    ) -> Result<f64> {
        let (loss, grad) = self.loss_and_gradient(batch, head_masks, masks)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at step {} (batch of {}, learning rate {})",
                self.step_count,
                batch.len(),
                optimizer.current_learning_rate()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {i} at step {}",
                self.step_count
            )));
        }
        if optimizer.config.kind == super::OptimizerKind::Rmsprop
            && optimizer.rmsprop_avg.len() != self.values.len()
        {
            return Err(Error::Shape("optimizer state does not match network".into()));
        }
        optimizer.apply(&mut self.values, &grad);
        self.step_count += 1;
        if self.values.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!(
                "parameters diverged at step {} (learning rate {})",
                self.step_count,
                optimizer.current_learning_rate()
            )));
        }
        Ok(loss)
    }
}
