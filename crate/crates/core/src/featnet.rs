//! Time-aware point classifier.
//!
//! Every reference point `x₀` is described by its spatio-temporal
//! neighborhood. Each neighbor contributes `φ(x_t − x₀, t)`, a small MLP
//! applied to the 4-vector `(Δx, Δy, Δz, t)`; the point feature is the
//! channel-wise max over neighbors and a linear head maps it to class
//! logits. Training minimises the confidence-weighted cross-entropy
//! `(1/M) Σ c · CE(ŷ, y)` with minibatch SGD.
//!
//! Checkpoints are the serde JSON form of [`PointModel`]; see `FORMATS.md`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqcloud::Sequence;
use crate::stindex::{self, IndexError, Neighborhood, RadiusFn, SpatioTemporalIndex};

pub const CHECKPOINT_FORMAT: &str = "concord-point-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("empty neighborhood")]
    EmptyNeighborhood,
    #[error("index covers [-{have_past}, {have_future}], model needs [-{past}, {future}]")]
    RangeMismatch {
        past: usize,
        future: usize,
        have_past: usize,
        have_future: usize,
    },
    #[error("confidence {0} outside (0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Fully connected layer, `weights` row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]` for weights and biases.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || rng.gen_range(-bound..=bound);
        let weights = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc);
        }
    }

    fn check(&self) -> Result<(), FeatError> {
        if self.weights.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(FeatError::InvalidModel(format!(
                "layer {}x{} has {} weights and {} biases",
                self.outputs,
                self.inputs,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if !self.weights.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(FeatError::InvalidModel("non-finite parameter".into()));
        }
        Ok(())
    }

    fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Per-neighbor MLP; ReLU after every layer but the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiParams {
    pub layers: Vec<Dense>,
}

impl PhiParams {
    pub fn init(hidden: &[usize], features: usize, rng: &mut impl Rng) -> Self {
        let mut dims = vec![4];
        dims.extend_from_slice(hidden);
        dims.push(features);
        let layers = dims.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn features(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    fn check(&self) -> Result<(), FeatError> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| FeatError::InvalidModel("phi has no layers".into()))?;
        if first.inputs != 4 {
            return Err(FeatError::InvalidModel(format!(
                "phi input width {} != 4",
                first.inputs
            )));
        }
        for w in self.layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(FeatError::InvalidModel("phi layer shapes do not chain".into()));
            }
        }
        self.layers.iter().try_for_each(Dense::check)
    }

    /// φ(input), keeping every layer's activation (post-ReLU for hidden
    /// layers, raw for the last).
    fn forward_trace(&self, input: &[f64; 4], acts: &mut Vec<Vec<f64>>) {
        acts.resize_with(self.layers.len(), Vec::new);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (prev, rest) = acts.split_at_mut(l);
            let x: &[f64] = if l == 0 { input } else { &prev[l - 1] };
            layer.forward(x, &mut rest[0]);
            if l < last {
                rest[0].iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub layer: Dense,
}

impl ClassifierParams {
    pub fn classes(&self) -> usize {
        self.layer.outputs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeEncoding {
    /// Integer frame offset as is.
    #[default]
    Raw,
    /// Offset divided by `horizon`.
    Normalized { horizon: u32 },
}

impl TimeEncoding {
    pub fn encode(&self, t: i32) -> f64 {
        match self {
            TimeEncoding::Raw => f64::from(t),
            TimeEncoding::Normalized { horizon } => f64::from(t) / f64::from((*horizon).max(1)),
        }
    }
}

/// Architecture knobs for [`PointModel::init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub features: usize,
    pub classes: usize,
    pub radius: RadiusFn,
    #[serde(default)]
    pub neighbor_cap: Option<usize>,
    #[serde(default)]
    pub time: TimeEncoding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            features: 32,
            classes: 4,
            radius: RadiusFn::default(),
            neighbor_cap: None,
            time: TimeEncoding::Raw,
        }
    }
}

/// Point classifier over the window `[-past, future]`. Students use
/// `future = 0`; teachers use the same type with a symmetric window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointModel {
    pub format: String,
    pub version: u32,
    pub past: usize,
    pub future: usize,
    pub radius: RadiusFn,
    pub neighbor_cap: Option<usize>,
    pub time: TimeEncoding,
    pub phi: PhiParams,
    pub head: ClassifierParams,
}

impl PointModel {
    pub fn init(past: usize, future: usize, cfg: &ModelConfig, seed: u64) -> Result<Self, FeatError> {
        if cfg.classes < 2 {
            return Err(FeatError::InvalidModel("need at least 2 classes".into()));
        }
        cfg.radius.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = PhiParams::init(&cfg.hidden, cfg.features, &mut rng);
        let head = ClassifierParams {
            layer: Dense::init(cfg.features, cfg.classes, &mut rng),
        };
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            past,
            future,
            radius: cfg.radius,
            neighbor_cap: cfg.neighbor_cap,
            time: cfg.time,
            phi,
            head,
        })
    }

    pub fn validate(&self) -> Result<(), FeatError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(FeatError::InvalidModel(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        self.phi.check()?;
        self.head.layer.check()?;
        if self.head.layer.inputs != self.phi.features() {
            return Err(FeatError::InvalidModel("head width does not match phi".into()));
        }
        if self.head.classes() < 2 {
            return Err(FeatError::InvalidModel("need at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn param_count(&self) -> usize {
        self.phi.layers.iter().map(Dense::len).sum::<usize>() + self.head.layer.len()
    }

    /// Parameters flattened as phi layers (weights, bias) then head.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in self.phi.layers.iter().chain(std::iter::once(&self.head.layer)) {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        for l in self.phi.layers.iter_mut().chain(std::iter::once(&mut self.head.layer)) {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    /// Builds the neighbor index this model expects over an aligned sequence.
    pub fn index(&self, seq: &Sequence) -> Result<SpatioTemporalIndex, FeatError> {
        Ok(stindex::build_index(seq, self.radius)?.with_cap(self.neighbor_cap))
    }

    /// `(Δx, Δy, Δz, t)` rows for every reference point.
    pub fn inputs(&self, seq: &Sequence, index: &SpatioTemporalIndex) -> Result<Vec<Vec<[f64; 4]>>, FeatError> {
        if !index.covers(self.past, self.future) {
            return Err(FeatError::RangeMismatch {
                past: self.past,
                future: self.future,
                have_past: index.past_range(),
                have_future: index.future_range(),
            });
        }
        seq.reference()
            .points
            .iter()
            .map(|p| {
                let n = stindex::neighbors(index, p, self.past, self.future)?;
                Ok(encode_neighborhood(&n, self.time))
            })
            .collect()
    }
}

/// Validated student: a point model that never looks into the future.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentSpec(PointModel);

impl StudentSpec {
    pub fn new(model: PointModel) -> Result<Self, FeatError> {
        if model.future != 0 {
            return Err(FeatError::InvalidModel(format!(
                "student future range must be 0, got {}",
                model.future
            )));
        }
        Ok(Self(model))
    }

    pub fn model(&self) -> &PointModel {
        &self.0
    }

    pub fn into_model(self) -> PointModel {
        self.0
    }
}

impl std::ops::Deref for StudentSpec {
    type Target = PointModel;

    fn deref(&self) -> &PointModel {
        &self.0
    }
}

pub fn encode_neighborhood(n: &Neighborhood, time: TimeEncoding) -> Vec<[f64; 4]> {
    n.members
        .iter()
        .map(|m| [m.relative[0], m.relative[1], m.relative[2], time.encode(m.time_offset)])
        .collect()
}

/// Channel-wise max over neighbors plus the winning neighbor per channel
/// (lowest index on ties).
fn max_pool(phi: &PhiParams, inputs: &[[f64; 4]], acts: &mut Vec<Vec<Vec<f64>>>) -> (Vec<f64>, Vec<usize>) {
    let width = phi.features();
    let last = phi.layers.len() - 1;
    acts.resize_with(inputs.len(), Vec::new);
    let mut h = vec![f64::NEG_INFINITY; width];
    let mut arg = vec![0usize; width];
    for (j, x) in inputs.iter().enumerate() {
        phi.forward_trace(x, &mut acts[j]);
        for (f, &v) in acts[j][last].iter().enumerate() {
            if v > h[f] {
                h[f] = v;
                arg[f] = j;
            }
        }
    }
    (h, arg)
}

/// `h(x₀)`: max over neighbors of `φ(Δ, t)` from pre-encoded rows.
pub fn featurize_inputs(phi: &PhiParams, inputs: &[[f64; 4]]) -> Result<Vec<f64>, FeatError> {
    if inputs.is_empty() {
        return Err(FeatError::EmptyNeighborhood);
    }
    let mut acts = Vec::new();
    Ok(max_pool(phi, inputs, &mut acts).0)
}

pub fn featurize(phi: &PhiParams, nbhd: &Neighborhood, time: TimeEncoding) -> Result<Vec<f64>, FeatError> {
    featurize_inputs(phi, &encode_neighborhood(nbhd, time))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits[k] - lse
}

pub fn logits(model: &PointModel, inputs: &[[f64; 4]]) -> Result<Vec<f64>, FeatError> {
    let h = featurize_inputs(&model.phi, inputs)?;
    let mut z = Vec::new();
    model.head.layer.forward(&h, &mut z);
    Ok(z)
}

pub fn predict_inputs(model: &PointModel, inputs: &[Vec<[f64; 4]>]) -> Result<Vec<Vec<f64>>, FeatError> {
    inputs.iter().map(|x| Ok(softmax(&logits(model, x)?))).collect()
}

/// Class distribution for every point of the reference scan.
pub fn predict(model: &PointModel, seq: &Sequence, index: &SpatioTemporalIndex) -> Result<Vec<Vec<f64>>, FeatError> {
    predict_inputs(model, &model.inputs(seq, index)?)
}

/// `(1/M) Σ c·CE(ŷ, y)` with integer targets standing for one-hot labels.
pub fn weighted_loss(preds: &[Vec<f64>], labels: &[usize], confidences: &[f64], m: usize) -> Result<f64, FeatError> {
    if preds.len() != labels.len() || labels.len() != confidences.len() {
        return Err(FeatError::LengthMismatch(format!(
            "{} predictions, {} labels, {} confidences",
            preds.len(),
            labels.len(),
            confidences.len()
        )));
    }
    if m == 0 {
        return Err(FeatError::LengthMismatch("M = 0".into()));
    }
    let mut total = 0.0;
    for ((p, &y), &c) in preds.iter().zip(labels).zip(confidences) {
        check_confidence(c)?;
        total += c * -p[y].ln();
    }
    Ok(total / m as f64)
}

fn check_confidence(c: f64) -> Result<(), FeatError> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(FeatError::ConfidenceOutOfRange(c));
    }
    Ok(())
}

/// One training point: encoded neighborhood, target class and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSample {
    pub inputs: Vec<[f64; 4]>,
    pub target: usize,
    pub confidence: f64,
}

/// Weighted loss over `batch` (with `M = batch.len()`) and its gradient in
/// [`PointModel::to_flat`] layout.
pub fn gradients(model: &PointModel, batch: &[PointSample]) -> Result<(f64, Vec<f64>), FeatError> {
    gradients_with_m(model, batch, batch.len())
}

pub fn gradients_with_m(model: &PointModel, batch: &[PointSample], m: usize) -> Result<(f64, Vec<f64>), FeatError> {
    if batch.is_empty() {
        return Err(FeatError::EmptyDataset);
    }
    let refs: Vec<&PointSample> = batch.iter().collect();
    batch_gradients(model, &refs, m)
}

/// Offsets of each layer's weights and bias in the flat vector.
struct Layout {
    phi: Vec<(usize, usize)>,
    head: (usize, usize),
}

impl Layout {
    fn of(model: &PointModel) -> Self {
        let mut off = 0;
        let mut phi = Vec::new();
        for l in &model.phi.layers {
            phi.push((off, off + l.weights.len()));
            off += l.len();
        }
        let head = (off, off + model.head.layer.weights.len());
        Self { phi, head }
    }
}

#[derive(Default)]
struct Workspace {
    acts: Vec<Vec<Vec<f64>>>,
    delta: Vec<f64>,
    next: Vec<f64>,
}

/// Adds `scale · ∂CE/∂θ` for one sample into `grad`; returns the sample's
/// `c · CE`.
fn accumulate(
    model: &PointModel,
    layout: &Layout,
    s: &PointSample,
    scale: f64,
    grad: &mut [f64],
    ws: &mut Workspace,
) -> Result<f64, FeatError> {
    if s.inputs.is_empty() {
        return Err(FeatError::EmptyNeighborhood);
    }
    let phi = &model.phi;
    let head = &model.head.layer;
    let (h, arg) = max_pool(phi, &s.inputs, &mut ws.acts);
    let mut z = Vec::with_capacity(head.outputs);
    head.forward(&h, &mut z);
    let ce = -log_softmax_at(&z, s.target);
    let p = softmax(&z);

    // Head.
    let f = head.inputs;
    let mut dh = vec![0.0; f];
    for k in 0..head.outputs {
        let dz = scale * (p[k] - if k == s.target { 1.0 } else { 0.0 });
        if dz == 0.0 {
            continue;
        }
        let (w_off, b_off) = layout.head;
        let row = &head.weights[k * f..(k + 1) * f];
        for i in 0..f {
            grad[w_off + k * f + i] += dz * h[i];
            dh[i] += dz * row[i];
        }
        grad[b_off + k] += dz;
    }

    // Max-pool routes each channel's gradient to its winning neighbor.
    let last = phi.layers.len() - 1;
    let mut routed: Vec<Vec<(usize, f64)>> = vec![Vec::new(); s.inputs.len()];
    for (ch, (&j, &g)) in arg.iter().zip(&dh).enumerate() {
        if g != 0.0 {
            routed[j].push((ch, g));
        }
    }
    for (j, chans) in routed.iter().enumerate() {
        if chans.is_empty() {
            continue;
        }
        ws.delta.clear();
        ws.delta.resize(phi.layers[last].outputs, 0.0);
        for &(ch, g) in chans {
            ws.delta[ch] += g;
        }
        for l in (0..=last).rev() {
            let layer = &phi.layers[l];
            let input: &[f64] = if l == 0 { &s.inputs[j] } else { &ws.acts[j][l - 1] };
            let (w_off, b_off) = layout.phi[l];
            ws.next.clear();
            ws.next.resize(layer.inputs, 0.0);
            for o in 0..layer.outputs {
                let d = ws.delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let g_row = &mut grad[w_off + o * layer.inputs..w_off + (o + 1) * layer.inputs];
                for i in 0..layer.inputs {
                    g_row[i] += d * input[i];
                    ws.next[i] += d * row[i];
                }
                grad[b_off + o] += d;
            }
            if l > 0 {
                // ReLU of the previous layer: pass only where it was active.
                for (n, &a) in ws.next.iter_mut().zip(&ws.acts[j][l - 1]) {
                    if a <= 0.0 {
                        *n = 0.0;
                    }
                }
                std::mem::swap(&mut ws.delta, &mut ws.next);
            }
        }
    }
    Ok(s.confidence * ce)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub momentum: f64,
    /// Anneal the learning rate to zero along a half cosine.
    #[serde(default)]
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            momentum: 0.9,
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FeatError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FeatError::InvalidConfig("learning rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(FeatError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(FeatError::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FeatError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean weighted loss of the minibatches seen in each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Minibatch SGD with momentum. Samples are shuffled per epoch from
/// `cfg.seed`; `M` in the loss is the size of the current batch.
pub fn train(model: &PointModel, data: &[PointSample], cfg: &TrainConfig) -> Result<(PointModel, TrainReport), FeatError> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(FeatError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.to_flat();
    let mut velocity = vec![0.0; params.len()];
    let mut current = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let total_steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &data[i]));
            let (loss, grad) = batch_gradients(&current, &batch, batch.len())?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(FeatError::NonFiniteLoss { epoch, step });
            }
            let lr = if cfg.cosine_decay {
                let progress = steps as f64 / total_steps as f64;
                0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            } else {
                cfg.learning_rate
            };
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - lr * g;
                *p += *v;
            }
            current.set_flat(&params);
            sum += loss;
            batches += 1;
            steps += 1;
        }
        epoch_loss.push(sum / batches as f64);
    }
    Ok((current, TrainReport { epoch_loss, steps }))
}

fn batch_gradients(model: &PointModel, batch: &[&PointSample], m: usize) -> Result<(f64, Vec<f64>), FeatError> {
    if m == 0 {
        return Err(FeatError::EmptyDataset);
    }
    let mut grad = vec![0.0; model.param_count()];
    let layout = Layout::of(model);
    let mut ws = Workspace::default();
    let inv_m = 1.0 / m as f64;
    let mut loss = 0.0;
    for s in batch {
        check_confidence(s.confidence)?;
        if s.target >= model.classes() {
            return Err(FeatError::LengthMismatch(format!(
                "target {} for {} classes",
                s.target,
                model.classes()
            )));
        }
        loss += accumulate(model, &layout, s, s.confidence * inv_m, &mut grad, &mut ws)?;
    }
    Ok((loss * inv_m, grad))
}

/// Fraction of samples whose argmax prediction equals the target.
pub fn accuracy(model: &PointModel, data: &[PointSample]) -> Result<f64, FeatError> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut hits = 0;
    for s in data {
        let z = logits(model, &s.inputs)?;
        if crate::concord::argmax(&z) == s.target {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
