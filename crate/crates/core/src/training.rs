//! Linear / one-hidden-layer classifiers trained with minibatch SGD, and the
//! two decoupled second stages: classifier retraining (cRT) and learnable
//! weight scaling (LWS).
//!
//! Gradients are backpropagated by hand from the analytic logit gradients of
//! [`crate::losses`]. Every sum runs in a fixed order, so a run is a
//! deterministic function of its inputs and seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::balanced_accuracy;
use crate::losses::{predict, ClassCounts, LossSpec, PreparedLoss};
use crate::numerics::{Matrix, Rng, Stream};
use crate::sampling::{epoch_indices, SamplerPlan};

/// Dense layer computing `W x + b`; `weights` is `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self {
            weights: Matrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

/// Model parameters: layers with ReLU between them, plus optional positive
/// per-class logit scales (LWS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lws_scales: Option<Vec<f64>>,
}

impl ModelParams {
    pub fn new(layers: Vec<Layer>, lws_scales: Option<Vec<f64>>) -> Result<Self> {
        let p = Self { layers, lws_scales };
        p.validate()?;
        Ok(p)
    }

    /// Fan-in scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// zero biases.
    pub fn init(input_dim: usize, hidden_dim: Option<usize>, k: usize, rng: &mut Rng) -> Self {
        let mut dims = vec![input_dim];
        dims.extend(hidden_dim);
        dims.push(k);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..out * fan_in)
                    .map(|_| rng.uniform_range(-bound, bound))
                    .collect();
                Layer {
                    weights: Matrix::new(out, fan_in, data).expect("finite init"),
                    bias: vec![0.0; out],
                }
            })
            .collect();
        Self {
            layers,
            lws_scales: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::dims("model has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::dims(format!("layer {i}: bias length mismatch")));
            }
            if l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("bias"));
            }
            if i > 0 && self.layers[i - 1].outputs() != l.inputs() {
                return Err(Error::dims(format!(
                    "layer {i} does not chain with layer {}",
                    i - 1
                )));
            }
        }
        if let Some(s) = &self.lws_scales {
            if s.len() != self.num_classes() {
                return Err(Error::dims("lws scale count differs from class count"));
            }
            if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::param("lws scales must be positive"));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, Layer::outputs)
    }

    pub fn is_linear(&self) -> bool {
        self.layers.len() == 1
    }
}

/// Gradient with the same shape as [`ModelParams`]; the LWS entry is with
/// respect to the log-scales.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
    pub log_scales: Option<Vec<f64>>,
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    FinalLayer,
    LwsScales,
}

fn forward_sample(params: &ModelParams, x: &[f64], acts: &mut Vec<Vec<f64>>) {
    acts.clear();
    acts.push(x.to_vec());
    let last = params.layers.len() - 1;
    for (li, layer) in params.layers.iter().enumerate() {
        let input = &acts[li];
        let mut out = Vec::with_capacity(layer.outputs());
        for o in 0..layer.outputs() {
            let mut acc = layer.bias[o];
            for (w, a) in layer.weights.row(o).iter().zip(input) {
                acc += w * a;
            }
            out.push(if li < last { acc.max(0.0) } else { acc });
        }
        acts.push(out);
    }
}

fn scaled_logits(params: &ModelParams, unscaled: &[f64]) -> Vec<f64> {
    match &params.lws_scales {
        Some(s) => unscaled.iter().zip(s).map(|(z, s)| z * s).collect(),
        None => unscaled.to_vec(),
    }
}

/// Logits for every row: `W x + b` (linear) or `W2 relu(W1 x + b1) + b2`,
/// times the LWS scales when present.
pub fn forward_logits(params: &ModelParams, features: &Matrix) -> Result<Matrix> {
    params.validate()?;
    if features.cols() != params.input_dim() {
        return Err(Error::dims(format!(
            "features have {} columns, model expects {}",
            features.cols(),
            params.input_dim()
        )));
    }
    let k = params.num_classes();
    let mut acts = Vec::new();
    let mut data = Vec::with_capacity(features.rows() * k);
    for i in 0..features.rows() {
        forward_sample(params, features.row(i), &mut acts);
        data.extend(scaled_logits(params, acts.last().expect("output layer")));
    }
    Matrix::new(features.rows(), k, data)
}

/// Mean loss over `rows` and its gradient.
fn batch_gradient(
    params: &ModelParams,
    features: &Matrix,
    labels: &[usize],
    rows: &[usize],
    loss: &PreparedLoss,
    trainable: Trainable,
) -> Result<(f64, Gradients)> {
    let k = params.num_classes();
    let n_layers = params.layers.len();
    let mut grads = Gradients {
        layers: params.layers.iter().map(Layer::zeros_like).collect(),
        log_scales: params.lws_scales.as_ref().map(|s| vec![0.0; s.len()]),
    };
    let first_layer = match trainable {
        Trainable::All => 0,
        Trainable::FinalLayer => n_layers - 1,
        Trainable::LwsScales => n_layers,
    };
    let mut acts = Vec::new();
    let mut dlogits = vec![0.0; k];
    let mut total = 0.0;
    for &r in rows {
        forward_sample(params, features.row(r), &mut acts);
        let z = acts.last().expect("output layer");
        let logits = scaled_logits(params, z);
        total += loss.loss_and_grad(&logits, labels[r], &mut dlogits)?;

        let mut delta = dlogits.clone();
        if let Some(s) = &params.lws_scales {
            let gls = grads.log_scales.as_mut().expect("scales present");
            for j in 0..k {
                gls[j] += delta[j] * z[j] * s[j];
                delta[j] *= s[j];
            }
        }
        for li in (first_layer..n_layers).rev() {
            let layer = &params.layers[li];
            let input = &acts[li];
            let g = &mut grads.layers[li];
            for (o, d) in delta.iter().enumerate() {
                let row = g.weights.row_mut(o);
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
                g.bias[o] += d;
            }
            if li == first_layer {
                break;
            }
            let mut next = vec![0.0; layer.inputs()];
            for (o, d) in delta.iter().enumerate() {
                for (nx, w) in next.iter_mut().zip(layer.weights.row(o)) {
                    *nx += w * d;
                }
            }
            for (nx, a) in next.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *nx = 0.0;
                }
            }
            delta = next;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    for g in &mut grads.layers {
        g.weights.data_mut().iter_mut().for_each(|v| *v *= inv);
        g.bias.iter_mut().for_each(|v| *v *= inv);
    }
    if let Some(gls) = &mut grads.log_scales {
        gls.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((total * inv, grads))
}

/// Mean loss over a dataset and its gradient with respect to every
/// parameter (log-scales for LWS).
pub fn loss_and_gradient(
    params: &ModelParams,
    features: &Matrix,
    labels: &[usize],
    loss: &PreparedLoss,
) -> Result<(f64, Gradients)> {
    check_inputs(params, features, labels, loss)?;
    let rows: Vec<usize> = (0..labels.len()).collect();
    batch_gradient(params, features, labels, &rows, loss, Trainable::All)
}

pub fn mean_loss(
    params: &ModelParams,
    features: &Matrix,
    labels: &[usize],
    loss: &PreparedLoss,
) -> Result<f64> {
    Ok(per_sample_losses(params, features, labels, loss)?
        .iter()
        .sum::<f64>()
        / labels.len() as f64)
}

pub fn per_sample_losses(
    params: &ModelParams,
    features: &Matrix,
    labels: &[usize],
    loss: &PreparedLoss,
) -> Result<Vec<f64>> {
    check_inputs(params, features, labels, loss)?;
    let logits = forward_logits(params, features)?;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| loss.loss(logits.row(i), y))
        .collect()
}

fn check_inputs(
    params: &ModelParams,
    features: &Matrix,
    labels: &[usize],
    loss: &PreparedLoss,
) -> Result<()> {
    params.validate()?;
    if features.rows() != labels.len() || labels.is_empty() {
        return Err(Error::dims("features and labels disagree or are empty"));
    }
    if features.cols() != params.input_dim() {
        return Err(Error::dims("feature width differs from model input"));
    }
    if loss.k() != params.num_classes() {
        return Err(Error::dims("loss and model disagree on class count"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` at each milestone epoch.
    Step {
        milestones: Vec<usize>,
        factor: f64,
    },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                base * factor.powi(passed as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Hidden width of a one-hidden-layer model; absent means linear.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default = "constant_schedule")]
    pub lr_schedule: LrSchedule,
}

fn constant_schedule() -> LrSchedule {
    LrSchedule::Constant
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            hidden_dim: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    /// Stage-1 runs need at least one epoch; decoupled stage-2 runs accept 0.
    pub fn validate(&self, allow_zero_epochs: bool) -> Result<()> {
        if self.epochs == 0 && !allow_zero_epochs {
            return Err(Error::param("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::param("weight_decay must be >= 0"));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::param("hidden_dim must be >= 1"));
        }
        if let LrSchedule::Step { factor, .. } = &self.lr_schedule {
            if !(factor.is_finite() && *factor > 0.0) {
                return Err(Error::param("lr step factor must be positive"));
            }
        }
        Ok(())
    }

    /// Second-stage config with half the epochs (at least 1).
    pub fn stage2_default(&self) -> Self {
        Self {
            epochs: (self.epochs / 2).max(1),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean per-sample training loss of each epoch.
    pub epoch_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced_val_accuracy: Option<Vec<f64>>,
}

/// Optional knobs for [`train_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainExtras<'a> {
    /// Counts bound into the loss instead of the dataset's own.
    pub counts: Option<&'a ClassCounts>,
    /// Evaluated (balanced accuracy) after every epoch.
    pub validation: Option<&'a Dataset>,
}

pub fn train(
    dataset: &Dataset,
    loss: &LossSpec,
    sampler: &SamplerPlan,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainTrace)> {
    train_with(dataset, loss, sampler, config, TrainExtras::default())
}

pub fn train_with(
    dataset: &Dataset,
    loss: &LossSpec,
    sampler: &SamplerPlan,
    config: &TrainConfig,
    extras: TrainExtras<'_>,
) -> Result<(ModelParams, TrainTrace)> {
    config.validate(false)?;
    let mut init_rng = Rng::substream(config.seed, Stream::Init);
    let params = ModelParams::init(dataset.dim(), config.hidden_dim, dataset.k(), &mut init_rng);
    let mut sgd = Sgd::new(params, Trainable::All);
    let trace = run_epochs(
        &mut sgd,
        dataset,
        loss,
        sampler,
        config,
        Stream::Shuffle,
        extras,
    )?;
    Ok((sgd.params, trace))
}

/// Freezes every layer but the last and retrains that layer with
/// class-balanced sampling. The final layer is not re-initialized, so zero
/// epochs leave the model unchanged. A linear model has no backbone and is
/// rejected unless `allow_linear` is set.
pub fn crt_retrain(
    stage1: &ModelParams,
    dataset: &Dataset,
    loss: &LossSpec,
    config: &TrainConfig,
    allow_linear: bool,
) -> Result<(ModelParams, TrainTrace)> {
    stage2(
        stage1,
        dataset,
        loss,
        config,
        allow_linear,
        Trainable::FinalLayer,
    )
}

/// Freezes every stage-1 weight and learns one positive scale per class
/// logit (initialized to 1, optimized in log space) with class-balanced
/// sampling.
pub fn lws_retrain(
    stage1: &ModelParams,
    dataset: &Dataset,
    loss: &LossSpec,
    config: &TrainConfig,
    allow_linear: bool,
) -> Result<(ModelParams, TrainTrace)> {
    let mut start = stage1.clone();
    start.lws_scales = Some(vec![1.0; stage1.num_classes()]);
    stage2(
        &start,
        dataset,
        loss,
        config,
        allow_linear,
        Trainable::LwsScales,
    )
}

fn stage2(
    start: &ModelParams,
    dataset: &Dataset,
    loss: &LossSpec,
    config: &TrainConfig,
    allow_linear: bool,
    trainable: Trainable,
) -> Result<(ModelParams, TrainTrace)> {
    config.validate(true)?;
    start.validate()?;
    if start.is_linear() && !allow_linear {
        return Err(Error::NoBackbone);
    }
    if start.input_dim() != dataset.dim() || start.num_classes() != dataset.k() {
        return Err(Error::dims("stage-1 model does not match dataset shape"));
    }
    let mut sgd = Sgd::new(start.clone(), trainable);
    let trace = run_epochs(
        &mut sgd,
        dataset,
        loss,
        &SamplerPlan::class_balanced(),
        config,
        Stream::Stage2Shuffle,
        TrainExtras::default(),
    )?;
    Ok((sgd.params, trace))
}

/// SGD with momentum over the trainable subset of a model.
struct Sgd {
    params: ModelParams,
    trainable: Trainable,
    velocity: Gradients,
    log_scales: Option<Vec<f64>>,
}

impl Sgd {
    fn new(params: ModelParams, trainable: Trainable) -> Self {
        let velocity = Gradients {
            layers: params.layers.iter().map(Layer::zeros_like).collect(),
            log_scales: params.lws_scales.as_ref().map(|s| vec![0.0; s.len()]),
        };
        let log_scales = params
            .lws_scales
            .as_ref()
            .map(|s| s.iter().map(|v| v.ln()).collect());
        Self {
            params,
            trainable,
            velocity,
            log_scales,
        }
    }

    fn step(&mut self, grads: &Gradients, lr: f64, momentum: f64, weight_decay: f64) -> bool {
        let n_layers = self.params.layers.len();
        let layer_range = match self.trainable {
            Trainable::All => 0..n_layers,
            Trainable::FinalLayer => n_layers - 1..n_layers,
            Trainable::LwsScales => n_layers..n_layers,
        };
        let mut finite = true;
        for li in layer_range {
            let layer = &mut self.params.layers[li];
            let vel = &mut self.velocity.layers[li];
            let g = &grads.layers[li];
            for ((w, v), gw) in layer
                .weights
                .data_mut()
                .iter_mut()
                .zip(vel.weights.data_mut())
                .zip(g.weights.data())
            {
                *v = momentum * *v + gw + weight_decay * *w;
                *w -= lr * *v;
                finite &= w.is_finite();
            }
            for ((b, v), gb) in layer.bias.iter_mut().zip(&mut vel.bias).zip(&g.bias) {
                *v = momentum * *v + gb;
                *b -= lr * *v;
                finite &= b.is_finite();
            }
        }
        if self.trainable == Trainable::LwsScales {
            let ls = self.log_scales.as_mut().expect("lws scales");
            let vel = self.velocity.log_scales.as_mut().expect("lws velocity");
            let g = grads.log_scales.as_ref().expect("lws gradient");
            let scales = self.params.lws_scales.as_mut().expect("lws scales");
            for (((l, v), gl), s) in ls.iter_mut().zip(vel).zip(g).zip(scales) {
                *v = momentum * *v + gl;
                *l -= lr * *v;
                *s = l.exp();
                finite &= s.is_finite() && *s > 0.0;
            }
        }
        finite
    }
}

fn run_epochs(
    sgd: &mut Sgd,
    dataset: &Dataset,
    loss: &LossSpec,
    sampler: &SamplerPlan,
    config: &TrainConfig,
    stream: Stream,
    extras: TrainExtras<'_>,
) -> Result<TrainTrace> {
    let counts = extras.counts.unwrap_or(dataset.counts());
    if counts.k() != dataset.k() {
        return Err(Error::dims(
            "loss counts and dataset disagree on class count",
        ));
    }
    let prepared = loss.prepare(counts)?;
    let mut rng = Rng::substream(config.seed, stream);
    let mut trace = TrainTrace {
        epoch_loss: Vec::with_capacity(config.epochs),
        balanced_val_accuracy: extras.validation.map(|_| Vec::with_capacity(config.epochs)),
    };
    for epoch in 0..config.epochs {
        let lr = config.lr_schedule.rate(config.learning_rate, epoch);
        let order = epoch_indices(sampler, dataset, &mut rng)?;
        let mut loss_sum = 0.0;
        for (batch, rows) in order.chunks(config.batch_size).enumerate() {
            let diverged = |trace: &TrainTrace| Error::Diverged {
                epoch,
                batch,
                partial: Box::new(trace.clone()),
            };
            let (batch_loss, grads) = match batch_gradient(
                &sgd.params,
                dataset.features(),
                dataset.labels(),
                rows,
                &prepared,
                sgd.trainable,
            ) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged(&trace)),
                Err(e) => return Err(e),
            };
            if !batch_loss.is_finite() {
                return Err(diverged(&trace));
            }
            loss_sum += batch_loss * rows.len() as f64;
            if !sgd.step(&grads, lr, config.momentum, config.weight_decay) {
                return Err(diverged(&trace));
            }
        }
        trace.epoch_loss.push(loss_sum / order.len().max(1) as f64);
        if let (Some(val), Some(acc)) = (extras.validation, trace.balanced_val_accuracy.as_mut()) {
            acc.push(validation_accuracy(&sgd.params, val)?);
        }
    }
    Ok(trace)
}

fn validation_accuracy(params: &ModelParams, val: &Dataset) -> Result<f64> {
    let logits = forward_logits(params, val.features())?;
    let preds: Vec<usize> = (0..logits.rows()).map(|i| predict(logits.row(i))).collect();
    balanced_accuracy(&preds, val.labels(), val.k())
}

const CHECKPOINT_FORMAT: &str = "ltlab-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    params: ModelParams,
}

/// Writes a versioned JSON checkpoint. Floats round-trip exactly.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    file.params.validate()?;
    Ok(file.params)
}
