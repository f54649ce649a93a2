//! Activations and losses for long-tailed training, with analytic gradients
//! with respect to the logits.
//!
//! Balanced Softmax shifts every logit by `tau * ln(n_j)` before the usual
//! softmax, so a model trained against it on imbalanced data produces, under
//! the plain softmax, the posterior of a class-balanced test set. Balanced
//! Sigmoid applies the per-class offset `ln((n - n_j) / ((k - 1) n_j))` to
//! each binary logistic problem, which is the same correction for the
//! one-vs-rest family.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, log_sum_exp, sigmoid, softplus};

/// Per-class training sample counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct ClassCounts {
    counts: Vec<u64>,
    total: u64,
}

impl ClassCounts {
    /// Requires at least two classes and at least one sample per class.
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        Self::with_floor(counts, false)
    }

    /// Like [`ClassCounts::new`], but with `min_count_floor` set empty classes
    /// are clamped to one sample instead of rejected.
    pub fn with_floor(mut counts: Vec<u64>, min_count_floor: bool) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidCounts(format!(
                "need at least 2 classes, got {}",
                counts.len()
            )));
        }
        if min_count_floor {
            for c in &mut counts {
                *c = (*c).max(1);
            }
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidCounts(format!("class {j} has zero samples")));
        }
        let total = counts.iter().sum();
        Ok(Self { counts, total })
    }

    /// `k` classes with `per_class` samples each.
    pub fn uniform(k: usize, per_class: u64) -> Result<Self> {
        Self::new(vec![per_class; k])
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, j: usize) -> u64 {
        self.counts[j]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.counts
    }

    pub fn max(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn min(&self) -> u64 {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    pub fn is_balanced(&self) -> bool {
        self.counts.iter().all(|&c| c == self.counts[0])
    }

    /// `n_j / n` for each class.
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.k() {
            return Err(Error::dims(format!(
                "vector of length {len} against {} classes",
                self.k()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<u64>> for ClassCounts {
    type Error = Error;

    fn try_from(v: Vec<u64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassCounts> for Vec<u64> {
    fn from(c: ClassCounts) -> Self {
        c.counts
    }
}

/// A normalized class distribution (softmax family).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorVector(Vec<f64>);

impl PosteriorVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyReduction);
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::param("posterior entries must lie in [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::param(format!("posterior sums to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCe,
    BalancedSoftmax,
    MultiBinarySigmoid,
    BalancedSigmoid,
    CbwSoftmaxCe,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::SoftmaxCe,
        LossKind::BalancedSoftmax,
        LossKind::MultiBinarySigmoid,
        LossKind::BalancedSigmoid,
        LossKind::CbwSoftmaxCe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::SoftmaxCe => "softmax_ce",
            LossKind::BalancedSoftmax => "balanced_softmax",
            LossKind::MultiBinarySigmoid => "multi_binary_sigmoid",
            LossKind::BalancedSigmoid => "balanced_sigmoid",
            LossKind::CbwSoftmaxCe => "cbw_softmax_ce",
        }
    }

    pub fn is_sigmoid(self) -> bool {
        matches!(
            self,
            LossKind::MultiBinarySigmoid | LossKind::BalancedSigmoid
        )
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown loss kind `{s}`")))
    }
}

fn default_tau() -> f64 {
    1.0
}

/// Which loss to train with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Exponent on the counts inside Balanced Softmax; 0.25 is the
    /// margin-optimal value, 1.0 the usual choice.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Per-class weights for `cbw_softmax_ce`. When absent they are derived
    /// from the training counts with [`cbw_weights`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            tau: 1.0,
            class_weights: None,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_class_weights(mut self, weights: Vec<f64>) -> Self {
        self.class_weights = Some(weights);
        self
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::param(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != k {
                return Err(Error::dims(format!(
                    "{} class weights for {k} classes",
                    w.len()
                )));
            }
            if w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::param("class weights must be positive"));
            }
        }
        Ok(())
    }

    /// Binds the spec to a set of training counts.
    pub fn prepare(&self, counts: &ClassCounts) -> Result<PreparedLoss> {
        PreparedLoss::new(self, counts)
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::new(LossKind::SoftmaxCe)
    }
}

/// Additive logit shift `tau * (ln n_j - ln n_max)`.
///
/// Subtracting `ln n_max` changes nothing after normalization but makes the
/// shift exactly zero for equal counts, so Balanced Softmax on balanced data
/// is bitwise identical to plain softmax.
pub fn balanced_logit_shift(counts: &ClassCounts, tau: f64) -> Vec<f64> {
    let ref_log = (counts.max() as f64).ln();
    counts
        .as_slice()
        .iter()
        .map(|&c| tau * ((c as f64).ln() - ref_log))
        .collect()
}

/// A [`LossSpec`] resolved against training counts: the per-class logit
/// shift and per-class sample weight are precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedLoss {
    kind: LossKind,
    shift: Vec<f64>,
    weights: Option<Vec<f64>>,
}

impl PreparedLoss {
    pub fn new(spec: &LossSpec, counts: &ClassCounts) -> Result<Self> {
        let k = counts.k();
        spec.validate(k)?;
        let shift = match spec.kind {
            LossKind::BalancedSoftmax => balanced_logit_shift(counts, spec.tau),
            LossKind::BalancedSigmoid => balanced_sigmoid_offsets(counts)?
                .into_iter()
                .map(|o| -o)
                .collect(),
            _ => vec![0.0; k],
        };
        let weights = match spec.kind {
            LossKind::CbwSoftmaxCe => Some(match &spec.class_weights {
                Some(w) => w.clone(),
                None => cbw_weights(counts, CbwScheme::InverseFrequency),
            }),
            _ => None,
        };
        Ok(Self {
            kind: spec.kind,
            shift,
            weights,
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.shift.len()
    }

    /// Loss at `label`; writes d(loss)/d(logits) into `grad`.
    pub fn loss_and_grad(&self, logits: &[f64], label: usize, grad: &mut [f64]) -> Result<f64> {
        let k = self.k();
        if logits.len() != k || grad.len() != k {
            return Err(Error::dims(format!(
                "{} logits / {} grad slots for {k} classes",
                logits.len(),
                grad.len()
            )));
        }
        if label >= k {
            return Err(Error::LabelOutOfRange { label, k });
        }
        for ((g, &l), &s) in grad.iter_mut().zip(logits).zip(&self.shift) {
            *g = l + s;
        }
        if self.kind.is_sigmoid() {
            let mut loss = 0.0;
            for (j, g) in grad.iter_mut().enumerate() {
                let z = *g;
                if j == label {
                    loss += softplus(-z);
                    *g = sigmoid(z) - 1.0;
                } else {
                    loss += softplus(z);
                    *g = sigmoid(z);
                }
            }
            return Ok(loss);
        }
        let lse = log_sum_exp(grad)?;
        let loss = lse - grad[label];
        for g in grad.iter_mut() {
            *g = (*g - lse).exp();
        }
        grad[label] -= 1.0;
        match &self.weights {
            Some(w) => {
                let wy = w[label];
                for g in grad.iter_mut() {
                    *g *= wy;
                }
                Ok(wy * loss)
            }
            None => Ok(loss),
        }
    }

    pub fn loss(&self, logits: &[f64], label: usize) -> Result<f64> {
        let mut scratch = vec![0.0; self.k()];
        self.loss_and_grad(logits, label, &mut scratch)
    }

    pub fn grad(&self, logits: &[f64], label: usize) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.k()];
        self.loss_and_grad(logits, label, &mut grad)?;
        Ok(grad)
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::dims(format!(
            "need at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(())
}

/// Standard softmax.
pub fn softmax_probs(logits: &[f64]) -> Result<PosteriorVector> {
    check_logits(logits)?;
    let lse = log_sum_exp(logits)?;
    Ok(PosteriorVector(
        logits.iter().map(|l| (l - lse).exp()).collect(),
    ))
}

/// `n_j^tau e^{eta_j} / sum_i n_i^tau e^{eta_i}`.
pub fn balanced_softmax_probs(
    logits: &[f64],
    counts: &ClassCounts,
    tau: f64,
) -> Result<PosteriorVector> {
    check_logits(logits)?;
    counts.check_len(logits.len())?;
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::param(format!("tau must be positive, got {tau}")));
    }
    let shifted: Vec<f64> = logits
        .iter()
        .zip(balanced_logit_shift(counts, tau))
        .map(|(l, s)| l + s)
        .collect();
    softmax_probs(&shifted)
}

fn prepared(kind: LossKind, tau: f64, counts: &ClassCounts, len: usize) -> Result<PreparedLoss> {
    counts.check_len(len)?;
    PreparedLoss::new(&LossSpec::new(kind).with_tau(tau), counts)
}

/// Plain cross-entropy `-ln softmax(eta)_label`.
pub fn softmax_ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    check_logits(logits)?;
    let counts = ClassCounts::uniform(logits.len(), 1)?;
    prepared(LossKind::SoftmaxCe, 1.0, &counts, logits.len())?.loss(logits, label)
}

pub fn softmax_ce_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let counts = ClassCounts::uniform(logits.len(), 1)?;
    prepared(LossKind::SoftmaxCe, 1.0, &counts, logits.len())?.grad(logits, label)
}

/// `-ln(n_y^tau e^{eta_y} / sum_i n_i^tau e^{eta_i})`.
pub fn balanced_softmax_loss(
    logits: &[f64],
    label: usize,
    counts: &ClassCounts,
    tau: f64,
) -> Result<f64> {
    check_logits(logits)?;
    prepared(LossKind::BalancedSoftmax, tau, counts, logits.len())?.loss(logits, label)
}

/// Balanced-softmax probabilities minus the one-hot label.
pub fn balanced_softmax_grad(
    logits: &[f64],
    label: usize,
    counts: &ClassCounts,
    tau: f64,
) -> Result<Vec<f64>> {
    check_logits(logits)?;
    prepared(LossKind::BalancedSoftmax, tau, counts, logits.len())?.grad(logits, label)
}

/// Sum of `k` one-vs-rest binary cross-entropies.
pub fn multi_binary_logistic_loss(logits: &[f64], label: usize) -> Result<f64> {
    check_logits(logits)?;
    let counts = ClassCounts::uniform(logits.len(), 1)?;
    prepared(LossKind::MultiBinarySigmoid, 1.0, &counts, logits.len())?.loss(logits, label)
}

pub fn multi_binary_logistic_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let counts = ClassCounts::uniform(logits.len(), 1)?;
    prepared(LossKind::MultiBinarySigmoid, 1.0, &counts, logits.len())?.grad(logits, label)
}

/// Per-class term subtracted from each logit by Balanced Sigmoid:
/// `ln((n/k)/n_j * (n - n_j)/(n - n/k))`, which simplifies to
/// `ln(n - n_j) - ln((k - 1) n_j)`.
pub fn balanced_sigmoid_offsets(counts: &ClassCounts) -> Result<Vec<f64>> {
    let n = counts.total();
    let km1 = (counts.k() - 1) as f64;
    counts
        .as_slice()
        .iter()
        .enumerate()
        .map(|(j, &nj)| {
            if nj >= n {
                return Err(Error::DegenerateCounts { class: j });
            }
            Ok(((n - nj) as f64).ln() - (km1 * nj as f64).ln())
        })
        .collect()
}

/// Per-class Balanced Sigmoid probabilities `sigmoid(eta_j - offset_j)`.
/// These are not normalized across classes.
pub fn balanced_sigmoid_probs(logits: &[f64], counts: &ClassCounts) -> Result<Vec<f64>> {
    check_logits(logits)?;
    counts.check_len(logits.len())?;
    let offsets = balanced_sigmoid_offsets(counts)?;
    Ok(logits
        .iter()
        .zip(offsets)
        .map(|(l, o)| sigmoid(l - o))
        .collect())
}

pub fn balanced_sigmoid_loss(logits: &[f64], label: usize, counts: &ClassCounts) -> Result<f64> {
    check_logits(logits)?;
    prepared(LossKind::BalancedSigmoid, 1.0, counts, logits.len())?.loss(logits, label)
}

pub fn balanced_sigmoid_grad(
    logits: &[f64],
    label: usize,
    counts: &ClassCounts,
) -> Result<Vec<f64>> {
    check_logits(logits)?;
    prepared(LossKind::BalancedSigmoid, 1.0, counts, logits.len())?.grad(logits, label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbwScheme {
    #[default]
    InverseFrequency,
}

/// Class-balanced weights; inverse frequency gives `n / (k n_j)`.
pub fn cbw_weights(counts: &ClassCounts, scheme: CbwScheme) -> Vec<f64> {
    match scheme {
        CbwScheme::InverseFrequency => {
            let n = counts.total() as f64;
            let k = counts.k() as f64;
            counts
                .as_slice()
                .iter()
                .map(|&c| n / (k * c as f64))
                .collect()
        }
    }
}

/// `w_label * CE(logits, label)`.
pub fn cbw_softmax_loss(logits: &[f64], label: usize, weights: &[f64]) -> Result<f64> {
    cbw_prepared(logits, weights)?.loss(logits, label)
}

pub fn cbw_softmax_grad(logits: &[f64], label: usize, weights: &[f64]) -> Result<Vec<f64>> {
    cbw_prepared(logits, weights)?.grad(logits, label)
}

fn cbw_prepared(logits: &[f64], weights: &[f64]) -> Result<PreparedLoss> {
    check_logits(logits)?;
    let counts = ClassCounts::uniform(logits.len(), 1)?;
    counts.check_len(weights.len())?;
    PreparedLoss::new(
        &LossSpec::new(LossKind::CbwSoftmaxCe).with_class_weights(weights.to_vec()),
        &counts,
    )
}

fn reweight(phi: &PosteriorVector, counts: &ClassCounts, forward: bool) -> Result<PosteriorVector> {
    counts.check_len(phi.len())?;
    let raw: Vec<f64> = phi
        .as_slice()
        .iter()
        .zip(counts.as_slice())
        .map(|(&p, &n)| if forward { p * n as f64 } else { p / n as f64 })
        .collect();
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::ZeroSum);
    }
    Ok(PosteriorVector(raw.into_iter().map(|v| v / sum).collect()))
}

/// Balanced-set posterior to training-set posterior: `n_j phi_j / sum_i n_i phi_i`.
pub fn posterior_balanced_to_train(
    phi: &PosteriorVector,
    counts: &ClassCounts,
) -> Result<PosteriorVector> {
    reweight(phi, counts, true)
}

/// Inverse of [`posterior_balanced_to_train`]: `(phi_j / n_j) / sum_i (phi_i / n_i)`.
pub fn posterior_train_to_balanced(
    phi_hat: &PosteriorVector,
    counts: &ClassCounts,
) -> Result<PosteriorVector> {
    reweight(phi_hat, counts, false)
}

/// Predicted class: argmax of the logits, lowest index on ties. The rule is
/// the same whichever loss produced the logits.
pub fn predict(logits: &[f64]) -> usize {
    argmax(logits)
}
