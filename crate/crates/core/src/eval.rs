//! Balanced-test-set evaluation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    posterior_train_to_balanced, predict, softmax_probs, ClassCounts, LossSpec, PosteriorVector,
};
use crate::numerics::{argmax, sigmoid, Matrix};
use crate::training::{forward_logits, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassGroup {
    Frequent,
    Common,
    Rare,
}

impl fmt::Display for ClassGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassGroup::Frequent => "frequent",
            ClassGroup::Common => "common",
            ClassGroup::Rare => "rare",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupThresholds {
    pub rare_max: u64,
    pub common_max: u64,
}

impl Default for GroupThresholds {
    /// LVIS convention: rare <= 10, common <= 100 training samples.
    fn default() -> Self {
        Self {
            rare_max: 10,
            common_max: 100,
        }
    }
}

/// Rare if `n_j <= rare_max`, common if `n_j <= common_max`, else frequent.
pub fn group_classes(counts: &ClassCounts, thresholds: GroupThresholds) -> Vec<ClassGroup> {
    counts
        .as_slice()
        .iter()
        .map(|&n| {
            if n <= thresholds.rare_max {
                ClassGroup::Rare
            } else if n <= thresholds.common_max {
                ClassGroup::Common
            } else {
                ClassGroup::Frequent
            }
        })
        .collect()
}

/// How the marginal likelihood `p(y)` over the test set is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalMode {
    /// Mean of the predictive distribution.
    #[default]
    MeanPredictive,
    /// Histogram of argmax predictions.
    ArgmaxHistogram,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    pub marginal_mode: MarginalMode,
    /// Convert the predictive distribution with
    /// [`posterior_train_to_balanced`] under these counts before predicting.
    /// Meant for models trained with plain softmax.
    pub posthoc_counts: Option<ClassCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub balanced_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Mean per-class accuracy within each non-empty group.
    pub group_accuracy: BTreeMap<ClassGroup, f64>,
    pub marginal_likelihood: Vec<f64>,
    /// `KL(uniform || marginal_likelihood)`.
    pub uniform_kl: f64,
}

fn per_class_accuracy(predictions: &[usize], labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::dims("predictions and labels differ in length"));
    }
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, k });
        }
        total[y] += 1;
        correct[y] += usize::from(p == y);
    }
    (0..k)
        .map(|j| {
            if total[j] == 0 {
                Err(Error::NoSamplesForClass(j))
            } else {
                Ok(correct[j] as f64 / total[j] as f64)
            }
        })
        .collect()
}

/// Mean of per-class accuracies.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    let acc = per_class_accuracy(predictions, labels, k)?;
    Ok(acc.iter().sum::<f64>() / k as f64)
}

/// `sum_j (1/k) ln((1/k) / m_j)`; zero entries are floored at 1e-12.
pub fn uniform_kl(marginal: &[f64]) -> f64 {
    let u = 1.0 / marginal.len() as f64;
    marginal.iter().map(|&m| u * (u / m.max(1e-12)).ln()).sum()
}

/// Builds a report from predictions and per-row predictive distributions
/// (`probs` is `N x k`, rows summing to 1).
pub fn report_from_predictions(
    predictions: &[usize],
    probs: &Matrix,
    labels: &[usize],
    groups: &[ClassGroup],
    mode: MarginalMode,
) -> Result<EvalReport> {
    let k = groups.len();
    if probs.cols() != k || probs.rows() != labels.len() {
        return Err(Error::dims(
            "probability matrix does not match labels/groups",
        ));
    }
    let per_class = per_class_accuracy(predictions, labels, k)?;
    let n = labels.len() as f64;
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    let balanced = per_class.iter().sum::<f64>() / k as f64;

    let mut sums: BTreeMap<ClassGroup, (f64, usize)> = BTreeMap::new();
    for (g, a) in groups.iter().zip(&per_class) {
        let e = sums.entry(*g).or_insert((0.0, 0));
        e.0 += a;
        e.1 += 1;
    }
    let group_accuracy = sums
        .into_iter()
        .map(|(g, (s, c))| (g, s / c as f64))
        .collect();

    let mut marginal = vec![0.0; k];
    match mode {
        MarginalMode::MeanPredictive => {
            for i in 0..probs.rows() {
                for (m, p) in marginal.iter_mut().zip(probs.row(i)) {
                    *m += p;
                }
            }
        }
        MarginalMode::ArgmaxHistogram => {
            for &p in predictions {
                marginal[p] += 1.0;
            }
        }
    }
    marginal.iter_mut().for_each(|m| *m /= n);
    let kl = uniform_kl(&marginal);
    Ok(EvalReport {
        overall_accuracy: correct as f64 / n,
        balanced_accuracy: balanced,
        per_class_accuracy: per_class,
        group_accuracy,
        marginal_likelihood: marginal,
        uniform_kl: kl,
    })
}

/// Predictive class distribution for one logit vector: softmax for the
/// softmax family, normalized per-class sigmoids for the sigmoid family.
pub fn predictive_distribution(logits: &[f64], loss: &LossSpec) -> Result<PosteriorVector> {
    if loss.kind.is_sigmoid() {
        let s: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        let total: f64 = s.iter().sum();
        if !(total > 0.0) {
            // every sigmoid underflowed; fall back to the softmax of the logits
            return softmax_probs(logits);
        }
        PosteriorVector::new(s.into_iter().map(|v| v / total).collect())
    } else {
        softmax_probs(logits)
    }
}

/// Evaluates a model on a (balanced) test set. Predictions are the argmax of
/// the logits unless `options.posthoc_counts` asks for post-hoc conversion.
pub fn evaluate(
    params: &ModelParams,
    loss: &LossSpec,
    test: &Dataset,
    groups: &[ClassGroup],
    options: &EvalOptions,
) -> Result<EvalReport> {
    if groups.len() != test.k() || params.num_classes() != test.k() {
        return Err(Error::dims(
            "model, test set and groups disagree on class count",
        ));
    }
    let logits = forward_logits(params, test.features())?;
    let k = test.k();
    let mut probs = Vec::with_capacity(logits.rows() * k);
    let mut preds = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let mut p = predictive_distribution(row, loss)?;
        let pred = match &options.posthoc_counts {
            Some(counts) => {
                p = posterior_train_to_balanced(&p, counts)?;
                argmax(p.as_slice())
            }
            None => predict(row),
        };
        preds.push(pred);
        probs.extend_from_slice(p.as_slice());
    }
    let probs = Matrix::new(logits.rows(), k, probs)?;
    report_from_predictions(&preds, &probs, test.labels(), groups, options.marginal_mode)
}
