//! Per-class margins and the margin generalization bound.
//!
//! The bound on balanced-test error is a class average of
//! `err_hat_{gamma,j}(t) + (4 / gamma_j) sqrt(C / n_j) + eps_j(gamma_j)`.
//! Under a budget `sum_j gamma_j = beta` the middle term is minimized by
//! `gamma_j ∝ n_j^{-1/4}`, which is what [`optimal_margins`] returns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassCounts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    /// Margin budget: `sum_j gamma_j = beta`.
    pub beta: f64,
    /// Complexity constant `C`.
    pub complexity_c: f64,
    /// Loss threshold `t`.
    pub threshold_t: f64,
    pub confidence_delta: f64,
    /// Bound `B` on `|loss - t|`.
    pub bound_b: f64,
}

impl MarginConfig {
    /// `C = 1`, `B = 10`, `delta = 0.05`, `t = ln k`, `beta = 1`.
    pub fn defaults_for(k: usize) -> Self {
        Self {
            beta: 1.0,
            complexity_c: 1.0,
            threshold_t: (k as f64).ln(),
            confidence_delta: 0.05,
            bound_b: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0
            && self.complexity_c > 0.0
            && self.threshold_t >= 0.0
            && self.confidence_delta > 0.0
            && self.confidence_delta < 1.0
            && self.bound_b > 0.0
            && [self.beta, self.complexity_c, self.threshold_t, self.bound_b]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid margin config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub gammas: Vec<f64>,
    pub bound_value: f64,
    pub per_class_terms: Vec<f64>,
}

fn max_loss(losses: &[f64], class: usize) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::NoSamplesForClass(class));
    }
    Ok(losses.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// `t - max(losses)`; negative when some sample already exceeds `t`.
pub fn empirical_margin(per_sample_losses: &[f64], threshold_t: f64) -> Result<f64> {
    Ok(threshold_t - max_loss(per_sample_losses, 0)?)
}

/// Fraction of losses strictly above `t`.
pub fn threshold_error(per_sample_losses: &[f64], threshold_t: f64) -> Result<f64> {
    if per_sample_losses.is_empty() {
        return Err(Error::NoSamplesForClass(0));
    }
    let above = per_sample_losses
        .iter()
        .filter(|&&l| l > threshold_t)
        .count();
    Ok(above as f64 / per_sample_losses.len() as f64)
}

/// `gamma*_j = beta n_j^{-1/4} / sum_i n_i^{-1/4}`.
pub fn optimal_margins(counts: &ClassCounts, beta: f64) -> Result<Vec<f64>> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::param(format!("beta must be positive, got {beta}")));
    }
    let w: Vec<f64> = counts
        .as_slice()
        .iter()
        .map(|&n| (n as f64).powf(-0.25))
        .collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| beta * (x / total)).collect())
}

/// `sum_j (4 / gamma_j) sqrt(C / n_j)`.
pub fn bound_objective(gammas: &[f64], counts: &ClassCounts, complexity_c: f64) -> Result<f64> {
    if gammas.len() != counts.k() {
        return Err(Error::dims(format!(
            "{} margins for {} classes",
            gammas.len(),
            counts.k()
        )));
    }
    if let Some(j) = gammas.iter().position(|g| !(*g > 0.0)) {
        return Err(Error::param(format!(
            "margin for class {j} must be positive"
        )));
    }
    Ok(gammas
        .iter()
        .zip(counts.as_slice())
        .map(|(g, &n)| 4.0 / g * (complexity_c / n as f64).sqrt())
        .sum())
}

/// Low-order term `sqrt(ln(log2(4B/gamma)) / n) + sqrt(ln(1/delta) / 2n)`.
pub fn low_order_term(gamma: f64, n_j: u64, bound_b: f64, delta: f64) -> Result<f64> {
    let log2_ratio = (4.0 * bound_b / gamma).log2();
    if !(log2_ratio > 1.0) {
        return Err(Error::BoundTooSmall {
            class: 0,
            log2_ratio,
        });
    }
    let n = n_j as f64;
    Ok((log2_ratio.ln() / n).sqrt() + ((1.0 / delta).ln() / (2.0 * n)).sqrt())
}

/// One class's contribution to the bound.
pub fn per_class_bound_term(
    margin_error: f64,
    gamma: f64,
    n_j: u64,
    config: &MarginConfig,
) -> Result<f64> {
    let eps = low_order_term(gamma, n_j, config.bound_b, config.confidence_delta)?;
    Ok(margin_error + 4.0 / gamma * (config.complexity_c / n_j as f64).sqrt() + eps)
}

/// Evaluates the full bound. `gammas` defaults to [`optimal_margins`] with
/// `config.beta`; the empirical margin error of class `j` is the fraction of
/// its losses with `loss + gamma_j > t`.
pub fn bound_estimate(
    per_class_losses: &[Vec<f64>],
    counts: &ClassCounts,
    config: &MarginConfig,
    gammas: Option<&[f64]>,
) -> Result<MarginReport> {
    config.validate()?;
    let k = counts.k();
    if per_class_losses.len() != k {
        return Err(Error::dims(format!(
            "{} loss lists for {k} classes",
            per_class_losses.len()
        )));
    }
    let gammas = match gammas {
        Some(g) => g.to_vec(),
        None => optimal_margins(counts, config.beta)?,
    };
    if gammas.len() != k {
        return Err(Error::dims(format!(
            "{} margins for {k} classes",
            gammas.len()
        )));
    }
    let mut terms = Vec::with_capacity(k);
    for (j, losses) in per_class_losses.iter().enumerate() {
        let gamma = gammas[j];
        if !(gamma > 0.0) {
            return Err(Error::param(format!(
                "margin for class {j} must be positive"
            )));
        }
        max_loss(losses, j)?;
        let exceed = losses
            .iter()
            .filter(|&&l| l + gamma > config.threshold_t)
            .count();
        let margin_error = exceed as f64 / losses.len() as f64;
        let term = per_class_bound_term(margin_error, gamma, counts.get(j), config).map_err(
            |e| match e {
                Error::BoundTooSmall { log2_ratio, .. } => Error::BoundTooSmall {
                    class: j,
                    log2_ratio,
                },
                other => other,
            },
        )?;
        terms.push(term);
    }
    let bound_value = terms.iter().sum::<f64>() / k as f64;
    Ok(MarginReport {
        gammas,
        bound_value,
        per_class_terms: terms,
    })
}

/// Exhaustive minimizer of [`bound_objective`] over the simplex grid
/// `{beta * (i_1, ..., i_k) / steps : sum i = steps, i_j >= 1}` for `k <= 3`.
/// Returns the best grid point and its objective value.
pub fn grid_search_margins(
    counts: &ClassCounts,
    beta: f64,
    complexity_c: f64,
    steps: usize,
) -> Result<(Vec<f64>, f64)> {
    let k = counts.k();
    if k > 3 {
        return Err(Error::param("grid search is limited to k <= 3"));
    }
    if steps < k {
        return Err(Error::param("grid needs at least one step per class"));
    }
    let h = beta / steps as f64;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut consider = |g: Vec<f64>| -> Result<()> {
        let v = bound_objective(&g, counts, complexity_c)?;
        if best.as_ref().is_none_or(|(_, b)| v < *b) {
            best = Some((g, v));
        }
        Ok(())
    };
    if k == 2 {
        for i in 1..steps {
            consider(vec![i as f64 * h, (steps - i) as f64 * h])?;
        }
    } else {
        for i in 1..steps - 1 {
            for j in 1..steps - i {
                let l = steps - i - j;
                consider(vec![i as f64 * h, j as f64 * h, l as f64 * h])?;
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}
