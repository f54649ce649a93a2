//! Epoch plans for instance-balanced, class-balanced and repeat-factor
//! sampling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::ClassCounts;
use crate::numerics::Rng;

pub const DEFAULT_RF_THRESHOLD: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    InstanceBalanced,
    ClassBalanced,
    RepeatFactor,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::InstanceBalanced => "instance_balanced",
            SamplerKind::ClassBalanced => "class_balanced",
            SamplerKind::RepeatFactor => "repeat_factor",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SamplerKind::InstanceBalanced,
            SamplerKind::ClassBalanced,
            SamplerKind::RepeatFactor,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::param(format!("unknown sampler `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerPlan {
    pub kind: SamplerKind,
    /// Per-sample repeat factor (repeat-factor plans only).
    pub per_sample_repeat: Vec<f64>,
    pub rf_threshold: f64,
}

impl SamplerPlan {
    pub fn instance_balanced() -> Self {
        Self {
            kind: SamplerKind::InstanceBalanced,
            per_sample_repeat: Vec::new(),
            rf_threshold: DEFAULT_RF_THRESHOLD,
        }
    }

    pub fn class_balanced() -> Self {
        Self {
            kind: SamplerKind::ClassBalanced,
            ..Self::instance_balanced()
        }
    }

    /// Each sample inherits its class's factor from [`repeat_factors`].
    pub fn repeat_factor(dataset: &Dataset, threshold: f64) -> Result<Self> {
        let factors = repeat_factors(dataset.counts(), threshold)?;
        Ok(Self {
            kind: SamplerKind::RepeatFactor,
            per_sample_repeat: dataset.labels().iter().map(|&y| factors[y]).collect(),
            rf_threshold: threshold,
        })
    }

    pub fn for_kind(kind: SamplerKind, dataset: &Dataset, rf_threshold: f64) -> Result<Self> {
        match kind {
            SamplerKind::InstanceBalanced => Ok(Self::instance_balanced()),
            SamplerKind::ClassBalanced => Ok(Self::class_balanced()),
            SamplerKind::RepeatFactor => Self::repeat_factor(dataset, rf_threshold),
        }
    }
}

/// `r_j = max(1, sqrt(t / f_j))` with `f_j = n_j / n`.
pub fn repeat_factors(counts: &ClassCounts, threshold: f64) -> Result<Vec<f64>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param(format!(
            "repeat-factor threshold must be in (0, 1), got {threshold}"
        )));
    }
    Ok(counts
        .frequencies()
        .into_iter()
        .map(|f| (threshold / f).sqrt().max(1.0))
        .collect())
}

/// Exact per-sample draw probability of a class-balanced draw:
/// `1 / (k n_{y_i})` for sample `i`.
pub fn class_balanced_distribution(dataset: &Dataset) -> Vec<f64> {
    let k = dataset.k() as f64;
    let counts = dataset.counts();
    dataset
        .labels()
        .iter()
        .map(|&y| 1.0 / (k * counts.get(y) as f64))
        .collect()
}

/// One epoch of row indices.
///
/// - instance-balanced: a shuffle of `0..N`.
/// - class-balanced: `N` draws, each a uniform class then a uniform row of it.
/// - repeat-factor: row `i` appears `floor(r_i)` times plus once more with
///   probability `frac(r_i)`; the result is shuffled.
pub fn epoch_indices(plan: &SamplerPlan, dataset: &Dataset, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = dataset.len();
    match plan.kind {
        SamplerKind::InstanceBalanced => {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            Ok(idx)
        }
        SamplerKind::ClassBalanced => {
            let by_class = dataset.class_indices();
            Ok((0..n)
                .map(|_| {
                    let members = &by_class[rng.below(by_class.len())];
                    members[rng.below(members.len())]
                })
                .collect())
        }
        SamplerKind::RepeatFactor => {
            if plan.per_sample_repeat.len() != n {
                return Err(Error::dims(format!(
                    "plan has {} repeat factors for {n} samples",
                    plan.per_sample_repeat.len()
                )));
            }
            if plan
                .per_sample_repeat
                .iter()
                .any(|r| !(r.is_finite() && *r >= 1.0))
            {
                return Err(Error::param("repeat factors must be finite and >= 1"));
            }
            let mut idx = Vec::new();
            for (i, &r) in plan.per_sample_repeat.iter().enumerate() {
                let whole = r.floor();
                let mut times = whole as usize;
                let frac = r - whole;
                if frac > 0.0 && rng.uniform() < frac {
                    times += 1;
                }
                idx.extend(std::iter::repeat_n(i, times));
            }
            rng.shuffle(&mut idx);
            Ok(idx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn dataset(labels: Vec<usize>, k: usize) -> Dataset {
        let n = labels.len();
        Dataset::new(Matrix::zeros(n, 1), labels, k).unwrap()
    }

    #[test]
    fn repeat_factor_examples() {
        let counts = ClassCounts::new(vec![900, 100]).unwrap();
        let r = repeat_factors(&counts, 0.5).unwrap();
        assert_eq!(r[0], 1.0);
        assert!((r[1] - 5f64.sqrt()).abs() < 1e-12);
        let r = repeat_factors(&counts, 1e-9).unwrap();
        assert_eq!(r, vec![1.0, 1.0]);
        assert!(repeat_factors(&counts, 0.0).is_err());
        assert!(repeat_factors(&counts, 1.0).is_err());
    }

    #[test]
    fn instance_balanced_is_permutation() {
        let d = dataset(vec![0, 1, 0, 1, 1], 2);
        let mut idx =
            epoch_indices(&SamplerPlan::instance_balanced(), &d, &mut Rng::new(2)).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn class_balanced_draws_equalize_classes() {
        let mut labels = vec![0; 1000];
        labels.extend(vec![1; 10]);
        let d = dataset(labels, 2);
        let mut rng = Rng::new(11);
        let mut tail = 0usize;
        let mut total = 0usize;
        while total < 10_000 {
            for i in epoch_indices(&SamplerPlan::class_balanced(), &d, &mut rng).unwrap() {
                if total == 10_000 {
                    break;
                }
                tail += usize::from(d.labels()[i] == 1);
                total += 1;
            }
        }
        // sd of the fraction is 0.005; 0.02 is four sd.
        let frac = tail as f64 / total as f64;
        assert!((frac - 0.5).abs() <= 0.02, "tail fraction {frac}");
    }

    #[test]
    fn class_balanced_distribution_is_exactly_uniform_over_classes() {
        let d = dataset(vec![0, 0, 0, 1, 2, 2], 3);
        let p = class_balanced_distribution(&d);
        let mut per_class = [0.0; 3];
        for (i, &y) in d.labels().iter().enumerate() {
            per_class[y] += p[i];
        }
        for v in per_class {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn integer_repeats() {
        let d = dataset(vec![0, 1], 2);
        let plan = SamplerPlan {
            kind: SamplerKind::RepeatFactor,
            per_sample_repeat: vec![1.0, 2.0],
            rf_threshold: 0.5,
        };
        let mut idx = epoch_indices(&plan, &d, &mut Rng::new(0)).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 1]);
        let bad = SamplerPlan {
            per_sample_repeat: vec![1.0],
            ..plan
        };
        assert!(epoch_indices(&bad, &d, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn plans_are_deterministic() {
        let d = dataset(vec![0, 0, 0, 0, 1, 1, 2], 3);
        let plan = SamplerPlan::repeat_factor(&d, 0.4).unwrap();
        let a = epoch_indices(&plan, &d, &mut Rng::new(8)).unwrap();
        let b = epoch_indices(&plan, &d, &mut Rng::new(8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(plan.per_sample_repeat[0], 1.0);
        assert!(plan.per_sample_repeat[6] > plan.per_sample_repeat[4]);
    }
}
