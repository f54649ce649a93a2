//! Long-tailed count profiles, labelled datasets, Gaussian-mixture
//! generation with exact Bayes posteriors, and CSV ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ClassCounts, PosteriorVector};
use crate::numerics::{argmax, log_sum_exp, Matrix, Rng};

/// Exponentially decaying class sizes from `n_max` down to `n_max / imbalance_factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongTailProfile {
    pub k: usize,
    pub n_max: u64,
    pub imbalance_factor: f64,
}

/// `n_j = round(n_max * IF^(-j / (k - 1)))`, floored at 1 for the
/// intermediate classes.
pub fn longtail_counts(profile: &LongTailProfile) -> Result<ClassCounts> {
    let LongTailProfile {
        k,
        n_max,
        imbalance_factor,
    } = *profile;
    if k < 2 {
        return Err(Error::InvalidCounts(format!(
            "need at least 2 classes, got {k}"
        )));
    }
    if !(imbalance_factor.is_finite() && imbalance_factor >= 1.0) {
        return Err(Error::param(format!(
            "imbalance factor must be >= 1, got {imbalance_factor}"
        )));
    }
    let smallest = (n_max as f64 / imbalance_factor).round();
    if smallest < 1.0 {
        return Err(Error::InvalidCounts(format!(
            "smallest class rounds to 0 (n_max {n_max}, imbalance factor {imbalance_factor})"
        )));
    }
    let counts = (0..k)
        .map(|j| {
            let decay = imbalance_factor.powf(-(j as f64) / (k - 1) as f64);
            ((n_max as f64 * decay).round() as u64).max(1)
        })
        .collect();
    ClassCounts::new(counts)
}

/// Feature matrix with one label per row. `counts` always agrees with
/// `labels` and every class has at least one row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    counts: ClassCounts,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, k: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::dims(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let mut hist = vec![0u64; k];
        for &y in &labels {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, k });
            }
            hist[y] += 1;
        }
        if let Some(j) = hist.iter().position(|&c| c == 0) {
            return Err(Error::NoSamplesForClass(j));
        }
        Ok(Self {
            features,
            labels,
            counts: ClassCounts::new(hist)?,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn counts(&self) -> &ClassCounts {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.counts.k()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Row indices of each class, in row order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Dataset restricted to `indices`; fails if a class ends up empty.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::param(format!("row index {bad} out of range")));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.features.select_rows(indices), labels, self.k())
    }
}

/// Diagonal covariance, given as variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Shared(Vec<f64>),
    PerClass(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub covariance: Covariance,
}

impl GaussianMixtureSpec {
    /// `k` isotropic classes with means evenly spaced on a circle of
    /// `radius` in the first two coordinates.
    pub fn ring(k: usize, dim: usize, radius: f64, variance: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::param("ring mixtures need dim >= 2"));
        }
        let means = (0..k)
            .map(|j| {
                let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                let mut m = vec![0.0; dim];
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
                m
            })
            .collect();
        let spec = Self {
            means,
            covariance: Covariance::Shared(vec![variance; dim]),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn variances(&self, class: usize) -> &[f64] {
        match &self.covariance {
            Covariance::Shared(v) => v,
            Covariance::PerClass(v) => &v[class],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.k() < 2 || d == 0 {
            return Err(Error::param("mixture needs >= 2 classes and dim >= 1"));
        }
        if self.means.iter().any(|m| m.len() != d) {
            return Err(Error::dims("mean vectors of unequal length"));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture means"));
        }
        let vars: Vec<&Vec<f64>> = match &self.covariance {
            Covariance::Shared(v) => vec![v],
            Covariance::PerClass(v) => {
                if v.len() != self.k() {
                    return Err(Error::dims("one variance vector per class required"));
                }
                v.iter().collect()
            }
        };
        for v in vars {
            if v.len() != d {
                return Err(Error::dims("variance vector length differs from dim"));
            }
            if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::param("variances must be positive"));
            }
        }
        Ok(())
    }

    /// `ln p(x | y = class)`.
    pub fn log_density(&self, class: usize, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.means[class]
            .iter()
            .zip(self.variances(class))
            .zip(x)
            .map(|((m, v), xi)| -0.5 * (ln_2pi + v.ln() + (xi - m) * (xi - m) / v))
            .sum()
    }
}

/// Draws `counts[j]` samples from class `j`. Rows are grouped by class
/// unless `shuffle` is set.
pub fn synthesize_gaussian(
    spec: &GaussianMixtureSpec,
    counts: &ClassCounts,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<Dataset> {
    spec.validate()?;
    if spec.k() != counts.k() {
        return Err(Error::dims(format!(
            "mixture has {} classes, counts have {}",
            spec.k(),
            counts.k()
        )));
    }
    let d = spec.dim();
    let n = counts.total() as usize;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n);
    for (j, &nj) in counts.as_slice().iter().enumerate() {
        let sd: Vec<f64> = spec.variances(j).iter().map(|v| v.sqrt()).collect();
        for _ in 0..nj {
            let x = (0..d)
                .map(|c| spec.means[j][c] + sd[c] * rng.normal())
                .collect();
            rows.push((j, x));
        }
    }
    if shuffle {
        rng.shuffle(&mut rows);
    }
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (y, x) in rows {
        labels.push(y);
        data.extend(x);
    }
    Dataset::new(Matrix::new(n, d, data)?, labels, counts.k())
}

/// Exact posterior `p(y | x)` of the mixture under `prior`. Classes with zero
/// prior get posterior exactly zero.
pub fn bayes_posterior(
    spec: &GaussianMixtureSpec,
    prior: &[f64],
    x: &[f64],
) -> Result<PosteriorVector> {
    if prior.len() != spec.k() {
        return Err(Error::dims(format!(
            "{} prior entries for {} classes",
            prior.len(),
            spec.k()
        )));
    }
    if x.len() != spec.dim() {
        return Err(Error::dims(format!(
            "point of dim {} for a {}-dim mixture",
            x.len(),
            spec.dim()
        )));
    }
    if prior.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::param("prior entries must be non-negative"));
    }
    let support: Vec<usize> = (0..prior.len()).filter(|&j| prior[j] > 0.0).collect();
    let scores: Vec<f64> = support
        .iter()
        .map(|&j| spec.log_density(j, x) + prior[j].ln())
        .collect();
    let lse = log_sum_exp(&scores)?;
    let mut post = vec![0.0; prior.len()];
    for (&j, s) in support.iter().zip(&scores) {
        post[j] = (s - lse).exp();
    }
    PosteriorVector::new(post)
}

/// Bayes-rule predictions (argmax posterior) for every row of `features`.
pub fn bayes_predictions(
    spec: &GaussianMixtureSpec,
    prior: &[f64],
    features: &Matrix,
) -> Result<Vec<usize>> {
    (0..features.rows())
        .map(|i| bayes_posterior(spec, prior, features.row(i)).map(|p| argmax(p.as_slice())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Zero-based feature columns; empty means every column except the label.
    #[serde(default)]
    pub feature_columns: Vec<usize>,
    pub label_column: usize,
    #[serde(default)]
    pub has_header: bool,
}

/// How label cells map to class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelEncoding {
    /// Cells are class indices `0..k`.
    Integer { k: usize },
    /// Cells are symbols; index = position in first-appearance order.
    Symbols(Vec<String>),
}

impl LabelEncoding {
    pub fn k(&self) -> usize {
        match self {
            LabelEncoding::Integer { k } => *k,
            LabelEncoding::Symbols(s) => s.len(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    load_csv_with_labels(path, schema, None).map(|(d, _)| d)
}

/// Loads a CSV dataset. With `known` set (typically the training file's
/// encoding), labels outside it are rejected; otherwise the encoding is
/// inferred: integer labels if every cell parses as one, symbols otherwise.
pub fn load_csv_with_labels(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    known: Option<&LabelEncoding>,
) -> Result<(Dataset, LabelEncoding)> {
    let path = path.as_ref();
    let csv_err = |row: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let first_row = usize::from(schema.has_header) + 1;

    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    let mut width: Option<usize> = None;
    let mut feature_cols = schema.feature_columns.clone();
    for (i, record) in reader.records().enumerate() {
        let row = first_row + i;
        let record = record.map_err(|e| csv_err(row, e.to_string()))?;
        match width {
            None => {
                width = Some(record.len());
                if feature_cols.is_empty() {
                    feature_cols = (0..record.len())
                        .filter(|&c| c != schema.label_column)
                        .collect();
                }
                if let Some(&c) = feature_cols
                    .iter()
                    .chain(std::iter::once(&schema.label_column))
                    .find(|&&c| c >= record.len())
                {
                    return Err(csv_err(
                        row,
                        format!("column {c} missing ({} fields)", record.len()),
                    ));
                }
            }
            Some(w) if w != record.len() => {
                return Err(csv_err(
                    row,
                    format!("expected {w} fields, found {}", record.len()),
                ));
            }
            Some(_) => {}
        }
        for &c in &feature_cols {
            let cell = record[c].trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(row, format!("column {c}: `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(csv_err(row, format!("column {c}: non-finite value")));
            }
            data.push(v);
        }
        raw_labels.push((row, record[schema.label_column].trim().to_string()));
    }
    if raw_labels.is_empty() {
        return Err(csv_err(first_row, "no data rows".into()));
    }

    let encoding = match known {
        Some(enc) => enc.clone(),
        None => {
            if raw_labels.iter().all(|(_, s)| s.parse::<usize>().is_ok()) {
                let max = raw_labels
                    .iter()
                    .map(|(_, s)| s.parse::<usize>().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                LabelEncoding::Integer { k: max + 1 }
            } else {
                let mut symbols: Vec<String> = Vec::new();
                for (_, s) in &raw_labels {
                    if !symbols.contains(s) {
                        symbols.push(s.clone());
                    }
                }
                LabelEncoding::Symbols(symbols)
            }
        }
    };
    let labels = raw_labels
        .iter()
        .map(|(row, s)| {
            let idx = match &encoding {
                LabelEncoding::Integer { k } => s.parse::<usize>().ok().filter(|v| v < k),
                LabelEncoding::Symbols(sym) => sym.iter().position(|x| x == s),
            };
            idx.ok_or_else(|| csv_err(*row, format!("unknown label `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let features = Matrix::new(labels.len(), feature_cols.len(), data)?;
    let dataset = Dataset::new(features, labels, encoding.k())?;
    Ok((dataset, encoding))
}

/// Writes `f0,...,f{d-1},label` with a header row; floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let wrap = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        row: 0,
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|c| format!("f{c}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(wrap)?;
    for (i, y) in dataset.labels().iter().enumerate() {
        let mut rec: Vec<String> = dataset
            .features()
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush()?;
    Ok(())
}

/// Schema matching the files produced by [`write_csv`] for `dim` features.
pub fn written_schema(dim: usize) -> CsvSchema {
    CsvSchema {
        feature_columns: (0..dim).collect(),
        label_column: dim,
        has_header: true,
    }
}
