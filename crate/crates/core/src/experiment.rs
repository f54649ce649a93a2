//! Config-driven experiments: build data, train (optionally decoupled),
//! evaluate on a balanced test set and write artifacts.
//!
//! An experiment directory holds `metrics.json`, `trace.csv`, `py_curve.csv`,
//! `checkpoint.json` and the resolved `config.toml`. Nothing written depends
//! on wall-clock time or the output path, so reruns are byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    bayes_predictions, load_csv_with_labels, longtail_counts, synthesize_gaussian, CsvSchema,
    Dataset, GaussianMixtureSpec, LongTailProfile,
};
use crate::error::{Error, Result};
use crate::eval::{
    balanced_accuracy, evaluate, group_classes, EvalOptions, EvalReport, GroupThresholds,
    MarginalMode,
};
use crate::losses::{
    posterior_train_to_balanced, ClassCounts, LossKind, LossSpec, PosteriorVector,
};
use crate::margins::{bound_estimate, MarginConfig, MarginReport};
use crate::numerics::{Rng, Stream};
use crate::sampling::{SamplerKind, SamplerPlan, DEFAULT_RF_THRESHOLD};
use crate::training::{
    crt_retrain, lws_retrain, per_sample_losses, save_checkpoint, train, ModelParams, TrainConfig,
    TrainTrace,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub k: usize,
    pub dim: usize,
    pub n_max: u64,
    pub imbalance_factor: f64,
    pub test_per_class: u64,
    /// Radius of the ring of class means (ignored when `mixture` is set).
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Shared isotropic variance (ignored when `mixture` is set).
    #[serde(default = "default_variance")]
    pub variance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<GaussianMixtureSpec>,
}

fn default_radius() -> f64 {
    1.5
}

fn default_variance() -> f64 {
    1.0
}

impl SyntheticConfig {
    pub fn mixture_spec(&self) -> Result<GaussianMixtureSpec> {
        let spec = match &self.mixture {
            Some(m) => m.clone(),
            None => GaussianMixtureSpec::ring(self.k, self.dim, self.radius, self.variance)?,
        };
        spec.validate()?;
        if spec.k() != self.k || spec.dim() != self.dim {
            return Err(Error::Config("mixture shape disagrees with k/dim".into()));
        }
        Ok(spec)
    }

    pub fn train_counts(&self) -> Result<ClassCounts> {
        longtail_counts(&LongTailProfile {
            k: self.k,
            n_max: self.n_max,
            imbalance_factor: self.imbalance_factor,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvDatasetConfig {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    #[serde(flatten)]
    pub schema: CsvSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    Csv(CsvDatasetConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    #[serde(default = "default_rf_threshold")]
    pub rf_threshold: f64,
}

fn default_rf_threshold() -> f64 {
    DEFAULT_RF_THRESHOLD
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::InstanceBalanced,
            rf_threshold: DEFAULT_RF_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoupleMethod {
    Crt,
    Lws,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoupleConfig {
    pub method: DecoupleMethod,
    /// Stage-2 schedule; defaults to the stage-1 config with half the epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Stage-2 loss; defaults to plain softmax cross-entropy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSpec>,
    #[serde(default)]
    pub allow_linear: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_rare_max")]
    pub rare_max: u64,
    #[serde(default = "default_common_max")]
    pub common_max: u64,
    #[serde(default)]
    pub marginal_mode: MarginalMode,
    /// Post-hoc conversion of the predictive distribution with the training
    /// counts before predicting.
    #[serde(default)]
    pub posthoc: bool,
}

fn default_rare_max() -> u64 {
    GroupThresholds::default().rare_max
}

fn default_common_max() -> u64 {
    GroupThresholds::default().common_max
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rare_max: default_rare_max(),
            common_max: default_common_max(),
            marginal_mode: MarginalMode::default(),
            posthoc: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_sweep_ifs")]
    pub imbalance_factors: Vec<f64>,
    #[serde(default = "default_sweep_losses")]
    pub losses: Vec<LossKind>,
    /// Seeds per cell; empty means the base `train.seed` only.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn default_sweep_ifs() -> Vec<f64> {
    vec![200.0, 100.0, 10.0]
}

fn default_sweep_losses() -> Vec<LossKind> {
    vec![LossKind::SoftmaxCe, LossKind::BalancedSoftmax]
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            imbalance_factors: default_sweep_ifs(),
            losses: default_sweep_losses(),
            seeds: Vec::new(),
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub loss: LossSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decouple: Option<DecoupleConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

/// Command-line style overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub loss: Option<LossKind>,
    pub tau: Option<f64>,
    pub sampler: Option<SamplerKind>,
    pub imbalance_factor: Option<f64>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// The k=5, 2-D, IF=100 long-tailed Gaussian benchmark with a linear model.
    pub fn synthetic_benchmark(loss: LossKind, imbalance_factor: f64, seed: u64) -> Self {
        Self {
            name: "synthetic-benchmark".into(),
            output_dir: None,
            dataset: DatasetConfig::Synthetic(SyntheticConfig {
                k: 5,
                dim: 2,
                n_max: 2000,
                imbalance_factor,
                test_per_class: 500,
                radius: default_radius(),
                variance: default_variance(),
                mixture: None,
            }),
            loss: LossSpec::new(loss),
            sampler: SamplerConfig::default(),
            train: TrainConfig {
                epochs: 20,
                batch_size: 64,
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
                seed,
                hidden_dim: None,
                lr_schedule: crate::training::LrSchedule::Constant,
            },
            decouple: None,
            eval: EvalConfig::default(),
            sweep: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(kind) = o.loss {
            self.loss.kind = kind;
        }
        if let Some(tau) = o.tau {
            self.loss.tau = tau;
        }
        if let Some(kind) = o.sampler {
            self.sampler.kind = kind;
        }
        if let Some(imf) = o.imbalance_factor {
            match &mut self.dataset {
                DatasetConfig::Synthetic(s) => s.imbalance_factor = imf,
                DatasetConfig::Csv(_) => {
                    return Err(Error::Config(
                        "imbalance factor applies to synthetic datasets only".into(),
                    ))
                }
            }
        }
        if let Some(out) = &o.output_dir {
            self.output_dir = Some(out.clone());
        }
        self.validate()
    }

    /// Checks everything that can be checked without touching data files.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            let counts = s.train_counts().map_err(cfg)?;
            s.mixture_spec().map_err(cfg)?;
            if s.test_per_class == 0 {
                return Err(Error::Config("test_per_class must be >= 1".into()));
            }
            self.loss.validate(counts.k()).map_err(cfg)?;
        }
        self.train.validate(false).map_err(cfg)?;
        if let Some(d) = &self.decouple {
            if let Some(t) = &d.train {
                t.validate(true).map_err(cfg)?;
            }
            if d.train.is_none() && self.train.hidden_dim.is_none() && !d.allow_linear {
                return Err(Error::Config(
                    "decoupled training needs train.hidden_dim (a backbone) or allow_linear".into(),
                ));
            }
        }
        if self.eval.rare_max > self.eval.common_max {
            return Err(Error::Config(
                "eval.rare_max must not exceed eval.common_max".into(),
            ));
        }
        if !(self.sampler.rf_threshold > 0.0 && self.sampler.rf_threshold < 1.0) {
            return Err(Error::Config(
                "sampler.rf_threshold must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Train/test data for a config, plus the generating mixture when synthetic.
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
    pub mixture: Option<GaussianMixtureSpec>,
}

pub fn build_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    match &config.dataset {
        DatasetConfig::Synthetic(s) => {
            let spec = s.mixture_spec()?;
            let seed = config.train.seed;
            let train = synthesize_gaussian(
                &spec,
                &s.train_counts()?,
                &mut Rng::substream(seed, Stream::TrainData),
                true,
            )?;
            let test = synthesize_gaussian(
                &spec,
                &ClassCounts::uniform(s.k, s.test_per_class)?,
                &mut Rng::substream(seed, Stream::TestData),
                true,
            )?;
            Ok(ExperimentData {
                train,
                test,
                mixture: Some(spec),
            })
        }
        DatasetConfig::Csv(c) => {
            let (train, enc) = load_csv_with_labels(&c.train_path, &c.schema, None)?;
            let (test, _) = load_csv_with_labels(&c.test_path, &c.schema, Some(&enc))?;
            if test.dim() != train.dim() {
                return Err(Error::dims("train and test CSV differ in feature count"));
            }
            Ok(ExperimentData {
                train,
                test,
                mixture: None,
            })
        }
    }
}

/// Balanced accuracy of the Bayes rule (uniform prior) on a test set.
pub fn bayes_balanced_accuracy(spec: &GaussianMixtureSpec, test: &Dataset) -> Result<f64> {
    let prior = vec![1.0 / spec.k() as f64; spec.k()];
    let preds = bayes_predictions(spec, &prior, test.features())?;
    balanced_accuracy(&preds, test.labels(), test.k())
}

/// Everything recorded in `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub name: String,
    pub seed: u64,
    pub loss: LossKind,
    pub tau: f64,
    pub sampler: SamplerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decouple: Option<DecoupleMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance_factor: Option<f64>,
    pub train_counts: ClassCounts,
    pub final_train_loss: f64,
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bayes_balanced_accuracy: Option<f64>,
    /// Margin bound of the final model, from its per-class softmax NLL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_bound: Option<MarginReport>,
}

impl Metrics {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("metrics file: {e}")))
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{} seed={} loss={} balanced_acc={:.4} overall_acc={:.4} uniform_kl={:.5}",
            self.name,
            self.seed,
            self.loss,
            self.report.balanced_accuracy,
            self.report.overall_accuracy,
            self.report.uniform_kl
        )
    }
}

pub struct ExperimentOutcome {
    pub metrics: Metrics,
    pub params: ModelParams,
    pub stage1: ModelParams,
    pub trace: TrainTrace,
    pub stage2_trace: Option<TrainTrace>,
}

pub const METRICS_FILE: &str = "metrics.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const PY_CURVE_FILE: &str = "py_curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Runs one experiment without touching the filesystem (CSV inputs aside).
pub fn execute(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let data = build_data(config)?;
    let train_counts = data.train.counts().clone();
    let sampler = SamplerPlan::for_kind(
        config.sampler.kind,
        &data.train,
        config.sampler.rf_threshold,
    )?;
    let (stage1, trace) = train(&data.train, &config.loss, &sampler, &config.train)?;

    let (params, stage2_trace) = match &config.decouple {
        None => (stage1.clone(), None),
        Some(d) => {
            let cfg2 = d
                .train
                .clone()
                .unwrap_or_else(|| config.train.stage2_default());
            let loss2 = d.loss.clone().unwrap_or_default();
            let (p, t) = match d.method {
                DecoupleMethod::Crt => {
                    crt_retrain(&stage1, &data.train, &loss2, &cfg2, d.allow_linear)?
                }
                DecoupleMethod::Lws => {
                    lws_retrain(&stage1, &data.train, &loss2, &cfg2, d.allow_linear)?
                }
            };
            (p, Some(t))
        }
    };

    let report = evaluate_model(config, &data, &params)?;
    let bayes = data
        .mixture
        .as_ref()
        .map(|m| bayes_balanced_accuracy(m, &data.test))
        .transpose()?;
    let margin_bound = margin_report(&params, &data.train).ok();
    let final_train_loss = stage2_trace
        .as_ref()
        .and_then(|t| t.epoch_loss.last())
        .or(trace.epoch_loss.last())
        .copied()
        .unwrap_or(f64::NAN);

    let metrics = Metrics {
        name: config.name.clone(),
        seed: config.train.seed,
        loss: config.loss.kind,
        tau: config.loss.tau,
        sampler: config.sampler.kind,
        decouple: config.decouple.as_ref().map(|d| d.method),
        imbalance_factor: match &config.dataset {
            DatasetConfig::Synthetic(s) => Some(s.imbalance_factor),
            DatasetConfig::Csv(_) => None,
        },
        train_counts,
        final_train_loss,
        report,
        bayes_balanced_accuracy: bayes,
        margin_bound,
    };
    Ok(ExperimentOutcome {
        metrics,
        params,
        stage1,
        trace,
        stage2_trace,
    })
}

/// Evaluates `params` on the config's test set with its grouping, marginal
/// and post-hoc settings. The predictive distribution follows the loss the
/// final stage was trained with.
pub fn evaluate_model(
    config: &ExperimentConfig,
    data: &ExperimentData,
    params: &ModelParams,
) -> Result<EvalReport> {
    let train_counts = data.train.counts();
    let eval_loss = match &config.decouple {
        None => config.loss.clone(),
        Some(d) => d.loss.clone().unwrap_or_default(),
    };
    let groups = group_classes(
        train_counts,
        GroupThresholds {
            rare_max: config.eval.rare_max,
            common_max: config.eval.common_max,
        },
    );
    let options = EvalOptions {
        marginal_mode: config.eval.marginal_mode,
        posthoc_counts: config.eval.posthoc.then(|| train_counts.clone()),
    };
    evaluate(params, &eval_loss, &data.test, &groups, &options)
}

/// Margin bound from the per-class plain-softmax NLL of `params` on `train`,
/// with default constants.
pub fn margin_report(params: &ModelParams, train: &Dataset) -> Result<MarginReport> {
    let nll = LossSpec::new(LossKind::SoftmaxCe).prepare(train.counts())?;
    let losses = per_sample_losses(params, train.features(), train.labels(), &nll)?;
    let mut per_class = vec![Vec::new(); train.k()];
    for (l, &y) in losses.into_iter().zip(train.labels()) {
        per_class[y].push(l);
    }
    bound_estimate(
        &per_class,
        train.counts(),
        &MarginConfig::defaults_for(train.k()),
        None,
    )
}

/// Runs an experiment and writes its artifacts into `out_dir`. On divergence
/// the partial trace is still written before the error is returned.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Metrics> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(CONFIG_FILE), config.to_toml()?)?;
    let outcome = match execute(config) {
        Ok(o) => o,
        Err(Error::Diverged {
            epoch,
            batch,
            partial,
        }) => {
            write_trace(&out_dir.join(TRACE_FILE), &partial, None)?;
            return Err(Error::Diverged {
                epoch,
                batch,
                partial,
            });
        }
        Err(e) => return Err(e),
    };
    write_metrics(&outcome.metrics, &out_dir.join(METRICS_FILE))?;
    write_trace(
        &out_dir.join(TRACE_FILE),
        &outcome.trace,
        outcome.stage2_trace.as_ref(),
    )?;
    emit_py_curve(
        &outcome.metrics.report,
        &outcome.metrics.train_counts,
        &out_dir.join(PY_CURVE_FILE),
    )?;
    save_checkpoint(&outcome.params, out_dir.join(CHECKPOINT_FILE))?;
    Ok(outcome.metrics)
}

pub fn write_metrics(metrics: &Metrics, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(metrics).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn write_trace(path: &Path, stage1: &TrainTrace, stage2: Option<&TrainTrace>) -> Result<()> {
    let mut out = String::from("stage,epoch,loss,balanced_val_accuracy\n");
    for (stage, trace) in [(1, Some(stage1)), (2, stage2)] {
        let Some(trace) = trace else { continue };
        for (e, l) in trace.epoch_loss.iter().enumerate() {
            let val = trace
                .balanced_val_accuracy
                .as_ref()
                .and_then(|v| v.get(e))
                .map(|v| v.to_string())
                .unwrap_or_default();
            let _ = writeln!(out, "{stage},{e},{l},{val}");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes the `p(y)` curve: `class_index,train_count,marginal_likelihood`,
/// rows ordered by decreasing training count, ties by class index.
pub fn emit_py_curve(report: &EvalReport, train_counts: &ClassCounts, path: &Path) -> Result<()> {
    let k = report.marginal_likelihood.len();
    if train_counts.k() != k {
        return Err(Error::dims("report and counts disagree on class count"));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        train_counts
            .get(b)
            .cmp(&train_counts.get(a))
            .then(a.cmp(&b))
    });
    let mut out = String::from("class_index,train_count,marginal_likelihood\n");
    for j in order {
        let _ = writeln!(
            out,
            "{j},{},{}",
            train_counts.get(j),
            report.marginal_likelihood[j]
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One row of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub loss: LossKind,
    pub imbalance_factor: Option<f64>,
    pub runs: usize,
    pub failed: usize,
    pub balanced_accuracy: Option<(f64, f64)>,
    pub overall_accuracy: Option<(f64, f64)>,
    pub uniform_kl: Option<(f64, f64)>,
    pub status: String,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// Runs every `(loss, imbalance factor, seed)` cell and writes `sweep.csv`.
/// Rows are grouped by loss (in the order given) with imbalance factors
/// decreasing. A failing run is counted and the sweep continues.
pub fn run_sweep(
    base: &ExperimentConfig,
    sweep: &SweepConfig,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    base.validate()?;
    if sweep.losses.is_empty() {
        return Err(Error::Config("sweep needs at least one loss".into()));
    }
    let ifs: Vec<Option<f64>> = match (&base.dataset, sweep.imbalance_factors.is_empty()) {
        (_, true) => vec![None],
        (DatasetConfig::Csv(_), false) => {
            return Err(Error::Config(
                "imbalance-factor sweeps need a synthetic dataset".into(),
            ))
        }
        (DatasetConfig::Synthetic(_), false) => {
            let mut v = sweep.imbalance_factors.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            v.dedup();
            v.into_iter().map(Some).collect()
        }
    };
    let seeds = if sweep.seeds.is_empty() {
        vec![base.train.seed]
    } else {
        sweep.seeds.clone()
    };
    std::fs::create_dir_all(out_dir)?;

    let mut rows = Vec::new();
    for &loss in &sweep.losses {
        for &imf in &ifs {
            let mut bal = Vec::new();
            let mut overall = Vec::new();
            let mut kl = Vec::new();
            let mut errors = Vec::new();
            for &seed in &seeds {
                let mut cfg = base.clone();
                cfg.sweep = None;
                let overrides = Overrides {
                    seed: Some(seed),
                    loss: Some(loss),
                    imbalance_factor: imf,
                    ..Overrides::default()
                };
                let cell_dir = out_dir.join(match imf {
                    Some(v) => format!("{loss}_if{v}_seed{seed}"),
                    None => format!("{loss}_seed{seed}"),
                });
                let result = cfg
                    .apply(&overrides)
                    .and_then(|()| run_experiment(&cfg, &cell_dir));
                match result {
                    Ok(m) => {
                        bal.push(m.report.balanced_accuracy);
                        overall.push(m.report.overall_accuracy);
                        kl.push(m.report.uniform_kl);
                    }
                    Err(e) => errors.push(format!("seed {seed}: {e}")),
                }
            }
            let status = if errors.is_empty() {
                "ok".to_string()
            } else {
                format!("failed ({})", errors.join("; "))
            };
            rows.push(SweepRow {
                loss,
                imbalance_factor: imf,
                runs: bal.len(),
                failed: errors.len(),
                balanced_accuracy: mean_std(&bal),
                overall_accuracy: mean_std(&overall),
                uniform_kl: mean_std(&kl),
                status,
            });
        }
    }
    write_sweep_table(&rows, &out_dir.join(SWEEP_FILE))?;
    Ok(rows)
}

fn write_sweep_table(rows: &[SweepRow], path: &Path) -> Result<()> {
    let wrap = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        row: 0,
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record([
        "loss",
        "imbalance_factor",
        "runs",
        "failed",
        "balanced_accuracy_mean",
        "balanced_accuracy_std",
        "overall_accuracy_mean",
        "overall_accuracy_std",
        "uniform_kl_mean",
        "uniform_kl_std",
        "status",
    ])
    .map_err(wrap)?;
    let pair = |p: Option<(f64, f64)>| match p {
        Some((m, s)) => [m.to_string(), s.to_string()],
        None => [String::new(), String::new()],
    };
    for r in rows {
        let mut rec = vec![
            r.loss.to_string(),
            r.imbalance_factor
                .map(|v| v.to_string())
                .unwrap_or_default(),
            r.runs.to_string(),
            r.failed.to_string(),
        ];
        rec.extend(pair(r.balanced_accuracy));
        rec.extend(pair(r.overall_accuracy));
        rec.extend(pair(r.uniform_kl));
        rec.push(r.status.clone());
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a predictions file (one row of non-negative class scores per sample,
/// optional header), normalizes each row, converts it with
/// [`posterior_train_to_balanced`] and writes `p0,...,p{k-1}` rows.
pub fn convert_predictions(input: &Path, counts: &ClassCounts, output: &Path) -> Result<usize> {
    let csv_err = |row: usize, msg: String| Error::Csv {
        path: input.to_path_buf(),
        row,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(input)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let mut converted: Vec<PosteriorVector> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_err(row, e.to_string()))?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(|c| c.trim().parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if row == 1 => continue,
            Err(_) => return Err(csv_err(row, "non-numeric value".into())),
        };
        if values.len() != counts.k() {
            return Err(csv_err(
                row,
                format!("{} columns for {} classes", values.len(), counts.k()),
            ));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(csv_err(
                row,
                "scores must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if !(sum > 0.0) {
            return Err(csv_err(row, "row sums to zero".into()));
        }
        let phi = PosteriorVector::new(values.into_iter().map(|v| v / sum).collect())
            .map_err(|e| csv_err(row, e.to_string()))?;
        converted.push(posterior_train_to_balanced(&phi, counts)?);
    }
    let mut out = (0..counts.k())
        .map(|j| format!("p{j}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for p in &converted {
        let line: Vec<String> = p.as_slice().iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(output, out)?;
    Ok(converted.len())
}
