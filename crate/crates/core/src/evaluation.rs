//! Metrics and the experiment harness.
//!
//! Test samples whose class is not in the label set count as the `Unknown`
//! class, which is averaged alongside the known classes.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::ClassCentroids;
use crate::classifier::{argmax, Architecture, Classifier, TrainConfig};
use crate::dataset::{
    make_setting_bundle, DatasetBundle, ExperimentSetting, FlowRecord, LabelOrigin, LabelSet,
};
use crate::pipeline::{self, PipelineConfig, PipelineState, StepReport, StopRule};
use crate::updater::confidence;
use crate::{Error, Result};

/// Name of the extra row and column for traffic outside the label set.
pub const UNKNOWN: &str = "Unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "class", rename_all = "snake_case")]
pub enum Prediction {
    Class(usize),
    Unknown,
}

/// Test-time unknown rule, frozen from the last pipeline step: a sample is
/// unknown when its confidence is at or below the bottom-band cutoff and its
/// embedding is at least `threshold` (squared) from every class centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRule {
    pub confidence_cutoff: f64,
    pub threshold: f64,
    pub centroids: ClassCentroids,
}

pub fn predict(model: &Classifier, rule: Option<&InferenceRule>, features: &[f64]) -> Result<Prediction> {
    let fwd = model.forward(features)?;
    let class = argmax(&fwd.probs);
    if let Some(rule) = rule {
        if confidence(&fwd.probs) <= rule.confidence_cutoff {
            let (_, dist) = rule.centroids.nearest(&fwd.embedding)?;
            if dist >= rule.threshold {
                return Ok(Prediction::Unknown);
            }
        }
    }
    Ok(Prediction::Class(class))
}

/// Counts indexed by true class x predicted class. The last index is
/// [`UNKNOWN`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(known: &[String]) -> Self {
        let mut classes = known.to_vec();
        classes.push(UNKNOWN.to_string());
        let n = classes.len();
        Self {
            classes,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.len() != classes.len() || counts.iter().any(|r| r.len() != classes.len()) {
            return Err(Error::InvalidInput("confusion matrix must be square over its classes".into()));
        }
        Ok(Self { classes, counts })
    }

    pub fn unknown_index(&self) -> usize {
        self.classes.len() - 1
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// Row-normalized view; empty rows stay all zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    /// Recall of every class with support, by index.
    pub fn per_class_recall(&self) -> Vec<(usize, f64)> {
        (0..self.classes.len())
            .filter_map(|i| {
                let s = self.row_sum(i);
                (s > 0).then(|| (i, self.counts[i][i] as f64 / s as f64))
            })
            .collect()
    }

    /// Macro metrics over the classes that have test support. Precision of a
    /// class that is never predicted is 0.
    pub fn metrics(&self) -> Result<MetricSet> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidInput("no evaluated samples".into()));
        }
        let trace: u64 = (0..self.classes.len()).map(|i| self.counts[i][i]).sum();
        let mut precision = 0.0;
        let mut recall = 0.0;
        let mut fpr = 0.0;
        let mut n = 0usize;
        for i in 0..self.classes.len() {
            let support = self.row_sum(i);
            if support == 0 {
                continue;
            }
            n += 1;
            let tp = self.counts[i][i];
            let predicted = self.col_sum(i);
            let fp = predicted - tp;
            let negatives = total - support;
            precision += if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
            recall += tp as f64 / support as f64;
            fpr += if negatives == 0 { 0.0 } else { fp as f64 / negatives as f64 };
        }
        let n = n as f64;
        Ok(MetricSet {
            accuracy: trace as f64 / total as f64,
            precision: precision / n,
            recall: recall / n,
            fpr: fpr / n,
        })
    }

    /// Grid rows for plotting: `true,predicted,count,fraction`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let norm = self.normalized();
        let io = |e: csv::Error| Error::InvalidInput(format!("writing confusion grid: {e}"));
        out.write_record(["true", "predicted", "count", "fraction"]).map_err(io)?;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                out.write_record([
                    self.classes[i].as_str(),
                    self.classes[j].as_str(),
                    &c.to_string(),
                    &norm[i][j].to_string(),
                ])
                .map_err(io)?;
            }
        }
        out.flush().map_err(|e| Error::InvalidInput(format!("writing confusion grid: {e}")))?;
        Ok(())
    }
}

/// Overall accuracy plus macro-averaged precision, recall and false positive rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
}

/// Index of the true class of `record` in a confusion matrix built over `label_set`.
fn truth_index(record: &FlowRecord, label_set: &LabelSet) -> Result<usize> {
    let name = record.true_label.as_deref().ok_or_else(|| {
        Error::InvalidInput(format!("test record {} has no ground-truth label", record.id))
    })?;
    Ok(label_set.index_of(name).unwrap_or(label_set.len()))
}

pub fn evaluate(
    model: &Classifier,
    test: &[FlowRecord],
    label_set: &LabelSet,
    rule: Option<&InferenceRule>,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    if model.n_classes() != label_set.len() {
        return Err(Error::DimensionMismatch {
            expected: label_set.len(),
            actual: model.n_classes(),
        });
    }
    let mut confusion = ConfusionMatrix::new(label_set.names());
    for r in test {
        let truth = truth_index(r, label_set)?;
        let predicted = match predict(model, rule, &r.features)? {
            Prediction::Class(c) => c,
            Prediction::Unknown => confusion.unknown_index(),
        };
        confusion.add(truth, predicted);
    }
    let metrics = confusion.metrics()?;
    Ok(Evaluation { confusion, metrics })
}

/// Accuracy restricted to the given true classes: the fraction of their
/// samples predicted as exactly their own class (`Unknown` for the unknown row).
pub fn class_subset_accuracy(confusion: &ConfusionMatrix, classes: &[&str]) -> Option<f64> {
    let mut hit = 0u64;
    let mut total = 0u64;
    for (i, name) in confusion.classes.iter().enumerate() {
        if classes.contains(&name.as_str()) {
            hit += confusion.counts[i][i];
            total += confusion.counts[i].iter().sum::<u64>();
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    pub stop: StopRule,
}

/// Open-set view of a finished run, measured against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetSummary {
    /// Test accuracy on the classes known at the start.
    pub known_accuracy: f64,
    /// Fraction of test samples outside the final label set predicted as
    /// `Unknown`. `None` when there are none.
    pub unknown_recall: Option<f64>,
    /// Fraction of accepted pseudo-labels that match ground truth; `None`
    /// when nothing was accepted.
    pub pseudo_label_precision: Option<f64>,
    pub pseudo_labels_accepted: usize,
    /// Mean per-class recall over all classes with test support.
    pub macro_accuracy: f64,
    /// Mean per-class recall of plain argmax predictions over the classes of
    /// the final label set, with the unknown rule switched off.
    pub closed_set_macro_accuracy: f64,
    /// Samples labeled by the expert as a fraction of the training share.
    pub expert_proportion: f64,
    pub final_unknowns: usize,
    pub label_set_growth: usize,
    pub steps: usize,
    /// Whether the run ended by quiescence rather than the step cap.
    pub quiesced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub setting: ExperimentSetting,
    pub label_set: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
    pub summary: OpenSetSummary,
    pub reports: Vec<StepReport>,
}

impl ExperimentResult {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Fraction of pseudo-labeled records whose label matches the hidden truth.
pub fn pseudo_label_precision(bundle: &DatasetBundle) -> (Option<f64>, usize) {
    let mut right = 0usize;
    let mut total = 0usize;
    for l in &bundle.labeled {
        if let LabelOrigin::Pseudo { .. } = l.origin {
            total += 1;
            let name = bundle.label_set.name(l.label);
            let truth = bundle
                .hidden_truth
                .get(&l.record.id)
                .map(String::as_str)
                .or(l.record.true_label.as_deref());
            if name.is_some() && name == truth {
                right += 1;
            }
        }
    }
    ((total > 0).then(|| right as f64 / total as f64), total)
}

fn closed_set_macro(state: &PipelineState) -> Option<f64> {
    let labels = &state.bundle.label_set;
    let eval = evaluate(&state.model, &state.bundle.test, labels, None).ok()?;
    let recalls: Vec<f64> = eval
        .confusion
        .per_class_recall()
        .into_iter()
        .filter(|(i, _)| *i < labels.len())
        .map(|(_, r)| r)
        .collect();
    (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Summarizes a finished pipeline against ground truth.
pub fn summarize(
    state: &PipelineState,
    evaluation: &Evaluation,
    setting: &ExperimentSetting,
    reports: usize,
    stop: &StopRule,
) -> OpenSetSummary {
    let known: Vec<&str> = setting.known_classes.iter().map(String::as_str).collect();
    let per_class = evaluation.confusion.per_class_recall();
    let macro_accuracy = per_class.iter().map(|(_, r)| r).sum::<f64>() / per_class.len().max(1) as f64;

    let u = evaluation.confusion.unknown_index();
    let unknown_support: u64 = evaluation.confusion.counts[u].iter().sum();
    let unknown_recall = (unknown_support > 0)
        .then(|| evaluation.confusion.counts[u][u] as f64 / unknown_support as f64);
    let (precision, accepted) = pseudo_label_precision(&state.bundle);
    let train_share = state.initial_pool_size;
    let closed_set_macro_accuracy = closed_set_macro(state).unwrap_or(0.0);
    OpenSetSummary {
        known_accuracy: class_subset_accuracy(&evaluation.confusion, &known).unwrap_or(0.0),
        unknown_recall,
        pseudo_label_precision: precision,
        pseudo_labels_accepted: accepted,
        macro_accuracy,
        closed_set_macro_accuracy,
        expert_proportion: state.expert.as_ref().map_or(0.0, |o| o.proportion(train_share)),
        final_unknowns: state.final_unknowns.len(),
        label_set_growth: state.bundle.label_set.len() - setting.known_classes.len(),
        steps: reports,
        quiesced: state.quiet_streak >= stop.quiet_steps,
    }
}

/// Builds the setting, runs the pipeline to its stop rule and evaluates the
/// final model on the test share.
pub fn run_experiment(
    records: &[FlowRecord],
    setting: &ExperimentSetting,
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    let bundle = make_setting_bundle(records, setting)?;
    let state = PipelineState::new(bundle, setting.expert_mode, cfg.pipeline.clone())?;
    let (state, reports) = pipeline::run(state, &cfg.stop)?;
    let evaluation = state.evaluate()?;
    let summary = summarize(&state, &evaluation, setting, reports.len(), &cfg.stop);
    Ok(ExperimentResult {
        setting: setting.clone(),
        label_set: state.bundle.label_set.names().to_vec(),
        confusion: evaluation.confusion,
        metrics: evaluation.metrics,
        summary,
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeilingResult {
    pub known_accuracy: f64,
    pub train_samples: usize,
}

/// Fully supervised reference: trains on every training-share sample of the
/// known classes with its true label, then scores argmax accuracy on the
/// known-class test samples.
pub fn supervised_ceiling(
    records: &[FlowRecord],
    setting: &ExperimentSetting,
    train_cfg: &TrainConfig,
    arch: Option<&Architecture>,
) -> Result<CeilingResult> {
    let bundle = make_setting_bundle(records, setting)?;
    let mut samples = bundle.labeled_samples();
    for r in &bundle.unlabeled {
        if let Some(c) = bundle
            .hidden_truth
            .get(&r.id)
            .and_then(|t| bundle.label_set.index_of(t))
        {
            samples.push((r.features.as_slice(), c));
        }
    }
    let arch = arch.cloned().unwrap_or_else(|| Architecture::standard(bundle.dim()));
    let model = Classifier::new(&arch, bundle.label_set.len(), train_cfg.seed)?;
    let trained = crate::classifier::train(&model, &samples, &bundle.validation_samples(), train_cfg)?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for r in &bundle.test {
        let Some(c) = r.true_label.as_deref().and_then(|t| bundle.label_set.index_of(t)) else {
            continue;
        };
        total += 1;
        if argmax(&trained.model.forward(&r.features)?.probs) == c {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidInput("no known-class test samples".into()));
    }
    Ok(CeilingResult {
        known_accuracy: hit as f64 / total as f64,
        train_samples: samples.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KnownFraction,
    NKnownClasses,
    NUnknownClasses,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "known_fraction" => Ok(Self::KnownFraction),
            "n_known_classes" => Ok(Self::NKnownClasses),
            "n_unknown_classes" => Ok(Self::NUnknownClasses),
            other => Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected known_fraction, n_known_classes or n_unknown_classes)"
            ))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::KnownFraction => "known_fraction",
            Self::NKnownClasses => "n_known_classes",
            Self::NUnknownClasses => "n_unknown_classes",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub metrics: MetricSet,
    pub summary: OpenSetSummary,
}

fn count_value(value: f64, axis: SweepAxis) -> Result<usize> {
    if value < 0.0 || value.fract() != 0.0 {
        return Err(Error::Config(format!("{axis} values must be whole numbers, got {value}")));
    }
    Ok(value as usize)
}

/// The setting used for one sweep point.
///
/// * `known_fraction`: the base setting with that fraction.
/// * `n_known_classes`: the first `n` classes of the base setting's known and
///   unknown lists (in that order) are known, the rest unknown.
/// * `n_unknown_classes`: the base known classes plus the first `n` base
///   unknown classes; records of the other classes are dropped.
pub fn sweep_setting(base: &ExperimentSetting, axis: SweepAxis, value: f64) -> Result<ExperimentSetting> {
    let mut s = base.clone();
    match axis {
        SweepAxis::KnownFraction => s.known_fraction = value,
        SweepAxis::NKnownClasses => {
            let n = count_value(value, axis)?;
            let all: Vec<String> = base.known_classes.iter().chain(&base.unknown_classes).cloned().collect();
            if n == 0 || n > all.len() {
                return Err(Error::Config(format!(
                    "n_known_classes must be in 1..={}, got {n}",
                    all.len()
                )));
            }
            s.known_classes = all[..n].to_vec();
            s.unknown_classes = all[n..].to_vec();
        }
        SweepAxis::NUnknownClasses => {
            let n = count_value(value, axis)?;
            if n > base.unknown_classes.len() {
                return Err(Error::Config(format!(
                    "n_unknown_classes must be at most {}, got {n}",
                    base.unknown_classes.len()
                )));
            }
            s.unknown_classes = base.unknown_classes[..n].to_vec();
        }
    }
    s.validate()?;
    Ok(s)
}

/// One experiment per value along `axis`.
pub fn sweep(
    records: &[FlowRecord],
    base: &ExperimentSetting,
    axis: SweepAxis,
    values: &[f64],
    cfg: &ExperimentConfig,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&value| {
            let setting = sweep_setting(base, axis, value)?;
            let included: BTreeSet<&str> = setting
                .known_classes
                .iter()
                .chain(&setting.unknown_classes)
                .map(String::as_str)
                .collect();
            let subset: Vec<FlowRecord> = records
                .iter()
                .filter(|r| r.true_label.as_deref().is_some_and(|l| included.contains(l)))
                .cloned()
                .collect();
            let result = run_experiment(&subset, &setting, cfg)?;
            log::info!(
                "sweep {axis}={value}: accuracy {:.4}, known accuracy {:.4}",
                result.metrics.accuracy,
                result.summary.known_accuracy
            );
            Ok(SweepRow {
                axis,
                value,
                metrics: result.metrics,
                summary: result.summary,
            })
        })
        .collect()
}

/// Delimited table, one row per sweep point.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let err = |e: csv::Error| Error::InvalidInput(format!("writing sweep table: {e}"));
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "axis",
        "value",
        "accuracy",
        "precision",
        "recall",
        "fpr",
        "known_accuracy",
        "unknown_recall",
        "pseudo_label_precision",
        "expert_proportion",
        "steps",
    ])
    .map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.axis.to_string(),
            r.value.to_string(),
            r.metrics.accuracy.to_string(),
            r.metrics.precision.to_string(),
            r.metrics.recall.to_string(),
            r.metrics.fpr.to_string(),
            r.summary.known_accuracy.to_string(),
            opt(r.summary.unknown_recall),
            opt(r.summary.pseudo_label_precision),
            r.summary.expert_proportion.to_string(),
            r.summary.steps.to_string(),
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| Error::InvalidInput(format!("writing sweep table: {e}")))?;
    Ok(())
}
