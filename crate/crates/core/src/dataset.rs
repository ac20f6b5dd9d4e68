//! Flow-feature records, experiment splits and the synthetic benchmark generator.
//!
//! Files are comma-delimited with a header `id,label,f0,...,f{d-1}`. The label
//! cell may be empty. Record ids are assigned by row order, so the same file
//! always produces the same ids.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type RecordId = u64;

/// Slack used when flooring products of ratios and counts, so that e.g.
/// `0.3 * 60` lands on 18 rather than 17.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub id: RecordId,
    pub features: Vec<f64>,
    /// Ground truth, used for evaluation only.
    pub true_label: Option<String>,
}

/// Ordered set of known class names. The position of a class is its model
/// output index, and the version increases every time a class is added.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    classes: Vec<String>,
    version: u64,
}

impl LabelSet {
    pub fn new<I, S>(classes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        let unique: BTreeSet<&String> = classes.iter().collect();
        if unique.len() != classes.len() {
            return Err(Error::InvalidInput(
                "label set contains duplicate class names".into(),
            ));
        }
        Ok(Self {
            classes,
            version: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn names(&self) -> &[String] {
        &self.classes
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.classes.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Appends a new class and bumps the version. Returns the new class index.
    pub fn push(&mut self, name: impl Into<String>) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::InvalidInput(format!(
                "class `{name}` is already in the label set"
            )));
        }
        self.classes.push(name);
        self.version += 1;
        Ok(self.classes.len() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertMode {
    NoExpert,
    WithExpert,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetting {
    pub known_classes: Vec<String>,
    pub unknown_classes: Vec<String>,
    pub known_fraction: f64,
    pub split_ratio: SplitRatio,
    pub expert_mode: ExpertMode,
    pub seed: u64,
}

impl ExperimentSetting {
    pub fn new<K, U>(known: K, unknown: U) -> Self
    where
        K: IntoIterator,
        K::Item: Into<String>,
        U: IntoIterator,
        U::Item: Into<String>,
    {
        Self {
            known_classes: known.into_iter().map(Into::into).collect(),
            unknown_classes: unknown.into_iter().map(Into::into).collect(),
            known_fraction: 0.30,
            split_ratio: SplitRatio::default(),
            expert_mode: ExpertMode::NoExpert,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.known_classes.is_empty() {
            return Err(Error::Config("at least one known class is required".into()));
        }
        let known: BTreeSet<&String> = self.known_classes.iter().collect();
        let unknown: BTreeSet<&String> = self.unknown_classes.iter().collect();
        if known.len() != self.known_classes.len() || unknown.len() != self.unknown_classes.len()
        {
            return Err(Error::Config("duplicate class in setting".into()));
        }
        if let Some(c) = known.intersection(&unknown).next() {
            return Err(Error::Config(format!(
                "class `{c}` is listed as both known and unknown"
            )));
        }
        if !(self.known_fraction > 0.0 && self.known_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "known_fraction must lie in (0, 1], got {}",
                self.known_fraction
            )));
        }
        let SplitRatio { train, val, test } = self.split_ratio;
        if !(train > 0.0 && val > 0.0 && test > 0.0) {
            return Err(Error::Config("split ratios must be positive".into()));
        }
        if ((train + val + test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {}",
                train + val + test
            )));
        }
        Ok(())
    }
}

/// Known/unknown partitions of the ISCXTor categories used in the published
/// experiments.
pub mod presets {
    use super::ExperimentSetting;

    pub const ISCX_TOR_CLASSES: [&str; 8] = [
        "Audio",
        "Browsing",
        "Chat",
        "FILE-Transfer",
        "Mail",
        "P2P",
        "Video",
        "VOIP",
    ];

    /// Per-class flow counts of the ISCXTor feature set.
    pub const ISCX_TOR_COUNTS: [(&str, usize); 8] = [
        ("Audio", 1026),
        ("Browsing", 2645),
        ("Chat", 485),
        ("FILE-Transfer", 1663),
        ("Mail", 497),
        ("P2P", 2139),
        ("Video", 1529),
        ("VOIP", 4524),
    ];

    pub fn iscx_tor_setting1() -> ExperimentSetting {
        ExperimentSetting::new(
            ["VOIP", "P2P", "FILE-Transfer"],
            ["Browsing", "Video", "Mail", "Audio", "Chat"],
        )
    }

    pub fn iscx_tor_setting2() -> ExperimentSetting {
        ExperimentSetting::new(
            ["VOIP", "Video", "P2P", "Chat", "FILE-Transfer"],
            ["Browsing", "Mail", "Audio"],
        )
    }
}

/// How a labeled record obtained its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelOrigin {
    Initial,
    Pseudo { step: u64 },
    Expert { group: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub record: FlowRecord,
    /// Index into the bundle's [`LabelSet`].
    pub label: usize,
    pub origin: LabelOrigin,
}

/// Per-feature standardization fitted on the labeled training records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a, I>(rows: I, dim: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, features: &mut [f64]) {
        for ((v, m), s) in features.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

/// Everything one experiment works on. Unlabeled and validation records have
/// their ground truth moved into `hidden_truth`, which only the evaluation
/// harness and the simulated expert read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub labeled: Vec<LabeledRecord>,
    pub unlabeled: Vec<FlowRecord>,
    /// Held-out validation records. Their labels are used for early stopping
    /// whenever the class is in the current label set.
    pub validation: Vec<FlowRecord>,
    pub test: Vec<FlowRecord>,
    pub label_set: LabelSet,
    pub hidden_truth: BTreeMap<RecordId, String>,
    pub standardizer: Standardizer,
}

impl DatasetBundle {
    pub fn dim(&self) -> usize {
        self.standardizer.mean.len()
    }

    /// Validation samples whose class is currently known, as `(features, index)`.
    pub fn validation_samples(&self) -> Vec<(&[f64], usize)> {
        self.validation
            .iter()
            .filter_map(|r| {
                let label = r.true_label.as_deref()?;
                let idx = self.label_set.index_of(label)?;
                Some((r.features.as_slice(), idx))
            })
            .collect()
    }

    pub fn labeled_samples(&self) -> Vec<(&[f64], usize)> {
        self.labeled
            .iter()
            .map(|l| (l.record.features.as_slice(), l.label))
            .collect()
    }
}

/// Describes the expected columns of a flow-feature file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecordSchema {
    /// Expected feature dimensionality; `None` accepts whatever the header declares.
    pub dim: Option<usize>,
}

impl RecordSchema {
    pub fn with_dim(dim: usize) -> Self {
        Self { dim: Some(dim) }
    }
}

pub fn load_records(path: impl AsRef<Path>, schema: &RecordSchema) -> Result<Vec<FlowRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(file, schema)
}

pub fn read_records<R: std::io::Read>(reader: R, schema: &RecordSchema) -> Result<Vec<FlowRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .clone();
    if header.len() < 2 || &header[0] != "id" || &header[1] != "label" {
        return Err(Error::Schema(
            "header must start with `id,label` followed by feature columns".into(),
        ));
    }
    let dim = header.len() - 2;
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Schema(format!(
                "feature column {j} must be named `f{j}`, found `{name}`"
            )));
        }
    }
    if let Some(expected) = schema.dim {
        if expected != dim {
            return Err(Error::Schema(format!(
                "header declares {dim} features but {expected} were expected"
            )));
        }
    }

    let mut out = Vec::new();
    for (row, result) in rdr.records().enumerate() {
        let rec = result.map_err(|e| Error::MalformedRow {
            row,
            column: "*".into(),
            message: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(Error::MalformedRow {
                row,
                column: "*".into(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let label = rec[1].trim();
        let mut features = Vec::with_capacity(dim);
        for j in 0..dim {
            let cell = rec[j + 2].trim();
            let value: f64 = cell.parse().map_err(|_| Error::MalformedRow {
                row,
                column: format!("f{j}"),
                message: format!("`{cell}` is not a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::MalformedRow {
                    row,
                    column: format!("f{j}"),
                    message: format!("`{cell}` is not finite"),
                });
            }
            features.push(value);
        }
        out.push(FlowRecord {
            id: row as RecordId,
            features,
            true_label: (!label.is_empty()).then(|| label.to_string()),
        });
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[FlowRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_records_to(&mut w, records).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_records_to<W: Write>(w: &mut W, records: &[FlowRecord]) -> std::io::Result<()> {
    let dim = records.first().map_or(0, |r| r.features.len());
    write!(w, "id,label")?;
    for j in 0..dim {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for r in records {
        write!(w, "{},{}", r.id, r.true_label.as_deref().unwrap_or(""))?;
        for v in &r.features {
            // `{:?}` prints the shortest string that parses back to the same f64.
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn class_counts(records: &[FlowRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        if let Some(l) = &r.true_label {
            *counts.entry(l.clone()).or_insert(0) += 1;
        }
    }
    counts
}

fn floor_share(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + FLOOR_SLACK).floor() as usize
}

/// Builds the labeled / unlabeled / validation / test partition for one setting.
///
/// Every class is split on its own (stratified) with the requested ratios,
/// flooring the validation and test shares so that the remainder stays in the
/// training share. Within the training share a `known_fraction` of each known
/// class is labeled; everything else in the training share, including every
/// unknown-class record, becomes unlabeled.
pub fn make_setting_bundle(
    records: &[FlowRecord],
    setting: &ExperimentSetting,
) -> Result<DatasetBundle> {
    setting.validate()?;
    let dim = records
        .first()
        .map(|r| r.features.len())
        .ok_or_else(|| Error::InvalidInput("no records".into()))?;

    let mut by_class: BTreeMap<&str, Vec<&FlowRecord>> = BTreeMap::new();
    for r in records {
        if r.features.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: r.features.len(),
            });
        }
        let label = r.true_label.as_deref().ok_or_else(|| {
            Error::InvalidInput(format!("record {} has no ground-truth label", r.id))
        })?;
        by_class.entry(label).or_default().push(r);
    }

    for c in setting.known_classes.iter().chain(&setting.unknown_classes) {
        if !by_class.contains_key(c.as_str()) {
            return Err(Error::Config(format!("class `{c}` does not occur in the records")));
        }
    }
    let covered: BTreeSet<&str> = setting
        .known_classes
        .iter()
        .chain(&setting.unknown_classes)
        .map(String::as_str)
        .collect();
    if let Some(extra) = by_class.keys().find(|c| !covered.contains(*c)) {
        return Err(Error::Config(format!(
            "class `{extra}` is neither known nor unknown in this setting"
        )));
    }

    let label_set = LabelSet::new(setting.known_classes.iter().cloned())?;
    let mut rng = ChaCha8Rng::seed_from_u64(setting.seed);

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();

    for (class, members) in &by_class {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = floor_share(setting.split_ratio.test, n);
        let n_val = floor_share(setting.split_ratio.val, n);
        let (test_part, rest) = members.split_at(n_test);
        let (val_part, train_part) = rest.split_at(n_val);
        test.extend(test_part.iter().map(|r| (*r).clone()));
        validation.extend(val_part.iter().map(|r| (*r).clone()));

        match label_set.index_of(class) {
            Some(label) => {
                let mut n_lab = floor_share(setting.known_fraction, train_part.len());
                if n_lab == 0 && !train_part.is_empty() {
                    n_lab = 1;
                }
                let (lab, unlab) = train_part.split_at(n_lab);
                labeled.extend(lab.iter().map(|r| LabeledRecord {
                    record: (*r).clone(),
                    label,
                    origin: LabelOrigin::Initial,
                }));
                unlabeled.extend(unlab.iter().map(|r| (*r).clone()));
            }
            None => unlabeled.extend(train_part.iter().map(|r| (*r).clone())),
        }
    }

    labeled.sort_by_key(|l| l.record.id);
    unlabeled.sort_by_key(|r| r.id);
    validation.sort_by_key(|r| r.id);
    test.sort_by_key(|r| r.id);

    let standardizer = Standardizer::fit(labeled.iter().map(|l| l.record.features.as_slice()), dim);
    let mut hidden_truth = BTreeMap::new();
    for l in &mut labeled {
        standardizer.apply(&mut l.record.features);
    }
    for r in unlabeled.iter_mut() {
        standardizer.apply(&mut r.features);
        if let Some(t) = r.true_label.take() {
            hidden_truth.insert(r.id, t);
        }
    }
    for r in validation.iter_mut().chain(test.iter_mut()) {
        standardizer.apply(&mut r.features);
    }

    Ok(DatasetBundle {
        labeled,
        unlabeled,
        validation,
        test,
        label_set,
        hidden_truth,
        standardizer,
    })
}

/// Name of the `index`-th synthetic class, zero-padded so that lexical and
/// numeric order agree.
pub fn synth_class_name(index: usize, n_classes: usize) -> String {
    let width = (n_classes.saturating_sub(1)).to_string().len();
    format!("C{index:0width$}")
}

/// Isotropic unit-variance Gaussian blobs with pairwise mean distance of at
/// least `separation`.
///
/// When `d >= n_classes` the means sit on scaled coordinate axes
/// (`separation / sqrt(2) * e_i`), so every pair is exactly `separation`
/// apart; otherwise they are spaced `separation` apart along the first axis.
pub fn synth_gaussians(
    n_classes: usize,
    per_class: usize,
    d: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<FlowRecord>> {
    if n_classes < 2 || per_class < 10 || d == 0 || !(separation > 0.0) {
        return Err(Error::InvalidInput(format!(
            "synth_gaussians needs n_classes >= 2, per_class >= 10, d >= 1 and \
             separation > 0 (got {n_classes}, {per_class}, {d}, {separation})"
        )));
    }
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            let mut m = vec![0.0; d];
            if d >= n_classes {
                m[c] = separation / std::f64::consts::SQRT_2;
            } else {
                m[0] = c as f64 * separation;
            }
            m
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        let name = synth_class_name(c, n_classes);
        for _ in 0..per_class {
            let features = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z
                })
                .collect();
            out.push(FlowRecord {
                id: out.len() as RecordId,
                features,
                true_label: Some(name.clone()),
            });
        }
    }
    Ok(out)
}
