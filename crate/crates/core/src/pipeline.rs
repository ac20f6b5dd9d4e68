//! The iterative four-stage loop, its state, stop rule, checkpoints and run log.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::alignment::{align, AlignConfig, Alignment, ClassCentroids};
use crate::classifier::{train, Architecture, Classifier, TrainConfig};
use crate::clustering::{
    dbscan, default_min_pts, suggest_eps_at, ClusterAssignment, DEFAULT_EPS_QUANTILE,
};
use crate::dataset::{DatasetBundle, ExpertMode, FlowRecord, RecordId};
use crate::evaluation::{evaluate, Evaluation, InferenceRule};
use crate::updater::{
    apply_decisions, consistency_check, expert_resolve, Candidate, ConsistencyConfig,
    ExpansionRequest, ExpertQueue, OracleExpert, Verdict,
};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EXPAND: u64 = 3;

/// Independent per-purpose, per-step seed derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64, step: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    /// Fixed DBSCAN radius; `None` picks it per step from the k-distance heuristic.
    pub eps: Option<f64>,
    /// Percentile of the k-distance curve used when `eps` is `None`.
    pub eps_quantile: f64,
    /// Fixed density threshold; `None` uses `max(4, ceil(log2 n))`.
    pub min_pts: Option<usize>,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            eps: None,
            eps_quantile: DEFAULT_EPS_QUANTILE,
            min_pts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let a = Architecture::standard(0);
        Self {
            hidden: a.hidden,
            embedding_dim: a.embedding_dim,
        }
    }
}

impl ModelShape {
    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            embedding_dim: self.embedding_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub align: AlignConfig,
    pub consistency: ConsistencyConfig,
    pub clustering: ClusteringConfig,
    pub model: ModelShape,
    /// Continue from the previous step's model instead of re-initializing.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            align: AlignConfig::default(),
            consistency: ConsistencyConfig::default(),
            clustering: ClusteringConfig::default(),
            model: ModelShape::default(),
            warm_start: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.align.validate()?;
        self.consistency.validate()?;
        if let Some(eps) = self.clustering.eps {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::Config(format!("eps must be positive, got {eps}")));
            }
        }
        let q = self.clustering.eps_quantile;
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Config(format!("eps_quantile must lie in (0, 1], got {q}")));
        }
        if self.clustering.min_pts == Some(0) {
            return Err(Error::Config("min_pts must be at least 1".into()));
        }
        if self.model.embedding_dim == 0 || self.model.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Who answers for detected unknown groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertPolicy {
    /// Detected samples are final unknowns.
    None,
    /// Groups are labeled automatically from ground truth.
    Oracle,
    /// Groups wait in the queue for verdicts staged from outside.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopRule {
    pub max_steps: u64,
    /// Consecutive steps without any acceptance or detection that end the run.
    pub quiet_steps: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            max_steps: 15,
            quiet_steps: 2,
        }
    }
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.quiet_steps == 0 {
            return Err(Error::Config("max_steps and quiet_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalUnknown {
    pub record: FlowRecord,
    pub step: u64,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    /// Number of completed steps.
    pub step: u64,
    pub bundle: DatasetBundle,
    pub model: Classifier,
    pub queue: ExpertQueue,
    pub final_unknowns: Vec<FinalUnknown>,
    pub config: PipelineConfig,
    pub policy: ExpertPolicy,
    pub expert: Option<OracleExpert>,
    /// Rule applied to test samples; set once a step has recorded a bottom band.
    pub inference: Option<InferenceRule>,
    /// Labeled plus unlabeled records at the start of the run.
    pub initial_pool_size: usize,
    pub quiet_streak: u64,
}

/// Where a training-share sample currently lives.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdPartition {
    pub labeled: BTreeSet<RecordId>,
    pub unlabeled: BTreeSet<RecordId>,
    pub queued: BTreeSet<RecordId>,
    pub final_unknown: BTreeSet<RecordId>,
}

impl IdPartition {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.queued.len() + self.final_unknown.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All ids, or `None` when some id appears in more than one place.
    pub fn union_if_disjoint(&self) -> Option<BTreeSet<RecordId>> {
        let mut all = BTreeSet::new();
        for set in [&self.labeled, &self.unlabeled, &self.queued, &self.final_unknown] {
            for id in set {
                if !all.insert(*id) {
                    return None;
                }
            }
        }
        Some(all)
    }
}

impl PipelineState {
    /// Fresh state at step 0. `WithExpert` uses the oracle expert; see
    /// [`PipelineState::with_policy`] for externally supplied verdicts.
    pub fn new(bundle: DatasetBundle, mode: ExpertMode, config: PipelineConfig) -> Result<Self> {
        let policy = match mode {
            ExpertMode::NoExpert => ExpertPolicy::None,
            ExpertMode::WithExpert => ExpertPolicy::Oracle,
        };
        Self::with_policy(bundle, policy, config)
    }

    pub fn with_policy(bundle: DatasetBundle, policy: ExpertPolicy, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        if bundle.label_set.is_empty() {
            return Err(Error::Config("the label set is empty".into()));
        }
        let arch = config.model.architecture(bundle.dim());
        let mut model = Classifier::new(
            &arch,
            bundle.label_set.len(),
            derive_seed(config.seed, STREAM_INIT, 0),
        )?;
        model.label_version = bundle.label_set.version();
        Ok(Self {
            step: 0,
            initial_pool_size: bundle.labeled.len() + bundle.unlabeled.len(),
            bundle,
            model,
            queue: ExpertQueue::new(),
            final_unknowns: Vec::new(),
            config,
            policy,
            expert: (policy == ExpertPolicy::Oracle).then(OracleExpert::default),
            inference: None,
            quiet_streak: 0,
        })
    }

    pub fn id_partition(&self) -> IdPartition {
        IdPartition {
            labeled: self.bundle.labeled.iter().map(|l| l.record.id).collect(),
            unlabeled: self.bundle.unlabeled.iter().map(|r| r.id).collect(),
            queued: self.queue.held_ids(),
            final_unknown: self.final_unknowns.iter().map(|f| f.record.id).collect(),
        }
    }

    /// Evaluates the current model on the test share.
    pub fn evaluate(&self) -> Result<Evaluation> {
        evaluate(&self.model, &self.bundle.test, &self.bundle.label_set, self.inference.as_ref())
    }

    /// Current embeddings of the unlabeled pool.
    pub fn pool_embeddings(&self) -> Result<Vec<(RecordId, Vec<f64>)>> {
        self.bundle
            .unlabeled
            .iter()
            .map(|r| Ok((r.id, self.model.embed(&r.features)?)))
            .collect()
    }

    /// Stages a verdict for the next step.
    pub fn stage_verdict(&mut self, gid: u64, verdict: Verdict) -> Result<crate::updater::StageOutcome> {
        self.queue.stage(gid, verdict)
    }

    pub fn checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint(self, path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub size: usize,
    pub alignment: Alignment,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounts {
    pub accepted: usize,
    pub detected_unknown: usize,
    /// Deferred samples that belonged to a cluster.
    pub deferred: usize,
    /// DBSCAN noise; always deferred.
    pub noise: usize,
}

impl StepCounts {
    pub fn total(&self) -> usize {
        self.accepted + self.detected_unknown + self.deferred + self.noise
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedVerdict {
    pub gid: u64,
    pub verdict: Verdict,
}

/// Statistics of one completed step. Immutable once emitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    /// Unlabeled pool size entering the decision stage.
    pub pool_size: usize,
    pub counts: StepCounts,
    pub accepted_per_class: BTreeMap<String, usize>,
    pub labeled_size: usize,
    pub label_set: Vec<String>,
    pub label_set_version: u64,
    pub verdicts_applied: Vec<AppliedVerdict>,
    pub groups_queued: Vec<u64>,
    pub n_clusters: usize,
    pub clusters: Vec<ClusterSummary>,
    pub eps: Option<f64>,
    pub min_pts: Option<usize>,
    pub align_threshold: f64,
    pub top_count: usize,
    pub bottom_count: usize,
    pub confidence_cutoff: Option<f64>,
    pub train_loss: f64,
    pub epochs_run: usize,
    pub evaluation: Option<Evaluation>,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// One iteration: apply staged verdicts, train, embed and cluster the pool,
/// align clusters, then decide every pool sample.
pub fn run_step(state: PipelineState) -> Result<(PipelineState, StepReport)> {
    let started = Instant::now();
    let mut state = state;
    let step = state.step + 1;
    let seed = state.config.seed;

    let mut verdicts_applied = Vec::new();
    for (gid, verdict) in state.queue.take_staged() {
        let (bundle, expansion) = expert_resolve(&mut state.queue, gid, &verdict, state.bundle)?;
        state.bundle = bundle;
        if let Some(ExpansionRequest { new_k }) = expansion {
            state.model = state
                .model
                .expand_output(new_k, derive_seed(seed, STREAM_EXPAND, step ^ (gid << 32)))?;
        }
        verdicts_applied.push(AppliedVerdict { gid, verdict });
    }
    state.model.label_version = state.bundle.label_set.version();

    if state.bundle.labeled.is_empty() {
        return Err(Error::InvalidInput("the labeled set is empty".into()));
    }
    let base = if state.config.warm_start {
        state.model.clone()
    } else {
        let arch = state.config.model.architecture(state.bundle.dim());
        let mut m = Classifier::new(
            &arch,
            state.bundle.label_set.len(),
            derive_seed(seed, STREAM_INIT, step),
        )?;
        m.label_version = state.bundle.label_set.version();
        m
    };
    let train_cfg = TrainConfig {
        seed: derive_seed(seed, STREAM_TRAIN, step),
        ..state.config.train.clone()
    };
    let trained = train(
        &base,
        &state.bundle.labeled_samples(),
        &state.bundle.validation_samples(),
        &train_cfg,
    )?;
    state.model = trained.model;
    let train_loss = trained.epoch_losses.last().copied().unwrap_or(f64::NAN);

    let labeled_embeddings: Vec<Vec<f64>> = state
        .bundle
        .labeled
        .iter()
        .map(|l| state.model.embed(&l.record.features))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = state.bundle.labeled.iter().map(|l| l.label).collect();
    let centroids = ClassCentroids::from_embeddings(&labeled_embeddings, &labels)?;
    let threshold = state.config.align.resolve(&centroids)?;

    let pool_size = state.bundle.unlabeled.len();
    let mut counts = StepCounts::default();
    let mut accepted_per_class = BTreeMap::new();
    let mut groups_queued = Vec::new();
    let mut clusters = Vec::new();
    let mut eps_used = None;
    let mut min_pts_used = None;
    let mut n_clusters = 0;
    let mut top_count = 0;
    let mut bottom_count = 0;
    let mut confidence_cutoff = None;

    if pool_size > 0 {
        let forwards: Vec<_> = state
            .bundle
            .unlabeled
            .iter()
            .map(|r| state.model.forward(&r.features))
            .collect::<Result<_>>()?;
        let embeddings: Vec<&[f64]> = forwards.iter().map(|f| f.embedding.as_slice()).collect();

        let min_pts = state.config.clustering.min_pts.unwrap_or_else(|| default_min_pts(pool_size));
        let eps = match state.config.clustering.eps {
            Some(e) => Some(e),
            None if pool_size > min_pts => Some(suggest_eps_at(
                &embeddings,
                min_pts,
                state.config.clustering.eps_quantile,
            )?),
            None => None,
        };
        let assignment = match eps {
            Some(e) if e > 0.0 => dbscan(&embeddings, e, min_pts)?,
            _ => ClusterAssignment::all_noise(pool_size, eps.unwrap_or(0.0), min_pts),
        };
        eps_used = eps;
        min_pts_used = Some(min_pts);
        n_clusters = assignment.n_clusters;

        let alignments = align(&embeddings, &assignment, &centroids, threshold)?;
        let cluster_sizes: Vec<usize> = assignment.members().iter().map(Vec::len).collect();
        clusters = cluster_sizes
            .iter()
            .zip(&alignments)
            .map(|(&size, &alignment)| ClusterSummary { size, alignment })
            .collect();

        let candidates: Vec<Candidate> = state
            .bundle
            .unlabeled
            .iter()
            .zip(forwards)
            .zip(&assignment.labels)
            .map(|((r, f), label)| {
                let cluster = label.cluster();
                Candidate {
                    id: r.id,
                    probs: f.probs,
                    alignment: cluster.map(|c| alignments[c]),
                    cluster,
                }
            })
            .collect();
        let outcome = consistency_check(&candidates, &state.config.consistency)?;
        top_count = outcome.top_count;
        bottom_count = outcome.bottom_count;
        confidence_cutoff = outcome.confidence_cutoff;
        for d in &outcome.decisions {
            if d.cluster.is_none() {
                counts.noise += 1;
            }
        }

        let (bundle, groups, applied) =
            apply_decisions(state.bundle, &outcome.decisions, &cluster_sizes, step)?;
        state.bundle = bundle;
        counts.accepted = applied.accepted;
        counts.detected_unknown = applied.detected_unknown;
        counts.deferred = applied.deferred - counts.noise;
        for d in &outcome.decisions {
            if let crate::updater::Decision::AcceptPseudoLabel { class } = d.decision {
                let name = state.bundle.label_set.name(class).unwrap_or("?").to_string();
                *accepted_per_class.entry(name).or_insert(0) += 1;
            }
        }

        for group in groups {
            match state.policy {
                ExpertPolicy::None => {
                    let cluster = group.cluster;
                    state.final_unknowns.extend(group.samples.into_iter().map(|record| FinalUnknown {
                        record,
                        step,
                        cluster,
                    }));
                }
                ExpertPolicy::Oracle | ExpertPolicy::External => {
                    let gid = state.queue.push(group);
                    groups_queued.push(gid);
                }
            }
        }
        if let Some(oracle) = state.expert.as_mut() {
            for &gid in &groups_queued {
                let group = state.queue.group(gid).ok_or(Error::UnknownGroup(gid))?;
                let verdict = oracle.verdict(group, &state.bundle.hidden_truth)?;
                state.queue.stage(gid, verdict)?;
            }
        }
    }

    let cutoff = confidence_cutoff.or(state.inference.as_ref().map(|r| r.confidence_cutoff));
    state.inference = cutoff.map(|confidence_cutoff| InferenceRule {
        confidence_cutoff,
        threshold,
        centroids,
    });

    if counts.accepted + counts.detected_unknown == 0 {
        state.quiet_streak += 1;
    } else {
        state.quiet_streak = 0;
    }
    state.step = step;

    let evaluation = if state.bundle.test.is_empty() {
        None
    } else {
        Some(state.evaluate()?)
    };

    let report = StepReport {
        step,
        pool_size,
        counts,
        accepted_per_class,
        labeled_size: state.bundle.labeled.len(),
        label_set: state.bundle.label_set.names().to_vec(),
        label_set_version: state.bundle.label_set.version(),
        verdicts_applied,
        groups_queued,
        n_clusters,
        clusters,
        eps: eps_used,
        min_pts: min_pts_used,
        align_threshold: threshold,
        top_count,
        bottom_count,
        confidence_cutoff,
        train_loss,
        epochs_run: trained.epoch_losses.len(),
        evaluation,
        wall_time: started.elapsed(),
    };
    log::info!(
        "step {step}: pool {pool_size}, accepted {}, unknown {}, deferred {}, noise {}, clusters {n_clusters}",
        report.counts.accepted,
        report.counts.detected_unknown,
        report.counts.deferred,
        report.counts.noise
    );
    Ok((state, report))
}

/// Whether `rule` says the run is over for `state`.
pub fn should_stop(state: &PipelineState, rule: &StopRule) -> bool {
    state.step >= rule.max_steps || state.quiet_streak >= rule.quiet_steps
}

/// Steps until the stop rule fires.
pub fn run(state: PipelineState, rule: &StopRule) -> Result<(PipelineState, Vec<StepReport>)> {
    run_with_hook(state, rule, |_, _| Ok(()))
}

/// Like [`run`], calling `hook` after every step (e.g. to append to a run log).
pub fn run_with_hook<F>(
    mut state: PipelineState,
    rule: &StopRule,
    mut hook: F,
) -> Result<(PipelineState, Vec<StepReport>)>
where
    F: FnMut(&PipelineState, &StepReport) -> Result<()>,
{
    rule.validate()?;
    let mut reports = Vec::new();
    while !should_stop(&state, rule) {
        let (next, report) = run_step(state)?;
        state = next;
        hook(&state, &report)?;
        reports.push(report);
    }
    Ok((state, reports))
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    state: PipelineState,
}

pub fn checkpoint(state: &PipelineState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        state: state.clone(),
    };
    let text = serde_json::to_vec(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn restore(path: impl AsRef<Path>) -> Result<PipelineState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| {
        Error::Checkpoint(format!("{} is corrupt or truncated: {e}", path.display()))
    })?;
    let version = value.get("format_version").and_then(serde_json::Value::as_u64);
    if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint format version {version:?} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
            path.display()
        )));
    }
    // Re-parse from bytes rather than the `Value` so floats keep every bit.
    let file: CheckpointFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{} has an invalid state: {e}", path.display())))?;
    let state = file.state;
    if state.model.n_classes() != state.bundle.label_set.len() {
        return Err(Error::Checkpoint(format!(
            "{}: model has {} outputs but the label set has {} classes",
            path.display(),
            state.model.n_classes(),
            state.bundle.label_set.len()
        )));
    }
    Ok(state)
}

/// Appends one report as a JSON line.
pub fn write_report_line<W: Write>(w: &mut W, report: &StepReport) -> Result<()> {
    serde_json::to_writer(&mut *w, report)?;
    w.write_all(b"\n")
        .map_err(|e| Error::InvalidInput(format!("writing run log: {e}")))
}

pub fn write_run_log(path: impl AsRef<Path>, reports: &[StepReport]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in reports {
        write_report_line(&mut buf, r)?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_run_log(path: impl AsRef<Path>) -> Result<Vec<StepReport>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let report = serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
            row: i,
            column: "report".into(),
            message: e.to_string(),
        })?;
        out.push(report);
    }
    Ok(out)
}
