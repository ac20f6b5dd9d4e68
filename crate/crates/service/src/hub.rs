//! Shared snapshot between the pipeline thread and HTTP handlers.
//!
//! Handlers only ever read a published snapshot or stage verdicts into its
//! queue copy. The pipeline thread folds staged verdicts into the real state
//! between steps and publishes a fresh snapshot after each one.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex, RwLock, RwLockReadGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use trafficsift_core::evaluation::{Evaluation, MetricSet};
use trafficsift_core::pipeline::{PipelineState, StepReport};
use trafficsift_core::updater::{ExpertGroup, ExpertQueue, GroupStatus, StageOutcome, Verdict};
use trafficsift_core::Error;

use crate::projection::{EmbeddingProjection, ProjectedCentroid, ProjectedPoint, Pca2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Training,
    AwaitingExpert,
    Done,
}

/// Everything the API serves, taken from one completed step.
#[derive(Debug, Clone)]
pub struct ApiSnapshot {
    pub step: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub reports: Vec<StepReport>,
    pub label_set: Vec<String>,
    pub label_set_version: u64,
    /// The step's queue plus any verdicts staged since.
    pub queue: ExpertQueue,
    pub evaluation: Option<Evaluation>,
    pub projection: Option<EmbeddingProjection>,
    /// Projected members of each pending group.
    pub members: BTreeMap<u64, Vec<ProjectedPoint>>,
}

impl ApiSnapshot {
    pub fn initial(state: &PipelineState) -> Self {
        Self {
            step: state.step,
            status: RunStatus::Training,
            error: None,
            reports: Vec::new(),
            label_set: state.bundle.label_set.names().to_vec(),
            label_set_version: state.bundle.label_set.version(),
            queue: state.queue.clone(),
            evaluation: None,
            projection: None,
            members: BTreeMap::new(),
        }
    }

    /// Builds the snapshot published after `report`.
    pub fn after_step(state: &PipelineState, reports: Vec<StepReport>) -> trafficsift_core::Result<Self> {
        let evaluation = reports.last().and_then(|r| r.evaluation.clone());
        let (projection, members) = project(state)?;
        Ok(Self {
            step: state.step,
            status: RunStatus::Training,
            error: None,
            reports,
            label_set: state.bundle.label_set.names().to_vec(),
            label_set_version: state.bundle.label_set.version(),
            queue: state.queue.clone(),
            evaluation,
            projection,
            members,
        })
    }

    pub fn group_view(&self, group: &ExpertGroup) -> GroupView {
        GroupView::new(group, self.queue.staged_verdict(group.gid))
    }

    /// True when every pending group has a staged verdict.
    pub fn all_pending_staged(&self) -> bool {
        self.queue.pending().all(|g| self.queue.staged_verdict(g.gid).is_some())
    }
}

type Projected = (Option<EmbeddingProjection>, BTreeMap<u64, Vec<ProjectedPoint>>);

fn project(state: &PipelineState) -> trafficsift_core::Result<Projected> {
    let pool = state.pool_embeddings()?;
    let mut pending = Vec::new();
    for g in state.queue.pending() {
        let mut emb = Vec::with_capacity(g.samples.len());
        for r in &g.samples {
            emb.push((r.id, state.model.embed(&r.features)?));
        }
        pending.push((g.gid, emb));
    }
    let mut fit_rows: Vec<Vec<f64>> = pool.iter().map(|(_, e)| e.clone()).collect();
    if fit_rows.len() < 2 {
        fit_rows.extend(pending.iter().flat_map(|(_, m)| m.iter().map(|(_, e)| e.clone())));
    }
    let Some(pca) = Pca2::fit(&fit_rows) else {
        return Ok((None, BTreeMap::new()));
    };
    let point = |id: u64, e: &[f64]| {
        let [x, y] = pca.project(e);
        ProjectedPoint { id, x, y }
    };

    let names = state.bundle.label_set.names();
    let mut sums: Vec<(Vec<f64>, usize)> = vec![(Vec::new(), 0); names.len()];
    for l in &state.bundle.labeled {
        let e = state.model.embed(&l.record.features)?;
        let (sum, n) = &mut sums[l.label];
        if sum.is_empty() {
            *sum = vec![0.0; e.len()];
        }
        sum.iter_mut().zip(&e).for_each(|(s, v)| *s += v);
        *n += 1;
    }
    let centroids = names
        .iter()
        .zip(&sums)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(name, (sum, n))| {
            let mean: Vec<f64> = sum.iter().map(|s| s / *n as f64).collect();
            let [x, y] = pca.project(&mean);
            ProjectedCentroid {
                class_name: name.clone(),
                x,
                y,
            }
        })
        .collect();

    let members = pending
        .into_iter()
        .map(|(gid, m)| (gid, m.iter().map(|(id, e)| point(*id, e)).collect()))
        .collect();
    let projection = EmbeddingProjection {
        step: state.step,
        explained_variance: pca.explained_variance.clone(),
        points: pool.iter().map(|(id, e)| point(*id, e)).collect(),
        centroids,
    };
    Ok((Some(projection), members))
}

/// Lifecycle of a group as the console shows it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CardStatus {
    Pending,
    Staged,
    Labeled,
    Dismissed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupView {
    pub gid: u64,
    pub step: u64,
    pub cluster: Option<usize>,
    pub status: CardStatus,
    /// Applied or staged class name, if any.
    pub class_name: Option<String>,
    pub staged_verdict: Option<Verdict>,
    pub sample_count: usize,
    pub cluster_size: usize,
    pub mean_confidence: f64,
    pub distance_to_nearest_class: Option<f64>,
    pub representative_ids: Vec<u64>,
}

impl GroupView {
    pub fn new(group: &ExpertGroup, staged: Option<&Verdict>) -> Self {
        let (status, class_name) = match (&group.status, staged) {
            (GroupStatus::Labeled { class_name }, _) => (CardStatus::Labeled, Some(class_name.clone())),
            (GroupStatus::Dismissed, _) => (CardStatus::Dismissed, None),
            (GroupStatus::Pending, Some(Verdict::Label { class_name })) => (CardStatus::Staged, Some(class_name.clone())),
            (GroupStatus::Pending, Some(Verdict::Dismiss)) => (CardStatus::Staged, None),
            (GroupStatus::Pending, None) => (CardStatus::Pending, None),
        };
        let ev = &group.evidence;
        Self {
            gid: group.gid,
            step: group.step,
            cluster: group.cluster,
            status,
            class_name,
            staged_verdict: staged.cloned(),
            sample_count: ev.sample_count,
            cluster_size: ev.cluster_size,
            mean_confidence: ev.mean_confidence,
            distance_to_nearest_class: ev.distance_to_nearest_class,
            representative_ids: ev.representative_ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDetail {
    pub group: GroupView,
    pub sample_ids: Vec<u64>,
    /// Members in the embedding projection plane; empty once resolved.
    pub members: Vec<ProjectedPoint>,
    pub centroids: Vec<ProjectedCentroid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusView {
    pub step: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub label_set: Vec<String>,
    pub label_set_version: u64,
    pub pending_groups: usize,
    pub staged_verdicts: usize,
    pub latest_report: Option<StepReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueView {
    pub step: u64,
    pub groups: Vec<GroupView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionView {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub normalized: Vec<Vec<f64>>,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionResponse {
    pub step: u64,
    pub confusion: Option<ConfusionView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResponse {
    pub step: u64,
    pub projection: Option<EmbeddingProjection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictResponse {
    pub gid: u64,
    pub outcome: StageOutcome,
    pub group: GroupView,
}

/// Why a verdict was refused.
#[derive(Debug, Clone, PartialEq)]
pub enum StageError {
    UnknownGroup(u64),
    Conflict { message: String, group: Box<GroupView> },
    Invalid { field: &'static str, message: String },
}

/// Snapshot store plus a wake-up signal for the pipeline thread.
#[derive(Debug)]
pub struct Hub {
    snapshot: RwLock<ApiSnapshot>,
    verdicts: Mutex<u64>,
    changed: Condvar,
    shutdown: AtomicBool,
}

impl Hub {
    pub fn new(snapshot: ApiSnapshot) -> Self {
        Self {
            snapshot: RwLock::new(snapshot),
            verdicts: Mutex::new(0),
            changed: Condvar::new(),
            shutdown: AtomicBool::new(false),
        }
    }

    pub fn read(&self) -> RwLockReadGuard<'_, ApiSnapshot> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, ApiSnapshot> {
        self.snapshot.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Stages a verdict on the snapshot's queue. Repeating an applied verdict
    /// is a replay, not a conflict.
    pub fn stage(&self, gid: u64, verdict: Verdict) -> Result<VerdictResponse, StageError> {
        let response = {
            let mut snap = self.write();
            let group = snap.queue.group(gid).ok_or(StageError::UnknownGroup(gid))?.clone();
            let applied = match (&group.status, &verdict) {
                (GroupStatus::Labeled { class_name: a }, Verdict::Label { class_name: b }) => a == b,
                (GroupStatus::Dismissed, Verdict::Dismiss) => true,
                _ => false,
            };
            if applied {
                return Ok(VerdictResponse {
                    gid,
                    outcome: StageOutcome::Replayed,
                    group: snap.group_view(&group),
                });
            }
            let outcome = match snap.queue.stage(gid, verdict) {
                Ok(o) => o,
                Err(Error::GroupConflict { message, .. }) => {
                    return Err(StageError::Conflict {
                        message,
                        group: Box::new(snap.group_view(&group)),
                    })
                }
                Err(Error::UnknownGroup(g)) => return Err(StageError::UnknownGroup(g)),
                Err(e) => {
                    return Err(StageError::Invalid {
                        field: "class_name",
                        message: e.to_string(),
                    })
                }
            };
            if snap.status == RunStatus::AwaitingExpert && snap.all_pending_staged() {
                snap.status = RunStatus::Training;
            }
            VerdictResponse {
                gid,
                outcome,
                group: snap.group_view(&group),
            }
        };
        let mut n = self.verdicts.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.changed.notify_all();
        Ok(response)
    }

    /// Verdicts staged on the snapshot, in arrival order.
    pub fn staged(&self) -> Vec<(u64, Verdict)> {
        self.read().queue.staged().to_vec()
    }

    /// Replaces the snapshot, keeping verdicts that arrived while the step ran
    /// and whose group is still pending.
    pub fn publish(&self, mut next: ApiSnapshot) {
        let mut snap = self.write();
        for (gid, verdict) in snap.queue.staged() {
            if next.queue.group(*gid).is_some_and(|g| g.status == GroupStatus::Pending) {
                let _ = next.queue.stage(*gid, verdict.clone());
            }
        }
        if next.status == RunStatus::AwaitingExpert && next.all_pending_staged() {
            next.status = RunStatus::Training;
        }
        *snap = next;
    }

    pub fn set_status(&self, status: RunStatus) {
        self.write().status = status;
    }

    pub fn fail(&self, message: String) {
        let mut snap = self.write();
        snap.status = RunStatus::Done;
        snap.error = Some(message);
    }

    /// Blocks until every pending group has a staged verdict or shutdown is
    /// requested. Returns false on shutdown.
    pub fn wait_for_verdicts(&self) -> bool {
        let mut n = self.verdicts.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if self.is_shut_down() {
                return false;
            }
            if self.read().all_pending_staged() {
                return true;
            }
            n = self
                .changed
                .wait_timeout(n, Duration::from_millis(200))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _guard = self.verdicts.lock().unwrap_or_else(|e| e.into_inner());
        self.changed.notify_all();
    }

    pub fn is_shut_down(&self) -> bool {
        self.shutdown.load(Ordering::SeqCst)
    }
}
