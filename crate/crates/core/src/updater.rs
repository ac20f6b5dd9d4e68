//! Consistency check between model confidence and cluster alignment, and the
//! bookkeeping that follows from it: pseudo-labels, detected unknowns and the
//! expert review queue.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::alignment::{Alignment, AuxiliaryLabel};
use crate::classifier::argmax;
use crate::dataset::{DatasetBundle, FlowRecord, LabelOrigin, LabeledRecord, RecordId};
use crate::{Error, Result};

/// Number of sample ids included in a group's evidence payload.
pub const REPRESENTATIVE_IDS: usize = 20;

/// Slack applied before taking the ceiling of a band size, so that e.g.
/// `6 * (1/3)` gives 2.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    /// Fraction of the pool, by descending confidence, that may be pseudo-labeled.
    pub top_fraction: f64,
    /// Fraction of the pool, by ascending confidence, that may be declared unknown.
    pub bottom_fraction: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            top_fraction: 0.10,
            bottom_fraction: 0.10,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        let in_range = |f: f64| f > 0.0 && f < 1.0;
        if !in_range(self.top_fraction) || !in_range(self.bottom_fraction) {
            return Err(Error::Config(format!(
                "band fractions must lie in (0, 1), got top {} bottom {}",
                self.top_fraction, self.bottom_fraction
            )));
        }
        if self.top_fraction + self.bottom_fraction > 1.0 + 1e-12 {
            return Err(Error::Config("top and bottom fractions must sum to at most 1".into()));
        }
        Ok(())
    }
}

/// Model confidence: the largest class probability.
pub fn confidence(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// One pool sample entering the consistency check.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: RecordId,
    pub probs: Vec<f64>,
    /// Alignment of the sample's cluster; `None` for DBSCAN noise.
    pub alignment: Option<Alignment>,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    AcceptPseudoLabel { class: usize },
    DetectUnknown,
    Defer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateDecision {
    pub id: RecordId,
    pub decision: Decision,
    pub confidence: f64,
    pub predicted: usize,
    pub alignment: Option<Alignment>,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyOutcome {
    /// One decision per candidate, in candidate order.
    pub decisions: Vec<UpdateDecision>,
    pub top_count: usize,
    pub bottom_count: usize,
    /// Confidence at the inner edge of the bottom band (the highest
    /// confidence that still counts as "bottom").
    pub confidence_cutoff: Option<f64>,
    /// Set when the bottom band had to be shortened to avoid overlapping the top band.
    pub bottom_truncated: bool,
}

fn band_size(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - CEIL_SLACK).ceil().max(0.0) as usize
}

/// Sorts the pool by confidence (descending, ties by ascending id) and
/// decides every sample:
///
/// * top band, aligned to class `c`, argmax `c`: accept `c` as pseudo-label;
/// * bottom band, cluster aligned as potential unknown: detect unknown;
/// * anything else, including all DBSCAN noise: defer.
pub fn consistency_check(candidates: &[Candidate], cfg: &ConsistencyConfig) -> Result<ConsistencyOutcome> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::InvalidInput("consistency check needs at least one sample".into()));
    }
    let n = candidates.len();
    let conf: Vec<f64> = candidates.iter().map(|c| confidence(&c.probs)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        conf[b]
            .total_cmp(&conf[a])
            .then(candidates[a].id.cmp(&candidates[b].id))
    });

    let top = band_size(cfg.top_fraction, n).min(n);
    let mut bottom = band_size(cfg.bottom_fraction, n);
    let mut bottom_truncated = false;
    if top + bottom > n {
        log::warn!(
            "consistency bands overlap on a pool of {n}; bottom band shortened from {bottom} to {}",
            n - top
        );
        bottom = n - top;
        bottom_truncated = true;
    }

    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }

    let decisions = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let predicted = argmax(&c.probs);
            let in_top = rank[i] < top;
            let in_bottom = rank[i] >= n - bottom;
            let decision = match c.alignment.map(|a| a.label) {
                Some(AuxiliaryLabel::Known { class }) if in_top && class == predicted => {
                    Decision::AcceptPseudoLabel { class }
                }
                Some(AuxiliaryLabel::PotentialUnknown) if in_bottom => Decision::DetectUnknown,
                _ => Decision::Defer,
            };
            UpdateDecision {
                id: c.id,
                decision,
                confidence: conf[i],
                predicted,
                alignment: c.alignment,
                cluster: c.cluster,
            }
        })
        .collect();

    let confidence_cutoff = (bottom > 0).then(|| conf[order[n - bottom]]);
    Ok(ConsistencyOutcome {
        decisions,
        top_count: top,
        bottom_count: bottom,
        confidence_cutoff,
        bottom_truncated,
    })
}

/// Summary statistics shown to an expert reviewing a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEvidence {
    /// Size of the originating embedding cluster in its step.
    pub cluster_size: usize,
    pub sample_count: usize,
    pub mean_confidence: f64,
    /// Squared distance from the cluster centroid to the nearest known class.
    pub distance_to_nearest_class: Option<f64>,
    pub representative_ids: Vec<RecordId>,
}

/// Unknown-traffic samples detected in one step that came from the same cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedGroup {
    pub step: u64,
    pub cluster: Option<usize>,
    pub samples: Vec<FlowRecord>,
    pub evidence: GroupEvidence,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedCounts {
    pub accepted: usize,
    pub detected_unknown: usize,
    pub deferred: usize,
}

/// Moves accepted samples into the labeled set and pulls detected unknowns
/// out of the pool, grouped by originating cluster. Deferred samples stay.
///
/// `cluster_sizes[c]` is the member count of cluster `c` in this step.
pub fn apply_decisions(
    mut bundle: DatasetBundle,
    decisions: &[UpdateDecision],
    cluster_sizes: &[usize],
    step: u64,
) -> Result<(DatasetBundle, Vec<DetectedGroup>, AppliedCounts)> {
    let mut by_id: BTreeMap<RecordId, &UpdateDecision> = BTreeMap::new();
    for d in decisions {
        if by_id.insert(d.id, d).is_some() {
            return Err(Error::InvalidInput(format!("duplicate decision for sample {}", d.id)));
        }
    }
    let pool_ids: BTreeSet<RecordId> = bundle.unlabeled.iter().map(|r| r.id).collect();
    if let Some(missing) = by_id.keys().find(|id| !pool_ids.contains(id)) {
        return Err(Error::UnknownId(*missing));
    }

    let mut counts = AppliedCounts::default();
    let mut groups: BTreeMap<Option<usize>, Vec<(FlowRecord, &UpdateDecision)>> = BTreeMap::new();
    let mut remaining = Vec::with_capacity(bundle.unlabeled.len());
    for record in std::mem::take(&mut bundle.unlabeled) {
        match by_id.get(&record.id) {
            Some(d) => match d.decision {
                Decision::AcceptPseudoLabel { class } => {
                    if class >= bundle.label_set.len() {
                        return Err(Error::LabelOutOfRange {
                            label: class,
                            classes: bundle.label_set.len(),
                        });
                    }
                    counts.accepted += 1;
                    bundle.labeled.push(LabeledRecord {
                        record,
                        label: class,
                        origin: LabelOrigin::Pseudo { step },
                    });
                }
                Decision::DetectUnknown => {
                    counts.detected_unknown += 1;
                    groups.entry(d.cluster).or_default().push((record, d));
                }
                Decision::Defer => {
                    counts.deferred += 1;
                    remaining.push(record);
                }
            },
            None => remaining.push(record),
        }
    }
    bundle.unlabeled = remaining;
    bundle.labeled.sort_by_key(|l| l.record.id);

    let detected = groups
        .into_iter()
        .map(|(cluster, members)| {
            let sample_count = members.len();
            let mean_confidence =
                members.iter().map(|(_, d)| d.confidence).sum::<f64>() / sample_count as f64;
            let distance_to_nearest_class = members[0].1.alignment.map(|a| a.distance);
            let cluster_size = cluster
                .and_then(|c| cluster_sizes.get(c).copied())
                .unwrap_or(sample_count);
            let samples: Vec<FlowRecord> = members.into_iter().map(|(r, _)| r).collect();
            let representative_ids = samples.iter().take(REPRESENTATIVE_IDS).map(|r| r.id).collect();
            DetectedGroup {
                step,
                cluster,
                evidence: GroupEvidence {
                    cluster_size,
                    sample_count,
                    mean_confidence,
                    distance_to_nearest_class,
                    representative_ids,
                },
                samples,
            }
        })
        .collect();
    Ok((bundle, detected, counts))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Verdict {
    Label { class_name: String },
    Dismiss,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum GroupStatus {
    Pending,
    Labeled { class_name: String },
    Dismissed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertGroup {
    pub gid: u64,
    pub step: u64,
    pub cluster: Option<usize>,
    /// Samples waiting for review. Emptied once the group is resolved.
    pub samples: Vec<FlowRecord>,
    /// Ids of every sample that entered the group.
    pub sample_ids: Vec<RecordId>,
    pub evidence: GroupEvidence,
    pub status: GroupStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    Staged,
    /// The same verdict was already staged; nothing changed.
    Replayed,
}

/// Detected unknown groups awaiting expert review, plus verdicts staged for
/// the start of the next step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertQueue {
    groups: Vec<ExpertGroup>,
    staged: Vec<(u64, Verdict)>,
    next_gid: u64,
}

impl ExpertQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn groups(&self) -> &[ExpertGroup] {
        &self.groups
    }

    pub fn group(&self, gid: u64) -> Option<&ExpertGroup> {
        self.groups.iter().find(|g| g.gid == gid)
    }

    pub fn pending(&self) -> impl Iterator<Item = &ExpertGroup> {
        self.groups.iter().filter(|g| g.status == GroupStatus::Pending)
    }

    pub fn staged(&self) -> &[(u64, Verdict)] {
        &self.staged
    }

    pub fn staged_verdict(&self, gid: u64) -> Option<&Verdict> {
        self.staged.iter().find(|(g, _)| *g == gid).map(|(_, v)| v)
    }

    /// Ids of samples currently held in pending groups.
    pub fn held_ids(&self) -> BTreeSet<RecordId> {
        self.pending()
            .flat_map(|g| g.samples.iter().map(|r| r.id))
            .collect()
    }

    pub fn push(&mut self, group: DetectedGroup) -> u64 {
        let gid = self.next_gid;
        self.next_gid += 1;
        self.groups.push(ExpertGroup {
            gid,
            step: group.step,
            cluster: group.cluster,
            sample_ids: group.samples.iter().map(|r| r.id).collect(),
            samples: group.samples,
            evidence: group.evidence,
            status: GroupStatus::Pending,
        });
        gid
    }

    /// Records a verdict to be applied before the next step. Staging the same
    /// verdict twice is a no-op.
    pub fn stage(&mut self, gid: u64, verdict: Verdict) -> Result<StageOutcome> {
        let group = self.group(gid).ok_or(Error::UnknownGroup(gid))?;
        if group.status != GroupStatus::Pending {
            return Err(Error::GroupConflict {
                gid,
                message: format!("group is already resolved ({:?})", group.status),
            });
        }
        if let Some(existing) = self.staged_verdict(gid) {
            if *existing == verdict {
                return Ok(StageOutcome::Replayed);
            }
            return Err(Error::GroupConflict {
                gid,
                message: format!("a different verdict is already staged ({existing:?})"),
            });
        }
        if let Verdict::Label { class_name } = &verdict {
            if class_name.trim().is_empty() {
                return Err(Error::InvalidInput("class_name must not be empty".into()));
            }
        }
        self.staged.push((gid, verdict));
        Ok(StageOutcome::Staged)
    }

    pub fn take_staged(&mut self) -> Vec<(u64, Verdict)> {
        std::mem::take(&mut self.staged)
    }
}

/// Request to grow the classifier head after a new class was added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionRequest {
    pub new_k: usize,
}

/// Applies an expert verdict to a pending group.
///
/// Labeling with a new class name appends it to the label set and asks for
/// the model head to be expanded; labeling with an existing name adds the
/// samples to that class; dismissing returns the samples to the pool.
pub fn expert_resolve(
    queue: &mut ExpertQueue,
    gid: u64,
    verdict: &Verdict,
    mut bundle: DatasetBundle,
) -> Result<(DatasetBundle, Option<ExpansionRequest>)> {
    let group = queue
        .groups
        .iter_mut()
        .find(|g| g.gid == gid)
        .ok_or(Error::UnknownGroup(gid))?;
    if group.status != GroupStatus::Pending {
        return Err(Error::GroupConflict {
            gid,
            message: "group is not pending".into(),
        });
    }
    let samples = std::mem::take(&mut group.samples);
    let mut expansion = None;
    match verdict {
        Verdict::Label { class_name } => {
            let class_name = class_name.trim().to_string();
            if class_name.is_empty() {
                group.samples = samples;
                return Err(Error::InvalidInput("class_name must not be empty".into()));
            }
            let label = match bundle.label_set.index_of(&class_name) {
                Some(i) => i,
                None => {
                    let i = bundle.label_set.push(class_name.clone())?;
                    expansion = Some(ExpansionRequest {
                        new_k: bundle.label_set.len(),
                    });
                    i
                }
            };
            bundle.labeled.extend(samples.into_iter().map(|record| LabeledRecord {
                record,
                label,
                origin: LabelOrigin::Expert { group: gid },
            }));
            bundle.labeled.sort_by_key(|l| l.record.id);
            group.status = GroupStatus::Labeled { class_name };
        }
        Verdict::Dismiss => {
            bundle.unlabeled.extend(samples);
            bundle.unlabeled.sort_by_key(|r| r.id);
            group.status = GroupStatus::Dismissed;
        }
    }
    queue.staged.retain(|(g, _)| *g != gid);
    Ok((bundle, expansion))
}

/// Simulated expert that labels each group with the majority ground-truth
/// class of its members (ties to the lexically smaller class name).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleExpert {
    /// Samples the expert has labeled so far.
    pub labeled_samples: usize,
}

impl OracleExpert {
    pub fn verdict(
        &mut self,
        group: &ExpertGroup,
        truth: &BTreeMap<RecordId, String>,
    ) -> Result<Verdict> {
        let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &group.samples {
            let label = truth.get(&r.id).or(r.true_label.as_ref()).ok_or_else(|| {
                Error::InvalidInput(format!("no ground truth for sample {}", r.id))
            })?;
            *votes.entry(label.as_str()).or_insert(0) += 1;
        }
        let mut best: Option<(&str, usize)> = None;
        for (name, count) in votes {
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((name, count));
            }
        }
        let (name, _) = best.ok_or_else(|| {
            Error::InvalidInput(format!("group {} has no samples to label", group.gid))
        })?;
        self.labeled_samples += group.samples.len();
        Ok(Verdict::Label {
            class_name: name.to_string(),
        })
    }

    /// Fraction of `training_pool` samples that needed an expert label.
    pub fn proportion(&self, training_pool: usize) -> f64 {
        if training_pool == 0 {
            0.0
        } else {
            self.labeled_samples as f64 / training_pool as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabelSet, Standardizer};

    fn known(class: usize) -> Option<Alignment> {
        Some(Alignment {
            label: AuxiliaryLabel::Known { class },
            distance: 0.5,
            nearest_class: class,
        })
    }

    fn unknown() -> Option<Alignment> {
        Some(Alignment {
            label: AuxiliaryLabel::PotentialUnknown,
            distance: 30.0,
            nearest_class: 0,
        })
    }

    fn cand(id: u64, top: f64, class: usize, alignment: Option<Alignment>) -> Candidate {
        let mut probs = vec![(1.0 - top) / 2.0; 3];
        probs[class] = top;
        Candidate {
            id,
            probs,
            cluster: alignment.map(|_| 0),
            alignment,
        }
    }

    fn bundle_with_pool(ids: &[u64]) -> DatasetBundle {
        DatasetBundle {
            labeled: vec![],
            unlabeled: ids
                .iter()
                .map(|&id| FlowRecord {
                    id,
                    features: vec![id as f64],
                    true_label: None,
                })
                .collect(),
            validation: vec![],
            test: vec![],
            label_set: LabelSet::new(["a", "b", "c"]).unwrap(),
            hidden_truth: BTreeMap::new(),
            standardizer: Standardizer {
                mean: vec![0.0],
                std: vec![1.0],
            },
        }
    }

    #[test]
    fn confidence_is_max_probability() {
        assert_eq!(confidence(&[0.5, 0.5]), 0.5);
        assert_eq!(confidence(&[0.9, 0.05, 0.05]), 0.9);
        assert_eq!(confidence(&[0.25; 4]), 0.25);
    }

    #[test]
    fn top_ranked_agreeing_sample_is_accepted() {
        let mut cands = vec![cand(0, 0.99, 1, known(1))];
        for id in 1..10 {
            cands.push(cand(id, 0.5, 0, None));
        }
        let cfg = ConsistencyConfig {
            top_fraction: 0.2,
            bottom_fraction: 0.1,
        };
        let out = consistency_check(&cands, &cfg).unwrap();
        assert_eq!(out.decisions[0].decision, Decision::AcceptPseudoLabel { class: 1 });
        assert_eq!(out.top_count, 2);
    }

    #[test]
    fn aligned_but_unconfident_sample_is_deferred() {
        let mut cands: Vec<Candidate> = (0..9).map(|id| cand(id, 0.9, 0, known(0))).collect();
        cands.push(cand(9, 0.34, 2, known(2)));
        let out = consistency_check(&cands, &ConsistencyConfig::default()).unwrap();
        assert_eq!(out.decisions[9].decision, Decision::Defer);
        assert_eq!(out.confidence_cutoff, Some(confidence(&cands[9].probs)));
    }

    #[test]
    fn six_sample_bands() {
        let cands = vec![
            cand(0, 0.99, 0, known(0)),
            cand(1, 0.95, 1, known(1)),
            cand(2, 0.60, 2, known(2)),
            cand(3, 0.55, 0, unknown()),
            cand(4, 0.10, 1, unknown()),
            cand(5, 0.05, 2, unknown()),
        ];
        let cfg = ConsistencyConfig {
            top_fraction: 1.0 / 3.0,
            bottom_fraction: 1.0 / 3.0,
        };
        let out = consistency_check(&cands, &cfg).unwrap();
        let kinds: Vec<Decision> = out.decisions.iter().map(|d| d.decision).collect();
        assert_eq!(
            kinds,
            vec![
                Decision::AcceptPseudoLabel { class: 0 },
                Decision::AcceptPseudoLabel { class: 1 },
                Decision::Defer,
                Decision::Defer,
                Decision::DetectUnknown,
                Decision::DetectUnknown,
            ]
        );
        assert_eq!((out.top_count, out.bottom_count), (2, 2));
    }

    #[test]
    fn disagreement_and_noise_defer() {
        let cands = vec![
            cand(0, 0.99, 0, known(1)),
            cand(1, 0.01, 0, None),
            cand(2, 0.5, 0, known(2)),
        ];
        let cfg = ConsistencyConfig {
            top_fraction: 0.4,
            bottom_fraction: 0.4,
        };
        let out = consistency_check(&cands, &cfg).unwrap();
        assert!(out.decisions.iter().all(|d| d.decision == Decision::Defer));
    }

    #[test]
    fn overlapping_bands_are_truncated() {
        let cands = vec![cand(0, 0.9, 0, known(0)), cand(1, 0.1, 0, unknown())];
        let cfg = ConsistencyConfig {
            top_fraction: 0.5,
            bottom_fraction: 0.5,
        };
        let out = consistency_check(&cands, &cfg).unwrap();
        assert_eq!((out.top_count, out.bottom_count), (1, 1));
        let cands = vec![cand(0, 0.9, 0, known(0))];
        let out = consistency_check(&cands, &cfg).unwrap();
        assert_eq!((out.top_count, out.bottom_count), (1, 0));
        assert!(out.bottom_truncated);
        assert_eq!(out.confidence_cutoff, None);
    }

    #[test]
    fn confidence_ties_break_by_id() {
        let cands = vec![cand(5, 0.8, 0, known(0)), cand(2, 0.8, 0, known(0))];
        let cfg = ConsistencyConfig {
            top_fraction: 0.5,
            bottom_fraction: 0.5,
        };
        let out = consistency_check(&cands, &cfg).unwrap();
        assert_eq!(out.decisions[1].decision, Decision::AcceptPseudoLabel { class: 0 });
        assert_eq!(out.decisions[0].decision, Decision::Defer);
    }

    #[test]
    fn consistency_config_validation() {
        assert!(ConsistencyConfig { top_fraction: 0.0, bottom_fraction: 0.1 }.validate().is_err());
        assert!(ConsistencyConfig { top_fraction: 0.6, bottom_fraction: 0.6 }.validate().is_err());
        assert!(consistency_check(&[], &ConsistencyConfig::default()).is_err());
    }

    fn decision(id: u64, decision: Decision) -> UpdateDecision {
        UpdateDecision {
            id,
            decision,
            confidence: 0.5,
            predicted: 0,
            alignment: None,
            cluster: Some(0),
        }
    }

    #[test]
    fn apply_without_decisions_is_identity() {
        let b = bundle_with_pool(&[1, 2, 3]);
        let (after, groups, counts) = apply_decisions(b.clone(), &[], &[], 1).unwrap();
        assert_eq!(after, b);
        assert!(groups.is_empty());
        assert_eq!(counts, AppliedCounts::default());
    }

    #[test]
    fn apply_single_accept() {
        let b = bundle_with_pool(&[1, 2, 3]);
        let (after, _, _) =
            apply_decisions(b, &[decision(2, Decision::AcceptPseudoLabel { class: 1 })], &[], 4).unwrap();
        assert_eq!(after.labeled.len(), 1);
        assert_eq!(after.unlabeled.len(), 2);
        assert_eq!(after.labeled[0].origin, LabelOrigin::Pseudo { step: 4 });
    }

    #[test]
    fn apply_mixed_decisions_conserves_samples() {
        let b = bundle_with_pool(&[0, 1, 2, 3, 4, 5]);
        let ds = vec![
            decision(0, Decision::AcceptPseudoLabel { class: 0 }),
            decision(1, Decision::AcceptPseudoLabel { class: 1 }),
            decision(2, Decision::DetectUnknown),
            decision(3, Decision::DetectUnknown),
            decision(4, Decision::Defer),
            decision(5, Decision::Defer),
        ];
        let (after, groups, counts) = apply_decisions(b, &ds, &[7], 1).unwrap();
        assert_eq!(after.labeled.len(), 2);
        assert_eq!(after.unlabeled.len(), 2);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].samples.len(), 2);
        assert_eq!(groups[0].evidence.cluster_size, 7);
        assert_eq!(counts.detected_unknown, 2);
    }

    #[test]
    fn apply_unknown_id_fails() {
        let b = bundle_with_pool(&[0]);
        assert!(matches!(
            apply_decisions(b, &[decision(9, Decision::Defer)], &[], 1),
            Err(Error::UnknownId(9))
        ));
    }

    fn queue_with_group(ids: &[u64]) -> (ExpertQueue, u64) {
        let mut q = ExpertQueue::new();
        let samples: Vec<FlowRecord> = ids
            .iter()
            .map(|&id| FlowRecord {
                id,
                features: vec![0.0],
                true_label: None,
            })
            .collect();
        let gid = q.push(DetectedGroup {
            step: 1,
            cluster: Some(0),
            evidence: GroupEvidence {
                cluster_size: samples.len(),
                sample_count: samples.len(),
                mean_confidence: 0.4,
                distance_to_nearest_class: Some(12.0),
                representative_ids: ids.to_vec(),
            },
            samples,
        });
        (q, gid)
    }

    #[test]
    fn labeling_with_new_class_grows_label_set() {
        let (mut q, gid) = queue_with_group(&[10, 11]);
        let b = bundle_with_pool(&[]);
        let (b, exp) = expert_resolve(
            &mut q,
            gid,
            &Verdict::Label {
                class_name: "Browsing".into(),
            },
            b,
        )
        .unwrap();
        assert_eq!(b.label_set.len(), 4);
        assert_eq!(b.label_set.version(), 1);
        assert_eq!(exp, Some(ExpansionRequest { new_k: 4 }));
        assert!(b.labeled.iter().all(|l| l.label == 3));
        assert!(q.held_ids().is_empty());
        // Resolving twice is a conflict.
        assert!(matches!(
            expert_resolve(&mut q, gid, &Verdict::Dismiss, b),
            Err(Error::GroupConflict { .. })
        ));
    }

    #[test]
    fn labeling_with_existing_class_needs_no_expansion() {
        let (mut q, gid) = queue_with_group(&[10]);
        let (b, exp) = expert_resolve(
            &mut q,
            gid,
            &Verdict::Label { class_name: "b".into() },
            bundle_with_pool(&[]),
        )
        .unwrap();
        assert_eq!(exp, None);
        assert_eq!(b.labeled[0].label, 1);
    }

    #[test]
    fn dismiss_returns_samples_to_pool() {
        let (mut q, gid) = queue_with_group(&[10, 11]);
        let (b, exp) = expert_resolve(&mut q, gid, &Verdict::Dismiss, bundle_with_pool(&[1])).unwrap();
        assert_eq!(exp, None);
        assert_eq!(b.unlabeled.len(), 3);
        assert_eq!(b.label_set.len(), 3);
        assert_eq!(q.group(gid).unwrap().status, GroupStatus::Dismissed);
    }

    #[test]
    fn staging_is_idempotent_and_detects_conflicts() {
        let (mut q, gid) = queue_with_group(&[1]);
        let v = Verdict::Label { class_name: "x".into() };
        assert_eq!(q.stage(gid, v.clone()).unwrap(), StageOutcome::Staged);
        assert_eq!(q.stage(gid, v).unwrap(), StageOutcome::Replayed);
        assert!(matches!(q.stage(gid, Verdict::Dismiss), Err(Error::GroupConflict { .. })));
        assert!(matches!(q.stage(99, Verdict::Dismiss), Err(Error::UnknownGroup(99))));
        assert_eq!(q.take_staged().len(), 1);
    }

    #[test]
    fn oracle_picks_majority() {
        let (q, gid) = queue_with_group(&[1, 2, 3]);
        let truth: BTreeMap<u64, String> =
            [(1, "A"), (2, "A"), (3, "B")].into_iter().map(|(k, v)| (k, v.to_string())).collect();
        let mut oracle = OracleExpert::default();
        let v = oracle.verdict(q.group(gid).unwrap(), &truth).unwrap();
        assert_eq!(v, Verdict::Label { class_name: "A".into() });
        assert_eq!(oracle.labeled_samples, 3);
        assert!((oracle.proportion(6) - 0.5).abs() < 1e-15);

        let tie: BTreeMap<u64, String> =
            [(1, "B"), (2, "A"), (3, "C")].into_iter().map(|(k, v)| (k, v.to_string())).collect();
        let v = OracleExpert::default().verdict(q.group(gid).unwrap(), &tie).unwrap();
        assert_eq!(v, Verdict::Label { class_name: "A".into() });

        let missing = BTreeMap::new();
        assert!(OracleExpert::default().verdict(q.group(gid).unwrap(), &missing).is_err());
    }
}
