//! Reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trafficsift_core::alignment::{Alignment, AuxiliaryLabel};
use trafficsift_core::classifier::{argmax, Activation, Architecture, Classifier, Sample};
use trafficsift_core::dataset::{DatasetBundle, FlowRecord, LabelOrigin, LabelSet, LabeledRecord, Standardizer};
use trafficsift_core::updater::{
    apply_decisions, consistency_check, expert_resolve, Candidate, ConsistencyConfig, Decision,
    ExpertQueue, Verdict,
};

/// Central-difference step for the gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Largest relative error between the analytic gradient and a central
/// finite-difference estimate, over every parameter.
pub fn max_gradient_error(model: &Classifier, batch: &[Sample<'_>]) -> f64 {
    let (_, grad) = model.loss_and_gradient(batch).unwrap();
    let params = model.parameters();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] = params[i] + FD_STEP;
        probe.set_parameters(&p).unwrap();
        let up = probe.loss(batch).unwrap();
        p[i] = params[i] - FD_STEP;
        probe.set_parameters(&p).unwrap();
        let down = probe.loss(batch).unwrap();
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    worst
}

/// Smallest pre-activation magnitude accepted at a ReLU unit.
pub const KINK_MARGIN: f64 = 1e-3;

/// Smallest `|z|` over the pre-activations of rectified units for input `x`.
pub fn relu_margin(model: &Classifier, x: &[f64]) -> f64 {
    let mut a = x.to_vec();
    let mut margin = f64::INFINITY;
    for layer in model.body() {
        let z: Vec<f64> = (0..layer.out_dim)
            .map(|o| {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                layer.bias[o] + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        if layer.activation == Activation::Relu {
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            a = z.into_iter().map(|v| v.max(0.0)).collect();
        } else {
            a = z;
        }
    }
    margin
}

/// A random small network with a random batch of 3 samples.
pub struct GradientCase {
    pub model: Classifier,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl GradientCase {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_dim = rng.random_range(2..=5);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect();
        let embedding_dim = rng.random_range(2..=4);
        let k = rng.random_range(2..=4);
        let arch = Architecture {
            input_dim,
            hidden,
            embedding_dim,
        };
        let model = Classifier::new(&arch, k, rng.random()).unwrap();
        // Central differences are meaningless across a ReLU kink, so inputs
        // are redrawn until every rectified unit is clear of zero.
        let inputs = loop {
            let inputs: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            if inputs.iter().all(|x| relu_margin(&model, x) > KINK_MARGIN) {
                break inputs;
            }
        };
        let labels = (0..3).map(|_| rng.random_range(0..k)).collect();
        Self { model, inputs, labels }
    }

    pub fn batch(&self) -> Vec<Sample<'_>> {
        self.inputs.iter().map(Vec::as_slice).zip(self.labels.iter().copied()).collect()
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// DBSCAN from the full distance matrix: core points are joined by
/// union-find, components are ordered by their smallest core index, and a
/// border point goes to the earliest component with a core neighbour.
pub fn reference_dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> (Vec<Option<usize>>, Vec<bool>) {
    let n = points.len();
    let eps2 = eps * eps;
    let dist: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| sq(&points[i], &points[j])).collect()).collect();
    let core: Vec<bool> = (0..n).map(|i| dist[i].iter().filter(|d| **d <= eps2).count() >= min_pts).collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if core[i] && core[j] && dist[i][j] <= eps2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    // Component ids in order of first core point.
    let mut comp_of_root = std::collections::HashMap::new();
    let mut label = vec![None; n];
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            let next = comp_of_root.len();
            let c = *comp_of_root.entry(r).or_insert(next);
            label[i] = Some(c);
        }
    }
    for i in 0..n {
        if !core[i] {
            label[i] = (0..n)
                .filter(|&j| core[j] && dist[i][j] <= eps2)
                .filter_map(|j| label[j])
                .min();
        }
    }
    (label, core)
}

/// Whether two labelings describe the same partition up to renaming.
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    use std::collections::HashMap;
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = HashMap::new();
    let mut bwd = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                if *fwd.entry(*x).or_insert(*y) != *y || *bwd.entry(*y).or_insert(*x) != *x {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

/// Random blobs plus uniform clutter, up to `max_points` points.
pub fn random_cloud(seed: u64, max_points: usize) -> (Vec<Vec<f64>>, f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..=4);
    let n = rng.random_range(1..=max_points);
    let centers: Vec<Vec<f64>> = (0..rng.random_range(1..=5))
        .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
        .collect();
    let points = (0..n)
        .map(|_| {
            if rng.random_bool(0.2) {
                (0..dim).map(|_| rng.random_range(-12.0..12.0)).collect()
            } else {
                let c = &centers[rng.random_range(0..centers.len())];
                c.iter().map(|v| v + rng.random_range(-1.5..1.5)).collect()
            }
        })
        .collect();
    let eps = rng.random_range(0.2..2.0);
    let min_pts = rng.random_range(1..=8);
    (points, eps, min_pts)
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Nearest-centroid classifier fitted on `train`, scored on `test`.
pub fn nearest_centroid_accuracy(train: &[(Vec<f64>, String)], test: &[(Vec<f64>, String)]) -> f64 {
    use std::collections::BTreeMap;
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (x, y) in train {
        let e = sums.entry(y.as_str()).or_insert_with(|| (vec![0.0; x.len()], 0));
        e.0.iter_mut().zip(x).for_each(|(s, v)| *s += v);
        e.1 += 1;
    }
    let means: Vec<(&str, Vec<f64>)> = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let best = means
                .iter()
                .min_by(|a, b| sq(x, &a.1).total_cmp(&sq(x, &b.1)))
                .unwrap();
            best.0 == y
        })
        .count();
    correct as f64 / test.len() as f64
}

fn stream_record(id: u64) -> FlowRecord {
    FlowRecord { id, features: vec![id as f64], true_label: None }
}

/// Bundle whose labeled records all carry label 0, over `classes` classes.
pub fn toy_bundle(labeled: &[u64], pool: &[u64], classes: usize) -> DatasetBundle {
    DatasetBundle {
        labeled: labeled
            .iter()
            .map(|&id| LabeledRecord { record: stream_record(id), label: 0, origin: LabelOrigin::Initial })
            .collect(),
        unlabeled: pool.iter().map(|&id| stream_record(id)).collect(),
        validation: vec![],
        test: vec![],
        label_set: LabelSet::new((0..classes).map(|c| format!("c{c}"))).unwrap(),
        hidden_truth: BTreeMap::new(),
        standardizer: Standardizer { mean: vec![0.0], std: vec![1.0] },
    }
}

fn aligned(label: AuxiliaryLabel) -> Option<Alignment> {
    let nearest_class = match label {
        AuxiliaryLabel::Known { class } => class,
        AuxiliaryLabel::PotentialUnknown => 0,
    };
    Some(Alignment { label, distance: 1.0, nearest_class })
}

/// Drives random decision streams through the updater for `target` steps,
/// panicking on the first broken invariant: acceptance without agreement,
/// decisions outside their band, lost or duplicated ids, or a shrinking
/// labeled set.
pub fn random_updater_steps(seed: u64, target: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = 0;
    let mut episode = 0u64;
    while steps < target {
        episode += 1;
        let n = rng.random_range(5..80);
        let base = episode * 1000;
        let all: BTreeSet<u64> = (base..base + n).collect();
        let n_labeled = rng.random_range(1..=n / 2);
        let ids: Vec<u64> = all.iter().copied().collect();
        let mut b = toy_bundle(&ids[..n_labeled as usize], &ids[n_labeled as usize..], rng.random_range(2..5));
        let mut queue = ExpertQueue::new();
        let mut terminal: BTreeSet<u64> = BTreeSet::new();
        let expert = rng.random_bool(0.5);

        for step in 1..=rng.random_range(5..40u64) {
            if b.unlabeled.is_empty() {
                break;
            }
            steps += 1;
            let k = b.label_set.len();
            let labeled_before = b.labeled.len();
            let n_clusters = rng.random_range(1..5);
            let cluster_aux: Vec<AuxiliaryLabel> = (0..n_clusters)
                .map(|_| {
                    if rng.random_bool(0.4) {
                        AuxiliaryLabel::PotentialUnknown
                    } else {
                        AuxiliaryLabel::Known { class: rng.random_range(0..k) }
                    }
                })
                .collect();
            let cands: Vec<Candidate> = b
                .unlabeled
                .iter()
                .map(|r| {
                    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    let cluster = rng.random_bool(0.85).then(|| rng.random_range(0..n_clusters));
                    Candidate {
                        id: r.id,
                        probs: raw.iter().map(|v| v / s).collect(),
                        alignment: cluster.and_then(|c| aligned(cluster_aux[c])),
                        cluster,
                    }
                })
                .collect();
            let top = rng.random_range(0.05..0.5);
            let cfg = ConsistencyConfig { top_fraction: top, bottom_fraction: rng.random_range(0.05..(1.0 - top)) };
            let out = consistency_check(&cands, &cfg).unwrap();

            let probs: BTreeMap<u64, &Vec<f64>> = cands.iter().map(|c| (c.id, &c.probs)).collect();
            let mut order: Vec<&Candidate> = cands.iter().collect();
            order.sort_by(|a, b| b.probs.iter().cloned().fold(0.0, f64::max)
                .total_cmp(&a.probs.iter().cloned().fold(0.0, f64::max))
                .then(a.id.cmp(&b.id)));
            let rank: BTreeMap<u64, usize> = order.iter().enumerate().map(|(r, c)| (c.id, r)).collect();
            let m = cands.len();
            for d in &out.decisions {
                match d.decision {
                    Decision::AcceptPseudoLabel { class } => {
                        assert_eq!(argmax(probs[&d.id]), class, "acceptance without agreement");
                        assert_eq!(d.alignment.unwrap().label, AuxiliaryLabel::Known { class });
                        assert!(rank[&d.id] < out.top_count);
                    }
                    Decision::DetectUnknown => {
                        assert_eq!(d.alignment.unwrap().label, AuxiliaryLabel::PotentialUnknown);
                        assert!(rank[&d.id] >= m - out.bottom_count);
                    }
                    Decision::Defer => {}
                }
                if d.cluster.is_none() {
                    assert_eq!(d.decision, Decision::Defer);
                }
            }

            let sizes = vec![m; n_clusters];
            let (nb, groups, _) = apply_decisions(b, &out.decisions, &sizes, step).unwrap();
            b = nb;
            for g in groups {
                if expert {
                    queue.push(g);
                } else {
                    terminal.extend(g.samples.iter().map(|r| r.id));
                }
            }
            if expert {
                let pending: Vec<u64> = queue.pending().map(|g| g.gid).collect();
                for gid in pending {
                    if rng.random_bool(0.5) {
                        let verdict = match rng.random_range(0..3) {
                            0 => Verdict::Dismiss,
                            1 => Verdict::Label { class_name: "c0".into() },
                            _ => Verdict::Label { class_name: format!("new{step}") },
                        };
                        let (nb, exp) = expert_resolve(&mut queue, gid, &verdict, b).unwrap();
                        b = nb;
                        if let Some(e) = exp {
                            assert_eq!(e.new_k, b.label_set.len());
                        }
                    }
                }
            }

            assert!(b.labeled.len() >= labeled_before, "labeled set shrank");
            let mut seen = BTreeSet::new();
            let parts = b.labeled.iter().map(|l| l.record.id)
                .chain(b.unlabeled.iter().map(|r| r.id))
                .chain(queue.held_ids())
                .chain(terminal.iter().copied());
            for id in parts {
                assert!(seen.insert(id), "id {id} duplicated");
            }
            assert_eq!(seen, all, "ids lost");
            assert!(b.labeled.iter().all(|l| l.label < b.label_set.len()));
        }
    }
    steps
}
