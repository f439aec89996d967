//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use kpgroup::cluster::Linkage;
use kpgroup::dissim::{DissimilarityMatrix, Provenance};
use kpgroup::schema::{ClassSpec, KeypointSchema};
use rand::Rng;

/// One oracle merge: node ids of both children, distance, new node id, size.
#[derive(Debug, Clone, PartialEq)]
pub struct RefMerge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub id: usize,
    pub size: usize,
}

fn leaf_linkage(d: &DissimilarityMatrix, x: &[usize], y: &[usize], linkage: Linkage) -> f64 {
    match linkage {
        Linkage::Complete => x
            .iter()
            .flat_map(|&i| y.iter().map(move |&j| (i, j)))
            .map(|(i, j)| d.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max),
        Linkage::Average => {
            let mut sum = 0.0;
            for &i in x {
                for &j in y {
                    sum += d.get(i, j);
                }
            }
            sum / (x.len() * y.len()) as f64
        }
    }
}

/// Naive agglomeration recomputing every linkage from the leaves at every
/// step. Clusters are keyed by their smallest leaf; ties go to the pair with
/// the smallest keys (first key, then second).
pub fn brute_force_merges(d: &DissimilarityMatrix, linkage: Linkage) -> Vec<RefMerge> {
    let n = d.n();
    // (members sorted, node id)
    let mut clusters: Vec<(Vec<usize>, usize)> = (0..n).map(|i| (vec![i], i)).collect();
    let mut merges = Vec::new();
    for step in 0..n - 1 {
        clusters.sort_by_key(|(m, _)| m[0]);
        let mut best: Option<(f64, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let v = leaf_linkage(d, &clusters[x].0, &clusters[y].0, linkage);
                let better = match best {
                    None => true,
                    Some((bv, bx, by)) => v < bv || (v == bv && (x, y) < (bx, by)),
                };
                if better {
                    best = Some((v, x, y));
                }
            }
        }
        let (v, x, y) = best.expect("at least two clusters");
        let (my, iy) = clusters.remove(y);
        let (mx, ix) = clusters.remove(x);
        let mut members = mx;
        members.extend(my);
        members.sort_unstable();
        let id = n + step;
        merges.push(RefMerge {
            a: ix,
            b: iy,
            distance: v,
            id,
            size: members.len(),
        });
        clusters.push((members, id));
    }
    merges
}

/// Flat labels after the first `n − m` merges, numbered by first appearance.
pub fn brute_force_cut(n: usize, merges: &[(usize, usize)], m: usize) -> Vec<usize> {
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    for &(a, b) in &merges[..n - m] {
        let mut joined = members[a].take().expect("live node");
        joined.extend(members[b].take().expect("live node"));
        members.push(Some(joined));
    }
    let mut owner = vec![usize::MAX; n];
    for (node, set) in members.iter().enumerate() {
        if let Some(set) = set {
            for &leaf in set {
                owner[leaf] = node;
            }
        }
    }
    let mut seen: Vec<usize> = Vec::new();
    owner
        .iter()
        .map(|o| match seen.iter().position(|s| s == o) {
            Some(p) => p,
            None => {
                seen.push(*o);
                seen.len() - 1
            }
        })
        .collect()
}

/// Adjusted Rand index from the four pair-agreement counts: `a` pairs
/// together in both, `b` only in the first, `c` only in the second, `d` in
/// neither.
pub fn ari_pair_counting(x: &[usize], y: &[usize]) -> f64 {
    let n = x.len();
    let (mut a, mut b, mut c, mut d) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            match (x[i] == x[j], y[i] == y[j]) {
                (true, true) => a += 1.0,
                (true, false) => b += 1.0,
                (false, true) => c += 1.0,
                (false, false) => d += 1.0,
            }
        }
    }
    let den = (a + b) * (b + d) + (a + c) * (c + d);
    if den == 0.0 {
        return 1.0;
    }
    2.0 * (a * d - b * c) / den
}

/// Every set partition of `n` elements as restricted growth strings.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for label in 0..=next {
            prefix.push(label);
            extend(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), n, &mut out);
    out
}

/// Same-class pairs sharing a cluster in both label arrays.
pub fn count_ambiguous(schema: &KeypointSchema, reg: &[usize], heat: &[usize]) -> usize {
    let mut count = 0;
    for pos in 0..schema.num_classes() {
        let r = schema.range(pos);
        for i in r.clone() {
            for j in i + 1..r.end {
                if reg[i] == reg[j] && heat[i] == heat[j] {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Same-class pairs sharing a cluster in one label array.
pub fn count_same_class_merges(schema: &KeypointSchema, labels: &[usize]) -> usize {
    count_ambiguous(schema, labels, labels)
}

pub fn random_schema<R: Rng>(rng: &mut R, max_classes: u32, max_kps: usize) -> KeypointSchema {
    let classes = rng.gen_range(1..=max_classes);
    KeypointSchema::new(
        (1..=classes)
            .map(|id| ClassSpec::new(id * 3, format!("c{id}"), rng.gen_range(1..=max_kps)))
            .collect(),
    )
    .unwrap()
}

pub fn uniform_matrix<R: Rng>(rng: &mut R, n: usize) -> DissimilarityMatrix {
    DissimilarityMatrix::from_fn(n, Provenance::External, |_, _| rng.gen::<f64>())
}

/// Integer-valued entries from `0..levels`, which makes distance ties common.
pub fn integer_matrix<R: Rng>(rng: &mut R, n: usize, levels: u32) -> DissimilarityMatrix {
    DissimilarityMatrix::from_fn(n, Provenance::External, |_, _| rng.gen_range(0..levels) as f64)
}

/// Largest box-corner and keypoint errors over all ground-truth objects,
/// each matched to the nearest same-class detection. `None` when the
/// detection count differs or an object has no same-class detection.
pub fn recovery_error(
    truth: &kpgroup::synth::GroundTruth,
    detections: &[kpgroup::decode::Detection],
) -> Option<(f64, f64)> {
    if truth.objects.len() != detections.len() {
        return None;
    }
    let (mut box_err, mut kp_err) = (0f64, 0f64);
    for gt in &truth.objects {
        let c = [(gt.bbox[0] + gt.bbox[2]) / 2.0, (gt.bbox[1] + gt.bbox[3]) / 2.0];
        let det = detections.iter().filter(|d| d.class_id == gt.class_id).min_by(|a, b| {
            let da = (a.center[0] - c[0]).hypot(a.center[1] - c[1]);
            let db = (b.center[0] - c[0]).hypot(b.center[1] - c[1]);
            da.total_cmp(&db)
        })?;
        for (g, d) in gt.bbox.iter().zip(&det.bbox) {
            box_err = box_err.max((g - d).abs());
        }
        if det.keypoints.len() != gt.keypoints.len() {
            return None;
        }
        for (g, k) in gt.keypoints.iter().zip(&det.keypoints) {
            kp_err = kp_err.max((g[0] - k.x).hypot(g[1] - k.y));
        }
    }
    Some((box_err, kp_err))
}
