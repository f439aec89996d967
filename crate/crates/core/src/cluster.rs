//! Agglomerative clustering of keypoint types, count-based dendrogram cuts
//! and cluster weight averaging.
//!
//! Merge order is fully deterministic. Every cluster is identified for
//! tie-breaking by its smallest member; among equally distant pairs the one
//! with the lexicographically smallest `(min id, other id)` merges first.

use serde::{Deserialize, Serialize};

use crate::dissim::{apply_restrictions, DissimError, DissimilarityMatrix};
use crate::ingest::Tensor;
use crate::schema::{canonical_labels, Head, KeypointSchema};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("need at least 2 points to cluster, got {0}")]
    TooFew(usize),
    #[error("matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("matrix entry ({0}, {1}) is not finite")]
    NonFinite(usize, usize),
    #[error("cannot cut {n} points into {m} clusters")]
    CutOutOfRange { n: usize, m: usize },
    #[error("malformed dendrogram: {0}")]
    Malformed(String),
    #[error("label array has length {found}, expected {expected}")]
    LabelLength { expected: usize, found: usize },
    #[error("{head} weights have {found} rows, expected {expected}")]
    Layout { head: Head, expected: usize, found: usize },
    #[error("{clusters} clusters is below the restricted minimum of {minimum}")]
    BelowRestrictedMinimum { clusters: usize, minimum: usize },
    #[error("restricted cut at {clusters} clusters merged {pairs} same-class pairs")]
    RestrictionViolated { clusters: usize, pairs: usize },
    #[error(transparent)]
    Dissim(#[from] DissimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    /// Unweighted pair-group average (UPGMA).
    Average,
    /// Maximum pairwise distance.
    Complete,
}

impl std::str::FromStr for Linkage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "average" => Ok(Linkage::Average),
            "complete" => Ok(Linkage::Complete),
            other => Err(format!("unknown linkage `{other}` (expected average or complete)")),
        }
    }
}

/// One agglomeration step. Leaves are nodes `0..n`; the node created by step
/// `s` is `n + s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub id: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n: usize,
    pub linkage: Linkage,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Checks that merges form a single binary tree over `n` leaves.
    pub fn validate(&self) -> Result<(), ClusterError> {
        let n = self.n;
        if n == 0 {
            return Err(ClusterError::Malformed("no leaves".into()));
        }
        if self.merges.len() != n - 1 {
            return Err(ClusterError::Malformed(format!(
                "{} merges for {n} leaves",
                self.merges.len()
            )));
        }
        let mut size = vec![1usize; n];
        let mut used = vec![false; 2 * n - 1];
        for (step, m) in self.merges.iter().enumerate() {
            let new_id = n + step;
            if m.id != new_id {
                return Err(ClusterError::Malformed(format!("merge {step} has id {}", m.id)));
            }
            for node in [m.a, m.b] {
                if node >= new_id || used[node] || m.a == m.b {
                    return Err(ClusterError::Malformed(format!(
                        "merge {step} references unavailable node {node}"
                    )));
                }
            }
            used[m.a] = true;
            used[m.b] = true;
            let s = size[m.a] + size[m.b];
            if m.size != s {
                return Err(ClusterError::Malformed(format!("merge {step} has size {}", m.size)));
            }
            size.push(s);
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, crate::ingest::IngestError> {
        let d: Dendrogram = serde_json::from_str(text)?;
        d.validate()
            .map_err(|e| crate::ingest::IngestError::Invalid(e.to_string()))?;
        Ok(d)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("dendrogram serializes");
        out.push('\n');
        out
    }
}

/// Inter-cluster linkage value from accumulated leaf distances.
#[inline]
fn linkage_value(linkage: Linkage, acc: f64, size_a: usize, size_b: usize) -> f64 {
    match linkage {
        Linkage::Average => acc / (size_a * size_b) as f64,
        Linkage::Complete => acc,
    }
}

/// Runs agglomerative clustering to a single root.
///
/// Average linkage keeps, for every pair of clusters, the sum of leaf
/// distances between them: the Lance-Williams update then becomes
/// `S(A∪B, C) = S(A, C) + S(B, C)` and the linkage value is
/// `S / (|A|·|C|)`, which is exact whenever the sums are.
pub fn agglomerate(matrix: &DissimilarityMatrix, linkage: Linkage) -> Result<Dendrogram, ClusterError> {
    let n = matrix.n();
    if n < 2 {
        return Err(ClusterError::TooFew(n));
    }
    for i in 0..n {
        for j in 0..n {
            if !matrix.get(i, j).is_finite() {
                return Err(ClusterError::NonFinite(i, j));
            }
            if j < i && matrix.get(i, j) != matrix.get(j, i) {
                return Err(ClusterError::Asymmetric(j, i));
            }
        }
    }

    // Slot s holds the cluster whose smallest member is s.
    let mut acc: Vec<f64> = matrix.values().to_vec();
    let mut size = vec![1usize; n];
    let mut node = (0..n).collect::<Vec<_>>();
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n - 1);

    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for s in 0..n {
            if !active[s] {
                continue;
            }
            for t in s + 1..n {
                if !active[t] {
                    continue;
                }
                let d = linkage_value(linkage, acc[s * n + t], size[s], size[t]);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, s, t));
                }
            }
        }
        let (distance, s, t) = best.expect("at least two active clusters");

        for u in 0..n {
            if !active[u] || u == s || u == t {
                continue;
            }
            let merged = match linkage {
                Linkage::Average => acc[s * n + u] + acc[t * n + u],
                Linkage::Complete => acc[s * n + u].max(acc[t * n + u]),
            };
            acc[s * n + u] = merged;
            acc[u * n + s] = merged;
        }
        let id = n + step;
        merges.push(Merge {
            a: node[s],
            b: node[t],
            distance,
            id,
            size: size[s] + size[t],
        });
        size[s] += size[t];
        node[s] = id;
        active[t] = false;
    }

    Ok(Dendrogram { n, linkage, merges })
}

/// Labels for the `m` clusters present after the first `n - m` merges,
/// numbered by smallest member index.
pub fn cut(dendrogram: &Dendrogram, m: usize) -> Result<Vec<usize>, ClusterError> {
    let n = dendrogram.n;
    if m < 1 || m > n {
        return Err(ClusterError::CutOutOfRange { n, m });
    }
    // leaf representative for every node
    let mut rep: Vec<usize> = (0..n).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for merge in &dendrogram.merges[..n - m] {
        let ra = find(&mut parent, rep[merge.a]);
        let rb = find(&mut parent, rep[merge.b]);
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
        rep.push(lo);
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    Ok(canonical_labels(&roots).0)
}

/// Agglomerates and cuts in one call.
pub fn cluster_labels(matrix: &DissimilarityMatrix, linkage: Linkage, m: usize) -> Result<Vec<usize>, ClusterError> {
    let dendrogram = agglomerate(matrix, linkage)?;
    cut(&dendrogram, m)
}

/// Number of same-class pairs sharing a cluster.
fn same_class_merges(schema: &KeypointSchema, labels: &[usize]) -> usize {
    schema
        .same_class_pairs()
        .filter(|&(a, b)| labels[a] == labels[b])
        .count()
}

/// Clusters with same-class pairs pushed apart by a sentinel distance, then
/// verifies the cut. Greedy agglomeration can still be forced into a
/// same-class merge; that is reported as an error, never returned.
pub fn restricted_labels(
    schema: &KeypointSchema,
    matrix: &DissimilarityMatrix,
    linkage: Linkage,
    m: usize,
) -> Result<(Dendrogram, Vec<usize>), ClusterError> {
    let minimum = schema.min_restricted_clusters();
    if m < minimum {
        return Err(ClusterError::BelowRestrictedMinimum { clusters: m, minimum });
    }
    let restricted = apply_restrictions(matrix, schema)?;
    let dendrogram = agglomerate(&restricted, linkage)?;
    let labels = cut(&dendrogram, m)?;
    let pairs = same_class_merges(schema, &labels);
    if pairs > 0 {
        return Err(ClusterError::RestrictionViolated { clusters: m, pairs });
    }
    Ok((dendrogram, labels))
}

/// Members of each cluster of a weight-averaging step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightInitMap {
    pub head: Head,
    pub members: Vec<Vec<usize>>,
}

/// Initializes grouped head weights as the mean of member keypoint rows.
///
/// Heat heads have one row per keypoint; reg heads have rows `2k` (dx) and
/// `2k + 1` (dy), which are averaged separately. Any trailing dimensions are
/// kept, so the same call handles weights and biases.
pub fn average_weights(
    weights: &Tensor,
    labels: &[usize],
    head: Head,
) -> Result<(WeightInitMap, Tensor), ClusterError> {
    let per = head.channels_per_cluster();
    let (rows, cols) = weights.rows_cols();
    let n = labels.len();
    if rows != per * n {
        return Err(ClusterError::Layout {
            head,
            expected: per * n,
            found: rows,
        });
    }
    let (labels, m) = canonical_labels(labels);
    let mut members = vec![Vec::new(); m];
    for (k, &g) in labels.iter().enumerate() {
        members[g].push(k);
    }

    let values = weights.to_f64_vec();
    let mut out = vec![0.0; m * per * cols];
    for (g, group) in members.iter().enumerate() {
        for channel in 0..per {
            let dst = (g * per + channel) * cols;
            // running mean; exact when all members are equal
            for (count, &k) in group.iter().enumerate() {
                let src = (k * per + channel) * cols;
                for c in 0..cols {
                    let mean = &mut out[dst + c];
                    *mean += (values[src + c] - *mean) / (count + 1) as f64;
                }
            }
        }
    }

    let mut shape = weights.shape().to_vec();
    if shape.is_empty() {
        shape.push(1);
    }
    shape[0] = m * per;
    let tensor = Tensor::from_values(shape, weights.dtype(), out).expect("shape matches values");
    Ok((WeightInitMap { head, members }, tensor))
}

/// Copies every cluster row back to its members: the inverse layout of
/// [`average_weights`].
pub fn expand_weights(grouped: &Tensor, map: &WeightInitMap) -> Result<Tensor, ClusterError> {
    let per = map.head.channels_per_cluster();
    let (rows, cols) = grouped.rows_cols();
    if rows != per * map.members.len() {
        return Err(ClusterError::Layout {
            head: map.head,
            expected: per * map.members.len(),
            found: rows,
        });
    }
    let n: usize = map.members.iter().map(Vec::len).sum();
    let values = grouped.to_f64_vec();
    let mut out = vec![0.0; n * per * cols];
    for (g, group) in map.members.iter().enumerate() {
        for &k in group {
            for channel in 0..per {
                let src = (g * per + channel) * cols;
                let dst = (k * per + channel) * cols;
                out[dst..dst + cols].copy_from_slice(&values[src..src + cols]);
            }
        }
    }
    let mut shape = grouped.shape().to_vec();
    shape[0] = n * per;
    Ok(Tensor::from_values(shape, grouped.dtype(), out).expect("shape matches values"))
}
