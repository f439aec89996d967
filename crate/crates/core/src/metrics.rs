//! Grouping analysis: partition agreement, inconsistent and ambiguous pairs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{cut, ClusterError, Dendrogram};
use crate::schema::KeypointSchema;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("label arrays differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 elements, got {0}")]
    TooFew(usize),
    #[error("labels have length {found}, schema has {expected} keypoint types")]
    SchemaLength { expected: usize, found: usize },
    #[error("dendrograms cover {0} and {1} leaves")]
    LeafMismatch(usize, usize),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

fn pairs(count: u64) -> u128 {
    let c = count as u128;
    c * c.saturating_sub(1) / 2
}

/// Adjusted Rand Index from exact integer pair counts.
///
/// With `I` the number of element pairs together in both partitions, `A` and
/// `B` the pairs together in each partition and `N` all pairs:
/// `ARI = 2 (I·N − A·B) / ((A + B)·N − 2·A·B)`. When both partitions are
/// all singletons or both a single cluster the index is 1.
pub fn adjusted_rand_index(labels_a: &[usize], labels_b: &[usize]) -> Result<f64, MetricsError> {
    if labels_a.len() != labels_b.len() {
        return Err(MetricsError::LengthMismatch(labels_a.len(), labels_b.len()));
    }
    let n = labels_a.len();
    if n < 2 {
        return Err(MetricsError::TooFew(n));
    }
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    let mut cells: HashMap<(usize, usize), u64> = HashMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
        *cells.entry((a, b)).or_default() += 1;
    }
    let index: u128 = cells.values().map(|&c| pairs(c)).sum();
    let sum_a: u128 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: u128 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n as u64);

    let num = 2 * (index * total) as i128 - 2 * (sum_a * sum_b) as i128;
    let den = ((sum_a + sum_b) * total) as i128 - 2 * (sum_a * sum_b) as i128;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

/// A same-class pair sharing a cluster, by class-local indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPair {
    pub class_id: u32,
    pub kp_a: usize,
    pub kp_b: usize,
}

/// Same-class keypoint pairs that share a cluster in one head.
pub fn inconsistent_pairs(schema: &KeypointSchema, labels: &[usize]) -> Result<(usize, Vec<ClassPair>), MetricsError> {
    if labels.len() != schema.n() {
        return Err(MetricsError::SchemaLength {
            expected: schema.n(),
            found: labels.len(),
        });
    }
    let list: Vec<ClassPair> = schema
        .same_class_pairs()
        .filter(|&(a, b)| labels[a] == labels[b])
        .map(|(a, b)| {
            let (class_pos, kp_a) = schema.locate(a);
            ClassPair {
                class_id: schema.classes()[class_pos].id,
                kp_a,
                kp_b: schema.locate(b).1,
            }
        })
        .collect();
    Ok((list.len(), list))
}

/// Same-class pairs sharing a cluster in both heads at once.
pub fn ambiguous_pairs(schema: &KeypointSchema, reg: &[usize], heat: &[usize]) -> usize {
    schema
        .same_class_pairs()
        .filter(|&(a, b)| reg[a] == reg[b] && heat[a] == heat[b])
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityMatrix {
    pub counts_reg: Vec<usize>,
    pub counts_heat: Vec<usize>,
    /// `cells[r][h]`: ambiguous pairs for `(counts_reg[r], counts_heat[h])`.
    pub cells: Vec<Vec<usize>>,
    /// Pareto-minimal `(m_reg, m_heat)` grid points with zero ambiguous pairs.
    pub frontier: Vec<(usize, usize)>,
}

impl AmbiguityMatrix {
    /// Zero-ambiguity grid point with the fewest head channels (`2·m_reg + m_heat`).
    pub fn cheapest(&self) -> Option<(usize, usize)> {
        self.frontier.iter().copied().min_by_key(|&(r, h)| (2 * r + h, r))
    }

    /// Plain-text table with reg counts as rows and heat counts as columns.
    pub fn to_table(&self) -> String {
        let width = self
            .cells
            .iter()
            .flatten()
            .map(|c| c.to_string().len())
            .chain(self.counts_heat.iter().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1)
            .max(3);
        let mut out = format!("{:>8} |", "reg\\heat");
        for h in &self.counts_heat {
            out.push_str(&format!(" {h:>width$}"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(10 + (width + 1) * self.counts_heat.len()));
        out.push('\n');
        for (r, row) in self.counts_reg.iter().zip(&self.cells) {
            out.push_str(&format!("{r:>8} |"));
            for c in row {
                out.push_str(&format!(" {c:>width$}"));
            }
            out.push('\n');
        }
        out
    }
}

fn pareto_zero_frontier(counts_reg: &[usize], counts_heat: &[usize], cells: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let zeros: Vec<(usize, usize)> = counts_reg
        .iter()
        .enumerate()
        .flat_map(|(r, &mr)| {
            counts_heat
                .iter()
                .enumerate()
                .filter(move |&(h, _)| cells[r][h] == 0)
                .map(move |(_, &mh)| (mr, mh))
        })
        .collect();
    let mut frontier: Vec<(usize, usize)> = zeros
        .iter()
        .copied()
        .filter(|&(r, h)| !zeros.iter().any(|&(r2, h2)| r2 <= r && h2 <= h && (r2, h2) != (r, h)))
        .collect();
    frontier.sort_unstable();
    frontier.dedup();
    frontier
}

/// Ambiguous pairs for every combination of regression and heatmap cuts.
pub fn ambiguity_matrix(
    schema: &KeypointSchema,
    dendrogram_reg: &Dendrogram,
    dendrogram_heat: &Dendrogram,
    counts_reg: &[usize],
    counts_heat: &[usize],
) -> Result<AmbiguityMatrix, MetricsError> {
    let n = schema.n();
    for d in [dendrogram_reg, dendrogram_heat] {
        if d.n != n {
            return Err(MetricsError::SchemaLength {
                expected: n,
                found: d.n,
            });
        }
    }
    let reg_cuts = counts_reg
        .iter()
        .map(|&m| cut(dendrogram_reg, m))
        .collect::<Result<Vec<_>, _>>()?;
    let heat_cuts = counts_heat
        .iter()
        .map(|&m| cut(dendrogram_heat, m))
        .collect::<Result<Vec<_>, _>>()?;
    let cells: Vec<Vec<usize>> = reg_cuts
        .iter()
        .map(|reg| {
            heat_cuts
                .iter()
                .map(|heat| ambiguous_pairs(schema, reg, heat))
                .collect()
        })
        .collect();
    let frontier = pareto_zero_frontier(counts_reg, counts_heat, &cells);
    Ok(AmbiguityMatrix {
        counts_reg: counts_reg.to_vec(),
        counts_heat: counts_heat.to_vec(),
        cells,
        frontier,
    })
}

/// ARI between two dendrograms cut at each requested cluster count.
pub fn consensus_curve(
    dendrogram_a: &Dendrogram,
    dendrogram_b: &Dendrogram,
    counts: &[usize],
) -> Result<Vec<(usize, f64)>, MetricsError> {
    if dendrogram_a.n != dendrogram_b.n {
        return Err(MetricsError::LeafMismatch(dendrogram_a.n, dendrogram_b.n));
    }
    counts
        .iter()
        .map(|&m| {
            let a = cut(dendrogram_a, m)?;
            let b = cut(dendrogram_b, m)?;
            Ok((m, adjusted_rand_index(&a, &b)?))
        })
        .collect()
}
