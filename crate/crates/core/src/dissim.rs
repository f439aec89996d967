//! Dissimilarity between keypoint types.
//!
//! Two sources are supported: the mean offset of each keypoint type from its
//! object's box center (from annotations), and the rows of the last
//! convolution layer of a keypoint head.

use serde::{Deserialize, Serialize};

use crate::ingest::{AnnotationSet, Tensor};
use crate::schema::{Head, KeypointSchema};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DissimError {
    #[error("keypoint types never observed visible: {0:?}")]
    Unobserved(Vec<usize>),
    #[error("need at least 2 keypoint types, got {0}")]
    TooFew(usize),
    #[error("{head} weights have {found} rows, expected {expected}")]
    RowCount { head: Head, expected: usize, found: usize },
    #[error("bias has {found} rows, expected {expected}")]
    BiasRows { expected: usize, found: usize },
    #[error("matrix is {found}x{found}, schema has {expected} keypoint types")]
    SizeMismatch { expected: usize, found: usize },
    #[error("matrix is not square: {0:?}")]
    NotSquare(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Offsets,
    ConvReg,
    ConvHeat,
    AntiOffsets,
    /// Loaded from a file with no recorded origin.
    External,
}

/// Symmetric, zero-diagonal n×n distances between keypoint types.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    n: usize,
    values: Vec<f64>,
    restricted: Vec<bool>,
    provenance: Provenance,
}

impl DissimilarityMatrix {
    /// Builds a matrix from a function of the pair `(i, j)` with `i < j`.
    pub fn from_fn(n: usize, provenance: Provenance, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = f(i, j);
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        Self {
            n,
            values,
            restricted: vec![false; n * n],
            provenance,
        }
    }

    /// Wraps a square row-major matrix, e.g. one read back from NPY. The
    /// input is not checked for symmetry here; clustering does that.
    pub fn from_tensor(tensor: &Tensor) -> Result<Self, DissimError> {
        match *tensor.shape() {
            [r, c] if r == c => Ok(Self {
                n: r,
                values: tensor.to_f64_vec(),
                restricted: vec![false; r * r],
                provenance: Provenance::External,
            }),
            _ => Err(DissimError::NotSquare(tensor.shape().to_vec())),
        }
    }

    /// `(n, n)` f64 tensor for export.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.n, self.n], self.values.clone()).expect("n*n values")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn is_restricted(&self, i: usize, j: usize) -> bool {
        self.restricted[i * self.n + j]
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest entry not replaced by a restriction sentinel.
    pub fn max_finite(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.restricted)
            .filter(|(_, &r)| !r)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Reorders keypoint types: entry `(a, b)` of the result is entry
    /// `(perm[a], perm[b])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut values = vec![0.0; n * n];
        let mut restricted = vec![false; n * n];
        for a in 0..n {
            for b in 0..n {
                values[a * n + b] = self.get(perm[a], perm[b]);
                restricted[a * n + b] = self.is_restricted(perm[a], perm[b]);
            }
        }
        Self {
            n,
            values,
            restricted,
            provenance: self.provenance,
        }
    }
}

/// Mean offset of every keypoint type from its object's box center, with
/// each axis normalized by the box extent on that axis.
pub fn mean_offsets(annotations: &AnnotationSet, schema: &KeypointSchema) -> Result<Vec<[f64; 2]>, DissimError> {
    let n = schema.n();
    let mut sums = vec![[0.0f64; 2]; n];
    let mut counts = vec![0usize; n];
    for obj in &annotations.objects {
        // objects were validated against this schema on ingest
        let Some(class_pos) = schema.class_position(obj.class_id) else {
            continue;
        };
        let (cx, cy) = obj.bbox_center();
        let [_, _, w, h] = obj.bbox;
        for (local, kp) in obj.keypoints.iter().enumerate() {
            if !kp.visible() {
                continue;
            }
            let i = schema.global_index(class_pos, local);
            sums[i][0] += (kp.x - cx) / w;
            sums[i][1] += (kp.y - cy) / h;
            counts[i] += 1;
        }
    }
    let unobserved: Vec<usize> = (0..n).filter(|&i| counts[i] == 0).collect();
    if !unobserved.is_empty() {
        return Err(DissimError::Unobserved(unobserved));
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64])
        .collect())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn offsets_distance(means: &[[f64; 2]]) -> Result<DissimilarityMatrix, DissimError> {
    if means.len() < 2 {
        return Err(DissimError::TooFew(means.len()));
    }
    Ok(DissimilarityMatrix::from_fn(
        means.len(),
        Provenance::Offsets,
        |i, j| euclid(&means[i], &means[j]),
    ))
}

/// Negated offset distances, so that the farthest pair is the closest.
pub fn anti_offsets_distance(means: &[[f64; 2]]) -> Result<DissimilarityMatrix, DissimError> {
    if means.len() < 2 {
        return Err(DissimError::TooFew(means.len()));
    }
    Ok(DissimilarityMatrix::from_fn(
        means.len(),
        Provenance::AntiOffsets,
        |i, j| 0.0 - euclid(&means[i], &means[j]),
    ))
}

/// Per-keypoint feature vectors from the last convolution layer of a head.
///
/// The weight tensor's leading dimension indexes output channels; all other
/// dimensions are flattened into one feature row. The regression head has two
/// rows per keypoint (dx at `2i`, dy at `2i + 1`), which are concatenated.
/// When a bias is given its value is appended to each row.
pub fn conv_features(
    weights: &Tensor,
    bias: Option<&Tensor>,
    head: Head,
    schema: &KeypointSchema,
) -> Result<Vec<Vec<f64>>, DissimError> {
    let n = schema.n();
    let per = head.channels_per_cluster();
    let (rows, cols) = weights.rows_cols();
    if rows != per * n {
        return Err(DissimError::RowCount {
            head,
            expected: per * n,
            found: rows,
        });
    }
    let bias = match bias {
        Some(b) => {
            if b.len() != rows {
                return Err(DissimError::BiasRows {
                    expected: rows,
                    found: b.len(),
                });
            }
            Some(b.to_f64_vec())
        }
        None => None,
    };
    let w = weights.to_f64_vec();
    let row = |r: usize| {
        let mut v = w[r * cols..(r + 1) * cols].to_vec();
        if let Some(b) = &bias {
            v.push(b[r]);
        }
        v
    };
    Ok((0..n)
        .map(|i| (0..per).flat_map(|c| row(per * i + c)).collect())
        .collect())
}

pub fn conv_weight_distance(
    weights: &Tensor,
    bias: Option<&Tensor>,
    head: Head,
    schema: &KeypointSchema,
) -> Result<DissimilarityMatrix, DissimError> {
    let features = conv_features(weights, bias, head, schema)?;
    if features.len() < 2 {
        return Err(DissimError::TooFew(features.len()));
    }
    let provenance = match head {
        Head::Reg => Provenance::ConvReg,
        Head::Heat => Provenance::ConvHeat,
    };
    Ok(DissimilarityMatrix::from_fn(features.len(), provenance, |i, j| {
        euclid(&features[i], &features[j])
    }))
}

/// Replaces every same-class entry with `1e6 * (1 + max finite entry)`.
pub fn apply_restrictions(
    matrix: &DissimilarityMatrix,
    schema: &KeypointSchema,
) -> Result<DissimilarityMatrix, DissimError> {
    let n = matrix.n;
    if schema.n() != n {
        return Err(DissimError::SizeMismatch {
            expected: schema.n(),
            found: n,
        });
    }
    // an already restricted matrix keeps its sentinel
    let sentinel = match matrix.restricted.iter().position(|&r| r) {
        Some(idx) => matrix.values[idx],
        None => 1e6 * (1.0 + matrix.max_finite()),
    };
    let mut out = matrix.clone();
    for (a, b) in schema.same_class_pairs() {
        for idx in [a * n + b, b * n + a] {
            out.values[idx] = sentinel;
            out.restricted[idx] = true;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{AnnotatedKeypoint, AnnotatedObject, ImageInfo};
    use crate::schema::ClassSpec;

    fn single(k: usize) -> KeypointSchema {
        KeypointSchema::new(vec![ClassSpec::new(1, "a", k)]).unwrap()
    }

    fn object(bbox: [f64; 4], kps: &[(f64, f64, u8)]) -> AnnotatedObject {
        AnnotatedObject {
            image_id: 1,
            class_id: 1,
            bbox,
            keypoints: kps
                .iter()
                .map(|&(x, y, v)| AnnotatedKeypoint { x, y, visibility: v })
                .collect(),
        }
    }

    fn set(objects: Vec<AnnotatedObject>) -> AnnotationSet {
        AnnotationSet {
            images: vec![ImageInfo {
                id: 1,
                width: 256,
                height: 256,
            }],
            objects,
        }
    }

    #[test]
    fn offsets_are_box_normalized() {
        let s = single(2);
        let a = set(vec![object(
            [0.0, 0.0, 100.0, 200.0],
            &[(50.0, 100.0, 2), (100.0, 100.0, 1)],
        )]);
        let m = mean_offsets(&a, &s).unwrap();
        assert_eq!(m, vec![[0.0, 0.0], [0.5, 0.0]]);
    }

    #[test]
    fn offsets_average_observations() {
        let s = single(1);
        let a = set(vec![
            object([0.0, 0.0, 100.0, 200.0], &[(100.0, 100.0, 2)]),
            object([0.0, 0.0, 100.0, 200.0], &[(0.0, 100.0, 2)]),
            object([0.0, 0.0, 100.0, 200.0], &[(999.0, 999.0, 0)]),
        ]);
        assert_eq!(mean_offsets(&a, &s).unwrap(), vec![[0.0, 0.0]]);
    }

    #[test]
    fn unobserved_types_are_listed() {
        let s = single(3);
        let a = set(vec![object(
            [0.0, 0.0, 10.0, 10.0],
            &[(1.0, 1.0, 2), (1.0, 1.0, 0), (1.0, 1.0, 0)],
        )]);
        assert_eq!(mean_offsets(&a, &s).unwrap_err(), DissimError::Unobserved(vec![1, 2]));
    }

    #[test]
    fn offsets_distance_values() {
        let m = offsets_distance(&[[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]]).unwrap();
        assert_eq!(m.get(0, 1), 5.0);
        assert_eq!(m.get(0, 2), 0.0);
        let m = offsets_distance(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let expected = [0.0, 1.0, 1.0, 1.0, 0.0, 2f64.sqrt(), 1.0, 2f64.sqrt(), 0.0];
        assert_eq!(m.values(), &expected);
        assert_eq!(offsets_distance(&[[0.0, 0.0]]).unwrap_err(), DissimError::TooFew(1));
    }

    #[test]
    fn anti_offsets_negate() {
        let means = [[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]];
        let anti = anti_offsets_distance(&means).unwrap();
        let plain = offsets_distance(&means).unwrap();
        assert_eq!(anti.get(0, 1), -5.0);
        assert_eq!(anti.get(0, 2).to_bits(), 0.0f64.to_bits());
        for (a, p) in anti.values().iter().zip(plain.values()) {
            assert_eq!(*a, -p);
        }
        assert_eq!(anti.provenance(), Provenance::AntiOffsets);
    }

    #[test]
    fn heat_rows_are_features() {
        let s = single(3);
        let w = Tensor::from_f32(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = conv_weight_distance(&w, None, Head::Heat, &s).unwrap();
        assert_eq!(m.get(0, 1), 2f64.sqrt());
        assert_eq!(m.get(0, 2), 0.0);
        assert_eq!(m.provenance(), Provenance::ConvHeat);
    }

    #[test]
    fn reg_rows_are_concatenated() {
        let s = single(2);
        // keypoint 0: dx row (1,0), dy row (0,0); keypoint 1: dx (0,0), dy (0,1)
        let w = Tensor::from_f64(vec![4, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let f = conv_features(&w, None, Head::Reg, &s).unwrap();
        assert_eq!(f[0], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(f[1], vec![0.0, 0.0, 0.0, 1.0]);
        let m = conv_weight_distance(&w, None, Head::Reg, &s).unwrap();
        assert_eq!(m.get(0, 1), 2f64.sqrt());
    }

    #[test]
    fn conv_shapes_are_checked_and_flattened() {
        let s = single(2);
        let w = Tensor::from_f32(vec![3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(
            conv_weight_distance(&w, None, Head::Heat, &s),
            Err(DissimError::RowCount {
                expected: 2,
                found: 3,
                ..
            })
        ));
        // (out, in, kh, kw) layout flattens to one row per output channel
        let w = Tensor::from_f32(vec![2, 2, 1, 1], vec![3.0, 0.0, 0.0, 4.0]).unwrap();
        let m = conv_weight_distance(&w, None, Head::Heat, &s).unwrap();
        assert_eq!(m.get(0, 1), 5.0);
    }

    #[test]
    fn bias_is_optional_feature() {
        let s = single(2);
        let w = Tensor::from_f32(vec![2, 1], vec![0.0, 3.0]).unwrap();
        let b = Tensor::from_f32(vec![2], vec![4.0, 0.0]).unwrap();
        assert_eq!(conv_weight_distance(&w, None, Head::Heat, &s).unwrap().get(0, 1), 3.0);
        assert_eq!(
            conv_weight_distance(&w, Some(&b), Head::Heat, &s).unwrap().get(0, 1),
            5.0
        );
    }

    #[test]
    fn restriction_sentinel() {
        let s = KeypointSchema::new(vec![ClassSpec::new(1, "a", 2), ClassSpec::new(2, "b", 1)]).unwrap();
        let m = DissimilarityMatrix::from_fn(3, Provenance::Offsets, |i, j| match (i, j) {
            (0, 1) => 0.1,
            (0, 2) => 2.0,
            _ => 1.5,
        });
        let r = apply_restrictions(&m, &s).unwrap();
        assert_eq!(r.get(0, 1), 3e6);
        assert_eq!(r.get(1, 0), 3e6);
        assert!(r.is_restricted(0, 1));
        assert_eq!(r.get(0, 2).to_bits(), m.get(0, 2).to_bits());
        assert_eq!(r.get(1, 2).to_bits(), m.get(1, 2).to_bits());
        assert!(!r.is_restricted(1, 2));
        assert_eq!(r.get(0, 0), 0.0);
        assert_eq!(apply_restrictions(&r, &s).unwrap(), r);
    }

    #[test]
    fn single_class_sentinels_everything() {
        let s = single(3);
        let m = offsets_distance(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let r = apply_restrictions(&m, &s).unwrap();
        let sentinel = 1e6 * (1.0 + 2f64.sqrt());
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { sentinel };
                assert_eq!(r.get(i, j), expected);
            }
        }
    }

    #[test]
    fn size_mismatch() {
        let m = offsets_distance(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!(matches!(
            apply_restrictions(&m, &single(3)),
            Err(DissimError::SizeMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn tensor_export_round_trip() {
        let m = offsets_distance(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let t = m.to_tensor();
        assert_eq!(t.shape(), &[3, 3]);
        let back = DissimilarityMatrix::from_tensor(&t).unwrap();
        assert_eq!(back.values(), m.values());
    }
}
