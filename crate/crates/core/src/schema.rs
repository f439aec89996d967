//! Keypoint universe and grouping validity.
//!
//! A [`KeypointSchema`] lists object classes and how many keypoint types each
//! class owns. Keypoint types are indexed globally and contiguously per class,
//! in ascending class-id order. A [`Grouping`] maps every global keypoint type
//! to one regression cluster and one heatmap cluster.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema has no classes")]
    Empty,
    #[error("duplicate class id {0}")]
    DuplicateClassId(u32),
    #[error("class {id} has kp_count {kp_count}, expected at least 1")]
    EmptyClass { id: u32, kp_count: usize },
    #[error("grouping fingerprint {found} does not match schema fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("{head} labels have length {found}, schema has {expected} keypoint types")]
    LabelLength { head: Head, expected: usize, found: usize },
    #[error("{head} label {label} at index {index} is out of range for {clusters} clusters")]
    LabelOutOfRange {
        head: Head,
        index: usize,
        label: usize,
        clusters: usize,
    },
    #[error("{head} cluster {cluster} of {clusters} has no members")]
    EmptyCluster {
        head: Head,
        cluster: usize,
        clusters: usize,
    },
}

/// Which keypoint head a set of labels (or weights) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Keypoint regression: two channels (dx, dy) per cluster.
    Reg,
    /// Keypoint heatmap: one channel per cluster.
    Heat,
}

impl Head {
    /// Channels the head spends on a single cluster.
    pub fn channels_per_cluster(self) -> usize {
        match self {
            Head::Reg => 2,
            Head::Heat => 1,
        }
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Head::Reg => "reg",
            Head::Heat => "heat",
        })
    }
}

impl std::str::FromStr for Head {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reg" | "regression" => Ok(Head::Reg),
            "heat" | "heatmap" => Ok(Head::Heat),
            other => Err(format!("unknown head `{other}` (expected reg or heat)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: u32,
    pub name: String,
    pub kp_count: usize,
}

impl ClassSpec {
    pub fn new(id: u32, name: impl Into<String>, kp_count: usize) -> Self {
        Self {
            id,
            name: name.into(),
            kp_count,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    classes: Vec<ClassSpec>,
}

/// Ordered class list with derived global keypoint indexing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeypointSchema {
    classes: Vec<ClassSpec>,
    // starts[c] is the first global index of class c; starts[len] == n
    starts: Vec<usize>,
    // class position for every global keypoint index
    owner: Vec<usize>,
}

impl KeypointSchema {
    /// Builds a schema. Classes are reordered by ascending id.
    pub fn new(mut classes: Vec<ClassSpec>) -> Result<Self, SchemaError> {
        validate_schema(&classes)?;
        classes.sort_by_key(|c| c.id);
        let mut starts = Vec::with_capacity(classes.len() + 1);
        let mut owner = Vec::new();
        let mut next = 0;
        for (pos, class) in classes.iter().enumerate() {
            starts.push(next);
            next += class.kp_count;
            owner.extend(std::iter::repeat_n(pos, class.kp_count));
        }
        starts.push(next);
        Ok(Self { classes, starts, owner })
    }

    /// The 13 DeepFashion2 clothing categories (294 keypoint types).
    pub fn deepfashion2() -> Self {
        let classes = [
            ("short_sleeve_top", 25),
            ("long_sleeve_top", 33),
            ("short_sleeve_outwear", 31),
            ("long_sleeve_outwear", 39),
            ("vest", 15),
            ("sling", 15),
            ("shorts", 10),
            ("trousers", 14),
            ("skirt", 8),
            ("short_sleeve_dress", 29),
            ("long_sleeve_dress", 37),
            ("vest_dress", 19),
            ("sling_dress", 19),
        ];
        let classes = classes
            .iter()
            .enumerate()
            .map(|(i, (name, k))| ClassSpec::new(i as u32 + 1, *name, *k))
            .collect();
        Self::new(classes).expect("built-in schema is valid")
    }

    /// MS COCO person keypoints: one class of 17.
    pub fn coco_person() -> Self {
        Self::new(vec![ClassSpec::new(1, "person", 17)]).expect("built-in schema is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, crate::ingest::IngestError> {
        let file: SchemaFile = serde_json::from_str(text)?;
        Ok(Self::new(file.classes)?)
    }

    /// Canonical serialization: classes in ascending id order, pretty printed.
    pub fn to_json(&self) -> String {
        let file = SchemaFile {
            classes: self.classes.clone(),
        };
        let mut out = serde_json::to_string_pretty(&file).expect("schema serializes");
        out.push('\n');
        out
    }

    /// Hex SHA-256 of the compact canonical class list.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(&self.classes).expect("schema serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn classes(&self) -> &[ClassSpec] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Total number of keypoint types.
    pub fn n(&self) -> usize {
        self.owner.len()
    }

    /// Global index range of the class at position `class_pos`.
    pub fn range(&self, class_pos: usize) -> Range<usize> {
        self.starts[class_pos]..self.starts[class_pos + 1]
    }

    pub fn class_position(&self, class_id: u32) -> Option<usize> {
        self.classes.binary_search_by_key(&class_id, |c| c.id).ok()
    }

    pub fn class_by_id(&self, class_id: u32) -> Option<&ClassSpec> {
        self.class_position(class_id).map(|p| &self.classes[p])
    }

    /// Maps a global keypoint index to `(class position, local index)`.
    pub fn locate(&self, global: usize) -> (usize, usize) {
        let pos = self.owner[global];
        (pos, global - self.starts[pos])
    }

    pub fn global_index(&self, class_pos: usize, local: usize) -> usize {
        debug_assert!(local < self.classes[class_pos].kp_count);
        self.starts[class_pos] + local
    }

    pub fn same_class(&self, a: usize, b: usize) -> bool {
        self.owner[a] == self.owner[b]
    }

    /// Fewest clusters any grouping that keeps same-class keypoints apart can use.
    pub fn min_restricted_clusters(&self) -> usize {
        self.classes.iter().map(|c| c.kp_count).max().unwrap_or(0)
    }

    /// All unordered same-class pairs `(a, b)` with `a < b`, as global indices.
    pub fn same_class_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_classes()).flat_map(move |c| {
            let r = self.range(c);
            let end = r.end;
            r.flat_map(move |a| (a + 1..end).map(move |b| (a, b)))
        })
    }
}

/// Checks class-list invariants without building a schema.
pub fn validate_schema(classes: &[ClassSpec]) -> Result<(), SchemaError> {
    if classes.is_empty() {
        return Err(SchemaError::Empty);
    }
    let mut seen = std::collections::HashSet::new();
    for class in classes {
        if class.kp_count < 1 {
            return Err(SchemaError::EmptyClass {
                id: class.id,
                kp_count: class.kp_count,
            });
        }
        if !seen.insert(class.id) {
            return Err(SchemaError::DuplicateClassId(class.id));
        }
    }
    Ok(())
}

/// Relabels so that clusters are numbered `0..m` in order of first
/// appearance (equivalently, by smallest member index). Returns `(labels, m)`.
pub fn canonical_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Assignment of every keypoint type to a regression and a heatmap cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub schema_fingerprint: String,
    pub m_reg: usize,
    pub m_heat: usize,
    pub reg_labels: Vec<usize>,
    pub heat_labels: Vec<usize>,
}

impl Grouping {
    /// Assembles a grouping, renumbering both label arrays surjectively.
    pub fn new(schema: &KeypointSchema, reg_labels: &[usize], heat_labels: &[usize]) -> Result<Self, SchemaError> {
        let n = schema.n();
        for (head, labels) in [(Head::Reg, reg_labels), (Head::Heat, heat_labels)] {
            if labels.len() != n {
                return Err(SchemaError::LabelLength {
                    head,
                    expected: n,
                    found: labels.len(),
                });
            }
        }
        let (reg_labels, m_reg) = canonical_labels(reg_labels);
        let (heat_labels, m_heat) = canonical_labels(heat_labels);
        Ok(Self {
            schema_fingerprint: schema.fingerprint(),
            m_reg,
            m_heat,
            reg_labels,
            heat_labels,
        })
    }

    /// Every keypoint type in its own cluster in both heads.
    pub fn identity(schema: &KeypointSchema) -> Self {
        let ids: Vec<usize> = (0..schema.n()).collect();
        Self::new(schema, &ids, &ids).expect("identity labels have length n")
    }

    pub fn labels(&self, head: Head) -> &[usize] {
        match head {
            Head::Reg => &self.reg_labels,
            Head::Heat => &self.heat_labels,
        }
    }

    pub fn clusters(&self, head: Head) -> usize {
        match head {
            Head::Reg => self.m_reg,
            Head::Heat => self.m_heat,
        }
    }

    /// `(m_reg,m_heat)`, the notation used to name groupings.
    pub fn notation(&self) -> String {
        format!("({},{})", self.m_reg, self.m_heat)
    }

    /// Parses a grouping file and checks label ranges and surjectivity.
    pub fn from_json(text: &str) -> Result<Self, crate::ingest::IngestError> {
        let grouping: Grouping = serde_json::from_str(text)?;
        grouping.check_labels()?;
        Ok(grouping)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("grouping serializes");
        out.push('\n');
        out
    }

    /// Label range and surjectivity for both heads.
    pub fn check_labels(&self) -> Result<(), SchemaError> {
        for head in [Head::Reg, Head::Heat] {
            let m = self.clusters(head);
            let mut used = vec![false; m];
            for (index, &label) in self.labels(head).iter().enumerate() {
                if label >= m {
                    return Err(SchemaError::LabelOutOfRange {
                        head,
                        index,
                        label,
                        clusters: m,
                    });
                }
                used[label] = true;
            }
            if let Some(cluster) = used.iter().position(|u| !u) {
                return Err(SchemaError::EmptyCluster {
                    head,
                    cluster,
                    clusters: m,
                });
            }
        }
        Ok(())
    }

    /// Members of every cluster of `head`, ascending.
    pub fn members(&self, head: Head) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters(head)];
        for (k, &g) in self.labels(head).iter().enumerate() {
            out[g].push(k);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckMode {
    /// No same-class pair may share a cluster in either head.
    Restricted,
    /// Same-class pairs may share a cluster in one head, never both.
    Unrestricted,
}

impl std::str::FromStr for CheckMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "restricted" => Ok(CheckMode::Restricted),
            "unrestricted" => Ok(CheckMode::Unrestricted),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// Where an offending pair shares a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairHead {
    Reg,
    Heat,
    Both,
}

/// A same-class keypoint pair, by class-local indices with `kp_a < kp_b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffendingPair {
    pub class_id: u32,
    pub kp_a: usize,
    pub kp_b: usize,
    pub head: PairHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub mode: CheckMode,
    pub restricted_ok: bool,
    pub ambiguous_pairs_total: usize,
    pub inconsistent_reg: usize,
    pub inconsistent_heat: usize,
    /// Restricted mode lists every per-head inconsistent pair; unrestricted
    /// mode lists the ambiguous pairs.
    pub offending: Vec<OffendingPair>,
}

impl ValidityReport {
    /// True when every original keypoint can be recovered from the clusters.
    pub fn decodable(&self) -> bool {
        self.ambiguous_pairs_total == 0
    }

    /// Whether the grouping satisfies the requested mode.
    pub fn ok(&self) -> bool {
        match self.mode {
            CheckMode::Restricted => self.restricted_ok,
            CheckMode::Unrestricted => self.decodable(),
        }
    }
}

pub fn check_grouping(
    schema: &KeypointSchema,
    grouping: &Grouping,
    mode: CheckMode,
) -> Result<ValidityReport, SchemaError> {
    let expected = schema.fingerprint();
    if grouping.schema_fingerprint != expected {
        return Err(SchemaError::FingerprintMismatch {
            expected,
            found: grouping.schema_fingerprint.clone(),
        });
    }
    let n = schema.n();
    for head in [Head::Reg, Head::Heat] {
        let found = grouping.labels(head).len();
        if found != n {
            return Err(SchemaError::LabelLength {
                head,
                expected: n,
                found,
            });
        }
    }

    let mut inconsistent_reg = 0;
    let mut inconsistent_heat = 0;
    let mut ambiguous = 0;
    let mut offending = Vec::new();
    for (a, b) in schema.same_class_pairs() {
        let reg = grouping.reg_labels[a] == grouping.reg_labels[b];
        let heat = grouping.heat_labels[a] == grouping.heat_labels[b];
        inconsistent_reg += reg as usize;
        inconsistent_heat += heat as usize;
        ambiguous += (reg && heat) as usize;

        let (class_pos, kp_a) = schema.locate(a);
        let kp_b = schema.locate(b).1;
        let class_id = schema.classes()[class_pos].id;
        let mut push = |head| {
            offending.push(OffendingPair {
                class_id,
                kp_a,
                kp_b,
                head,
            })
        };
        match mode {
            CheckMode::Restricted => {
                if reg {
                    push(PairHead::Reg);
                }
                if heat {
                    push(PairHead::Heat);
                }
            }
            CheckMode::Unrestricted => {
                if reg && heat {
                    push(PairHead::Both);
                }
            }
        }
    }

    Ok(ValidityReport {
        mode,
        restricted_ok: inconsistent_reg == 0 && inconsistent_heat == 0,
        ambiguous_pairs_total: ambiguous,
        inconsistent_reg,
        inconsistent_heat,
        offending,
    })
}
