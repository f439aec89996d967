//! Synthetic scenes: renders ground-truth-consistent head maps so the
//! decoder can be checked exactly, plus the PCK evaluation that backs sigma
//! selection.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{Detection, FeatureMap, HeadTensors};
use crate::ingest::{write_tensor, write_text, DType, IngestError, ManifestImage};
use crate::schema::{check_grouping, CheckMode, ClassSpec, Grouping, KeypointSchema, SchemaError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SynthError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("grouping has {0} ambiguous same-class pairs")]
    Ambiguous(usize),
    #[error("{what} at ({x}, {y}) lies outside the {width}x{height} grid")]
    OutOfGrid {
        what: String,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("amplitude must be in (0, 1], got {0}")]
    Amplitude(f64),
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("unknown class id {0}")]
    UnknownClass(u32),
    #[error("object {object} has {found} keypoints, class {class_id} expects {expected}")]
    KeypointCount {
        object: usize,
        class_id: u32,
        expected: usize,
        found: usize,
    },
    #[error("distractor channel {channel} out of range for {m_heat} heatmap channels")]
    Channel { channel: usize, m_heat: usize },
    #[error("could not place a separable scene after {0} attempts")]
    Exhausted(usize),
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: u32,
    /// `(x, y)`, grid units.
    pub center: [f64; 2],
    /// `(w, h)`, grid units.
    pub size: [f64; 2],
    /// Class-local order.
    pub keypoints: Vec<[f64; 2]>,
    /// Center peak height.
    #[serde(default = "one")]
    pub score: f64,
}

impl SceneObject {
    pub fn bbox(&self) -> [f64; 4] {
        let [cx, cy] = self.center;
        let [w, h] = self.size;
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
    }

    pub fn center_pixel(&self) -> [usize; 2] {
        pixel(self.center)
    }
}

/// An extra peak written into one keypoint heatmap channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub sigma_center: f64,
    pub sigma_kp: f64,
    /// Peak height of every keypoint bump.
    #[serde(default = "one")]
    pub kp_amplitude: f64,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("scene serializes");
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub class_id: u32,
    pub bbox: [f64; 4],
    pub keypoints: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub objects: Vec<GroundTruthObject>,
}

impl GroundTruth {
    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("ground truth serializes");
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub heads: HeadTensors,
    pub truth: GroundTruth,
}

fn pixel(p: [f64; 2]) -> [usize; 2] {
    [p[0].floor() as usize, p[1].floor() as usize]
}

fn fract(p: [f64; 2]) -> [f64; 2] {
    [p[0] - p[0].floor(), p[1] - p[1].floor()]
}

fn draw_max(map: &mut FeatureMap, c: usize, at: [usize; 2], amplitude: f64, sigma: f64) {
    let two_var = 2.0 * sigma * sigma;
    for y in 0..map.height {
        for x in 0..map.width {
            let d2 = (x as f64 - at[0] as f64).powi(2) + (y as f64 - at[1] as f64).powi(2);
            let v = amplitude * (-d2 / two_var).exp();
            if v > map.get(c, y, x) {
                map.set(c, y, x, v);
            }
        }
    }
}

fn ambiguity_free(schema: &KeypointSchema, grouping: &Grouping) -> Result<(), SynthError> {
    let report = check_grouping(schema, grouping, CheckMode::Unrestricted)?;
    if !report.decodable() {
        return Err(SynthError::Ambiguous(report.ambiguous_pairs_total));
    }
    Ok(())
}

fn validate(spec: &SceneSpec, schema: &KeypointSchema, grouping: &Grouping) -> Result<(), SynthError> {
    for (name, value) in [
        ("height", spec.height as f64),
        ("width", spec.width as f64),
        ("sigma_center", spec.sigma_center),
        ("sigma_kp", spec.sigma_kp),
    ] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(SynthError::NonPositive { name, value });
        }
    }
    let inside = |what: String, p: [f64; 2]| {
        if p[0] >= 0.0 && p[1] >= 0.0 && p[0] < spec.width as f64 && p[1] < spec.height as f64 {
            Ok(())
        } else {
            Err(SynthError::OutOfGrid {
                what,
                x: p[0],
                y: p[1],
                width: spec.width,
                height: spec.height,
            })
        }
    };
    let amplitude = |a: f64| {
        if a > 0.0 && a <= 1.0 {
            Ok(())
        } else {
            Err(SynthError::Amplitude(a))
        }
    };
    amplitude(spec.kp_amplitude)?;
    for (i, o) in spec.objects.iter().enumerate() {
        let class = schema
            .class_by_id(o.class_id)
            .ok_or(SynthError::UnknownClass(o.class_id))?;
        if o.keypoints.len() != class.kp_count {
            return Err(SynthError::KeypointCount {
                object: i,
                class_id: o.class_id,
                expected: class.kp_count,
                found: o.keypoints.len(),
            });
        }
        for (name, value) in [("object width", o.size[0]), ("object height", o.size[1])] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(SynthError::NonPositive { name, value });
            }
        }
        amplitude(o.score)?;
        inside(format!("center of object {i}"), o.center)?;
        for (k, &p) in o.keypoints.iter().enumerate() {
            inside(format!("keypoint {k} of object {i}"), p)?;
        }
    }
    for (i, d) in spec.distractors.iter().enumerate() {
        amplitude(d.amplitude)?;
        inside(format!("distractor {i}"), [d.x, d.y])?;
        if d.channel >= grouping.m_heat {
            return Err(SynthError::Channel {
                channel: d.channel,
                m_heat: grouping.m_heat,
            });
        }
    }
    Ok(())
}

/// Regression target for every keypoint of an object: the mean displacement,
/// relative to the center pixel, of the class's members of its reg cluster.
fn regression_targets(object: &SceneObject, schema: &KeypointSchema, grouping: &Grouping) -> Vec<[f64; 2]> {
    let pos = schema.class_position(object.class_id).expect("validated class");
    let range = schema.range(pos);
    let cp = object.center_pixel();
    let disp: Vec<[f64; 2]> = object
        .keypoints
        .iter()
        .map(|k| [k[0] - cp[0] as f64, k[1] - cp[1] as f64])
        .collect();
    range
        .clone()
        .map(|i| {
            let g = grouping.reg_labels[i];
            let members: Vec<usize> = range.clone().filter(|&j| grouping.reg_labels[j] == g).collect();
            let mut sum = [0.0, 0.0];
            for &j in &members {
                let d = disp[j - range.start];
                sum[0] += d[0];
                sum[1] += d[1];
            }
            [sum[0] / members.len() as f64, sum[1] / members.len() as f64]
        })
        .collect()
}

/// Renders the six head maps for a scene.
pub fn render(spec: &SceneSpec, schema: &KeypointSchema, grouping: &Grouping) -> Result<Rendered, SynthError> {
    ambiguity_free(schema, grouping)?;
    validate(spec, schema, grouping)?;
    let (h, w) = (spec.height, spec.width);
    let mut center_heatmap = FeatureMap::zeros(schema.num_classes(), h, w);
    let mut center_offset = FeatureMap::zeros(2, h, w);
    let mut object_size = FeatureMap::zeros(2, h, w);
    let mut kp_regression = FeatureMap::zeros(2 * grouping.m_reg, h, w);
    let mut kp_heatmap = FeatureMap::zeros(grouping.m_heat, h, w);
    let mut kp_offset = FeatureMap::zeros(2, h, w);
    let mut truth = Vec::with_capacity(spec.objects.len());

    for o in &spec.objects {
        let pos = schema.class_position(o.class_id).expect("validated class");
        let cp = o.center_pixel();
        draw_max(&mut center_heatmap, pos, cp, o.score, spec.sigma_center);
        let f = fract(o.center);
        center_offset.set(0, cp[1], cp[0], f[0]);
        center_offset.set(1, cp[1], cp[0], f[1]);
        object_size.set(0, cp[1], cp[0], o.size[0]);
        object_size.set(1, cp[1], cp[0], o.size[1]);
        for (i, t) in schema.range(pos).zip(regression_targets(o, schema, grouping)) {
            let g = grouping.reg_labels[i];
            kp_regression.set(2 * g, cp[1], cp[0], t[0]);
            kp_regression.set(2 * g + 1, cp[1], cp[0], t[1]);
        }
        for (i, &k) in schema.range(pos).zip(&o.keypoints) {
            let kp = pixel(k);
            draw_max(
                &mut kp_heatmap,
                grouping.heat_labels[i],
                kp,
                spec.kp_amplitude,
                spec.sigma_kp,
            );
            let f = fract(k);
            kp_offset.set(0, kp[1], kp[0], f[0]);
            kp_offset.set(1, kp[1], kp[0], f[1]);
        }
        truth.push(GroundTruthObject {
            class_id: o.class_id,
            bbox: o.bbox(),
            keypoints: o.keypoints.clone(),
        });
    }
    for d in &spec.distractors {
        let p = pixel([d.x, d.y]);
        draw_max(&mut kp_heatmap, d.channel, p, d.amplitude, spec.sigma_kp);
        let f = fract([d.x, d.y]);
        kp_offset.set(0, p[1], p[0], f[0]);
        kp_offset.set(1, p[1], p[0], f[1]);
    }

    let heads = HeadTensors::new(
        center_heatmap,
        center_offset,
        object_size,
        kp_regression,
        kp_heatmap,
        kp_offset,
    )
    .expect("rendered maps share one layout");
    Ok(Rendered {
        heads,
        truth: GroundTruth { objects: truth },
    })
}

/// The canned closest-peak failure case and what each refinement should
/// return for its first keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Figure4Case {
    pub schema: KeypointSchema,
    pub grouping: Grouping,
    pub spec: SceneSpec,
    /// Mask sigma the case is built for.
    pub sigma: f64,
    /// Coarse position shared by both keypoints.
    pub coarse: [f64; 2],
    pub true_keypoint: [f64; 2],
    pub distractor: [f64; 2],
}

impl Figure4Case {
    /// Distractor amplitude at which rescoring stops preferring the true peak.
    pub fn break_even(&self) -> f64 {
        let dist = |p: [f64; 2]| ((p[0] - self.coarse[0]).powi(2) + (p[1] - self.coarse[1]).powi(2)).sqrt();
        break_even_amplitude(
            self.spec.kp_amplitude,
            dist(self.true_keypoint),
            dist(self.distractor),
            self.sigma,
        )
    }

    /// Same scene with the distractor's amplitude replaced.
    pub fn with_distractor_amplitude(&self, amplitude: f64) -> SceneSpec {
        let mut spec = self.spec.clone();
        spec.distractors[0].amplitude = amplitude;
        spec
    }
}

/// Two keypoints share one regression channel, so both get the coarse
/// position midway between them; they have separate heatmap channels. A weak
/// distractor sits on the first keypoint's heatmap channel, one pixel from
/// the coarse position, while the true peak is two pixels away.
pub fn figure4_case() -> Figure4Case {
    let schema = KeypointSchema::new(vec![ClassSpec::new(1, "garment", 2)]).expect("valid schema");
    let grouping = Grouping::new(&schema, &[0, 0], &[0, 1]).expect("two labels");
    let spec = SceneSpec {
        height: 32,
        width: 32,
        sigma_center: 2.0,
        sigma_kp: 0.5,
        kp_amplitude: 0.9,
        objects: vec![SceneObject {
            class_id: 1,
            center: [16.0, 16.0],
            size: [12.0, 12.0],
            keypoints: vec![[14.0, 20.0], [18.0, 20.0]],
            score: 1.0,
        }],
        distractors: vec![Distractor {
            x: 17.0,
            y: 20.0,
            amplitude: 0.15,
            channel: 0,
        }],
    };
    Figure4Case {
        schema,
        grouping,
        spec,
        sigma: 2.0,
        coarse: [16.0, 20.0],
        true_keypoint: [14.0, 20.0],
        distractor: [17.0, 20.0],
    }
}

/// Solves `a_true·exp(−d_true²/2σ²) = a·exp(−d_distractor²/2σ²)` for `a`.
pub fn break_even_amplitude(true_amplitude: f64, d_true: f64, d_distractor: f64, sigma: f64) -> f64 {
    true_amplitude * ((d_distractor * d_distractor - d_true * d_true) / (2.0 * sigma * sigma)).exp()
}

/// PCK tallies per original keypoint type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

impl PckReport {
    pub fn empty(n: usize) -> Self {
        Self {
            correct: vec![0; n],
            total: vec![0; n],
        }
    }

    pub fn merge(&mut self, other: &PckReport) {
        for (a, b) in self.correct.iter_mut().zip(&other.correct) {
            *a += b;
        }
        for (a, b) in self.total.iter_mut().zip(&other.total) {
            *a += b;
        }
    }

    /// Per-type accuracy; `None` where the type never occurs.
    pub fn per_type(&self) -> Vec<Option<f64>> {
        self.correct
            .iter()
            .zip(&self.total)
            .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
            .collect()
    }

    /// Fraction of all keypoints correct; 0 when there are none.
    pub fn aggregate(&self) -> f64 {
        let total: usize = self.total.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.correct.iter().sum::<usize>() as f64 / total as f64
    }
}

pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// PCK@`t`: a keypoint is correct within `t·max(w, h)` of its ground truth
/// box. Detections are matched greedily by score to same-class ground truth
/// with IoU ≥ 0.5; unmatched ground truth counts all its keypoints wrong.
pub fn evaluate(detections: &[Detection], truth: &GroundTruth, schema: &KeypointSchema, t: f64) -> PckReport {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut matched: Vec<Option<usize>> = vec![None; truth.objects.len()];
    for d in order {
        let det = &detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in truth.objects.iter().enumerate() {
            if matched[g].is_some() || gt.class_id != det.class_id {
                continue;
            }
            let v = iou(det.bbox, gt.bbox);
            if v >= 0.5 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = Some(d);
        }
    }

    let mut report = PckReport::empty(schema.n());
    for (g, gt) in truth.objects.iter().enumerate() {
        let Some(pos) = schema.class_position(gt.class_id) else {
            continue;
        };
        let radius = t * (gt.bbox[2] - gt.bbox[0]).max(gt.bbox[3] - gt.bbox[1]);
        for (i, k) in schema.range(pos).zip(&gt.keypoints) {
            report.total[i] += 1;
            let hit = matched[g].is_some_and(|d| {
                detections[d]
                    .keypoints
                    .get(i - schema.range(pos).start)
                    .is_some_and(|p| ((p.x - k[0]).powi(2) + (p.y - k[1]).powi(2)).sqrt() <= radius)
            });
            if hit {
                report.correct[i] += 1;
            }
        }
    }
    report
}

/// Random schema with ids `1..=classes`.
pub fn random_schema<R: Rng>(rng: &mut R, max_classes: usize, max_keypoints: usize) -> KeypointSchema {
    let classes = rng.gen_range(1..=max_classes);
    KeypointSchema::new(
        (1..=classes as u32)
            .map(|id| ClassSpec::new(id, format!("class{id}"), rng.gen_range(1..=max_keypoints)))
            .collect(),
    )
    .expect("generated schema is valid")
}

/// Random grouping with no ambiguous pairs.
pub fn random_grouping<R: Rng>(rng: &mut R, schema: &KeypointSchema) -> Grouping {
    let n = schema.n();
    for _ in 0..1000 {
        let k_reg = rng.gen_range(1..=n);
        let k_heat = rng.gen_range(1..=n);
        let reg: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k_reg)).collect();
        let heat: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k_heat)).collect();
        let g = Grouping::new(schema, &reg, &heat).expect("labels have length n");
        if ambiguity_free(schema, &g).is_ok() {
            return g;
        }
    }
    Grouping::identity(schema)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomSceneParams {
    pub height: usize,
    pub width: usize,
    pub max_objects: usize,
    pub sigma_center: f64,
    pub sigma_kp: f64,
    /// Rescoring sigma the scene must stay separable for.
    pub decode_sigma: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Jitter of keypoints around their regression cluster's anchor.
    pub cluster_spread: f64,
    /// Log-score margin between the true peak and any competitor.
    pub margin: f64,
    pub max_attempts: usize,
}

impl Default for RandomSceneParams {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            max_objects: 4,
            sigma_center: 2.0,
            sigma_kp: 0.5,
            decode_sigma: 2.0,
            min_size: 8.0,
            max_size: 14.0,
            cluster_spread: 1.2,
            margin: 0.1,
            max_attempts: 10_000,
        }
    }
}

struct Bump {
    pixel: [usize; 2],
    channel: usize,
    amplitude: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn as_f64(p: [usize; 2]) -> [f64; 2] {
    [p[0] as f64, p[1] as f64]
}

/// Whether both refinement modes recover every keypoint of the scene: peaks
/// sit on distinct pixels, same-channel peaks are two pixels apart, every
/// keypoint lies inside its box, and around each coarse position the true
/// peak wins the rescored map by `margin` in log score over an upper bound
/// for every competitor.
fn separable(spec: &SceneSpec, schema: &KeypointSchema, grouping: &Grouping, params: &RandomSceneParams) -> bool {
    let mut bumps: Vec<Bump> = Vec::new();
    for o in &spec.objects {
        let pos = schema.class_position(o.class_id).expect("generated class");
        for (i, &k) in schema.range(pos).zip(&o.keypoints) {
            bumps.push(Bump {
                pixel: pixel(k),
                channel: grouping.heat_labels[i],
                amplitude: spec.kp_amplitude,
            });
        }
    }
    for d in &spec.distractors {
        bumps.push(Bump {
            pixel: pixel([d.x, d.y]),
            channel: d.channel,
            amplitude: d.amplitude,
        });
    }
    for (a, ba) in bumps.iter().enumerate() {
        for bb in &bumps[a + 1..] {
            let d = dist(as_f64(ba.pixel), as_f64(bb.pixel));
            if d == 0.0 || (ba.channel == bb.channel && d < 2.0) {
                return false;
            }
        }
    }

    let s2 = params.decode_sigma * params.decode_sigma;
    let k2 = spec.sigma_kp * spec.sigma_kp;
    let mut start = 0;
    for o in &spec.objects {
        let pos = schema.class_position(o.class_id).expect("generated class");
        let cp = as_f64(o.center_pixel());
        let bbox = o.bbox();
        let targets = regression_targets(o, schema, grouping);
        for (local, t) in targets.iter().enumerate() {
            let me = &bumps[start + local];
            let k = o.keypoints[local];
            if k[0] < bbox[0] + 0.5 || k[0] > bbox[2] - 0.5 || k[1] < bbox[1] + 0.5 || k[1] > bbox[3] - 0.5 {
                return false;
            }
            let coarse = [cp[0] + t[0], cp[1] + t[1]];
            let a = as_f64(me.pixel);
            let d_a = dist(coarse, a);
            if d_a > 1.5 * params.decode_sigma || d_a * k2 / (k2 + s2) >= 0.45 {
                return false;
            }
            let clamped = [
                coarse[0].clamp(0.0, (spec.width - 1) as f64),
                coarse[1].clamp(0.0, (spec.height - 1) as f64),
            ];
            let nearest = [clamped[0].round(), clamped[1].round()];
            let score = me.amplitude.ln() - d_a * d_a / (2.0 * s2);
            if nearest != a && score <= -dist(nearest, a).powi(2) / (2.0 * k2) + me.amplitude.ln() + params.margin {
                return false;
            }
            for (j, b) in bumps.iter().enumerate() {
                if j == start + local || b.channel != me.channel {
                    continue;
                }
                let bp = as_f64(b.pixel);
                let bound = (b.amplitude.ln() - dist(coarse, bp).powi(2) / (2.0 * (s2 + k2)))
                    .max(b.amplitude.ln() - dist(nearest, bp).powi(2) / (2.0 * k2));
                if score <= bound + params.margin {
                    return false;
                }
            }
        }
        start += schema.classes()[pos].kp_count;
    }
    true
}

/// Random scene that both refinement modes decode exactly under `grouping`.
/// Keypoints sharing a regression cluster are placed around a common anchor
/// so that their shared coarse position stays near each of them.
pub fn random_scene<R: Rng>(
    rng: &mut R,
    schema: &KeypointSchema,
    grouping: &Grouping,
    params: &RandomSceneParams,
) -> Result<SceneSpec, SynthError> {
    ambiguity_free(schema, grouping)?;
    let target = rng.gen_range(1..=params.max_objects.max(1));
    let mut spec = SceneSpec {
        height: params.height,
        width: params.width,
        sigma_center: params.sigma_center,
        sigma_kp: params.sigma_kp,
        kp_amplitude: 1.0,
        objects: Vec::new(),
        distractors: Vec::new(),
    };
    let mut failures = 0;
    while spec.objects.len() < target {
        if failures >= params.max_attempts {
            if spec.objects.is_empty() {
                return Err(SynthError::Exhausted(params.max_attempts));
            }
            break;
        }
        let object = random_object(rng, schema, grouping, params);
        let far_enough = spec.objects.iter().all(|o| {
            o.class_id != object.class_id || dist(as_f64(o.center_pixel()), as_f64(object.center_pixel())) >= 3.0
        }) && spec.objects.iter().all(|o| o.center_pixel() != object.center_pixel());
        spec.objects.push(object);
        if far_enough && separable(&spec, schema, grouping, params) {
            continue;
        }
        spec.objects.pop();
        failures += 1;
    }
    Ok(spec)
}

fn random_object<R: Rng>(
    rng: &mut R,
    schema: &KeypointSchema,
    grouping: &Grouping,
    params: &RandomSceneParams,
) -> SceneObject {
    let pos = rng.gen_range(0..schema.num_classes());
    let class = &schema.classes()[pos];
    let size = [
        rng.gen_range(params.min_size..=params.max_size),
        rng.gen_range(params.min_size..=params.max_size),
    ];
    let center = [
        rng.gen_range(size[0] / 2.0 + 1.0..params.width as f64 - size[0] / 2.0 - 1.0),
        rng.gen_range(size[1] / 2.0 + 1.0..params.height as f64 - size[1] / 2.0 - 1.0),
    ];
    let inner = [
        center[0] - size[0] / 2.0 + 1.0,
        center[1] - size[1] / 2.0 + 1.0,
        center[0] + size[0] / 2.0 - 1.0,
        center[1] + size[1] / 2.0 - 1.0,
    ];
    let range = schema.range(pos);
    let mut anchors: Vec<(usize, [f64; 2])> = Vec::new();
    let keypoints = range
        .map(|i| {
            let g = grouping.reg_labels[i];
            let anchor = match anchors.iter().find(|(c, _)| *c == g) {
                Some(&(_, a)) => a,
                None => {
                    let a = [rng.gen_range(inner[0]..inner[2]), rng.gen_range(inner[1]..inner[3])];
                    anchors.push((g, a));
                    a
                }
            };
            let s = params.cluster_spread;
            [
                (anchor[0] + rng.gen_range(-s..=s)).clamp(inner[0], inner[2]),
                (anchor[1] + rng.gen_range(-s..=s)).clamp(inner[1], inner[3]),
            ]
        })
        .collect();
    SceneObject {
        class_id: class.id,
        center,
        size,
        keypoints,
        score: 1.0,
    }
}

/// Writes the six maps and the ground truth as `<stem>_*.npy` and
/// `<stem>_gt.json` under `dir`; the returned entry uses file names relative
/// to `dir`.
pub fn write_rendered(dir: &Path, stem: &str, rendered: &Rendered, dtype: DType) -> Result<ManifestImage, IngestError> {
    let h = &rendered.heads;
    let maps = [
        ("center_heatmap", &h.center_heatmap),
        ("center_offset", &h.center_offset),
        ("object_size", &h.object_size),
        ("kp_regression", &h.kp_regression),
        ("kp_heatmap", &h.kp_heatmap),
        ("kp_offset", &h.kp_offset),
    ];
    let mut names = Vec::with_capacity(6);
    for (suffix, map) in maps {
        let name = format!("{stem}_{suffix}.npy");
        write_tensor(&dir.join(&name), &map.to_tensor(dtype))?;
        names.push(name.into());
    }
    let gt = format!("{stem}_gt.json");
    write_text(&dir.join(&gt), &rendered.truth.to_json())?;
    let [a, b, c, d, e, f]: [std::path::PathBuf; 6] = names.try_into().expect("six maps");
    Ok(ManifestImage {
        id: stem.to_string(),
        center_heatmap: a,
        center_offset: b,
        object_size: c,
        kp_regression: d,
        kp_heatmap: e,
        kp_offset: f,
        ground_truth: Some(gt.into()),
    })
}
