//! CenterNet-style decoding of the six head maps into detections with
//! keypoints, including group-aware channel unpacking.
//!
//! Keypoints are first placed coarsely by the regression head (displacements
//! from the object's center pixel), then refined on the keypoint heatmap
//! either by the closest local maximum ([`base_refine`]) or by the argmax of
//! the heatmap multiplied with a Gaussian mask centered on the coarse position
//! ([`rescore_refine`]).
//!
//! All coordinates are in feature-grid units; x indexes columns and y rows.

use serde::{Deserialize, Serialize};

use crate::ingest::{IngestError, Tensor};
use crate::schema::{check_grouping, CheckMode, Grouping, KeypointSchema, SchemaError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("{name} has shape {shape:?}, expected {expected}")]
    Shape {
        name: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("grouping has {0} ambiguous same-class pairs and cannot be decoded")]
    Ambiguous(usize),
    #[error("sigma grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// A stack of `channels` row-major `height × width` maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    fn from_tensor(name: &'static str, t: &Tensor) -> Result<Self, DecodeError> {
        match *t.shape() {
            [c, h, w] => Ok(Self {
                channels: c,
                height: h,
                width: w,
                data: t.to_f64_vec(),
            }),
            _ => Err(DecodeError::Shape {
                name,
                shape: t.shape().to_vec(),
                expected: "(C, H, W)".into(),
            }),
        }
    }

    pub fn to_tensor(&self, dtype: crate::ingest::DType) -> Tensor {
        Tensor::from_values(vec![self.channels, self.height, self.width], dtype, self.data.clone())
            .expect("map shape matches data")
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> Plane<'_> {
        let len = self.height * self.width;
        Plane {
            height: self.height,
            width: self.width,
            data: &self.data[c * len..(c + 1) * len],
        }
    }
}

/// Borrowed view of a single channel.
#[derive(Debug, Clone, Copy)]
pub struct Plane<'a> {
    pub height: usize,
    pub width: usize,
    pub data: &'a [f64],
}

impl<'a> Plane<'a> {
    pub fn new(height: usize, width: usize, data: &'a [f64]) -> Self {
        assert_eq!(data.len(), height * width, "plane data length");
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// The six head outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors {
    pub center_heatmap: FeatureMap,
    pub center_offset: FeatureMap,
    pub object_size: FeatureMap,
    pub kp_regression: FeatureMap,
    pub kp_heatmap: FeatureMap,
    pub kp_offset: FeatureMap,
}

impl HeadTensors {
    /// Checks shared spatial size and two-channel maps, and clamps both
    /// heatmaps into `[0, 1]`.
    pub fn new(
        mut center_heatmap: FeatureMap,
        center_offset: FeatureMap,
        object_size: FeatureMap,
        kp_regression: FeatureMap,
        mut kp_heatmap: FeatureMap,
        kp_offset: FeatureMap,
    ) -> Result<Self, DecodeError> {
        let (h, w) = (center_heatmap.height, center_heatmap.width);
        let maps: [(&'static str, &FeatureMap, Option<usize>); 6] = [
            ("center_heatmap", &center_heatmap, None),
            ("center_offset", &center_offset, Some(2)),
            ("object_size", &object_size, Some(2)),
            ("kp_regression", &kp_regression, None),
            ("kp_heatmap", &kp_heatmap, None),
            ("kp_offset", &kp_offset, Some(2)),
        ];
        for (name, map, channels) in maps {
            let channels_ok = channels.is_none_or(|c| c == map.channels);
            if map.height != h || map.width != w || !channels_ok || map.channels == 0 {
                return Err(DecodeError::Shape {
                    name,
                    shape: vec![map.channels, map.height, map.width],
                    expected: format!("({}, {h}, {w})", channels.map_or("C".into(), |c| c.to_string())),
                });
            }
        }
        if !kp_regression.channels.is_multiple_of(2) {
            return Err(DecodeError::Shape {
                name: "kp_regression",
                shape: vec![kp_regression.channels, h, w],
                expected: "an even channel count".into(),
            });
        }
        for v in center_heatmap.data.iter_mut().chain(kp_heatmap.data.iter_mut()) {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            center_heatmap,
            center_offset,
            object_size,
            kp_regression,
            kp_heatmap,
            kp_offset,
        })
    }

    pub fn from_tensors(tensors: [&Tensor; 6]) -> Result<Self, DecodeError> {
        let [a, b, c, d, e, f] = tensors;
        Self::new(
            FeatureMap::from_tensor("center_heatmap", a)?,
            FeatureMap::from_tensor("center_offset", b)?,
            FeatureMap::from_tensor("object_size", c)?,
            FeatureMap::from_tensor("kp_regression", d)?,
            FeatureMap::from_tensor("kp_heatmap", e)?,
            FeatureMap::from_tensor("kp_offset", f)?,
        )
    }

    /// Loads the six NPY files named by a manifest entry.
    pub fn read(image: &crate::ingest::ManifestImage) -> Result<Self, IngestError> {
        let paths = [
            &image.center_heatmap,
            &image.center_offset,
            &image.object_size,
            &image.kp_regression,
            &image.kp_heatmap,
            &image.kp_offset,
        ];
        let tensors = paths
            .iter()
            .map(|p| crate::ingest::read_tensor(p))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: [&Tensor; 6] = std::array::from_fn(|i| &tensors[i]);
        Self::from_tensors(refs).map_err(|e| IngestError::Invalid(e.to_string()))
    }

    pub fn height(&self) -> usize {
        self.center_heatmap.height
    }

    pub fn width(&self) -> usize {
        self.center_heatmap.width
    }

    /// Channel counts against the schema and grouping.
    pub fn check_layout(&self, schema: &KeypointSchema, grouping: &Grouping) -> Result<(), DecodeError> {
        let (h, w) = (self.height(), self.width());
        let expect = [
            ("center_heatmap", &self.center_heatmap, schema.num_classes()),
            ("kp_regression", &self.kp_regression, 2 * grouping.m_reg),
            ("kp_heatmap", &self.kp_heatmap, grouping.m_heat),
        ];
        for (name, map, channels) in expect {
            if map.channels != channels {
                return Err(DecodeError::Shape {
                    name,
                    shape: vec![map.channels, h, w],
                    expected: format!("({channels}, {h}, {w})"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Pixels at least as high as all 8 neighbours (out-of-grid neighbours are
/// ignored) with score ≥ `threshold`, by descending score. Within a plateau
/// only the pixel with the smallest `(y, x)` in its 3×3 window survives.
pub fn local_peaks(plane: Plane<'_>, threshold: f64) -> Vec<Peak> {
    let (h, w) = (plane.height, plane.width);
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = plane.get(x, y);
            if !(v >= threshold) {
                continue;
            }
            let mut is_peak = true;
            'window: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if (ny, nx) == (y, x) {
                        continue;
                    }
                    let nv = plane.get(nx, ny);
                    if nv > v || (nv == v && (ny, nx) < (y, x)) {
                        is_peak = false;
                        break 'window;
                    }
                }
            }
            if is_peak {
                peaks.push(Peak { x, y, score: v });
            }
        }
    }
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.y, a.x).cmp(&(b.y, b.x))));
    peaks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeypointSource {
    Coarse,
    Refined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodedKeypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub source: KeypointSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: u32,
    pub score: f64,
    /// Peak pixel on the center heatmap, `(x, y)`.
    pub center_pixel: [usize; 2],
    /// Center after sub-pixel correction.
    pub center: [f64; 2],
    /// `[x1, y1, x2, y2]`.
    pub bbox: [f64; 4],
    /// One entry per keypoint type of the class, in class-local order.
    pub keypoints: Vec<DecodedKeypoint>,
}

impl Detection {
    pub fn width(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.bbox[0] && x <= self.bbox[2] && y >= self.bbox[1] && y <= self.bbox[3]
    }
}

/// Object boxes from center peaks, keypoints left empty. At most `top_k`
/// detections over all classes, by descending score. Peaks whose predicted
/// size is not positive are dropped.
pub fn decode_detections(
    heads: &HeadTensors,
    schema: &KeypointSchema,
    top_k: usize,
    score_threshold: f64,
) -> Result<Vec<Detection>, DecodeError> {
    let map = &heads.center_heatmap;
    if map.channels != schema.num_classes() {
        return Err(DecodeError::Shape {
            name: "center_heatmap",
            shape: vec![map.channels, map.height, map.width],
            expected: format!("({}, H, W)", schema.num_classes()),
        });
    }
    let mut candidates: Vec<(usize, Peak)> = (0..map.channels)
        .flat_map(|c| {
            local_peaks(map.plane(c), score_threshold)
                .into_iter()
                .map(move |p| (c, p))
        })
        .collect();
    candidates.sort_by(|(ca, a), (cb, b)| {
        b.score
            .total_cmp(&a.score)
            .then(ca.cmp(cb))
            .then((a.y, a.x).cmp(&(b.y, b.x)))
    });

    let mut out = Vec::new();
    for (c, p) in candidates {
        if out.len() == top_k {
            break;
        }
        let cx = p.x as f64 + heads.center_offset.get(0, p.y, p.x);
        let cy = p.y as f64 + heads.center_offset.get(1, p.y, p.x);
        let w = heads.object_size.get(0, p.y, p.x);
        let h = heads.object_size.get(1, p.y, p.x);
        if !(w > 0.0 && h > 0.0) {
            log::debug!("dropping peak at ({}, {}) with size ({w}, {h})", p.x, p.y);
            continue;
        }
        out.push(Detection {
            class_id: schema.classes()[c].id,
            score: p.score,
            center_pixel: [p.x, p.y],
            center: [cx, cy],
            bbox: [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0],
            keypoints: Vec::new(),
        });
    }
    Ok(out)
}

/// Coarse position of every keypoint type of the detection's class: the
/// center pixel plus the displacement stored on the keypoint's regression
/// cluster channels.
pub fn coarse_keypoints(
    detection: &Detection,
    heads: &HeadTensors,
    grouping: &Grouping,
    schema: &KeypointSchema,
) -> Vec<[f64; 2]> {
    let class_pos = schema
        .class_position(detection.class_id)
        .expect("detection class comes from the schema");
    let [px, py] = detection.center_pixel;
    schema
        .range(class_pos)
        .map(|i| {
            let g = grouping.reg_labels[i];
            [
                px as f64 + heads.kp_regression.get(2 * g, py, px),
                py as f64 + heads.kp_regression.get(2 * g + 1, py, px),
            ]
        })
        .collect()
}

/// Truncated Gaussian weighting around a (fractional) center.
///
/// Nonzero on pixels within `3σ` of the center, plus the pixel nearest the
/// center, which holds exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMask {
    pub center: [f64; 2],
    pub sigma: f64,
    /// `ceil(3σ)`.
    pub radius: usize,
    /// Pixel nearest the center, `(x, y)`.
    pub nearest: [usize; 2],
    /// Window bounds, inclusive: `[x0, y0, x1, y1]`.
    pub window: [usize; 4],
    values: Vec<f64>,
}

impl GaussianMask {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        let [x0, y0, x1, y1] = self.window;
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return 0.0;
        }
        self.values[(y - y0) * (x1 - x0 + 1) + (x - x0)]
    }

    /// Whether the pixel belongs to the mask's support.
    pub fn in_support(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 - self.center[0];
        let dy = y as f64 - self.center[1];
        [x, y] == self.nearest || (dx * dx + dy * dy).sqrt() <= 3.0 * self.sigma
    }
}

fn clamp_to_grid(p: [f64; 2], height: usize, width: usize) -> [f64; 2] {
    [
        p[0].clamp(0.0, (width - 1) as f64),
        p[1].clamp(0.0, (height - 1) as f64),
    ]
}

pub fn gaussian_mask(center: [f64; 2], sigma: f64, height: usize, width: usize) -> Result<GaussianMask, DecodeError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DecodeError::BadSigma(sigma));
    }
    let c = clamp_to_grid(center, height, width);
    let reach = 3.0 * sigma;
    let nearest = [c[0].round() as usize, c[1].round() as usize];
    let lo = |v: f64, n: usize| ((v - reach).ceil().max(0.0) as usize).min(n - 1);
    let hi = |v: f64, n: usize| ((v + reach).floor().max(0.0) as usize).min(n - 1);
    let window = [
        lo(c[0], width).min(nearest[0]),
        lo(c[1], height).min(nearest[1]),
        hi(c[0], width).max(nearest[0]),
        hi(c[1], height).max(nearest[1]),
    ];
    let [x0, y0, x1, y1] = window;
    let two_var = 2.0 * sigma * sigma;
    let mut values = Vec::with_capacity((x1 - x0 + 1) * (y1 - y0 + 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - c[0];
            let dy = y as f64 - c[1];
            let d2 = dx * dx + dy * dy;
            let v = if [x, y] == nearest {
                1.0
            } else if d2.sqrt() <= reach {
                (-d2 / two_var).exp()
            } else {
                0.0
            };
            values.push(v);
        }
    }
    Ok(GaussianMask {
        center: c,
        sigma,
        radius: reach.ceil() as usize,
        nearest,
        window,
        values,
    })
}

/// Heatmap multiplied by a Gaussian mask, stored over the mask window.
#[derive(Debug, Clone, PartialEq)]
pub struct Rescored {
    pub mask: GaussianMask,
    values: Vec<f64>,
}

impl Rescored {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        let [x0, y0, x1, y1] = self.mask.window;
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return 0.0;
        }
        self.values[(y - y0) * (x1 - x0 + 1) + (x - x0)]
    }

    /// Highest value, ties to the smallest `(y, x)`: `(x, y, value)`.
    pub fn argmax(&self) -> (usize, usize, f64) {
        let [x0, y0, x1, _] = self.mask.window;
        let w = x1 - x0 + 1;
        let mut best = (x0, y0, f64::NEG_INFINITY);
        for (i, &v) in self.values.iter().enumerate() {
            if v > best.2 {
                best = (x0 + i % w, y0 + i / w, v);
            }
        }
        best
    }

    /// Rescored values never exceed the heatmap and vanish outside the
    /// mask support. Returns the first offending pixel.
    pub fn check_invariants(&self, plane: Plane<'_>) -> Result<(), (usize, usize)> {
        for y in 0..plane.height {
            for x in 0..plane.width {
                let r = self.get(x, y);
                if r > plane.get(x, y) || (!self.mask.in_support(x, y) && r != 0.0) {
                    return Err((x, y));
                }
            }
        }
        Ok(())
    }
}

/// Multiplies one heatmap channel with a mask centered on `coarse`.
pub fn rescore(plane: Plane<'_>, coarse: [f64; 2], sigma: f64) -> Result<Rescored, DecodeError> {
    let mask = gaussian_mask(coarse, sigma, plane.height, plane.width)?;
    let [x0, y0, x1, y1] = mask.window;
    let mut values = Vec::with_capacity(mask.values.len());
    for y in y0..=y1 {
        for x in x0..=x1 {
            values.push(plane.get(x, y) * mask.get(x, y));
        }
    }
    Ok(Rescored { mask, values })
}

fn with_offset(offsets: &FeatureMap, x: usize, y: usize) -> [f64; 2] {
    [x as f64 + offsets.get(0, y, x), y as f64 + offsets.get(1, y, x)]
}

fn unrefined(coarse: [f64; 2]) -> DecodedKeypoint {
    DecodedKeypoint {
        x: coarse[0],
        y: coarse[1],
        score: 0.0,
        source: KeypointSource::Coarse,
    }
}

/// Refines a keypoint to the argmax of heatmap × Gaussian mask, then adds
/// the sub-pixel offset read at that pixel. The reported score is the
/// rescored value. An all-zero neighbourhood keeps the coarse position.
pub fn rescore_refine(
    plane: Plane<'_>,
    kp_offset: &FeatureMap,
    coarse: [f64; 2],
    sigma: f64,
) -> Result<DecodedKeypoint, DecodeError> {
    let rescored = rescore(plane, coarse, sigma)?;
    debug_assert_eq!(rescored.check_invariants(plane), Ok(()), "rescoring invariants");
    let (x, y, score) = rescored.argmax();
    if !(score > 0.0) {
        return Ok(unrefined(coarse));
    }
    let [rx, ry] = with_offset(kp_offset, x, y);
    Ok(DecodedKeypoint {
        x: rx,
        y: ry,
        score,
        source: KeypointSource::Refined,
    })
}

/// Refines a keypoint to the offset-corrected local maximum closest to the
/// coarse position among those inside the detection box. Equal distances
/// prefer the higher score.
pub fn base_refine(
    plane: Plane<'_>,
    kp_offset: &FeatureMap,
    coarse: [f64; 2],
    detection: &Detection,
    threshold: f64,
) -> DecodedKeypoint {
    base_refine_among(&local_peaks(plane, threshold), kp_offset, coarse, detection)
}

fn base_refine_among(
    peaks: &[Peak],
    kp_offset: &FeatureMap,
    coarse: [f64; 2],
    detection: &Detection,
) -> DecodedKeypoint {
    let mut best: Option<(f64, [f64; 2], f64)> = None;
    // peaks arrive by descending score, so strict `<` keeps the higher score on ties
    for p in peaks {
        let pos = with_offset(kp_offset, p.x, p.y);
        if !detection.contains(pos[0], pos[1]) {
            continue;
        }
        let d = ((pos[0] - coarse[0]).powi(2) + (pos[1] - coarse[1]).powi(2)).sqrt();
        if best.is_none_or(|(bd, _, _)| d < bd) {
            best = Some((d, pos, p.score));
        }
    }
    match best {
        Some((_, [x, y], score)) => DecodedKeypoint {
            x,
            y,
            score,
            source: KeypointSource::Refined,
        },
        None => unrefined(coarse),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Refine {
    Base,
    Rescore,
}

impl std::str::FromStr for Refine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Refine::Base),
            "rescore" => Ok(Refine::Rescore),
            other => Err(format!("unknown refinement `{other}` (expected base or rescore)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub refine: Refine,
    /// Mask standard deviation for rescoring, grid units.
    pub sigma: f64,
    pub top_k: usize,
    pub center_threshold: f64,
    /// Minimum heatmap peak for base refinement candidates.
    pub kp_threshold: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            refine: Refine::Rescore,
            sigma: 2.0,
            top_k: 100,
            center_threshold: 0.1,
            kp_threshold: 0.1,
        }
    }
}

/// Full decode: boxes, then every original keypoint of each detected object.
///
/// The grouping must be free of ambiguous pairs; it is checked before any
/// map is read.
pub fn decode_full(
    heads: &HeadTensors,
    schema: &KeypointSchema,
    grouping: &Grouping,
    params: &DecodeParams,
) -> Result<Vec<Detection>, DecodeError> {
    let report = check_grouping(schema, grouping, CheckMode::Unrestricted)?;
    if !report.decodable() {
        return Err(DecodeError::Ambiguous(report.ambiguous_pairs_total));
    }
    if params.refine == Refine::Rescore && !(params.sigma > 0.0 && params.sigma.is_finite()) {
        return Err(DecodeError::BadSigma(params.sigma));
    }
    heads.check_layout(schema, grouping)?;

    let mut detections = decode_detections(heads, schema, params.top_k, params.center_threshold)?;
    let mut peak_cache: Vec<Option<Vec<Peak>>> = vec![None; grouping.m_heat];
    for det in &mut detections {
        let class_pos = schema.class_position(det.class_id).expect("schema class");
        let coarse = coarse_keypoints(det, heads, grouping, schema);
        let mut keypoints = Vec::with_capacity(coarse.len());
        for (global, c) in schema.range(class_pos).zip(coarse) {
            let channel = grouping.heat_labels[global];
            let plane = heads.kp_heatmap.plane(channel);
            let kp = match params.refine {
                Refine::Rescore => rescore_refine(plane, &heads.kp_offset, c, params.sigma)?,
                Refine::Base => {
                    let peaks = peak_cache[channel].get_or_insert_with(|| local_peaks(plane, params.kp_threshold));
                    base_refine_among(peaks, &heads.kp_offset, c, det)
                }
            };
            keypoints.push(kp);
        }
        det.keypoints = keypoints;
    }
    Ok(detections)
}

/// Serialized detection: box and keypoints scaled to input pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class_id: u32,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// `[x, y, score, source]` per keypoint.
    pub keypoints: Vec<(f64, f64, f64, KeypointSource)>,
}

impl DetectionRecord {
    pub fn from_detection(d: &Detection, stride: f64) -> Self {
        Self {
            class_id: d.class_id,
            score: d.score,
            bbox: d.bbox.map(|v| v * stride),
            keypoints: d
                .keypoints
                .iter()
                .map(|k| (k.x * stride, k.y * stride, k.score, k.source))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSweep {
    pub best_sigma: f64,
    pub best_accuracy: f64,
    /// `(sigma, PCK)` in grid order.
    pub per_sigma: Vec<(f64, f64)>,
}

/// A decoded-scene pair used for sigma selection.
pub struct LabeledScene {
    pub heads: HeadTensors,
    pub truth: crate::synth::GroundTruth,
}

/// Picks the rescoring sigma with the highest PCK@`pck_threshold` over the
/// scenes; ties go to the smallest sigma.
pub fn sweep_sigma(
    scenes: &[LabeledScene],
    schema: &KeypointSchema,
    grouping: &Grouping,
    params: &DecodeParams,
    sigma_grid: &[f64],
    pck_threshold: f64,
) -> Result<SigmaSweep, DecodeError> {
    if sigma_grid.is_empty() {
        return Err(DecodeError::EmptyGrid);
    }
    if let Some(&bad) = sigma_grid.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(DecodeError::BadSigma(bad));
    }
    let mut per_sigma = Vec::with_capacity(sigma_grid.len());
    for &sigma in sigma_grid {
        let p = DecodeParams {
            refine: Refine::Rescore,
            sigma,
            ..*params
        };
        let mut total = crate::synth::PckReport::empty(schema.n());
        for scene in scenes {
            let dets = decode_full(&scene.heads, schema, grouping, &p)?;
            total.merge(&crate::synth::evaluate(&dets, &scene.truth, schema, pck_threshold));
        }
        per_sigma.push((sigma, total.aggregate()));
    }
    let (best_sigma, best_accuracy) = per_sigma
        .iter()
        .copied()
        .fold(None, |best: Option<(f64, f64)>, (s, a)| match best {
            Some((bs, ba)) if ba > a || (ba == a && bs <= s) => Some((bs, ba)),
            _ => Some((s, a)),
        })
        .expect("grid is nonempty");
    Ok(SigmaSweep {
        best_sigma,
        best_accuracy,
        per_sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ClassSpec;

    fn plane_from(h: usize, w: usize, points: &[(usize, usize, f64)]) -> Vec<f64> {
        let mut data = vec![0.0; h * w];
        for &(x, y, v) in points {
            data[y * w + x] = v;
        }
        data
    }

    fn bump(h: usize, w: usize, cx: usize, cy: usize, amp: f64, sigma: f64) -> Vec<f64> {
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2);
                data[y * w + x] = amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        data
    }

    #[test]
    fn single_bump_peak() {
        let data = bump(8, 8, 3, 2, 0.9, 1.0);
        let peaks = local_peaks(Plane::new(8, 8, &data), 0.1);
        assert_eq!(peaks, vec![Peak { x: 3, y: 2, score: 0.9 }]);
    }

    #[test]
    fn zero_map_has_no_peaks() {
        let data = vec![0.0; 25];
        assert!(local_peaks(Plane::new(5, 5, &data), 0.1).is_empty());
    }

    #[test]
    fn two_bumps_by_score() {
        let a = bump(12, 12, 2, 2, 0.7, 0.8);
        let b = bump(12, 12, 8, 9, 0.9, 0.8);
        let data: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect();
        let peaks = local_peaks(Plane::new(12, 12, &data), 0.1);
        assert_eq!(peaks.len(), 2);
        assert_eq!((peaks[0].x, peaks[0].y, peaks[0].score), (8, 9, 0.9));
        assert_eq!((peaks[1].x, peaks[1].y, peaks[1].score), (2, 2, 0.7));
    }

    #[test]
    fn plateau_keeps_smallest_row_major() {
        let data = plane_from(4, 4, &[(1, 1, 0.5), (2, 1, 0.5), (1, 2, 0.5)]);
        let peaks = local_peaks(Plane::new(4, 4, &data), 0.1);
        assert_eq!(peaks, vec![Peak { x: 1, y: 1, score: 0.5 }]);
    }

    #[test]
    fn peaks_on_edges_count() {
        let data = plane_from(3, 3, &[(0, 0, 0.4), (2, 2, 0.6)]);
        let peaks = local_peaks(Plane::new(3, 3, &data), 0.1);
        assert_eq!(peaks.len(), 2);
        assert_eq!((peaks[0].x, peaks[0].y), (2, 2));
    }

    fn one_class() -> KeypointSchema {
        KeypointSchema::new(vec![ClassSpec::new(1, "a", 2)]).unwrap()
    }

    fn heads(h: usize, w: usize, m_reg: usize, m_heat: usize) -> HeadTensors {
        HeadTensors::new(
            FeatureMap::zeros(1, h, w),
            FeatureMap::zeros(2, h, w),
            FeatureMap::zeros(2, h, w),
            FeatureMap::zeros(2 * m_reg, h, w),
            FeatureMap::zeros(m_heat, h, w),
            FeatureMap::zeros(2, h, w),
        )
        .unwrap()
    }

    #[test]
    fn box_from_offset_and_size() {
        let s = one_class();
        let mut hd = heads(12, 12, 2, 2);
        hd.center_heatmap.set(0, 2, 3, 0.8);
        hd.center_offset.set(0, 2, 3, 0.4);
        hd.center_offset.set(1, 2, 3, 0.3);
        hd.object_size.set(0, 2, 3, 4.0);
        hd.object_size.set(1, 2, 3, 2.0);
        hd.center_heatmap.set(0, 5, 5, 0.6);
        hd.object_size.set(0, 5, 5, 2.0);
        hd.object_size.set(1, 5, 5, 2.0);
        hd.center_heatmap.set(0, 9, 9, 0.05);
        hd.object_size.set(0, 9, 9, 2.0);
        hd.object_size.set(1, 9, 9, 2.0);
        let dets = decode_detections(&hd, &s, 10, 0.1).unwrap();
        assert_eq!(dets.len(), 2);
        let b = dets[0].bbox;
        let expected = [1.4, 1.3, 5.4, 3.3];
        for (got, want) in b.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{b:?}");
        }
        assert_eq!(dets[1].bbox, [4.0, 4.0, 6.0, 6.0]);
        assert_eq!(decode_detections(&hd, &s, 1, 0.1).unwrap().len(), 1);
    }

    #[test]
    fn coarse_uses_reg_cluster_channels() {
        let s = one_class();
        let mut hd = heads(20, 20, 1, 2);
        hd.kp_regression.set(0, 10, 10, 2.0);
        hd.kp_regression.set(1, 10, 10, -1.0);
        let g = Grouping::new(&s, &[0, 0], &[0, 1]).unwrap();
        let det = Detection {
            class_id: 1,
            score: 1.0,
            center_pixel: [10, 10],
            center: [10.0, 10.0],
            bbox: [5.0, 5.0, 15.0, 15.0],
            keypoints: vec![],
        };
        let c = coarse_keypoints(&det, &hd, &g, &s);
        assert_eq!(c, vec![[12.0, 9.0], [12.0, 9.0]]);
        let zero = heads(20, 20, 2, 2);
        let c = coarse_keypoints(&det, &zero, &Grouping::identity(&s), &s);
        assert_eq!(c[0], [10.0, 10.0]);
    }

    #[test]
    fn mask_values() {
        let m = gaussian_mask([5.0, 5.0], 2.0, 16, 16).unwrap();
        assert_eq!(m.get(5, 5), 1.0);
        assert!((m.get(7, 5) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(m.get(11, 5), 1.0 * (-36.0f64 / 8.0).exp());
        assert_eq!(m.get(12, 5), 0.0);
        assert_eq!(m.radius, 6);
        let f = gaussian_mask([5.3, 5.6], 2.0, 16, 16).unwrap();
        assert_eq!(f.nearest, [5, 6]);
        assert_eq!(f.get(5, 6), 1.0);
        assert!(f.get(5, 5) < 1.0);
        assert_eq!(
            gaussian_mask([0.0, 0.0], 0.0, 4, 4).unwrap_err(),
            DecodeError::BadSigma(0.0)
        );
    }

    #[test]
    fn rescore_beats_closer_distractor() {
        // true peak 0.9 two pixels from coarse, distractor 0.15 one pixel away
        let data = plane_from(16, 16, &[(6, 8, 0.9), (9, 8, 0.15)]);
        let plane = Plane::new(16, 16, &data);
        let offsets = FeatureMap::zeros(2, 16, 16);
        let coarse = [8.0, 8.0];
        let kp = rescore_refine(plane, &offsets, coarse, 2.0).unwrap();
        assert_eq!((kp.x, kp.y), (6.0, 8.0));
        assert!((kp.score - 0.9 * (-0.5f64).exp()).abs() < 1e-12);
        let det = Detection {
            class_id: 1,
            score: 1.0,
            center_pixel: [8, 8],
            center: [8.0, 8.0],
            bbox: [0.0, 0.0, 15.0, 15.0],
            keypoints: vec![],
        };
        let kp = base_refine(plane, &offsets, coarse, &det, 0.1);
        assert_eq!((kp.x, kp.y, kp.score), (9.0, 8.0, 0.15));
    }

    #[test]
    fn rescore_single_peak_and_zero_map() {
        let data = plane_from(8, 8, &[(3, 4, 0.7)]);
        let mut offsets = FeatureMap::zeros(2, 8, 8);
        offsets.set(0, 4, 3, 0.25);
        let kp = rescore_refine(Plane::new(8, 8, &data), &offsets, [3.0, 4.0], 1.0).unwrap();
        assert_eq!((kp.x, kp.y, kp.score), (3.25, 4.0, 0.7));
        let zeros = vec![0.0; 64];
        let kp = rescore_refine(Plane::new(8, 8, &zeros), &offsets, [2.5, 1.5], 1.0).unwrap();
        assert_eq!(
            (kp.x, kp.y, kp.score, kp.source),
            (2.5, 1.5, 0.0, KeypointSource::Coarse)
        );
    }

    #[test]
    fn base_refine_respects_box() {
        let data = plane_from(16, 16, &[(2, 2, 0.9)]);
        let offsets = FeatureMap::zeros(2, 16, 16);
        let det = Detection {
            class_id: 1,
            score: 1.0,
            center_pixel: [10, 10],
            center: [10.0, 10.0],
            bbox: [8.0, 8.0, 12.0, 12.0],
            keypoints: vec![],
        };
        let kp = base_refine(Plane::new(16, 16, &data), &offsets, [9.0, 9.0], &det, 0.1);
        assert_eq!(kp.source, KeypointSource::Coarse);
        let data = plane_from(16, 16, &[(11, 9, 0.5)]);
        let kp = base_refine(Plane::new(16, 16, &data), &offsets, [9.0, 9.0], &det, 0.1);
        assert_eq!((kp.x, kp.y, kp.source), (11.0, 9.0, KeypointSource::Refined));
    }

    #[test]
    fn ambiguous_grouping_rejected() {
        let s = one_class();
        let hd = heads(8, 8, 1, 1);
        let g = Grouping::new(&s, &[0, 0], &[0, 0]).unwrap();
        assert_eq!(
            decode_full(&hd, &s, &g, &DecodeParams::default()).unwrap_err(),
            DecodeError::Ambiguous(1)
        );
    }

    #[test]
    fn layout_mismatch_rejected() {
        let s = one_class();
        let hd = heads(8, 8, 1, 2);
        let g = Grouping::identity(&s);
        assert!(matches!(
            decode_full(&hd, &s, &g, &DecodeParams::default()),
            Err(DecodeError::Shape {
                name: "kp_regression",
                ..
            })
        ));
    }

    #[test]
    fn heatmaps_are_clamped() {
        let mut hd = heads(4, 4, 1, 1);
        hd.kp_heatmap.set(0, 0, 0, 3.0);
        let hd = HeadTensors::new(
            hd.center_heatmap,
            hd.center_offset,
            hd.object_size,
            hd.kp_regression,
            hd.kp_heatmap,
            hd.kp_offset,
        )
        .unwrap();
        assert_eq!(hd.kp_heatmap.get(0, 0, 0), 1.0);
    }

    #[test]
    fn sigma_sweep_errors() {
        let s = one_class();
        let g = Grouping::identity(&s);
        let p = DecodeParams::default();
        assert_eq!(
            sweep_sigma(&[], &s, &g, &p, &[], 0.05).unwrap_err(),
            DecodeError::EmptyGrid
        );
        assert_eq!(
            sweep_sigma(&[], &s, &g, &p, &[1.0, -1.0], 0.05).unwrap_err(),
            DecodeError::BadSigma(-1.0)
        );
    }
}
