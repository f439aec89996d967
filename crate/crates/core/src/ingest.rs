//! Readers and writers for tensors (NPY v1.0), COCO-style keypoint
//! annotations and decode manifests.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize, Serializer};

use crate::schema::{KeypointSchema, SchemaError};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Stream(#[from] io::Error),
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("{0}")]
    Invalid(String),
    #[error("not an npy file (bad magic)")]
    BadMagic,
    #[error("unsupported npy version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("malformed npy header: {0}")]
    BadHeader(String),
    #[error("fortran-order arrays are not supported")]
    FortranOrder,
    #[error("unsupported dtype `{0}` (expected <f4 or <f8)")]
    UnsupportedDtype(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("annotation {index}: unknown class id {class_id}")]
    UnknownClass { index: usize, class_id: u32 },
    #[error("annotation {index}: unknown image id {image_id}")]
    UnknownImage { index: usize, image_id: u64 },
    #[error("annotation {index}: {found} keypoint values, expected {expected}")]
    KeypointCount {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("annotation {index}: visibility {value} not in {{0, 1, 2}}")]
    Visibility { index: usize, value: f64 },
    #[error("annotation {index}: bbox must have 4 values with positive width and height")]
    BadBox { index: usize },
}

impl IngestError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for failures of the file system rather than of content.
    pub fn is_io(&self) -> bool {
        matches!(self, IngestError::Io { .. } | IngestError::Stream(_))
    }
}

pub fn read_text(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|e| IngestError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IngestError> {
    fs::write(path, text).map_err(|e| IngestError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn descr(self) -> &'static str {
        match self {
            DType::F32 => "<f4",
            DType::F64 => "<f8",
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

/// Dense row-major array of f32 or f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, IngestError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(IngestError::ShapeMismatch { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, IngestError> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, IngestError> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, flat: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => v[flat] as f64,
            TensorData::F64(v) => v[flat],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Leading dimension and the product of the remaining ones. A 1-D tensor
    /// is treated as a column.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.split_first() {
            None => (1, 1),
            Some((&rows, rest)) => (rows, rest.iter().product()),
        }
    }

    /// Builds a tensor of the given dtype from f64 values.
    pub fn from_values(shape: Vec<usize>, dtype: DType, values: Vec<f64>) -> Result<Self, IngestError> {
        match dtype {
            DType::F64 => Self::from_f64(shape, values),
            DType::F32 => Self::from_f32(shape, values.into_iter().map(|v| v as f32).collect()),
        }
    }

    fn first_non_finite(&self) -> Option<usize> {
        match &self.data {
            TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::F64(v) => v.iter().position(|x| !x.is_finite()),
        }
    }
}

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Accept NaN and infinite values.
    pub allow_non_finite: bool,
}

fn header_text(dtype: DType, shape: &[usize]) -> String {
    let shape = match shape {
        [] => "()".to_string(),
        [d] => format!("({d},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape
    );
    // magic(6) + version(2) + length(2) + header + '\n' is a multiple of 64
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');
    header
}

pub fn encode_npy(tensor: &Tensor) -> Vec<u8> {
    let header = header_text(tensor.dtype(), tensor.shape());
    let mut out = Vec::with_capacity(10 + header.len() + tensor.len() * tensor.dtype().size());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match tensor.data() {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn write_npy<W: Write>(writer: &mut W, tensor: &Tensor) -> io::Result<()> {
    writer.write_all(&encode_npy(tensor))
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<(), IngestError> {
    fs::write(path, encode_npy(tensor)).map_err(|e| IngestError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor, IngestError> {
    read_tensor_with(path, ReadOptions::default())
}

pub fn read_tensor_with(path: &Path, options: ReadOptions) -> Result<Tensor, IngestError> {
    let bytes = fs::read(path).map_err(|e| IngestError::io(path, e))?;
    decode_npy(&bytes, options)
}

pub fn read_npy<R: Read>(reader: &mut R, options: ReadOptions) -> Result<Tensor, IngestError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    decode_npy(&bytes, options)
}

pub fn decode_npy(bytes: &[u8], options: ReadOptions) -> Result<Tensor, IngestError> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(IngestError::BadMagic);
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(IngestError::UnsupportedVersion(bytes[6], bytes[7]));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header_end = 10 + header_len;
    if bytes.len() < header_end {
        return Err(IngestError::BadHeader("header extends past end of file".into()));
    }
    let header = std::str::from_utf8(&bytes[10..header_end])
        .map_err(|_| IngestError::BadHeader("header is not ascii".into()))?;
    let dict = parse_header(header)?;
    if dict.fortran_order {
        return Err(IngestError::FortranOrder);
    }
    let dtype = match dict.descr.as_str() {
        "<f4" => DType::F32,
        "<f8" => DType::F64,
        other => return Err(IngestError::UnsupportedDtype(other.to_string())),
    };

    let count: usize = dict.shape.iter().product();
    let expected = count * dtype.size();
    let payload = &bytes[header_end..];
    if payload.len() < expected {
        return Err(IngestError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(IngestError::TrailingBytes {
            extra: payload.len() - expected,
        });
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    let tensor = Tensor::new(dict.shape, data)?;
    if !options.allow_non_finite {
        if let Some(i) = tensor.first_non_finite() {
            return Err(IngestError::NonFinite(i));
        }
    }
    Ok(tensor)
}

#[derive(Debug, PartialEq)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

// Minimal reader for the python dict literal in an NPY header.
struct HeaderParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn err(&self, what: &str) -> IngestError {
        IngestError::BadHeader(format!("{what} at byte {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), IngestError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(&format!("expected `{}`", c as char)))
        }
    }

    fn string(&mut self) -> Result<String, IngestError> {
        self.skip_ws();
        let quote = match self.s.get(self.pos) {
            Some(&q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.s.len() {
            return Err(self.err("unterminated string"));
        }
        let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(out)
    }

    fn ident(&mut self) -> &'a [u8] {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        &self.s[start..self.pos]
    }

    fn shape(&mut self) -> Result<Vec<usize>, IngestError> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            if self.eat(b')') {
                return Ok(dims);
            }
            let digits = self.ident();
            let text = std::str::from_utf8(digits).unwrap_or_default();
            let text = text.trim_end_matches('L');
            let dim = text.parse().map_err(|_| self.err("expected dimension"))?;
            dims.push(dim);
            if !self.eat(b',') {
                self.expect(b')')?;
                return Ok(dims);
            }
        }
    }
}

fn parse_header(text: &str) -> Result<HeaderDict, IngestError> {
    let mut p = HeaderParser {
        s: text.as_bytes(),
        pos: 0,
    };
    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    p.expect(b'{')?;
    loop {
        if p.eat(b'}') {
            break;
        }
        let key = p.string()?;
        p.expect(b':')?;
        match key.as_str() {
            "descr" => descr = Some(p.string()?),
            "fortran_order" => {
                fortran = Some(match p.ident() {
                    b"True" => true,
                    b"False" => false,
                    _ => return Err(p.err("expected True or False")),
                })
            }
            "shape" => shape = Some(p.shape()?),
            other => return Err(IngestError::BadHeader(format!("unexpected key `{other}`"))),
        }
        if !p.eat(b',') {
            p.expect(b'}')?;
            break;
        }
    }
    p.skip_ws();
    if p.pos != p.s.len() {
        return Err(p.err("trailing characters"));
    }
    match (descr, fortran, shape) {
        (Some(descr), Some(fortran_order), Some(shape)) => Ok(HeaderDict {
            descr,
            fortran_order,
            shape,
        }),
        _ => Err(IngestError::BadHeader("missing descr, fortran_order or shape".into())),
    }
}

// Integers print without a trailing `.0`; everything else prints as f64.
fn serialize_number<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        s.serialize_i64(*v as i64)
    } else {
        s.serialize_f64(*v)
    }
}

fn serialize_numbers<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        seq.serialize_element(&Num(*x))?;
    }
    seq.end()
}

struct Num(f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serialize_number(&self.0, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub image_id: u64,
    pub category_id: u32,
    #[serde(serialize_with = "serialize_numbers")]
    pub bbox: Vec<f64>,
    #[serde(serialize_with = "serialize_numbers")]
    pub keypoints: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationFile {
    images: Vec<ImageInfo>,
    annotations: Vec<RawAnnotation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotatedKeypoint {
    pub x: f64,
    pub y: f64,
    pub visibility: u8,
}

impl AnnotatedKeypoint {
    pub fn visible(&self) -> bool {
        self.visibility > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedObject {
    pub image_id: u64,
    pub class_id: u32,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub keypoints: Vec<AnnotatedKeypoint>,
}

impl AnnotatedObject {
    pub fn bbox_center(&self) -> (f64, f64) {
        let [x, y, w, h] = self.bbox;
        (x + w / 2.0, y + h / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub objects: Vec<AnnotatedObject>,
}

impl AnnotationSet {
    /// Parses and validates annotations against the schema.
    pub fn from_json(text: &str, schema: &KeypointSchema) -> Result<Self, IngestError> {
        let file: AnnotationFile = serde_json::from_str(text)?;
        let image_ids: std::collections::HashSet<u64> = file.images.iter().map(|i| i.id).collect();
        let mut objects = Vec::with_capacity(file.annotations.len());
        for (index, ann) in file.annotations.iter().enumerate() {
            let class = schema.class_by_id(ann.category_id).ok_or(IngestError::UnknownClass {
                index,
                class_id: ann.category_id,
            })?;
            if !image_ids.contains(&ann.image_id) {
                return Err(IngestError::UnknownImage {
                    index,
                    image_id: ann.image_id,
                });
            }
            let bbox: [f64; 4] = ann
                .bbox
                .as_slice()
                .try_into()
                .map_err(|_| IngestError::BadBox { index })?;
            if !(bbox[2] > 0.0 && bbox[3] > 0.0) || bbox.iter().any(|v| !v.is_finite()) {
                return Err(IngestError::BadBox { index });
            }
            let expected = 3 * class.kp_count;
            if ann.keypoints.len() != expected {
                return Err(IngestError::KeypointCount {
                    index,
                    expected,
                    found: ann.keypoints.len(),
                });
            }
            let keypoints = ann
                .keypoints
                .chunks_exact(3)
                .map(|t| {
                    let v = t[2];
                    if v != 0.0 && v != 1.0 && v != 2.0 {
                        return Err(IngestError::Visibility { index, value: v });
                    }
                    Ok(AnnotatedKeypoint {
                        x: t[0],
                        y: t[1],
                        visibility: v as u8,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            objects.push(AnnotatedObject {
                image_id: ann.image_id,
                class_id: ann.category_id,
                bbox,
                keypoints,
            });
        }
        Ok(Self {
            images: file.images,
            objects,
        })
    }

    /// Canonical form: fixed key order, integral values without fraction.
    pub fn to_json(&self) -> String {
        let file = AnnotationFile {
            images: self.images.clone(),
            annotations: self
                .objects
                .iter()
                .map(|o| RawAnnotation {
                    image_id: o.image_id,
                    category_id: o.class_id,
                    bbox: o.bbox.to_vec(),
                    keypoints: o
                        .keypoints
                        .iter()
                        .flat_map(|k| [k.x, k.y, k.visibility as f64])
                        .collect(),
                })
                .collect(),
        };
        let mut out = serde_json::to_string_pretty(&file).expect("annotations serialize");
        out.push('\n');
        out
    }
}

pub fn read_annotations(path: &Path, schema: &KeypointSchema) -> Result<AnnotationSet, IngestError> {
    AnnotationSet::from_json(&read_text(path)?, schema)
}

/// Paths of the six head tensors for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub center_heatmap: PathBuf,
    pub center_offset: PathBuf,
    pub object_size: PathBuf,
    pub kp_regression: PathBuf,
    pub kp_heatmap: PathBuf,
    pub kp_offset: PathBuf,
    /// Ground-truth record, present for labeled scenes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

/// Decode manifest. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeManifest {
    pub schema: PathBuf,
    pub grouping: PathBuf,
    pub images: Vec<ManifestImage>,
}

impl DecodeManifest {
    pub fn read(path: &Path) -> Result<Self, IngestError> {
        let mut manifest: DecodeManifest = serde_json::from_str(&read_text(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        manifest.resolve(base);
        Ok(manifest)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.schema);
        fix(&mut self.grouping);
        for image in &mut self.images {
            for p in [
                &mut image.center_heatmap,
                &mut image.center_offset,
                &mut image.object_size,
                &mut image.kp_regression,
                &mut image.kp_heatmap,
                &mut image.kp_offset,
            ] {
                fix(p);
            }
            if let Some(gt) = image.ground_truth.as_mut() {
                fix(gt);
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("manifest serializes");
        out.push('\n');
        out
    }
}
