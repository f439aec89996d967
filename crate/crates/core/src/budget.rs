//! Output-channel and memory accounting for detector heads.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("{name} must be at least 1")]
    Zero { name: &'static str },
    #[error("input {height}x{width} is not divisible by stride {stride}")]
    NotDivisible { height: u64, width: u64, stride: u64 },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("malformed encoder profile file: {0}")]
    Profiles(String),
}

pub const MIB: f64 = 1024.0 * 1024.0;

/// Channel breakdown of the six heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadBudget {
    pub center_heatmap: usize,
    pub center_offset: usize,
    pub object_size: usize,
    pub kp_regression: usize,
    pub kp_heatmap: usize,
    pub kp_offset: usize,
    pub total: usize,
}

impl HeadBudget {
    pub fn rows(&self) -> [(&'static str, usize); 6] {
        [
            ("Center heatmap", self.center_heatmap),
            ("Center offset", self.center_offset),
            ("Object size", self.object_size),
            ("Keypoint regression", self.kp_regression),
            ("Keypoint heatmap", self.kp_heatmap),
            ("Keypoint offset", self.kp_offset),
        ]
    }

    /// Share of channels spent on the two keypoint heads, in percent.
    pub fn keypoint_share_percent(&self) -> f64 {
        100.0 * (self.kp_regression + self.kp_heatmap) as f64 / self.total as f64
    }
}

pub fn head_channels(classes: usize, m_reg: usize, m_heat: usize) -> Result<HeadBudget, BudgetError> {
    for (name, v) in [("classes", classes), ("m_reg", m_reg), ("m_heat", m_heat)] {
        if v < 1 {
            return Err(BudgetError::Zero { name });
        }
    }
    let b = HeadBudget {
        center_heatmap: classes,
        center_offset: 2,
        object_size: 2,
        kp_regression: 2 * m_reg,
        kp_heatmap: m_heat,
        kp_offset: 2,
        total: 0,
    };
    Ok(HeadBudget {
        total: b.center_heatmap + b.center_offset + b.object_size + b.kp_regression + b.kp_heatmap + b.kp_offset,
        ..b
    })
}

/// Bytes needed for all output maps at `1/stride` resolution.
pub fn output_tensor_bytes(
    input_h: u64,
    input_w: u64,
    total_channels: u64,
    bytes_per_value: u64,
    stride: u64,
) -> Result<u64, BudgetError> {
    if stride == 0 {
        return Err(BudgetError::Zero { name: "stride" });
    }
    if !input_h.is_multiple_of(stride) || !input_w.is_multiple_of(stride) {
        return Err(BudgetError::NotDivisible {
            height: input_h,
            width: input_w,
            stride,
        });
    }
    Ok((input_h / stride) * (input_w / stride) * total_channels * bytes_per_value)
}

pub fn bytes_to_mib(bytes: u64) -> f64 {
    bytes as f64 / MIB
}

/// MiB of an FP32 RGB input tensor.
pub fn input_tensor_mib(input_h: u64, input_w: u64) -> f64 {
    (input_h * input_w * 3 * 4) as f64 / MIB
}

/// Output maps as a percentage of weights + activations + input.
pub fn output_share_percent(
    output_mib: f64,
    encoder_weights_mib: f64,
    encoder_activations_mib: f64,
    input_h: u64,
    input_w: u64,
) -> Result<f64, BudgetError> {
    for (name, value) in [
        ("output_mib", output_mib),
        ("encoder_weights_mib", encoder_weights_mib),
        ("encoder_activations_mib", encoder_activations_mib),
    ] {
        if !(value > 0.0) {
            return Err(BudgetError::NonPositive { name, value });
        }
    }
    if input_h == 0 || input_w == 0 {
        return Err(BudgetError::Zero { name: "input size" });
    }
    let total = encoder_weights_mib + encoder_activations_mib + input_tensor_mib(input_h, input_w);
    Ok(100.0 * output_mib / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderProfile {
    pub encoder: String,
    pub resolution: u64,
    pub weights_mib: f64,
    pub activations_mib: f64,
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    profiles: Vec<EncoderProfile>,
}

const BUNDLED_PROFILES: &str = include_str!("../data/encoder_profiles.json");

/// Reference encoder weight/activation totals shipped with the crate.
pub fn bundled_profiles() -> Vec<EncoderProfile> {
    parse_profiles(BUNDLED_PROFILES).expect("bundled profile file is valid")
}

pub fn parse_profiles(text: &str) -> Result<Vec<EncoderProfile>, BudgetError> {
    let file: ProfileFile = serde_json::from_str(text).map_err(|e| BudgetError::Profiles(e.to_string()))?;
    Ok(file.profiles)
}

/// One line of a memory report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub encoder: String,
    pub resolution: u64,
    pub weights_mib: f64,
    pub activations_mib: f64,
    pub output_mib: f64,
    pub output_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub channels: HeadBudget,
    pub rows: Vec<MemoryRow>,
}

/// Memory rows for every profile (optionally one input resolution only),
/// square inputs, FP32 values and stride 4.
pub fn memory_report(
    budget: HeadBudget,
    profiles: &[EncoderProfile],
    resolution: Option<u64>,
) -> Result<MemoryReport, BudgetError> {
    let rows = profiles
        .iter()
        .filter(|p| resolution.is_none_or(|r| r == p.resolution))
        .map(|p| {
            let bytes = output_tensor_bytes(p.resolution, p.resolution, budget.total as u64, 4, 4)?;
            let output_mib = bytes_to_mib(bytes);
            let output_percent =
                output_share_percent(output_mib, p.weights_mib, p.activations_mib, p.resolution, p.resolution)?;
            Ok(MemoryRow {
                encoder: p.encoder.clone(),
                resolution: p.resolution,
                weights_mib: p.weights_mib,
                activations_mib: p.activations_mib,
                output_mib,
                output_percent,
            })
        })
        .collect::<Result<Vec<_>, BudgetError>>()?;
    Ok(MemoryReport { channels: budget, rows })
}

impl MemoryReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<22}{:>9}\n", "Output tensor", "Channels"));
        for (name, c) in self.channels.rows() {
            out.push_str(&format!("{name:<22}{c:>9}\n"));
        }
        out.push_str(&format!("{:<22}{:>9}\n\n", "Total", self.channels.total));
        out.push_str(&format!(
            "{:<20}{:>15}{:>19}{:>22}{:>21}\n",
            "Encoder", "Weights (MiB)", "Activations (MiB)", "Output tensors (MiB)", "Output tensors (%)"
        ));
        for r in &self.rows {
            let name = format!("{} {}x{}", r.encoder, r.resolution, r.resolution);
            out.push_str(&format!(
                "{:<20}{:>15.1}{:>19.1}{:>22.1}{:>21.1}\n",
                name, r.weights_mib, r.activations_mib, r.output_mib, r.output_percent
            ));
        }
        out
    }
}
