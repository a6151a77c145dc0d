//! Latent code files and storage / transmission arithmetic.
//!
//! File layout, little-endian throughout:
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 4    | magic `CEVL`                        |
//! | 4      | 1    | version (1)                         |
//! | 5      | 1    | dtype: 0 = f16, 1 = f32, 2 = f64    |
//! | 6      | 12   | C, H, W as u32                      |
//! | 18     | ...  | C*H*W values, row-major             |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use cevae_tensor::{Float, Tensor};
use half::f16;
use serde::{Deserialize, Serialize};

use crate::encoder::LatentCode;
use crate::error::{CoreError, Result};

pub const LATENT_MAGIC: &[u8; 4] = b"CEVL";
pub const LATENT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F16,
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F16 => 0,
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F16),
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl FromStr for Dtype {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f16" => Ok(Dtype::F16),
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(CoreError::Config(format!(
                "unknown dtype '{other}' (f16, f32 or f64)"
            ))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F16 => "f16",
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

/// Encodes a single latent code (batch of one).
pub fn serialize<T: Float>(x: &LatentCode<T>, dtype: Dtype) -> Result<Vec<u8>> {
    if x.batch() != 1 {
        return Err(CoreError::Input(format!(
            "a latent file holds one code, got a batch of {}",
            x.batch()
        )));
    }
    let [c, h, w] = x.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + c * h * w * dtype.size());
    out.extend_from_slice(LATENT_MAGIC);
    out.push(LATENT_VERSION);
    out.push(dtype.code());
    for d in [c, h, w] {
        let d =
            u32::try_from(d).map_err(|_| CoreError::Input(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for (i, v) in x.tensor().data().iter().enumerate() {
        let v = v.as_f64();
        if !v.is_finite() {
            return Err(CoreError::Numeric(format!("latent value {i} is {v}")));
        }
        match dtype {
            Dtype::F16 => {
                if v.abs() > f16::MAX.to_f64() {
                    return Err(CoreError::Numeric(format!(
                        "latent value {i} = {v} overflows f16"
                    )));
                }
                out.extend_from_slice(&f16::from_f64(v).to_le_bytes());
            }
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

/// Dtype recorded in a latent file header.
pub fn peek_dtype(bytes: &[u8]) -> Result<Dtype> {
    check_header(bytes).map(|(dtype, _)| dtype)
}

fn check_header(bytes: &[u8]) -> Result<(Dtype, [usize; 3])> {
    if bytes.len() < HEADER_LEN {
        return Err(CoreError::format(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes"),
        ));
    }
    if &bytes[0..4] != LATENT_MAGIC {
        return Err(CoreError::format(0, "bad magic, not a latent file"));
    }
    if bytes[4] != LATENT_VERSION {
        return Err(CoreError::format(
            4,
            format!("unsupported version {}", bytes[4]),
        ));
    }
    let dtype = Dtype::from_code(bytes[5])
        .ok_or_else(|| CoreError::format(5, format!("unknown dtype code {}", bytes[5])))?;
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        let o = 6 + 4 * k;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        if *d == 0 {
            return Err(CoreError::format(o, "zero dimension"));
        }
    }
    Ok((dtype, dims))
}

pub fn deserialize<T: Float>(bytes: &[u8]) -> Result<LatentCode<T>> {
    let (dtype, [c, h, w]) = check_header(bytes)?;
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| CoreError::format(6, "dimensions overflow"))?;
    let expected = n
        .checked_mul(dtype.size())
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| CoreError::format(6, "dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(CoreError::format(
            bytes.len().min(expected),
            format!(
                "payload should end at byte {expected}, file has {}",
                bytes.len()
            ),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    let values: Vec<T> = match dtype {
        Dtype::F16 => payload
            .chunks_exact(2)
            .map(|b| T::of(f16::from_le_bytes([b[0], b[1]]).to_f64()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|b| T::of(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect(),
    };
    if let Some(i) = values.iter().position(|v| !v.as_f64().is_finite()) {
        return Err(CoreError::format(
            HEADER_LEN + i * dtype.size(),
            "non-finite value",
        ));
    }
    LatentCode::new(Tensor::from_vec(values, &[1, c, h, w]))
}

pub fn write_latent<T: Float>(path: &Path, x: &LatentCode<T>, dtype: Dtype) -> Result<()> {
    std::fs::write(path, serialize(x, dtype)?).map_err(|e| CoreError::io(path, e))
}

pub fn read_latent<T: Float>(path: &Path) -> Result<LatentCode<T>> {
    deserialize(&std::fs::read(path).map_err(|e| CoreError::io(path, e))?)
}

pub const BYTES_PER_MB: f64 = 1e6;

pub fn storage_bytes(shape: &[usize], bytes_per_value: usize) -> u64 {
    shape.iter().map(|&d| d as u64).product::<u64>() * bytes_per_value as u64
}

/// Megabytes rounded to two decimals, as reported in storage tables.
pub fn rounded_mb(bytes: u64) -> f64 {
    (bytes as f64 / BYTES_PER_MB * 100.0).round() / 100.0
}

pub fn transmission_time(bytes: f64, bandwidth_bits_per_s: f64) -> f64 {
    bytes * 8.0 / bandwidth_bits_per_s
}

pub fn recording_duration(capacity_bytes: f64, images_per_s: f64, per_image_bytes: f64) -> f64 {
    capacity_bytes / (images_per_s * per_image_bytes) / 3600.0
}

/// Inputs of a storage comparison between raw images and latent codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageParams {
    pub raw_shape: Vec<usize>,
    pub latent_shape: Vec<usize>,
    pub bytes_per_value: usize,
    pub bandwidth_bits_per_s: f64,
    pub capacity_bytes: f64,
    pub images_per_s: f64,
    pub batch: usize,
}

impl Default for StorageParams {
    /// 3x256x256 against 256x16x16 at 8 bytes per value over 1 Gbps. The
    /// capacity is 2204.28 MB at one image per second.
    fn default() -> Self {
        Self {
            raw_shape: vec![3, 256, 256],
            latent_shape: vec![256, 16, 16],
            bytes_per_value: 8,
            bandwidth_bits_per_s: 1e9,
            capacity_bytes: 2204.28e6,
            images_per_s: 1.0,
            batch: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub raw_bytes: u64,
    pub latent_bytes: u64,
    pub raw_mb: f64,
    pub latent_mb: f64,
    /// From the rounded per-image megabytes.
    pub raw_transmission_s: f64,
    pub latent_transmission_s: f64,
    /// From exact byte counts.
    pub raw_recording_h: f64,
    pub latent_recording_h: f64,
    pub ratio: f64,
    pub batch: usize,
    pub batch_latent_mb: f64,
    pub batch_transmission_ms: f64,
}

pub fn compression_report(p: &StorageParams) -> Result<CompressionReport> {
    let positive = [p.bandwidth_bits_per_s, p.capacity_bytes, p.images_per_s];
    if p.raw_shape.is_empty()
        || p.latent_shape.is_empty()
        || p.raw_shape.contains(&0)
        || p.latent_shape.contains(&0)
    {
        return Err(CoreError::Config(
            "shapes must have positive dimensions".into(),
        ));
    }
    if p.bytes_per_value == 0 || positive.iter().any(|v| !(*v > 0.0)) {
        return Err(CoreError::Config(format!(
            "storage parameters must be positive: {p:?}"
        )));
    }
    let raw_bytes = storage_bytes(&p.raw_shape, p.bytes_per_value);
    let latent_bytes = storage_bytes(&p.latent_shape, p.bytes_per_value);
    let (raw_mb, latent_mb) = (rounded_mb(raw_bytes), rounded_mb(latent_bytes));
    let batch_latent_mb = p.batch as f64 * latent_mb;
    Ok(CompressionReport {
        raw_bytes,
        latent_bytes,
        raw_mb,
        latent_mb,
        raw_transmission_s: transmission_time(raw_mb * BYTES_PER_MB, p.bandwidth_bits_per_s),
        latent_transmission_s: transmission_time(latent_mb * BYTES_PER_MB, p.bandwidth_bits_per_s),
        raw_recording_h: recording_duration(p.capacity_bytes, p.images_per_s, raw_bytes as f64),
        latent_recording_h: recording_duration(
            p.capacity_bytes,
            p.images_per_s,
            latent_bytes as f64,
        ),
        ratio: raw_bytes as f64 / latent_bytes as f64,
        batch: p.batch,
        batch_latent_mb,
        batch_transmission_ms: transmission_time(
            batch_latent_mb * BYTES_PER_MB,
            p.bandwidth_bits_per_s,
        ) * 1e3,
    })
}

/// Rounds to `sig` significant figures.
pub fn round_sig(v: f64, sig: i32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let scale = 10f64.powi(sig - 1 - v.abs().log10().floor() as i32);
    (v * scale).round() / scale
}

impl fmt::Display for CompressionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "raw_bytes\t{}", self.raw_bytes)?;
        writeln!(f, "latent_bytes\t{}", self.latent_bytes)?;
        writeln!(f, "raw_mb\t{:.2}", self.raw_mb)?;
        writeln!(f, "latent_mb\t{:.2}", self.latent_mb)?;
        writeln!(
            f,
            "raw_transmission_s\t{}",
            round_sig(self.raw_transmission_s, 4)
        )?;
        writeln!(
            f,
            "latent_transmission_s\t{}",
            round_sig(self.latent_transmission_s, 4)
        )?;
        writeln!(f, "raw_recording_h\t{:.2}", self.raw_recording_h)?;
        writeln!(f, "latent_recording_h\t{:.2}", self.latent_recording_h)?;
        writeln!(f, "ratio\t{}", self.ratio)?;
        writeln!(f, "batch\t{}", self.batch)?;
        writeln!(f, "batch_latent_mb\t{}", round_sig(self.batch_latent_mb, 4))?;
        writeln!(
            f,
            "batch_transmission_ms\t{}",
            round_sig(self.batch_transmission_ms, 4)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_payload_size() {
        let x = LatentCode::new(Tensor::<f64>::zeros(&[1, 256, 16, 16])).unwrap();
        assert_eq!(
            serialize(&x, Dtype::F64).unwrap().len(),
            HEADER_LEN + 524_288
        );
    }

    #[test]
    fn header_errors_name_offsets() {
        let x = LatentCode::new(Tensor::<f64>::ones(&[1, 2, 2, 2])).unwrap();
        let good = serialize(&x, Dtype::F32).unwrap();
        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(
            deserialize::<f64>(&bad),
            Err(CoreError::Format { offset: 0, .. })
        ));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            deserialize::<f64>(&bad),
            Err(CoreError::Format { offset: 4, .. })
        ));
        assert!(matches!(
            deserialize::<f64>(&good[..good.len() - 1]),
            Err(CoreError::Format { .. })
        ));
    }

    #[test]
    fn f16_overflow_rejected() {
        let x = LatentCode::new(Tensor::<f64>::full(&[1, 1, 1, 1], 1e6)).unwrap();
        assert!(matches!(
            serialize(&x, Dtype::F16),
            Err(CoreError::Numeric(_))
        ));
    }

    #[test]
    fn zero_bytes_take_no_time() {
        assert_eq!(transmission_time(0.0, 1e9), 0.0);
    }

    #[test]
    fn significant_figures() {
        assert_eq!(round_sig(0.012_582_912, 4), 0.01258);
        assert_eq!(round_sig(124.8, 4), 124.8);
    }
}
