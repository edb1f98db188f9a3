//! Comparison schemes: uncompressed transfer, RandTopk sparsification,
//! affine quantization, and the alternative channel scorers and ratio
//! policies used in ablations.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acp::RatioBounds;
use crate::error::{Error, Result};
use crate::lcis::{normalize_scores, FeatureBatch};
use crate::protocol::{Envelope, Frame, FrameFormat, FrameHeader, MessageKind, HEADER_LEN};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    /// Full smashed data, no compression.
    Standard,
    RandTopk,
    Quantization,
    /// Adaptive ratio from the group scores.
    AcpSl,
    FixedRatio,
    RandomRatio,
}

impl SchemeKind {
    pub fn prunes_channels(self) -> bool {
        matches!(
            self,
            SchemeKind::AcpSl | SchemeKind::FixedRatio | SchemeKind::RandomRatio
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringKind {
    #[default]
    Lcis,
    L0,
    Random,
}

fn default_k_fraction() -> f64 {
    0.3
}
fn default_rand_fraction() -> f64 {
    0.1
}
fn default_quant_bits() -> u8 {
    8
}
fn default_fixed_ratio() -> f64 {
    0.7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    /// Label used in metrics; derived from the other fields when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: SchemeKind,
    #[serde(default)]
    pub scoring: ScoringKind,
    /// RandTopk: fraction of all elements transmitted.
    #[serde(default = "default_k_fraction")]
    pub k_fraction: f64,
    /// RandTopk: share of the transmitted budget drawn at random from non-top elements.
    #[serde(default = "default_rand_fraction")]
    pub rand_fraction: f64,
    #[serde(default = "default_quant_bits")]
    pub quant_bits: u8,
    #[serde(default = "default_fixed_ratio")]
    pub fixed_ratio: f64,
}

impl SchemeConfig {
    pub fn new(kind: SchemeKind) -> Self {
        SchemeConfig {
            name: None,
            kind,
            scoring: ScoringKind::Lcis,
            k_fraction: default_k_fraction(),
            rand_fraction: default_rand_fraction(),
            quant_bits: default_quant_bits(),
            fixed_ratio: default_fixed_ratio(),
        }
    }

    pub fn with_scoring(mut self, scoring: ScoringKind) -> Self {
        self.scoring = scoring;
        self
    }

    pub fn with_fixed_ratio(mut self, ratio: f64) -> Self {
        self.fixed_ratio = ratio;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("scheme {}: {msg}", self.label())));
        match self.kind {
            SchemeKind::RandTopk => {
                if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
                    return fail(format!("k_fraction {} not in (0, 1]", self.k_fraction));
                }
                if !(0.0..1.0).contains(&self.rand_fraction) {
                    return fail(format!(
                        "rand_fraction {} not in [0, 1)",
                        self.rand_fraction
                    ));
                }
            }
            SchemeKind::Quantization => {
                if !(1..=16).contains(&self.quant_bits) {
                    return fail(format!("quant_bits {} not in 1..=16", self.quant_bits));
                }
            }
            SchemeKind::FixedRatio if !(self.fixed_ratio > 0.0 && self.fixed_ratio < 1.0) => {
                return fail(format!("fixed_ratio {} not in (0, 1)", self.fixed_ratio));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let base = match self.kind {
            SchemeKind::Standard => "standard".to_string(),
            SchemeKind::RandTopk => format!("randtopk({})", self.k_fraction),
            SchemeKind::Quantization => format!("quantization({}bit)", self.quant_bits),
            SchemeKind::AcpSl => "acp_sl".to_string(),
            SchemeKind::FixedRatio => format!("fixed_ratio({})", self.fixed_ratio),
            SchemeKind::RandomRatio => "random_ratio".to_string(),
        };
        match (self.kind.prunes_channels(), self.scoring) {
            (true, ScoringKind::L0) => format!("{base}+l0"),
            (true, ScoringKind::Random) => format!("{base}+random"),
            _ => base,
        }
    }
}

impl fmt::Display for SchemeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Standard-SL leaves the tensor untouched.
pub fn standard_transform(t: &Tensor<f32>) -> Tensor<f32> {
    t.clone()
}

/// Flat indices kept by RandTopk: the largest-magnitude elements plus a
/// random sample of the rest. Returned ascending.
pub fn randtopk_select<R: Rng + ?Sized>(
    values: &[f32],
    k_fraction: f64,
    rand_fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let n = values.len();
    let k_total = ((k_fraction * n as f64).round() as usize).min(n);
    let n_rand = (rand_fraction * k_total as f64).round() as usize;
    let n_top = k_total - n_rand;
    let mut kept: Vec<usize> = (0..n).collect();
    if n_top < n {
        let by_magnitude =
            |a: &usize, b: &usize| values[*b].abs().total_cmp(&values[*a].abs()).then(a.cmp(b));
        if n_top > 0 {
            kept.select_nth_unstable_by(n_top - 1, by_magnitude);
        }
        kept.truncate(n_top);
    }
    if n_rand > 0 {
        let mut is_top = vec![false; n];
        for &i in &kept {
            is_top[i] = true;
        }
        let rest: Vec<usize> = (0..n).filter(|&i| !is_top[i]).collect();
        if !rest.is_empty() {
            let picks = index::sample(rng, rest.len(), n_rand.min(rest.len()));
            kept.extend(picks.into_iter().map(|i| rest[i]));
        }
    }
    kept.sort_unstable();
    kept
}

/// Sparse frame: header, `u32` count, then `(u32 flat index, f32 value)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMessage {
    pub header: FrameHeader,
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseMessage {
    pub fn encode<R: Rng + ?Sized>(
        t: &Tensor<f32>,
        k_fraction: f64,
        rand_fraction: f64,
        kind: MessageKind,
        envelope: Envelope,
        rng: &mut R,
    ) -> Result<Self> {
        let header =
            FrameHeader::for_tensor(FrameFormat::Sparse, kind, envelope, t.shape(), t.dim(1))?;
        let kept = randtopk_select(t.data(), k_fraction, rand_fraction, rng);
        Ok(SparseMessage {
            header,
            values: kept.iter().map(|&i| t.data()[i]).collect(),
            indices: kept.iter().map(|&i| i as u32).collect(),
        })
    }
}

impl Frame for SparseMessage {
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 + 8 * self.indices.len());
        self.header.write(&mut out);
        out.extend_from_slice(&(self.indices.len() as u32).to_le_bytes());
        for (i, v) in self.indices.iter().zip(&self.values) {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = FrameHeader::read(bytes)?;
        if header.format != FrameFormat::Sparse {
            return Err(Error::Deserialize("expected a sparse frame".into()));
        }
        let count_bytes = bytes
            .get(HEADER_LEN..HEADER_LEN + 4)
            .ok_or_else(|| Error::Deserialize("sparse frame missing count".into()))?;
        let count = u32::from_le_bytes(count_bytes.try_into().unwrap()) as usize;
        if bytes.len() != HEADER_LEN + 4 + 8 * count {
            return Err(Error::Deserialize("sparse frame length mismatch".into()));
        }
        let numel: usize = header.tensor_shape().iter().product();
        let mut indices = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count);
        for pair in bytes[HEADER_LEN + 4..].chunks_exact(8) {
            let i = u32::from_le_bytes(pair[..4].try_into().unwrap());
            if i as usize >= numel || indices.last().is_some_and(|&p| p >= i) {
                return Err(Error::Deserialize(format!(
                    "sparse index {i} out of order or range"
                )));
            }
            indices.push(i);
            values.push(f32::from_le_bytes(pair[4..].try_into().unwrap()));
        }
        Ok(SparseMessage {
            header,
            indices,
            values,
        })
    }

    fn payload_len(&self) -> usize {
        8 * self.indices.len()
    }

    fn reconstruct(&self) -> Result<Tensor<f32>> {
        let mut out = Tensor::zeros(&self.header.tensor_shape());
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out.data_mut()[i as usize] = v;
        }
        Ok(out)
    }
}

/// Per-tensor affine quantization parameters and codes.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub bits: u8,
    pub min: f32,
    pub max: f32,
    pub codes: Vec<u16>,
}

impl Quantized {
    fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Whether every element was equal (scale zero).
    pub fn is_constant(&self) -> bool {
        self.min == self.max
    }

    pub fn scale(&self) -> f64 {
        (self.max as f64 - self.min as f64) / self.levels() as f64
    }

    pub fn dequantize(&self) -> Vec<f32> {
        if self.is_constant() {
            return vec![self.min; self.codes.len()];
        }
        let (lo, range, levels) = (
            self.min as f64,
            self.max as f64 - self.min as f64,
            self.levels() as f64,
        );
        self.codes
            .iter()
            .map(|&c| (lo + range * (c as f64 / levels)) as f32)
            .collect()
    }
}

pub fn quantize(values: &[f32], bits: u8) -> Result<Quantized> {
    if !(1..=16).contains(&bits) {
        return Err(Error::Config(format!(
            "quantization bits {bits} not in 1..=16"
        )));
    }
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if values.is_empty() || min == max {
        let v = if values.is_empty() { 0.0 } else { min };
        return Ok(Quantized {
            bits,
            min: v,
            max: v,
            codes: vec![0; values.len()],
        });
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let scale = (max as f64 - min as f64) / levels;
    let codes = values
        .iter()
        // Non-negative after the clamp, so adding one half and truncating rounds to nearest.
        .map(|&x| (((x as f64 - min as f64) / scale).clamp(0.0, levels) + 0.5) as u16)
        .collect();
    Ok(Quantized {
        bits,
        min,
        max,
        codes,
    })
}

fn pack_codes(codes: &[u16], bits: u8) -> Vec<u8> {
    match bits {
        8 => return codes.iter().map(|&c| c as u8).collect(),
        16 => return codes.iter().flat_map(|c| c.to_le_bytes()).collect(),
        _ => {}
    }
    let mut out = Vec::with_capacity((codes.len() * bits as usize).div_ceil(8));
    let (mut acc, mut filled) = (0u32, 0u32);
    for &c in codes {
        acc |= (c as u32) << filled;
        filled += bits as u32;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Vec<u16> {
    match bits {
        8 => return bytes[..count].iter().map(|&b| b as u16).collect(),
        16 => {
            return bytes[..2 * count]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        }
        _ => {}
    }
    let mask = (1u32 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let (mut acc, mut filled) = (0u32, 0u32);
    let mut src = bytes.iter();
    while out.len() < count {
        while filled < bits as u32 {
            acc |= (*src.next().expect("length checked by caller") as u32) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u16);
        acc >>= bits;
        filled -= bits as u32;
    }
    out
}

const QUANT_CONSTANT_FLAG: u8 = 1;

/// Quantized frame: header, bits (u8), flags (u8), min/max (f32), then codes
/// packed LSB-first at `bits` per element.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMessage {
    pub header: FrameHeader,
    pub quantized: Quantized,
}

impl QuantizedMessage {
    pub const SIDE_LEN: usize = 10;

    pub fn encode(
        t: &Tensor<f32>,
        bits: u8,
        kind: MessageKind,
        envelope: Envelope,
    ) -> Result<Self> {
        let header =
            FrameHeader::for_tensor(FrameFormat::Quantized, kind, envelope, t.shape(), t.dim(1))?;
        Ok(QuantizedMessage {
            header,
            quantized: quantize(t.data(), bits)?,
        })
    }
}

impl Frame for QuantizedMessage {
    fn to_bytes(&self) -> Vec<u8> {
        let q = &self.quantized;
        let mut out = Vec::new();
        self.header.write(&mut out);
        out.push(q.bits);
        out.push(if q.is_constant() {
            QUANT_CONSTANT_FLAG
        } else {
            0
        });
        out.extend_from_slice(&q.min.to_le_bytes());
        out.extend_from_slice(&q.max.to_le_bytes());
        out.extend_from_slice(&pack_codes(&q.codes, q.bits));
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = FrameHeader::read(bytes)?;
        if header.format != FrameFormat::Quantized {
            return Err(Error::Deserialize("expected a quantized frame".into()));
        }
        let side = bytes
            .get(HEADER_LEN..HEADER_LEN + Self::SIDE_LEN)
            .ok_or_else(|| Error::Deserialize("quantized frame too short".into()))?;
        let bits = side[0];
        if !(1..=16).contains(&bits) {
            return Err(Error::Deserialize(format!("bad bit width {bits}")));
        }
        let min = f32::from_le_bytes(side[2..6].try_into().unwrap());
        let max = f32::from_le_bytes(side[6..10].try_into().unwrap());
        let constant = side[1] & QUANT_CONSTANT_FLAG != 0;
        if constant != (min == max) || side[1] & !QUANT_CONSTANT_FLAG != 0 {
            return Err(Error::Deserialize("inconsistent quantization flags".into()));
        }
        let count: usize = header.tensor_shape().iter().product();
        let body = &bytes[HEADER_LEN + Self::SIDE_LEN..];
        if body.len() != (count * bits as usize).div_ceil(8) {
            return Err(Error::Deserialize("quantized frame length mismatch".into()));
        }
        Ok(QuantizedMessage {
            header,
            quantized: Quantized {
                bits,
                min,
                max,
                codes: unpack_codes(body, bits, count),
            },
        })
    }

    fn payload_len(&self) -> usize {
        (self.quantized.codes.len() * self.quantized.bits as usize).div_ceil(8)
    }

    fn reconstruct(&self) -> Result<Tensor<f32>> {
        Tensor::new(
            self.header.tensor_shape().to_vec(),
            self.quantized.dequantize(),
        )
    }
}

/// Non-zero element count per channel across the batch.
pub fn l0_counts(batch: &FeatureBatch) -> Vec<f64> {
    (0..batch.channels())
        .map(|i| {
            (0..batch.batch_size())
                .map(|b| batch.map(b, i).iter().filter(|v| v.abs() > 0.0).count())
                .sum::<usize>() as f64
        })
        .collect()
}

/// Normalized non-zero counts.
pub fn l0_scores(batch: &FeatureBatch) -> Vec<f64> {
    normalize_scores(&l0_counts(batch))
}

/// Independent uniform `[0, 1)` score per channel.
pub fn random_scores<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Vec<f64> {
    (0..channels).map(|_| rng.random::<f64>()).collect()
}

/// Uniform ratio in `[p_min, p_max]`.
pub fn random_ratio<R: Rng + ?Sized>(bounds: &RatioBounds, rng: &mut R) -> f64 {
    if bounds.p_min == bounds.p_max {
        return bounds.p_min;
    }
    rng.random_range(bounds.p_min..=bounds.p_max)
}

pub fn fixed_ratio(ratio: f64) -> f64 {
    ratio
}
