//! Quantization calculus: scale initialization, quantize / de-quantize, scale matching
//! (across tensors and along one axis) and re-scaling.
//!
//! All integer divisions here truncate toward zero on the magnitude, so matching and
//! re-scaling never increase `|x|`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_compatible, broadcast_map, common_shape, numel, IntTensor, RationalTensor,
    ScaleTensor, ScaledTensor,
};

/// Logical bit precision `p`; payloads live in `[-(2^p - 1), 2^p - 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Precision(u8);

impl Precision {
    /// Seven magnitude bits plus sign: the INT8 setting.
    pub const INT8: Precision = Precision(7);
    pub const MIN_BITS: u32 = 2;
    pub const MAX_BITS: u32 = 15;

    pub fn new(bits: u32) -> Result<Self> {
        if (Self::MIN_BITS..=Self::MAX_BITS).contains(&bits) {
            Ok(Self(bits as u8))
        } else {
            Err(Error::InvalidPrecision(bits))
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// `2^p - 1`
    pub fn max_magnitude(self) -> i64 {
        (1i64 << self.0) - 1
    }

    /// An internal accumulation precision `extra` bits wider, capped at 30 bits.
    pub(crate) fn widened(self, extra: u32) -> Precision {
        Precision((u32::from(self.0) + extra).min(30) as u8)
    }
}

impl Default for Precision {
    fn default() -> Self {
        Self::INT8
    }
}

/// Which dimensions a freshly initialized scale collapses.
///
/// Activations are laid out `[B, T, C]` (or `[T, C]` with an implicit single batch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ScaleGranularity {
    /// Collapse only the hidden (last) dimension: one scale per row.
    #[default]
    PerRow,
    /// One scale per (batch, time) position: maximize over `C`.
    PerBatchTime,
    /// One scale per batch entry: maximize over `T x C`.
    PerBatch,
}

impl ScaleGranularity {
    /// Scale shape produced for a tensor of `shape`.
    pub fn scale_shape(self, shape: &[usize]) -> Vec<usize> {
        let rank = shape.len();
        let kept = match self {
            ScaleGranularity::PerRow => rank.saturating_sub(1),
            ScaleGranularity::PerBatchTime => match rank {
                0 | 1 => 0,
                2 => 1,
                _ => 2,
            },
            ScaleGranularity::PerBatch => usize::from(rank >= 3),
        };
        shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if i < kept { d } else { 1 })
            .collect()
    }

    pub fn code(self) -> u8 {
        match self {
            ScaleGranularity::PerRow => 0,
            ScaleGranularity::PerBatchTime => 1,
            ScaleGranularity::PerBatch => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ScaleGranularity::PerRow),
            1 => Ok(ScaleGranularity::PerBatchTime),
            2 => Ok(ScaleGranularity::PerBatch),
            _ => Err(Error::Format(format!("unknown granularity code {code}"))),
        }
    }
}

impl std::str::FromStr for ScaleGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(ScaleGranularity::PerRow),
            "bt" => Ok(ScaleGranularity::PerBatchTime),
            "b" => Ok(ScaleGranularity::PerBatch),
            other => Err(Error::InvalidArgument(format!(
                "granularity must be one of row, bt, b (got {other:?})"
            ))),
        }
    }
}

/// How a payload is brought from its own scale down to the matched (minimum) scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum MatchRule {
    /// `trunc(x * s_min / s)` through a 31-bit fixed-point multiplier. Exact integer
    /// division whenever `s / s_min` is an integer.
    #[default]
    Ratio,
    /// `trunc(x / ceil(s / s_min))`. Only unbiased when `s / s_min` is an integer;
    /// otherwise shrinks the de-quantized value by up to a factor of two.
    Ceil,
}

const MULT_SHIFT: u32 = 31;

/// Re-expresses payload `x` held at `from` under the smaller scale `to`.
pub(crate) fn match_value(x: i64, from: f32, to: f32, rule: MatchRule) -> i64 {
    if from == to || x == 0 {
        return x;
    }
    debug_assert!(to <= from);
    let mag = x.unsigned_abs() as u128;
    let out = match rule {
        MatchRule::Ceil => {
            let k = (f64::from(from) / f64::from(to)).ceil().max(1.0) as u128;
            mag / k
        }
        MatchRule::Ratio => {
            let one = 1u128 << MULT_SHIFT;
            let m = ((f64::from(to) * one as f64) / f64::from(from)).ceil() as u128;
            (mag * m.min(one)) >> MULT_SHIFT
        }
    } as i64;
    if x < 0 {
        -out
    } else {
        out
    }
}

/// `s = (2^p - 1) / max|r|` over each group selected by `g`. A group whose maximum is
/// zero gets scale 1.
pub fn init_scale(r: &RationalTensor, g: ScaleGranularity, prec: Precision) -> Result<ScaleTensor> {
    let sshape = g.scale_shape(r.shape());
    let map = broadcast_map(&sshape, r.shape());
    let mut maxes = vec![0.0f32; numel(&sshape)];
    for (v, &gi) in r.values().iter().zip(&map) {
        maxes[gi] = maxes[gi].max(v.abs());
    }
    let q = prec.max_magnitude() as f64;
    let values = maxes
        .into_iter()
        .map(|m| {
            if m == 0.0 {
                1.0
            } else {
                (q / f64::from(m)) as f32
            }
        })
        .collect();
    ScaleTensor::new(sshape, values)
}

/// `x = round_half_even(s * r)` elementwise.
pub fn quantize(r: &RationalTensor, s: &ScaleTensor, prec: Precision) -> Result<ScaledTensor> {
    if !broadcast_compatible(s.shape(), r.shape()) {
        return Err(Error::ShapeMismatch {
            op: "quantize",
            left: r.shape().to_vec(),
            right: s.shape().to_vec(),
        });
    }
    let map = broadcast_map(s.shape(), r.shape());
    let payload = r
        .values()
        .iter()
        .zip(&map)
        .map(|(&v, &si)| {
            // f32 * f32 is exact in f64, so the tie test below is exact too.
            let x = (f64::from(v) * f64::from(s.values()[si])).round_ties_even();
            if x.abs() > (1u64 << 62) as f64 {
                Err(Error::LaneOverflow {
                    op: "quantize",
                    lane: "i64",
                })
            } else {
                Ok(x as i64)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ScaledTensor::new(IntTensor::new(r.shape().to_vec(), payload, prec)?, s.clone())
}

/// Quantizes `r` with a freshly initialized scale.
pub fn quantize_auto(r: &RationalTensor, g: ScaleGranularity, prec: Precision) -> Result<ScaledTensor> {
    quantize(r, &init_scale(r, g, prec)?, prec)
}

/// `r' = x / s` elementwise.
pub fn dequantize(t: &ScaledTensor) -> RationalTensor {
    let values = t
        .payload()
        .iter()
        .zip(t.dense_scale())
        .map(|(&x, s)| (x as f64 / f64::from(s)) as f32)
        .collect();
    RationalTensor::new(t.shape().to_vec(), values).expect("finite payload over positive scale")
}

/// Unifies every input onto the elementwise minimum scale. Scale groups whose payloads
/// are all zero are left out of the minimum.
pub fn scale_match(ts: &[ScaledTensor]) -> Result<Vec<ScaledTensor>> {
    scale_match_with(ts, MatchRule::default())
}

pub fn scale_match_with(ts: &[ScaledTensor], rule: MatchRule) -> Result<Vec<ScaledTensor>> {
    let first = ts.first().ok_or(Error::EmptyInput("scale_match"))?;
    let p = first.precision();
    for t in ts {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "scale_match",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        if t.precision() != p {
            return Err(Error::MixedPrecision(p.bits(), t.precision().bits()));
        }
    }
    if ts.len() == 1 {
        return Ok(ts.to_vec());
    }
    let mut sshape = first.scale().shape().to_vec();
    for t in &ts[1..] {
        sshape = common_shape("scale_match", &sshape, t.scale().shape())?;
    }
    let expanded: Vec<Vec<f32>> = ts
        .iter()
        .map(|t| {
            broadcast_map(t.scale().shape(), &sshape)
                .into_iter()
                .map(|i| t.scale().values()[i])
                .collect()
        })
        .collect();
    let map = broadcast_map(&sshape, first.shape());
    // A group whose payloads are all zero represents zero under any scale, so it does
    // not pull the matched scale down.
    let live: Vec<Vec<bool>> = ts
        .iter()
        .map(|t| {
            let mut live = vec![false; numel(&sshape)];
            for (&x, &si) in t.payload().iter().zip(&map) {
                live[si] |= x != 0;
            }
            live
        })
        .collect();
    let min: Vec<f32> = (0..numel(&sshape))
        .map(|i| {
            let candidates = || expanded.iter().zip(&live).filter(|(_, l)| l[i]);
            if candidates().next().is_some() {
                candidates().map(|(e, _)| e[i]).fold(f32::INFINITY, f32::min)
            } else {
                expanded.iter().map(|e| e[i]).fold(f32::INFINITY, f32::min)
            }
        })
        .collect();
    let scale = ScaleTensor::new(sshape, min)?;
    ts.iter()
        .zip(&expanded)
        .map(|(t, own)| {
            let payload = t
                .payload()
                .iter()
                .zip(&map)
                .map(|(&x, &si)| match_value(x, own[si], scale.values()[si], rule))
                .collect();
            ScaledTensor::new(IntTensor::new(t.shape().to_vec(), payload, p)?, scale.clone())
        })
        .collect()
}

/// Collapses the scale along `axis` to its minimum, re-expressing each slice's payload
/// under that minimum.
pub fn scale_match_dim(t: &ScaledTensor, axis: usize) -> Result<ScaledTensor> {
    scale_match_dim_with(t, axis, MatchRule::default())
}

pub fn scale_match_dim_with(t: &ScaledTensor, axis: usize, rule: MatchRule) -> Result<ScaledTensor> {
    let rank = t.shape().len();
    if axis >= rank {
        return Err(Error::AxisOutOfRange { axis, rank });
    }
    let s = t.scale();
    if s.shape()[axis] == 1 {
        return Ok(t.clone());
    }
    let mut cshape = s.shape().to_vec();
    cshape[axis] = 1;
    let to_collapsed = broadcast_map(&cshape, s.shape());
    let own = broadcast_map(s.shape(), t.shape());
    let coll = broadcast_map(&cshape, t.shape());
    // Scale groups holding only zero payloads do not take part in the minimum.
    let mut live = vec![false; s.len()];
    for (&x, &oi) in t.payload().iter().zip(&own) {
        live[oi] |= x != 0;
    }
    let mut min = vec![f32::INFINITY; numel(&cshape)];
    let mut any_live = vec![false; numel(&cshape)];
    for (gi, &ci) in to_collapsed.iter().enumerate() {
        any_live[ci] |= live[gi];
    }
    for (gi, (&v, &ci)) in s.values().iter().zip(&to_collapsed).enumerate() {
        if live[gi] || !any_live[ci] {
            min[ci] = min[ci].min(v);
        }
    }
    let payload = t
        .payload()
        .iter()
        .zip(own.iter().zip(&coll))
        .map(|(&x, (&oi, &ci))| match_value(x, s.values()[oi], min[ci], rule))
        .collect();
    ScaledTensor::new(
        IntTensor::new(t.shape().to_vec(), payload, t.precision())?,
        ScaleTensor::new(cshape, min)?,
    )
}

/// `R(x, s) = {x / ŝ, s / ŝ}` with `ŝ = ceil(max|x| / (2^p - 1))` per scale group.
pub fn rescale(x: &IntTensor, s: &ScaleTensor, prec: Precision) -> Result<ScaledTensor> {
    if !broadcast_compatible(s.shape(), x.shape()) {
        return Err(Error::ShapeMismatch {
            op: "rescale",
            left: x.shape().to_vec(),
            right: s.shape().to_vec(),
        });
    }
    let q = prec.max_magnitude();
    let map = broadcast_map(s.shape(), x.shape());
    let mut group_max = vec![0i64; s.len()];
    for (&v, &gi) in x.values().iter().zip(&map) {
        group_max[gi] = group_max[gi].max(v.abs());
    }
    let divisors: Vec<i64> = group_max
        .iter()
        .map(|&m| ((m + q - 1) / q).max(1))
        .collect();
    let payload = x
        .values()
        .iter()
        .zip(&map)
        .map(|(&v, &gi)| v / divisors[gi])
        .collect();
    let scales = s
        .values()
        .iter()
        .zip(&divisors)
        .map(|(&v, &d)| if d == 1 { v } else { (f64::from(v) / d as f64) as f32 })
        .collect();
    ScaledTensor::new(
        IntTensor::new(x.shape().to_vec(), payload, prec)?,
        ScaleTensor::new(s.shape().to_vec(), scales)?,
    )
}
