//! Dense row-major containers for rational values, integer payloads and their scales,
//! plus the shape transformations that act on payload and scale together.
//!
//! A [`ScaledTensor`] is the pair `{x, s}`: an integer payload whose rational meaning is
//! `x / s`. Scales are stored with collapsed (size-1) dimensions wherever a single scale
//! covers a whole axis, and are broadcast against the payload on use.

use crate::error::{Error, Result};
use crate::scale::Precision;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

fn check_count(shape: &[usize], len: usize) -> Result<()> {
    check_shape(shape)?;
    let expected = numel(shape);
    if expected != len {
        return Err(Error::ValueCount {
            shape: shape.to_vec(),
            expected,
            actual: len,
        });
    }
    Ok(())
}

/// True when `src` can be broadcast to `target`: same rank, each dim equal or 1.
pub fn broadcast_compatible(src: &[usize], target: &[usize]) -> bool {
    src.len() == target.len() && src.iter().zip(target).all(|(&s, &t)| s == t || s == 1)
}

/// The smallest shape both inputs broadcast to.
pub(crate) fn common_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

/// For every linear index of `target`, the linear index of `src` it reads from.
pub(crate) fn broadcast_map(src: &[usize], target: &[usize]) -> Vec<usize> {
    debug_assert!(broadcast_compatible(src, target));
    let src_strides = strides(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&src_strides)
        .map(|(&d, &st)| if d == 1 { 0 } else { st })
        .collect();
    let total = numel(target);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..total {
        out.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum());
        for ax in (0..target.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < target[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

fn broadcast_values<T: Copy>(values: &[T], src: &[usize], target: &[usize]) -> Vec<T> {
    broadcast_map(src, target).into_iter().map(|i| values[i]).collect()
}

fn check_permutation(axes: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(Error::InvalidPermutation(axes.to_vec()));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::InvalidPermutation(axes.to_vec()));
        }
        seen[a] = true;
    }
    Ok(())
}

fn permute<T: Copy>(values: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let old_strides = strides(shape);
    let perm_strides: Vec<usize> = axes.iter().map(|&a| old_strides[a]).collect();
    let total = numel(&new_shape);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; new_shape.len()];
    for _ in 0..total {
        let src: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        out.push(values[src]);
        for ax in (0..new_shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < new_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (new_shape, out)
}

/// Splits `shape` around `axis` into (outer, len, inner) block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn narrow_values<T: Copy>(
    values: &[T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<T> {
    let (outer, n, inner) = axis_blocks(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner;
        out.extend_from_slice(&values[base + start * inner..base + (start + len) * inner]);
    }
    out
}

fn concat_values<T: Copy>(parts: &[(&[usize], &[T])], axis: usize) -> Vec<T> {
    let outer = numel(&parts[0].0[..axis]);
    let mut out = Vec::new();
    for o in 0..outer {
        for (shape, values) in parts {
            let block = shape[axis] * numel(&shape[axis + 1..]);
            out.extend_from_slice(&values[o * block..(o + 1) * block]);
        }
    }
    out
}

/// Dense tensor with FP32 semantics: the rational side `r` of quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalTensor {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl RationalTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        check_count(&shape, values.len())?;
        if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(v));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = numel(&shape);
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn transpose(&self, axes: &[usize]) -> Result<Self> {
        check_permutation(axes, self.shape.len())?;
        let (shape, values) = permute(&self.values, &self.shape, axes);
        Ok(Self { shape, values })
    }

    pub fn concat(ts: &[RationalTensor], axis: usize) -> Result<Self> {
        let first = ts.first().ok_or(Error::EmptyInput("concat"))?;
        let shape = concat_shape(ts.iter().map(|t| t.shape()), first.shape(), axis)?;
        let parts: Vec<(&[usize], &[f32])> =
            ts.iter().map(|t| (t.shape(), t.values())).collect();
        Ok(Self {
            shape,
            values: concat_values(&parts, axis),
        })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        check_narrow(&self.shape, axis, start, len)?;
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self {
            values: narrow_values(&self.values, &self.shape, axis, start, len),
            shape,
        })
    }

    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

fn concat_shape<'a>(
    shapes: impl Iterator<Item = &'a [usize]>,
    first: &[usize],
    axis: usize,
) -> Result<Vec<usize>> {
    if axis >= first.len() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: first.len(),
        });
    }
    let mut out = first.to_vec();
    out[axis] = 0;
    for s in shapes {
        let ok = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: first.to_vec(),
                right: s.to_vec(),
            });
        }
        out[axis] += s[axis];
    }
    Ok(out)
}

fn check_narrow(shape: &[usize], axis: usize, start: usize, len: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    if len == 0 || start + len > shape[axis] {
        return Err(Error::InvalidArgument(format!(
            "slice {start}..{} exceeds axis {axis} of length {}",
            start + len,
            shape[axis]
        )));
    }
    Ok(())
}

/// Integer payload held in a wide (64-bit) lane; `precision` is the logical bit width
/// enforced at protocol exit, not a storage width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    values: Vec<i64>,
    precision: Precision,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, values: Vec<i64>, precision: Precision) -> Result<Self> {
        check_count(&shape, values.len())?;
        Ok(Self {
            shape,
            values,
            precision,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> i64 {
        self.values.iter().map(|v| v.abs()).max().unwrap_or(0)
    }

    /// True when every payload fits the symmetric range `[-(2^p - 1), 2^p - 1]`.
    pub fn in_range(&self) -> bool {
        self.max_abs() <= self.precision.max_magnitude()
    }
}

/// Strictly positive scales, shaped like the payload except along collapsed axes (size 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTensor {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl ScaleTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        check_count(&shape, values.len())?;
        if let Some(&v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::NonPositiveScale(v));
        }
        Ok(Self { shape, values })
    }

    /// A single scale value with every dimension collapsed.
    pub fn uniform(rank: usize, value: f32) -> Result<Self> {
        Self::new(vec![1; rank], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn transpose(&self, axes: &[usize]) -> Result<Self> {
        check_permutation(axes, self.shape.len())?;
        let (shape, values) = permute(&self.values, &self.shape, axes);
        Ok(Self { shape, values })
    }
}

/// Materializes `s` at `target_shape`; each output element is the source element it
/// broadcasts from.
pub fn broadcast_scale(s: &ScaleTensor, target_shape: &[usize]) -> Result<ScaleTensor> {
    if !broadcast_compatible(s.shape(), target_shape) {
        return Err(Error::ShapeMismatch {
            op: "broadcast_scale",
            left: s.shape().to_vec(),
            right: target_shape.to_vec(),
        });
    }
    Ok(ScaleTensor {
        shape: target_shape.to_vec(),
        values: broadcast_values(s.values(), s.shape(), target_shape),
    })
}

/// The pair `{x, s}` whose rational meaning is `x / s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledTensor {
    data: IntTensor,
    scale: ScaleTensor,
}

impl ScaledTensor {
    pub fn new(data: IntTensor, scale: ScaleTensor) -> Result<Self> {
        if !broadcast_compatible(scale.shape(), data.shape()) {
            return Err(Error::ShapeMismatch {
                op: "scaled tensor",
                left: data.shape().to_vec(),
                right: scale.shape().to_vec(),
            });
        }
        Ok(Self { data, scale })
    }

    /// Convenience constructor from raw parts.
    pub fn from_parts(
        shape: Vec<usize>,
        payload: Vec<i64>,
        scale_shape: Vec<usize>,
        scales: Vec<f32>,
        precision: Precision,
    ) -> Result<Self> {
        Self::new(
            IntTensor::new(shape, payload, precision)?,
            ScaleTensor::new(scale_shape, scales)?,
        )
    }

    /// A tensor filled with one payload value under one collapsed scale.
    pub fn filled(shape: Vec<usize>, payload: i64, scale: f32, precision: Precision) -> Result<Self> {
        let n = numel(&shape);
        let rank = shape.len();
        Self::from_parts(shape, vec![payload; n], vec![1; rank], vec![scale], precision)
    }

    pub fn data(&self) -> &IntTensor {
        &self.data
    }

    /// Materializes the payload at a broadcast `shape`; the scale is kept as is.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if !broadcast_compatible(self.shape(), shape) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                left: self.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let payload = broadcast_map(self.shape(), shape)
            .into_iter()
            .map(|i| self.data.values[i])
            .collect();
        Self::new(
            IntTensor::new(shape.to_vec(), payload, self.precision())?,
            self.scale.clone(),
        )
    }

    /// Re-labels the logical precision without touching payload or scale.
    pub(crate) fn with_precision(mut self, precision: Precision) -> Self {
        self.data.precision = precision;
        self
    }

    pub fn scale(&self) -> &ScaleTensor {
        &self.scale
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn payload(&self) -> &[i64] {
        self.data.values()
    }

    pub fn precision(&self) -> Precision {
        self.data.precision()
    }

    pub fn into_parts(self) -> (IntTensor, ScaleTensor) {
        (self.data, self.scale)
    }

    /// The scale broadcast to one value per payload element.
    pub fn dense_scale(&self) -> Vec<f32> {
        broadcast_values(self.scale.values(), self.scale.shape(), self.data.shape())
    }

    pub fn transpose(&self, axes: &[usize]) -> Result<Self> {
        check_permutation(axes, self.shape().len())?;
        let (shape, values) = permute(self.payload(), self.shape(), axes);
        Ok(Self {
            data: IntTensor::new(shape, values, self.precision())?,
            scale: self.scale.transpose(axes)?,
        })
    }

    /// Swaps the two axes of a matrix.
    pub fn t(&self) -> Result<Self> {
        if self.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "t() expects a matrix, got rank {}",
                self.shape().len()
            )));
        }
        self.transpose(&[1, 0])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        check_narrow(self.shape(), axis, start, len)?;
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let data = IntTensor::new(
            shape,
            narrow_values(self.payload(), self.shape(), axis, start, len),
            self.precision(),
        )?;
        let scale = if self.scale.shape()[axis] == 1 {
            self.scale.clone()
        } else {
            let mut sshape = self.scale.shape().to_vec();
            sshape[axis] = len;
            ScaleTensor::new(
                sshape,
                narrow_values(self.scale.values(), self.scale.shape(), axis, start, len),
            )?
        };
        Self::new(data, scale)
    }

    /// Concatenates payloads and scales along `axis`. Scales that differ in a
    /// non-concatenated dimension are broadcast to the common shape first.
    pub fn concat(ts: &[ScaledTensor], axis: usize) -> Result<Self> {
        let first = ts.first().ok_or(Error::EmptyInput("concat"))?;
        if ts.len() == 1 {
            return Ok(first.clone());
        }
        let p = first.precision();
        if let Some(t) = ts.iter().find(|t| t.precision() != p) {
            return Err(Error::MixedPrecision(p.bits(), t.precision().bits()));
        }
        let shape = concat_shape(ts.iter().map(|t| t.shape()), first.shape(), axis)?;
        let parts: Vec<(&[usize], &[i64])> = ts.iter().map(|t| (t.shape(), t.payload())).collect();
        let payload = concat_values(&parts, axis);

        let rank = shape.len();
        let mut common: Vec<usize> = (0..rank)
            .map(|i| {
                if ts.iter().all(|t| t.scale.shape()[i] == 1) {
                    1
                } else {
                    first.shape()[i]
                }
            })
            .collect();
        common[axis] = 1;
        let collapsed: Vec<ScaleTensor> = ts
            .iter()
            .map(|t| {
                let mut target = common.clone();
                target[axis] = t.scale.shape()[axis];
                broadcast_scale(&t.scale, &target)
            })
            .collect::<Result<_>>()?;
        let keep_collapsed = collapsed.iter().all(|s| s.shape()[axis] == 1)
            && collapsed.iter().all(|s| s.values() == collapsed[0].values());
        let scale = if keep_collapsed {
            collapsed[0].clone()
        } else {
            let expanded: Vec<ScaleTensor> = collapsed
                .iter()
                .zip(ts)
                .map(|(s, t)| {
                    let mut target = common.clone();
                    target[axis] = t.shape()[axis];
                    broadcast_scale(s, &target)
                })
                .collect::<Result<_>>()?;
            let parts: Vec<(&[usize], &[f32])> =
                expanded.iter().map(|s| (s.shape(), s.values())).collect();
            let mut sshape = common.clone();
            sshape[axis] = shape[axis];
            ScaleTensor::new(sshape, concat_values(&parts, axis))?
        };
        Self::new(IntTensor::new(shape, payload, p)?, scale)
    }
}
