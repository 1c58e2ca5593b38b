//! Integer kernels acting jointly on payloads and scales.
//!
//! Every kernel computes in the wide lane and may leave payloads above `2^p - 1`;
//! bringing them back into range is the protocol's job (see [`crate::protocol`]).
//! Element-wise kernels broadcast same-rank operands by materializing them first.

use crate::audit::KernelKind;
use crate::error::{Error, Result};
use crate::scale::{scale_match_dim_with, scale_match_with, MatchRule, Precision};
use crate::tensor::{
    axis_blocks, broadcast_map, common_shape, numel, IntTensor, ScaleTensor, ScaledTensor,
};

/// Accumulator width chosen for a matmul.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccLane {
    I32,
    I64,
}

impl AccLane {
    /// 64-bit when `p > 10` or the contraction length exceeds `2^(30 - 2p)`, so that
    /// `k * (2^p - 1)^2` always fits the chosen lane.
    pub fn for_matmul(prec: Precision, contraction: usize) -> Self {
        let p = u32::from(prec.bits());
        if p > 10 || contraction > 1usize << (30 - 2 * p) {
            AccLane::I64
        } else {
            AccLane::I32
        }
    }

    fn name(self) -> &'static str {
        match self {
            AccLane::I32 => "i32",
            AccLane::I64 => "i64",
        }
    }
}

fn overflow(op: &'static str) -> Error {
    Error::LaneOverflow { op, lane: "i64" }
}

fn same_precision(a: &ScaledTensor, b: &ScaledTensor) -> Result<Precision> {
    if a.precision() != b.precision() {
        return Err(Error::MixedPrecision(a.precision().bits(), b.precision().bits()));
    }
    Ok(a.precision())
}

fn expand_payload(t: &ScaledTensor, shape: &[usize]) -> Result<ScaledTensor> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let payload = broadcast_map(t.shape(), shape)
        .into_iter()
        .map(|i| t.payload()[i])
        .collect();
    ScaledTensor::new(
        IntTensor::new(shape.to_vec(), payload, t.precision())?,
        t.scale().clone(),
    )
}

fn expand_scale(s: &ScaleTensor, shape: &[usize]) -> Vec<f32> {
    broadcast_map(s.shape(), shape)
        .into_iter()
        .map(|i| s.values()[i])
        .collect()
}

fn build(shape: Vec<usize>, payload: Vec<i64>, sshape: Vec<usize>, scales: Vec<f32>, p: Precision) -> Result<ScaledTensor> {
    ScaledTensor::new(IntTensor::new(shape, payload, p)?, ScaleTensor::new(sshape, scales)?)
}

/// `{x1 * x2, s1 * s2}`
pub fn ew_mul(a: &ScaledTensor, b: &ScaledTensor) -> Result<ScaledTensor> {
    let p = same_precision(a, b)?;
    let shape = common_shape("ew_mul", a.shape(), b.shape())?;
    let sshape = common_shape("ew_mul", a.scale().shape(), b.scale().shape())?;
    let (a, b) = (expand_payload(a, &shape)?, expand_payload(b, &shape)?);
    let payload = a
        .payload()
        .iter()
        .zip(b.payload())
        .map(|(x, y)| x.checked_mul(*y).ok_or_else(|| overflow("ew_mul")))
        .collect::<Result<_>>()?;
    let scales = expand_scale(a.scale(), &sshape)
        .into_iter()
        .zip(expand_scale(b.scale(), &sshape))
        .map(|(x, y)| (f64::from(x) * f64::from(y)) as f32)
        .collect();
    build(shape, payload, sshape, scales, p)
}

/// Matches both scales to their minimum, then adds payloads.
pub fn add(a: &ScaledTensor, b: &ScaledTensor, rule: MatchRule) -> Result<ScaledTensor> {
    same_precision(a, b)?;
    let shape = common_shape("add", a.shape(), b.shape())?;
    let matched = scale_match_with(&[expand_payload(a, &shape)?, expand_payload(b, &shape)?], rule)?;
    let payload = matched[0]
        .payload()
        .iter()
        .zip(matched[1].payload())
        .map(|(x, y)| x.checked_add(*y).ok_or_else(|| overflow("add")))
        .collect::<Result<_>>()?;
    ScaledTensor::new(
        IntTensor::new(shape, payload, a.precision())?,
        matched[0].scale().clone(),
    )
}

/// `MatMul(a, b^T)` for `a: m x k`, `b_t: n x k`. Both scales are first matched along
/// the contraction axis; the output scale is the outer product of the two column scales.
pub fn matmul(a: &ScaledTensor, b_t: &ScaledTensor, rule: MatchRule) -> Result<ScaledTensor> {
    let p = same_precision(a, b_t)?;
    let (ash, bsh) = (a.shape(), b_t.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[1] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: ash.to_vec(),
            right: bsh.to_vec(),
        });
    }
    let (m, k, n) = (ash[0], ash[1], bsh[0]);
    let a = scale_match_dim_with(a, 1, rule)?;
    let b = scale_match_dim_with(b_t, 1, rule)?;
    let lane = AccLane::for_matmul(p, k);
    let (xa, xb) = (a.payload(), b.payload());
    let mut payload = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &xa[i * k..(i + 1) * k];
        for j in 0..n {
            let col = &xb[j * k..(j + 1) * k];
            let mut acc: i64 = 0;
            for (x, y) in row.iter().zip(col) {
                acc = x
                    .checked_mul(*y)
                    .and_then(|v| acc.checked_add(v))
                    .ok_or_else(|| overflow("matmul"))?;
                if lane == AccLane::I32 && i32::try_from(acc).is_err() {
                    return Err(Error::LaneOverflow {
                        op: "matmul",
                        lane: lane.name(),
                    });
                }
            }
            payload.push(acc);
        }
    }
    let (sa, sb) = (a.scale().values(), b.scale().values());
    let sshape = vec![sa.len(), sb.len()];
    let scales = sa
        .iter()
        .flat_map(|&x| sb.iter().map(move |&y| (f64::from(x) * f64::from(y)) as f32))
        .collect();
    build(vec![m, n], payload, sshape, scales, p)
}

/// `{x^n, s^n}`
pub fn pow_n(t: &ScaledTensor, n: u32) -> Result<ScaledTensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("pow_n requires n >= 1".into()));
    }
    let payload = t
        .payload()
        .iter()
        .map(|x| x.checked_pow(n).ok_or_else(|| overflow("pow_n")))
        .collect::<Result<_>>()?;
    let scales = t
        .scale()
        .values()
        .iter()
        .map(|&s| f64::from(s).powi(n as i32) as f32)
        .collect();
    build(
        t.shape().to_vec(),
        payload,
        t.scale().shape().to_vec(),
        scales,
        t.precision(),
    )
}

/// `{|x|, s}`
pub fn abs(t: &ScaledTensor) -> Result<ScaledTensor> {
    map_payload(t, i64::abs)
}

/// `{max(0, x), s}`
pub fn relu(t: &ScaledTensor) -> Result<ScaledTensor> {
    map_payload(t, |x| x.max(0))
}

fn map_payload(t: &ScaledTensor, f: impl Fn(i64) -> i64) -> Result<ScaledTensor> {
    ScaledTensor::new(
        IntTensor::new(
            t.shape().to_vec(),
            t.payload().iter().map(|&x| f(x)).collect(),
            t.precision(),
        )?,
        t.scale().clone(),
    )
}

/// Sums payloads along `axis` (kept as size 1). The scale must already be uniform
/// along that axis.
pub fn sum_reduce(t: &ScaledTensor, axis: usize) -> Result<ScaledTensor> {
    let rank = t.shape().len();
    if axis >= rank {
        return Err(Error::AxisOutOfRange { axis, rank });
    }
    if t.scale().shape()[axis] != 1 {
        return Err(Error::ScaleNotUniform(axis));
    }
    let (outer, len, inner) = axis_blocks(t.shape(), axis);
    let x = t.payload();
    let mut payload = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut acc: i64 = 0;
            for l in 0..len {
                acc = acc
                    .checked_add(x[(o * len + l) * inner + i])
                    .ok_or_else(|| overflow("sum_reduce"))?;
            }
            payload.push(acc);
        }
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = 1;
    ScaledTensor::new(IntTensor::new(shape, payload, t.precision())?, t.scale().clone())
}

/// Integer division truncating toward zero: payload `trunc((x_num << widen) / x_den)`,
/// scale `s_num * 2^widen / s_den`. `widen_bits` pre-shifts the numerator so the
/// quotient keeps resolution when numerator and denominator have similar magnitude;
/// the shift is mirrored in the scale, so it does not change the rational value.
pub fn int_div(num: &ScaledTensor, den: &ScaledTensor, widen_bits: u32) -> Result<ScaledTensor> {
    let p = same_precision(num, den)?;
    if widen_bits > 30 {
        return Err(Error::InvalidArgument("int_div widen_bits must be <= 30".into()));
    }
    let shape = common_shape("int_div", num.shape(), den.shape())?;
    let sshape = common_shape("int_div", num.scale().shape(), den.scale().shape())?;
    let (n, d) = (expand_payload(num, &shape)?, expand_payload(den, &shape)?);
    let payload = n
        .payload()
        .iter()
        .zip(d.payload())
        .map(|(&x, &y)| {
            if y == 0 {
                return Err(Error::ZeroDenominator);
            }
            if y < 0 {
                return Err(Error::InvalidArgument(
                    "int_div denominator payloads must be positive".into(),
                ));
            }
            let wide = x.checked_mul(1i64 << widen_bits).ok_or_else(|| overflow("int_div"))?;
            Ok(wide / y)
        })
        .collect::<Result<_>>()?;
    let factor = (1u64 << widen_bits) as f64;
    let scales = expand_scale(n.scale(), &sshape)
        .into_iter()
        .zip(expand_scale(d.scale(), &sshape))
        .map(|(sn, sd)| (f64::from(sn) * factor / f64::from(sd)) as f32)
        .collect();
    build(shape, payload, sshape, scales, p)
}

/// A kernel invocation with its static parameters, as dispatched by the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Add,
    EwMul,
    MatMul,
    PowN(u32),
    Abs,
    Relu,
    SumReduce { axis: usize },
    IntDiv { widen_bits: u32 },
}

impl Kernel {
    pub fn kind(&self) -> KernelKind {
        match self {
            Kernel::Add => KernelKind::Add,
            Kernel::EwMul => KernelKind::EwMul,
            Kernel::MatMul => KernelKind::MatMul,
            Kernel::PowN(_) => KernelKind::PowN,
            Kernel::Abs => KernelKind::Abs,
            Kernel::Relu => KernelKind::Relu,
            Kernel::SumReduce { .. } => KernelKind::SumReduce,
            Kernel::IntDiv { .. } => KernelKind::IntDiv,
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Kernel::Add | Kernel::EwMul | Kernel::MatMul | Kernel::IntDiv { .. } => 2,
            _ => 1,
        }
    }

    pub fn eval(&self, ins: &[&ScaledTensor], rule: MatchRule) -> Result<ScaledTensor> {
        if ins.len() != self.arity() {
            return Err(Error::Arity {
                op: self.kind().name(),
                expected: self.arity(),
                actual: ins.len(),
            });
        }
        match *self {
            Kernel::Add => add(ins[0], ins[1], rule),
            Kernel::EwMul => ew_mul(ins[0], ins[1]),
            Kernel::MatMul => matmul(ins[0], ins[1], rule),
            Kernel::PowN(n) => pow_n(ins[0], n),
            Kernel::Abs => abs(ins[0]),
            Kernel::Relu => relu(ins[0]),
            Kernel::SumReduce { axis } => sum_reduce(ins[0], axis),
            Kernel::IntDiv { widen_bits } => int_div(ins[0], ins[1], widen_bits),
        }
    }

    /// Scalar operation count, used as a time proxy.
    pub fn work(&self, ins: &[&ScaledTensor], out: &ScaledTensor) -> u64 {
        match self {
            Kernel::MatMul => (numel(out.shape()) * ins[0].shape()[1]) as u64,
            Kernel::SumReduce { .. } => numel(ins[0].shape()) as u64,
            _ => numel(out.shape()) as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scale::dequantize;

    fn p7() -> Precision {
        Precision::INT8
    }

    fn st(shape: Vec<usize>, x: Vec<i64>, sshape: Vec<usize>, s: Vec<f32>) -> ScaledTensor {
        ScaledTensor::from_parts(shape, x, sshape, s, p7()).unwrap()
    }

    fn scalar(x: i64, s: f32) -> ScaledTensor {
        st(vec![1], vec![x], vec![1], vec![s])
    }

    #[test]
    fn ew_mul_multiplies_payload_and_scale() {
        let out = ew_mul(&scalar(3, 2.0), &scalar(4, 5.0)).unwrap();
        assert_eq!(out.payload(), &[12]);
        assert_eq!(out.scale().values(), &[10.0]);
        assert_eq!(dequantize(&out).values(), &[1.2]);
        let b = st(vec![3], vec![5, -6, 7], vec![1], vec![3.0]);
        assert_eq!(ew_mul(&scalar(1, 1.0), &b).unwrap(), b);
    }

    #[test]
    fn ew_mul_broadcasts_rows() {
        let a = st(vec![2, 2], vec![1, 2, 3, 4], vec![2, 1], vec![1.0, 2.0]);
        let g = st(vec![1, 2], vec![10, 20], vec![1, 1], vec![4.0]);
        let out = ew_mul(&a, &g).unwrap();
        assert_eq!(out.payload(), &[10, 40, 30, 80]);
        assert_eq!(out.scale().shape(), &[2, 1]);
        assert_eq!(out.scale().values(), &[4.0, 8.0]);
    }

    #[test]
    fn add_matches_then_sums() {
        let out = add(&scalar(100, 100.0), &scalar(50, 50.0), MatchRule::Ratio).unwrap();
        assert_eq!(out.payload(), &[100]);
        assert_eq!(out.scale().values(), &[50.0]);
        assert_eq!(dequantize(&out).values(), &[2.0]);
        let a = st(vec![2], vec![7, -3], vec![1], vec![4.0]);
        let z = st(vec![2], vec![0, 0], vec![1], vec![4.0]);
        assert_eq!(add(&a, &z, MatchRule::Ratio).unwrap(), a);
    }

    #[test]
    fn matmul_unit_scales_is_plain_gemm() {
        let a = st(vec![2, 3], vec![1, 2, 3, 4, 5, 6], vec![1, 1], vec![1.0]);
        let b = st(vec![2, 3], vec![1, 0, -1, 2, 1, 0], vec![1, 1], vec![1.0]);
        let out = matmul(&a, &b, MatchRule::Ratio).unwrap();
        assert_eq!(out.payload(), &[-2, 4, -2, 13]);
        assert_eq!(out.scale().values(), &[1.0]);
    }

    #[test]
    fn matmul_one_by_one_is_ew_mul() {
        let a = st(vec![1, 1], vec![3], vec![1, 1], vec![2.0]);
        let b = st(vec![1, 1], vec![4], vec![1, 1], vec![5.0]);
        let mm = matmul(&a, &b, MatchRule::Ratio).unwrap();
        let ew = ew_mul(&a, &b).unwrap();
        assert_eq!(mm.payload(), ew.payload());
        assert_eq!(mm.scale().values(), ew.scale().values());
    }

    #[test]
    fn matmul_scale_is_outer_product_of_row_scales() {
        let a = st(vec![2, 2], vec![1, 1, 1, 1], vec![2, 1], vec![2.0, 3.0]);
        let b = st(vec![3, 2], vec![1, 1, 1, 1, 1, 1], vec![3, 1], vec![5.0, 7.0, 11.0]);
        let out = matmul(&a, &b, MatchRule::Ratio).unwrap();
        assert_eq!(out.scale().shape(), &[2, 3]);
        assert_eq!(out.scale().values(), &[10.0, 14.0, 22.0, 15.0, 21.0, 33.0]);
        assert!(matmul(&a, &st(vec![3, 3], vec![0; 9], vec![1, 1], vec![1.0]), MatchRule::Ratio).is_err());
    }

    #[test]
    fn matmul_guards_narrow_lane() {
        assert_eq!(AccLane::for_matmul(p7(), 16), AccLane::I32);
        assert_eq!(AccLane::for_matmul(p7(), 1 << 17), AccLane::I64);
        assert_eq!(AccLane::for_matmul(Precision::new(11).unwrap(), 2), AccLane::I64);
        // Payloads far outside the logical range overflow the i32 lane.
        let big = st(vec![1, 2], vec![40_000, 40_000], vec![1, 1], vec![1.0]);
        assert!(matches!(
            matmul(&big, &big, MatchRule::Ratio),
            Err(Error::LaneOverflow { lane: "i32", .. })
        ));
    }

    #[test]
    fn pow_n_examples() {
        let t = scalar(5, 2.0);
        assert_eq!(pow_n(&t, 1).unwrap(), t);
        let c = pow_n(&t, 3).unwrap();
        assert_eq!(c.payload(), &[125]);
        assert_eq!(c.scale().values(), &[8.0]);
        assert_eq!(dequantize(&c).values(), &[15.625]);
        assert!(pow_n(&t, 0).is_err());
        assert!(pow_n(&scalar(i64::MAX / 2, 1.0), 2).is_err());
    }

    #[test]
    fn abs_and_relu() {
        let t = st(vec![2], vec![-3, 5], vec![1], vec![2.0]);
        assert_eq!(relu(&t).unwrap().payload(), &[0, 5]);
        assert_eq!(abs(&scalar(-7, 2.0)).unwrap().payload(), &[7]);
        assert_eq!(dequantize(&abs(&scalar(-7, 2.0)).unwrap()).values(), &[3.5]);
        let neg = st(vec![3], vec![-1, -2, -3], vec![1], vec![1.0]);
        assert_eq!(relu(&neg).unwrap().payload(), &[0, 0, 0]);
        let pos = st(vec![2], vec![1, 2], vec![1], vec![1.0]);
        assert_eq!(abs(&pos).unwrap(), pos);
    }

    #[test]
    fn sum_reduce_examples() {
        let t = st(vec![3], vec![1, 2, 3], vec![1], vec![4.0]);
        let s = sum_reduce(&t, 0).unwrap();
        assert_eq!(s.payload(), &[6]);
        assert_eq!(dequantize(&s).values(), &[1.5]);
        let m = st(vec![2, 2], vec![1, 2, 3, 4], vec![2, 1], vec![1.0, 2.0]);
        assert_eq!(sum_reduce(&m, 1).unwrap().payload(), &[3, 7]);
        assert!(matches!(sum_reduce(&m, 0), Err(Error::ScaleNotUniform(0))));
        assert!(sum_reduce(&m, 2).is_err());
        let one = st(vec![1, 2], vec![5, 6], vec![1, 1], vec![1.0]);
        assert_eq!(sum_reduce(&one, 0).unwrap(), one);
    }

    #[test]
    fn int_div_examples() {
        let out = int_div(&scalar(1000, 1.0), &scalar(8, 1.0), 0).unwrap();
        assert_eq!(out.payload(), &[125]);
        assert_eq!(out.scale().values(), &[1.0]);
        let t = st(vec![2], vec![9, 4], vec![1], vec![3.0]);
        let same = int_div(&t, &t, 0).unwrap();
        assert_eq!(same.payload(), &[1, 1]);
        assert_eq!(same.scale().values(), &[1.0]);
        assert_eq!(int_div(&scalar(-7, 1.0), &scalar(2, 1.0), 0).unwrap().payload(), &[-3]);
        let wide = int_div(&scalar(1, 1.0), &scalar(3, 1.0), 7).unwrap();
        assert_eq!(wide.payload(), &[42]);
        assert_eq!(wide.scale().values(), &[128.0]);
        assert!(matches!(
            int_div(&scalar(1, 1.0), &scalar(0, 1.0), 0),
            Err(Error::ZeroDenominator)
        ));
    }

    #[test]
    fn kernel_dispatch_checks_arity() {
        let t = scalar(2, 1.0);
        assert!(Kernel::Add.eval(&[&t], MatchRule::Ratio).is_err());
        assert_eq!(Kernel::PowN(2).eval(&[&t], MatchRule::Ratio).unwrap().payload(), &[4]);
        assert_eq!(Kernel::MatMul.kind(), KernelKind::MatMul);
    }
}
