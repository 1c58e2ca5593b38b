//! Integer-only transformer blocks. Every payload operation goes through the session,
//! so the audit log sees each kernel.

use super::params::{QuantL1Ln, QuantPoly, TransformerLayerParams, L1_NORM_CONSTANT};
use crate::error::{Error, Result};
use crate::ops::Kernel;
use crate::protocol::Session;
use crate::tensor::{IntTensor, ScaleTensor, ScaledTensor};

/// `ceil(log2(n))` for `n >= 1`.
fn ceil_log2(n: usize) -> u32 {
    usize::BITS - n.saturating_sub(1).leading_zeros()
}

fn check_rank2(t: &ScaledTensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::InvalidArgument(format!(
            "{what} must be rank 2, got shape {:?}",
            t.shape()
        ))),
    }
}

/// `Poly(x) = ReLU(x + b)^n + |delta|` on integer scores.
///
/// `|delta|` is matched to the scale of the polynomial term and floored at one unit
/// when nonzero, so every weight stays strictly positive after matching.
pub fn poly(s: &mut Session, scores: &ScaledTensor, pp: &QuantPoly) -> Result<ScaledTensor> {
    let shifted = s.apply(Kernel::Add, &[scores, &pp.bias])?;
    let act = s.apply(Kernel::Relu, &[&shifted])?;
    let powered = s.apply(Kernel::PowN(pp.degree), &[&act])?;
    let delta = s.apply(Kernel::Abs, &[&pp.delta])?;
    let delta = delta.broadcast_to(powered.shape())?;
    let mut matched = s.scale_match(&[powered, delta])?;
    let delta = matched.pop().expect("two tensors");
    let powered = matched.pop().expect("two tensors");
    let delta = if pp.delta.payload()[0] != 0 {
        let payload = delta.payload().iter().map(|&d| d.max(1)).collect();
        let (data, scale) = delta.into_parts();
        ScaledTensor::new(
            IntTensor::new(data.shape().to_vec(), payload, data.precision())?,
            scale,
        )?
    } else {
        delta
    };
    s.apply(Kernel::Add, &[&powered, &delta])
}

/// Intermediates of one polynomial attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyAttentionTrace {
    /// `Q K^T / sqrt(d_head)`, `[T_q, T_k]`.
    pub scores: ScaledTensor,
    /// Unnormalized weights matched to one scale per query row.
    pub weights: ScaledTensor,
    /// `weights V`, `[T_q, d_head]`.
    pub numerator: ScaledTensor,
    /// Row sums of the weights, `[T_q, 1]`.
    pub denominator: ScaledTensor,
    pub output: ScaledTensor,
}

/// One head of polynomial attention, keeping every intermediate.
///
/// `q` is `[T_q, d_head]`, `k` and `v` are `[T_k, d_head]`.
pub fn poly_attention_traced(
    s: &mut Session,
    q: &ScaledTensor,
    k: &ScaledTensor,
    v: &ScaledTensor,
    pp: &QuantPoly,
    d_head: usize,
) -> Result<PolyAttentionTrace> {
    let (_, dq) = check_rank2(q, "query")?;
    let (tk, dk) = check_rank2(k, "key")?;
    let (tv, _) = check_rank2(v, "value")?;
    if dq != dk || tk != tv {
        return Err(Error::ShapeMismatch {
            op: "poly_attention",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let p = u32::from(s.precision().bits());
    let raw = s.apply(Kernel::MatMul, &[q, k])?;
    let scores = s.fold_scale(&raw, (d_head as f64).sqrt())?;
    let w = poly(s, &scores, pp)?;
    let weights = s.scale_match_dim(&w, 1)?;
    let vt = v.t()?;
    let numerator = s.apply(Kernel::MatMul, &[&weights, &vt])?;
    let denominator = s.apply(Kernel::SumReduce { axis: 1 }, &[&weights])?;
    let output = s.apply(Kernel::IntDiv { widen_bits: p }, &[&numerator, &denominator])?;
    Ok(PolyAttentionTrace {
        scores,
        weights,
        numerator,
        denominator,
        output,
    })
}

/// `PolyAttn(Q, K, V) = Poly(Q K^T / sqrt(d)) V / rowsum(Poly(Q K^T / sqrt(d)))`
pub fn poly_attention(
    s: &mut Session,
    q: &ScaledTensor,
    k: &ScaledTensor,
    v: &ScaledTensor,
    pp: &QuantPoly,
    d_head: usize,
) -> Result<ScaledTensor> {
    Ok(poly_attention_traced(s, q, k, v, pp, d_head)?.output)
}

/// `L1LN(x) = gain * (x - mu) / (C * mean|x - mu|) + bias` along the last axis.
///
/// Mean, centering and the L1 statistic are accumulated exactly at a widened internal
/// precision; only the normalized output is brought back to `p` bits. A row whose
/// centered L1 norm is zero normalizes to zero, so its output is `bias`.
pub fn l1_layer_norm(s: &mut Session, x: &ScaledTensor, ln: &QuantL1Ln) -> Result<ScaledTensor> {
    let rank = x.shape().len();
    if rank == 0 {
        return Err(Error::InvalidShape(x.shape().to_vec()));
    }
    let axis = rank - 1;
    let n = x.shape()[axis];
    if n != ln.width() {
        return Err(Error::ShapeMismatch {
            op: "l1_layer_norm",
            left: x.shape().to_vec(),
            right: ln.gain.shape().to_vec(),
        });
    }
    let p = s.precision();
    let extra = ceil_log2(n) + 1;
    let wide = p.widened(extra);
    let xm = s.scale_match_dim(x, axis)?.with_precision(wide);

    let sum = s.apply_at(Kernel::SumReduce { axis }, &[&xm], wide)?;
    let mean = s.fold_scale(&sum, n as f64)?;
    let minus_one = ScaledTensor::filled(vec![1; rank], -1, 1.0, wide)?;
    let neg_mean = s.apply_at(Kernel::EwMul, &[&mean, &minus_one], wide)?;
    let centered = s.apply_at(Kernel::Add, &[&xm, &neg_mean], wide)?;
    let dev = s.apply_at(Kernel::Abs, &[&centered], wide)?;
    let l1 = s.apply_at(Kernel::SumReduce { axis }, &[&dev], wide)?;
    let den = s.fold_scale(&l1, n as f64 / L1_NORM_CONSTANT)?;
    let den = guard_zero(den)?;

    let widen = u32::from(p.bits()) + extra;
    let y = s.apply_at(Kernel::IntDiv { widen_bits: widen }, &[&centered, &den], p)?;
    let g = s.apply(Kernel::EwMul, &[&y, &ln.gain])?;
    s.apply(Kernel::Add, &[&g, &ln.bias])
}

/// Replaces zero denominators by `{1, 1}`; the matching numerators are all zero.
fn guard_zero(den: ScaledTensor) -> Result<ScaledTensor> {
    if den.payload().iter().all(|&d| d != 0) {
        return Ok(den);
    }
    let dense = den.dense_scale();
    let (data, _) = den.into_parts();
    let (payload, scales): (Vec<i64>, Vec<f32>) = data
        .values()
        .iter()
        .zip(dense)
        .map(|(&d, sc)| if d == 0 { (1, 1.0) } else { (d, sc) })
        .unzip();
    let shape = data.shape().to_vec();
    ScaledTensor::new(
        IntTensor::new(shape.clone(), payload, data.precision())?,
        ScaleTensor::new(shape, scales)?,
    )
}

/// Multi-head polynomial attention: projections, per-head attention, output projection.
pub fn attention_block(
    s: &mut Session,
    a: &ScaledTensor,
    layer: &TransformerLayerParams,
) -> Result<ScaledTensor> {
    check_rank2(a, "attention input")?;
    let q = s.apply(Kernel::MatMul, &[a, &layer.wq])?;
    let k = s.apply(Kernel::MatMul, &[a, &layer.wk])?;
    let v = s.apply(Kernel::MatMul, &[a, &layer.wv])?;
    let dh = layer.d_model / layer.heads;
    let heads = (0..layer.heads)
        .map(|h| {
            let qh = q.narrow(1, h * dh, dh)?;
            let kh = k.narrow(1, h * dh, dh)?;
            let vh = v.narrow(1, h * dh, dh)?;
            poly_attention(s, &qh, &kh, &vh, &layer.poly, dh)
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = ScaledTensor::concat(&heads, 1)?;
    s.apply(Kernel::MatMul, &[&merged, &layer.wo])
}

/// `ReLU(a W1^T + b1) W2^T + b2`
pub fn ffn_block(
    s: &mut Session,
    a: &ScaledTensor,
    layer: &TransformerLayerParams,
) -> Result<ScaledTensor> {
    check_rank2(a, "ffn input")?;
    let h = s.apply(Kernel::MatMul, &[a, &layer.w1])?;
    let h = s.apply(Kernel::Add, &[&h, &layer.b1])?;
    let h = s.apply(Kernel::Relu, &[&h])?;
    let f = s.apply(Kernel::MatMul, &[&h, &layer.w2])?;
    s.apply(Kernel::Add, &[&f, &layer.b2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scale::{dequantize, quantize_auto, Precision, ScaleGranularity};
    use crate::tensor::RationalTensor;

    fn q(shape: Vec<usize>, v: Vec<f32>) -> ScaledTensor {
        quantize_auto(
            &RationalTensor::new(shape, v).unwrap(),
            ScaleGranularity::PerRow,
            Precision::INT8,
        )
        .unwrap()
    }

    fn identity_ln(n: usize) -> QuantL1Ln {
        QuantL1Ln {
            gain: q(vec![1, n], vec![1.0; n]),
            bias: q(vec![1, n], vec![0.0; n]),
        }
    }

    #[test]
    fn ceil_log2_values() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(32), 5);
        assert_eq!(ceil_log2(33), 6);
    }

    #[test]
    fn constant_row_normalizes_to_bias() {
        let mut s = Session::new(Precision::INT8);
        let ln = QuantL1Ln {
            gain: q(vec![1, 4], vec![1.0; 4]),
            bias: q(vec![1, 4], vec![0.5, -0.25, 0.0, 1.0]),
        };
        let x = q(vec![1, 4], vec![3.0; 4]);
        let out = l1_layer_norm(&mut s, &x, &ln).unwrap();
        assert_eq!(dequantize(&out), dequantize(&ln.bias));
        assert!(s.log().is_integer_pure());
    }

    #[test]
    fn l1_norm_output_has_zero_mean_and_unit_scale() {
        let mut s = Session::new(Precision::new(12).unwrap());
        let vals: Vec<f32> = (0..16).map(|i| ((i * 7) % 11) as f32 - 4.0).collect();
        let x = quantize_auto(
            &RationalTensor::new(vec![1, 16], vals.clone()).unwrap(),
            ScaleGranularity::PerRow,
            Precision::new(12).unwrap(),
        )
        .unwrap();
        let ln = QuantL1Ln {
            gain: quantize_auto(
                &RationalTensor::new(vec![1, 16], vec![1.0; 16]).unwrap(),
                ScaleGranularity::PerRow,
                Precision::new(12).unwrap(),
            )
            .unwrap(),
            bias: ScaledTensor::filled(vec![1, 16], 0, 1.0, Precision::new(12).unwrap()).unwrap(),
        };
        let y = dequantize(&l1_layer_norm(&mut s, &x, &ln).unwrap());
        let mean: f64 = y.values().iter().map(|&v| f64::from(v)).sum::<f64>() / 16.0;
        let mad: f64 = y.values().iter().map(|&v| f64::from(v).abs()).sum::<f64>() / 16.0;
        assert!(mean.abs() < 5e-3, "mean {mean}");
        assert!((mad * L1_NORM_CONSTANT - 1.0).abs() < 5e-3, "mad {mad}");
    }

    #[test]
    fn poly_weights_are_positive() {
        let mut s = Session::new(Precision::INT8);
        let pp = QuantPoly {
            bias: q(vec![1, 1], vec![0.1]),
            delta: q(vec![1, 1], vec![-0.01]),
            degree: 3,
        };
        let scores = q(vec![2, 3], vec![-3.0, 0.0, 2.5, -1.0, -2.0, -0.5]);
        let w = poly(&mut s, &scores, &pp).unwrap();
        assert!(w.payload().iter().all(|&x| x > 0));
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut s = Session::new(Precision::new(10).unwrap());
        let p = Precision::new(10).unwrap();
        let pp = QuantPoly {
            bias: ScaledTensor::filled(vec![1, 1], 0, 1.0, p).unwrap(),
            delta: ScaledTensor::filled(vec![1, 1], 1, 1.0, p).unwrap(),
            degree: 3,
        };
        let zeros = ScaledTensor::filled(vec![2, 2], 0, 1.0, p).unwrap();
        let v = quantize_auto(
            &RationalTensor::new(vec![3, 2], vec![1.0, -2.0, 2.0, 0.5, 3.0, 1.0]).unwrap(),
            ScaleGranularity::PerRow,
            p,
        )
        .unwrap();
        let k = ScaledTensor::filled(vec![3, 2], 0, 1.0, p).unwrap();
        let out = dequantize(&poly_attention(&mut s, &zeros, &k, &v, &pp, 2).unwrap());
        let dv = dequantize(&v);
        for row in 0..2 {
            for c in 0..2 {
                let mean = (0..3).map(|r| dv.values()[r * 2 + c]).sum::<f32>() / 3.0;
                assert!((out.values()[row * 2 + c] - mean).abs() < 0.02);
            }
        }
    }

    #[test]
    fn l1_norm_rejects_width_mismatch() {
        let mut s = Session::new(Precision::INT8);
        let x = q(vec![2, 3], vec![1.0; 6]);
        assert!(l1_layer_norm(&mut s, &x, &identity_ln(4)).is_err());
    }
}
