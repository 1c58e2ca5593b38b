//! FP32 reference blocks. Values are stored as `f32` between blocks and accumulated in
//! `f64` inside them.

use super::params::{FloatLayer, FloatModel, L1LnParams, PolyParams, L1_NORM_CONSTANT};
use crate::error::{Error, Result};
use crate::tensor::RationalTensor;

/// Which attention and normalization blocks the FP32 model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionFlavor {
    /// Polynomial attention with L1 layer norm: the FP32 twin of the integer model.
    #[default]
    Poly,
    /// Softmax attention with the usual square-root layer norm.
    Softmax,
}

/// An FP32 model together with the blocks it should run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub model: FloatModel,
    pub flavor: AttentionFlavor,
    /// Variance epsilon of the softmax flavor's layer norm.
    pub eps: f32,
}

impl ReferenceModel {
    pub fn poly(model: FloatModel) -> Self {
        Self {
            model,
            flavor: AttentionFlavor::Poly,
            eps: 1e-5,
        }
    }

    pub fn softmax(model: FloatModel) -> Self {
        Self {
            model,
            flavor: AttentionFlavor::Softmax,
            eps: 1e-5,
        }
    }
}

pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &RationalTensor) -> Result<Self> {
        match *t.shape() {
            [rows, cols] => Ok(Self {
                rows,
                cols,
                v: t.values().iter().map(|&x| f64::from(x)).collect(),
            }),
            _ => Err(Error::InvalidArgument(format!(
                "expected a rank-2 tensor, got shape {:?}",
                t.shape()
            ))),
        }
    }

    pub fn into_tensor(self) -> Result<RationalTensor> {
        RationalTensor::new(
            vec![self.rows, self.cols],
            self.v.into_iter().map(|x| x as f32).collect(),
        )
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.v[r * self.cols..(r + 1) * self.cols]
    }
}

/// `a b_t^T` for `a: [m, k]`, `b_t: [n, k]`.
pub fn matmul_t(a: &RationalTensor, b_t: &RationalTensor) -> Result<RationalTensor> {
    let (a, b) = (Mat::from_tensor(a)?, Mat::from_tensor(b_t)?);
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: vec![a.rows, a.cols],
            right: vec![b.rows, b.cols],
        });
    }
    let mut v = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            v.push(a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum());
        }
    }
    Mat {
        rows: a.rows,
        cols: b.rows,
        v,
    }
    .into_tensor()
}

/// `a + b` where `b` is either shaped like `a` or a `[1, n]` row broadcast over `a`.
pub fn add(a: &RationalTensor, b: &RationalTensor) -> Result<RationalTensor> {
    let (am, bm) = (Mat::from_tensor(a)?, Mat::from_tensor(b)?);
    if am.cols != bm.cols || (bm.rows != am.rows && bm.rows != 1) {
        return Err(Error::ShapeMismatch {
            op: "add",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let v = (0..am.rows)
        .flat_map(|r| {
            let br = if bm.rows == 1 { 0 } else { r };
            am.row(r)
                .iter()
                .zip(bm.row(br))
                .map(|(x, y)| x + y)
                .collect::<Vec<_>>()
        })
        .collect();
    Mat { v, ..am }.into_tensor()
}

pub fn relu(a: &RationalTensor) -> RationalTensor {
    RationalTensor::new(
        a.shape().to_vec(),
        a.values().iter().map(|&x| x.max(0.0)).collect(),
    )
    .expect("relu keeps values finite")
}

fn check_ln(x: &Mat, ln: &L1LnParams) -> Result<()> {
    if ln.width() != x.cols || ln.bias.len() != x.cols {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: vec![x.rows, x.cols],
            right: ln.gain.shape().to_vec(),
        });
    }
    Ok(())
}

fn normalize_rows(
    x: &RationalTensor,
    ln: &L1LnParams,
    spread: impl Fn(&[f64]) -> f64,
) -> Result<RationalTensor> {
    let m = Mat::from_tensor(x)?;
    check_ln(&m, ln)?;
    let n = m.cols as f64;
    let mut v = Vec::with_capacity(m.v.len());
    for r in 0..m.rows {
        let row = m.row(r);
        let mu = row.iter().sum::<f64>() / n;
        let c: Vec<f64> = row.iter().map(|x| x - mu).collect();
        let den = spread(&c);
        for (j, cj) in c.iter().enumerate() {
            let y = if den == 0.0 { 0.0 } else { cj / den };
            v.push(y * f64::from(ln.gain.values()[j]) + f64::from(ln.bias.values()[j]));
        }
    }
    Mat { v, ..m }.into_tensor()
}

/// L1 layer norm: `(x - mu) / (C * mean|x - mu|)` with `C = sqrt(pi / 2)`.
pub fn l1_layer_norm(x: &RationalTensor, ln: &L1LnParams) -> Result<RationalTensor> {
    normalize_rows(x, ln, |c| {
        L1_NORM_CONSTANT * c.iter().map(|v| v.abs()).sum::<f64>() / c.len() as f64
    })
}

/// Standard layer norm: `(x - mu) / sqrt(var + eps)`.
pub fn l2_layer_norm(x: &RationalTensor, ln: &L1LnParams, eps: f32) -> Result<RationalTensor> {
    normalize_rows(x, ln, |c| {
        (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64 + f64::from(eps)).sqrt()
    })
}

fn scores(q: &Mat, k: &Mat, d_head: usize) -> Result<Mat> {
    if q.cols != k.cols {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: vec![q.rows, q.cols],
            right: vec![k.rows, k.cols],
        });
    }
    let scale = (d_head as f64).sqrt();
    let mut v = Vec::with_capacity(q.rows * k.rows);
    for i in 0..q.rows {
        for j in 0..k.rows {
            v.push(q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() / scale);
        }
    }
    Ok(Mat {
        rows: q.rows,
        cols: k.rows,
        v,
    })
}

fn normalize_weights(mut w: Mat) -> Mat {
    for r in 0..w.rows {
        let row = &mut w.v[r * w.cols..(r + 1) * w.cols];
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= sum);
    }
    w
}

/// Row-normalized polynomial attention weights.
pub fn poly_attention_weights(
    q: &RationalTensor,
    k: &RationalTensor,
    poly: &PolyParams,
    d_head: usize,
) -> Result<RationalTensor> {
    poly_weights(&Mat::from_tensor(q)?, &Mat::from_tensor(k)?, poly, d_head)?.into_tensor()
}

fn poly_weights(q: &Mat, k: &Mat, poly: &PolyParams, d_head: usize) -> Result<Mat> {
    let mut s = scores(q, k, d_head)?;
    s.v.iter_mut().for_each(|x| *x = poly.eval(*x));
    Ok(normalize_weights(s))
}

/// Softmax attention weights.
pub fn softmax_weights(q: &RationalTensor, k: &RationalTensor, d_head: usize) -> Result<RationalTensor> {
    softmax_w(&Mat::from_tensor(q)?, &Mat::from_tensor(k)?, d_head)?.into_tensor()
}

fn softmax_w(q: &Mat, k: &Mat, d_head: usize) -> Result<Mat> {
    let mut s = scores(q, k, d_head)?;
    for r in 0..s.rows {
        let row = &mut s.v[r * s.cols..(r + 1) * s.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|x| *x = (*x - max).exp());
    }
    Ok(normalize_weights(s))
}

fn weighted_values(w: &Mat, v: &Mat) -> Result<RationalTensor> {
    if w.cols != v.rows {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: vec![w.rows, w.cols],
            right: vec![v.rows, v.cols],
        });
    }
    let mut out = vec![0.0; w.rows * v.cols];
    for i in 0..w.rows {
        for j in 0..w.cols {
            let wij = w.v[i * w.cols + j];
            for c in 0..v.cols {
                out[i * v.cols + c] += wij * v.v[j * v.cols + c];
            }
        }
    }
    Mat {
        rows: w.rows,
        cols: v.cols,
        v: out,
    }
    .into_tensor()
}

pub fn poly_attention(
    q: &RationalTensor,
    k: &RationalTensor,
    v: &RationalTensor,
    poly: &PolyParams,
    d_head: usize,
) -> Result<RationalTensor> {
    let w = poly_weights(&Mat::from_tensor(q)?, &Mat::from_tensor(k)?, poly, d_head)?;
    weighted_values(&w, &Mat::from_tensor(v)?)
}

pub fn softmax_attention(
    q: &RationalTensor,
    k: &RationalTensor,
    v: &RationalTensor,
    d_head: usize,
) -> Result<RationalTensor> {
    let w = softmax_w(&Mat::from_tensor(q)?, &Mat::from_tensor(k)?, d_head)?;
    weighted_values(&w, &Mat::from_tensor(v)?)
}

/// Multi-head attention block on a normalized input `a: [T, d]`.
pub fn attention_block(
    a: &RationalTensor,
    layer: &FloatLayer,
    heads: usize,
    flavor: AttentionFlavor,
) -> Result<RationalTensor> {
    let q = matmul_t(a, &layer.wq)?;
    let k = matmul_t(a, &layer.wk)?;
    let v = matmul_t(a, &layer.wv)?;
    let d = q.shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!("{d} columns do not split into {heads} heads")));
    }
    let dh = d / heads;
    let outs = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = (
                q.narrow(1, h * dh, dh)?,
                k.narrow(1, h * dh, dh)?,
                v.narrow(1, h * dh, dh)?,
            );
            match flavor {
                AttentionFlavor::Poly => poly_attention(&qh, &kh, &vh, &layer.poly, dh),
                AttentionFlavor::Softmax => softmax_attention(&qh, &kh, &vh, dh),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    matmul_t(&RationalTensor::concat(&outs, 1)?, &layer.wo)
}

/// `ReLU(a W1^T + b1) W2^T + b2`
pub fn ffn_block(a: &RationalTensor, layer: &FloatLayer) -> Result<RationalTensor> {
    let h = relu(&add(&matmul_t(a, &layer.w1)?, &layer.b1)?);
    add(&matmul_t(&h, &layer.w2)?, &layer.b2)
}

/// Numerically stable softmax over the last axis of a rank-2 tensor.
pub fn softmax_rows(x: &RationalTensor) -> Result<RationalTensor> {
    let mut m = Mat::from_tensor(x)?;
    for r in 0..m.rows {
        let row = &mut m.v[r * m.cols..(r + 1) * m.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|x| *x = (*x - max).exp());
    }
    normalize_weights(m).into_tensor()
}
