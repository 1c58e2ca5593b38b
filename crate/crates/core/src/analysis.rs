//! Precision-loss attribution, module ablation, storage and speed-up accounting.
//!
//! Output reports are line oriented: one tab-separated `tag, layer, metric, value`
//! record per line. MSE stands in for task metrics (BLEU / perplexity), which need
//! trained models.

use std::ops::RangeInclusive;

use serde::Serialize;

use crate::audit::{AuditOp, FloatOp, KernelKind, ModuleSet, ModuleTag, OpAuditLog};
use crate::error::{Error, Result};
use crate::format::ModelFile;
use crate::ops::Kernel;
use crate::protocol::Session;
use crate::scale::{dequantize, Precision, ScaleGranularity};
use crate::tensor::{RationalTensor, ScaledTensor};
use crate::transformer::reference::{self, AttentionFlavor};
use crate::transformer::{
    reference_forward, reference_forward_traced, Activation, FloatModel, IntegerModel,
    L1LnParams, MixedForward, ReferenceModel, TransformerLayerParams,
};

/// Sum of squared differences and element count.
fn sq_err(a: &RationalTensor, b: &RationalTensor) -> Result<(f64, f64, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (mut err, mut norm) = (0.0, 0.0);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        err += (f64::from(x) - f64::from(y)).powi(2);
        norm += f64::from(y).powi(2);
    }
    Ok((err, norm, a.len()))
}

pub fn mse(a: &RationalTensor, b: &RationalTensor) -> Result<f64> {
    let (err, _, n) = sq_err(a, b)?;
    Ok(if n == 0 { 0.0 } else { err / n as f64 })
}

/// `sum (a - b)^2 / sum b^2`, with `b` the reference.
pub fn relative_error(a: &RationalTensor, reference: &RationalTensor) -> Result<f64> {
    let (err, norm, _) = sq_err(a, reference)?;
    Ok(if norm == 0.0 { err } else { err / norm })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecisionEntry {
    pub module: ModuleTag,
    /// `None` for the embedding and the output projection.
    pub layer: Option<usize>,
    pub mse: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct PrecisionReport {
    pub entries: Vec<PrecisionEntry>,
}

impl PrecisionReport {
    pub fn get(&self, module: ModuleTag, layer: Option<usize>) -> Option<&PrecisionEntry> {
        self.entries
            .iter()
            .find(|e| e.module == module && e.layer == layer)
    }

    /// `tag, layer, metric, value` lines; the layer column is `-` for Emb and Proj.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let layer = e.layer.map_or("-".to_string(), |l| l.to_string());
            out.push_str(&format!("{}\t{layer}\tmse\t{:e}\n", e.module.name(), e.mse));
        }
        out
    }
}

/// Per module and layer MSE between the FP32 reference activations and the
/// de-quantized integer activations. Taps of the same module in one layer (the two
/// norms, the two residual adds) are pooled.
pub fn precision_loss(
    model_int: &IntegerModel,
    model_ref: &ReferenceModel,
    inputs: &[RationalTensor],
) -> Result<PrecisionReport> {
    let mut acc: Vec<(ModuleTag, Option<usize>, f64, usize)> = Vec::new();
    for x in inputs {
        let xq = model_int.quantize_input(x)?;
        let mut s = Session::new(model_int.precision);
        let int = MixedForward {
            integer_model: Some(model_int),
            float_model: None,
            integer: ModuleSet::all(),
            flavor: AttentionFlavor::Poly,
            eps: 0.0,
            collect_taps: true,
        }
        .run(&mut s, Activation::Int(xq))?;
        let real = reference_forward_traced(model_ref, x)?;
        if int.taps.len() != real.taps.len() {
            return Err(Error::InvalidArgument("reference and integer models differ in depth".into()));
        }
        for (a, b) in int.taps.iter().zip(&real.taps) {
            if (a.module, a.layer) != (b.module, b.layer) {
                return Err(Error::InvalidArgument("activation taps out of order".into()));
            }
            let (err, _, n) = sq_err(&a.value, &b.value)?;
            match acc.iter_mut().find(|e| (e.0, e.1) == (a.module, a.layer)) {
                Some(e) => {
                    e.2 += err;
                    e.3 += n;
                }
                None => acc.push((a.module, a.layer, err, n)),
            }
        }
    }
    Ok(PrecisionReport {
        entries: acc
            .into_iter()
            .map(|(module, layer, err, n)| PrecisionEntry {
                module,
                layer,
                mse: if n == 0 { 0.0 } else { err / n as f64 },
                elements: n,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub modules: Vec<ModuleTag>,
    /// Output (logit) MSE against the all-FP32 run.
    pub mse: f64,
    pub relative: f64,
}

/// Runs the modules in `set` on the integer path and the rest in FP32 (with
/// quantize / de-quantize at every boundary), comparing logits with the FP32 twin.
pub fn module_ablation(
    model: &IntegerModel,
    inputs: &[RationalTensor],
    set: ModuleSet,
) -> Result<AblationResult> {
    let twin = model.dequantize();
    let reference = ReferenceModel::poly(twin.clone());
    let (mut err, mut norm, mut n) = (0.0, 0.0, 0usize);
    for x in inputs {
        let mut s = Session::new(model.precision);
        let out = MixedForward::new(model, &twin, set).run(&mut s, Activation::Real(x.clone()))?;
        let r = reference_forward(&reference, x)?;
        let (e, nm, k) = sq_err(&out.logits.to_real(), &r.logits.to_real())?;
        err += e;
        norm += nm;
        n += k;
    }
    Ok(AblationResult {
        modules: set.iter().collect(),
        mse: if n == 0 { 0.0 } else { err / n as f64 },
        relative: if norm == 0.0 { err } else { err / norm },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StorageReport {
    /// Size of the FP32 model file.
    pub fp32_bytes: usize,
    /// Integer model file size minus its scale records (header and payload records).
    pub int8_payload_bytes: usize,
    /// Bytes of the `.scale` records.
    pub scale_bytes: usize,
    /// `fp32_bytes / (int8_payload_bytes + scale_bytes)`
    pub ratio: f64,
    /// Tensor data bytes only, FP32 over integer payload: 4 for `p <= 7`.
    pub payload_only_ratio: f64,
}

impl StorageReport {
    pub fn to_tsv(&self) -> String {
        format!(
            "storage\t-\tfp32_bytes\t{}\nstorage\t-\tint_payload_bytes\t{}\nstorage\t-\tscale_bytes\t{}\nstorage\t-\tratio\t{:.6}\nstorage\t-\tpayload_only_ratio\t{:.6}\n",
            self.fp32_bytes, self.int8_payload_bytes, self.scale_bytes, self.ratio, self.payload_only_ratio
        )
    }
}

/// Byte accounting from the serialized integer model and its FP32 twin.
pub fn storage_report(model: &IntegerModel) -> Result<StorageReport> {
    let int_file = ModelFile::from_integer(model);
    let fp_file = ModelFile::from_float(&model.dequantize(), model.granularity);
    storage_report_files(&fp_file, &int_file)
}

pub fn storage_report_files(fp32: &ModelFile, int: &ModelFile) -> Result<StorageReport> {
    if fp32.is_integer() || !int.is_integer() {
        return Err(Error::InvalidArgument("expected an FP32 and an integer model file".into()));
    }
    let fp32_bytes = fp32.to_bytes().len();
    let int_bytes = int.to_bytes().len();
    let scale_bytes: usize = int
        .records
        .iter()
        .filter(|r| r.is_scale())
        .map(|r| r.encoded_len())
        .sum();
    let data_bytes = |f: &ModelFile| -> usize {
        f.records
            .iter()
            .filter(|r| !r.is_scale())
            .map(|r| r.data.len() * r.data.dtype().width())
            .sum()
    };
    let int_data = data_bytes(int);
    Ok(StorageReport {
        fp32_bytes,
        int8_payload_bytes: int_bytes - scale_bytes,
        scale_bytes,
        ratio: fp32_bytes as f64 / int_bytes as f64,
        payload_only_ratio: if int_data == 0 {
            0.0
        } else {
            data_bytes(fp32) as f64 / int_data as f64
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupEstimate {
    /// Share of total work per operation name, in first-seen order.
    pub shares: Vec<(String, f64)>,
    /// Share of work in integer matrix multiplications.
    pub accelerable_share: f64,
    pub factor: f64,
    pub estimate: f64,
}

impl SpeedupEstimate {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (op, share) in &self.shares {
            out.push_str(&format!("speedup\t-\tshare:{op}\t{share:.6}\n"));
        }
        out.push_str(&format!("speedup\t-\taccelerable_share\t{:.6}\n", self.accelerable_share));
        out.push_str(&format!("speedup\t-\tfactor\t{}\n", self.factor));
        out.push_str(&format!("speedup\t-\testimate\t{:.6}\n", self.estimate));
        out
    }
}

/// Amdahl's law: `1 / (share / factor + (1 - share))`.
pub fn amdahl(accelerable_share: f64, factor: f64) -> f64 {
    1.0 / (accelerable_share / factor + (1.0 - accelerable_share))
}

/// Estimates the end-to-end speed-up when integer matrix multiplications run `factor`
/// times faster, using each record's work as its time proxy.
pub fn speedup_estimate(log: &OpAuditLog, factor: f64) -> Result<SpeedupEstimate> {
    if log.is_empty() {
        return Err(Error::EmptyInput("speedup_estimate"));
    }
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!("speed-up factor {factor} must be >= 1")));
    }
    let total: u64 = log.records().iter().map(|r| r.work).sum();
    if total == 0 {
        return Err(Error::EmptyInput("speedup_estimate"));
    }
    let mut shares: Vec<(String, f64)> = Vec::new();
    let mut accel = 0u64;
    for r in log.records() {
        if r.op == AuditOp::Kernel(KernelKind::MatMul) {
            accel += r.work;
        }
        let w = r.work as f64 / total as f64;
        match shares.iter_mut().find(|(n, _)| n == r.op.name()) {
            Some((_, s)) => *s += w,
            None => shares.push((r.op.name().to_string(), w)),
        }
    }
    let share = accel as f64 / total as f64;
    Ok(SpeedupEstimate {
        shares,
        accelerable_share: share,
        factor,
        estimate: amdahl(share, factor),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub bits: u32,
    /// Logit MSE against the FP32 model.
    pub mse: f64,
    pub relative: f64,
}

/// Quantizes `model` at each precision in `bits` and compares integer logits with the
/// FP32 model's.
pub fn bit_sweep(
    model: &FloatModel,
    inputs: &[RationalTensor],
    bits: RangeInclusive<u32>,
    granularity: ScaleGranularity,
) -> Result<Vec<SweepPoint>> {
    let reference = ReferenceModel::poly(model.clone());
    let refs = inputs
        .iter()
        .map(|x| Ok(reference_forward(&reference, x)?.logits.to_real()))
        .collect::<Result<Vec<_>>>()?;
    bits.map(|b| {
        let m = model.quantize(Precision::new(b)?, granularity)?;
        let (mut err, mut norm, mut n) = (0.0, 0.0, 0usize);
        for (x, r) in inputs.iter().zip(&refs) {
            let logits = integer_logits(&m, x)?;
            let (e, nm, k) = sq_err(&dequantize(&logits), r)?;
            err += e;
            norm += nm;
            n += k;
        }
        Ok(SweepPoint {
            bits: b,
            mse: if n == 0 { 0.0 } else { err / n as f64 },
            relative: if norm == 0.0 { err } else { err / norm },
        })
    })
    .collect()
}

/// Quantizes `x` and runs the integer model through to the logits.
pub fn integer_logits(model: &IntegerModel, x: &RationalTensor) -> Result<ScaledTensor> {
    let xq = model.quantize_input(x)?;
    let mut s = Session::new(model.precision);
    let h = model.forward(&mut s, &xq)?;
    model.logits(&mut s, &h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub tokens: Vec<usize>,
    pub log: OpAuditLog,
}

/// Greedy toy decoding. The prompt is quantized once (the per-sequence preparation
/// step); each step then re-runs the integer model on the whole prefix,
/// de-quantizes the last row of logits and normalizes it in FP32, then appends the
/// chosen token's output-projection row (still integer) as the next input.
pub fn decode_trace(model: &IntegerModel, prompt: &RationalTensor, steps: usize) -> Result<DecodeTrace> {
    let mut s = Session::new(model.precision);
    let mut seq = s.quantize(prompt, model.granularity)?;
    let mut tokens = Vec::with_capacity(steps);
    for _ in 0..steps {
        let h = model.forward(&mut s, &seq)?;
        let t = h.shape()[0];
        let last = h.narrow(0, t - 1, 1)?;
        let logits = model.logits(&mut s, &last)?;
        s.set_module(None);
        let real = s.dequantize(&logits);
        let probs = reference::softmax_rows(&real)?;
        s.record_float(FloatOp::Softmax, probs.shape(), 3 * probs.len() as u64);
        let token = probs
            .values()
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0;
        tokens.push(token);
        let row = model.proj.narrow(0, token, 1)?;
        seq = ScaledTensor::concat(&[seq, row], 0)?;
    }
    Ok(DecodeTrace {
        tokens,
        log: s.into_log(),
    })
}

/// One-sided exact binomial sign test: `P(X >= successes)` for `X ~ Bin(trials, 1/2)`.
pub fn sign_test(successes: usize, trials: usize) -> f64 {
    if successes > trials {
        return 0.0;
    }
    // Work in log space to stay exact enough for large trial counts.
    let ln_choose = |n: usize, k: usize| -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
    };
    let ln_half = trials as f64 * 0.5f64.ln();
    (successes..=trials)
        .map(|k| (ln_choose(trials, k) + ln_half).exp())
        .sum::<f64>()
        .min(1.0)
}

/// The conventional FFN sublayer in which every integer operation is sandwiched between
/// quantization and de-quantization: norm and residual add run in FP32.
pub fn canonical_ffn(
    s: &mut Session,
    x: &ScaledTensor,
    layer: &TransformerLayerParams,
    ln: &L1LnParams,
    flavor: AttentionFlavor,
) -> Result<RationalTensor> {
    let prev = s.set_module(Some(ModuleTag::Ffn));
    let g = ScaleGranularity::PerRow;
    let r2 = s.dequantize(x);
    let r3 = match flavor {
        AttentionFlavor::Poly => reference::l1_layer_norm(&r2, ln)?,
        AttentionFlavor::Softmax => reference::l2_layer_norm(&r2, ln, 1e-5)?,
    };
    s.record_float(FloatOp::Norm, r3.shape(), 4 * r3.len() as u64);
    let x4 = s.quantize(&r3, g)?;
    let x5 = s.apply(Kernel::MatMul, &[&x4, &layer.w1])?;
    let x5 = s.apply(Kernel::Add, &[&x5, &layer.b1])?;
    let x6 = s.apply(Kernel::Relu, &[&x5])?;
    let r7 = s.dequantize(&x6);
    let x8 = s.quantize(&r7, g)?;
    let x9 = s.apply(Kernel::MatMul, &[&x8, &layer.w2])?;
    let r10 = s.dequantize(&x9);
    let r10 = reference::add(&r10, &dequantize(&layer.b2))?;
    let r1 = s.dequantize(x);
    let r11 = reference::add(&r10, &r1)?;
    s.record_float(FloatOp::Add, r11.shape(), 2 * r11.len() as u64);
    s.set_module(prev);
    Ok(r11)
}
