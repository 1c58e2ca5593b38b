//! The scale propagation protocol: run a kernel in the wide lane, re-scale when any
//! payload leaves the `p`-bit range, and record the invocation.

use crate::audit::{AuditOp, AuditRecord, FloatOp, Lane, ModuleTag, OpAuditLog};
use crate::error::{Error, Result};
use crate::ops::Kernel;
use crate::scale::{
    self, dequantize, quantize_auto, rescale, MatchRule, Precision, ScaleGranularity,
};
use crate::tensor::{numel, IntTensor, RationalTensor, ScaleTensor, ScaledTensor};

/// Applies `kernel` to `ins`, re-scales out-of-range results and appends exactly one
/// record to `log`.
pub fn protocol_apply(
    kernel: Kernel,
    ins: &[&ScaledTensor],
    prec: Precision,
    rule: MatchRule,
    log: &mut OpAuditLog,
    module: Option<ModuleTag>,
) -> Result<ScaledTensor> {
    let raw = kernel.eval(ins, rule)?;
    let work = kernel.work(ins, &raw);
    let (out, rescaled) = finish(raw, prec)?;
    log.push(AuditRecord {
        op: AuditOp::Kernel(kernel.kind()),
        lane: Lane::Payload,
        elements: out.payload().len(),
        work,
        rescaled,
        module,
    });
    Ok(out)
}

/// Re-scales if any `|x| > 2^p - 1`, then checks the logical-precision invariant.
pub fn finish(t: ScaledTensor, prec: Precision) -> Result<(ScaledTensor, bool)> {
    let q = prec.max_magnitude();
    let (data, scale) = t.into_parts();
    let rescaled = data.max_abs() > q;
    let out = if rescaled {
        rescale(&data, &scale, prec)?
    } else {
        let data = IntTensor::new(data.shape().to_vec(), data.values().to_vec(), prec)?;
        ScaledTensor::new(data, scale)?
    };
    if let Some(&v) = out.payload().iter().find(|v| v.abs() > q) {
        return Err(Error::PrecisionViolation {
            value: v,
            precision: prec.bits(),
        });
    }
    Ok((out, rescaled))
}

/// One inference session: precision, matching rule and the audit log it writes to.
#[derive(Debug, Clone)]
pub struct Session {
    precision: Precision,
    rule: MatchRule,
    module: Option<ModuleTag>,
    log: OpAuditLog,
}

impl Session {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            rule: MatchRule::default(),
            module: None,
            log: OpAuditLog::new(),
        }
    }

    pub fn with_rule(mut self, rule: MatchRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn rule(&self) -> MatchRule {
        self.rule
    }

    pub fn log(&self) -> &OpAuditLog {
        &self.log
    }

    pub fn into_log(self) -> OpAuditLog {
        self.log
    }

    pub fn module(&self) -> Option<ModuleTag> {
        self.module
    }

    /// Tags subsequent records with `module`; returns the previous tag.
    pub fn set_module(&mut self, module: Option<ModuleTag>) -> Option<ModuleTag> {
        std::mem::replace(&mut self.module, module)
    }

    fn record(&mut self, op: AuditOp, lane: Lane, elements: usize, work: u64) {
        self.log.push(AuditRecord {
            op,
            lane,
            elements,
            work,
            rescaled: false,
            module: self.module,
        });
    }

    pub fn apply(&mut self, kernel: Kernel, ins: &[&ScaledTensor]) -> Result<ScaledTensor> {
        protocol_apply(kernel, ins, self.precision, self.rule, &mut self.log, self.module)
    }

    /// Like [`Session::apply`] but enforcing `prec` instead of the session precision.
    pub(crate) fn apply_at(
        &mut self,
        kernel: Kernel,
        ins: &[&ScaledTensor],
        prec: Precision,
    ) -> Result<ScaledTensor> {
        protocol_apply(kernel, ins, prec, self.rule, &mut self.log, self.module)
    }

    pub fn scale_match(&mut self, ts: &[ScaledTensor]) -> Result<Vec<ScaledTensor>> {
        let out = scale::scale_match_with(ts, self.rule)?;
        let n: usize = out.iter().map(|t| t.payload().len()).sum();
        self.record(AuditOp::ScaleMatch, Lane::Payload, n, n as u64);
        Ok(out)
    }

    pub fn scale_match_dim(&mut self, t: &ScaledTensor, axis: usize) -> Result<ScaledTensor> {
        let out = scale::scale_match_dim_with(t, axis, self.rule)?;
        if out.scale().shape() != t.scale().shape() {
            let n = out.payload().len();
            self.record(AuditOp::ScaleMatch, Lane::Payload, n, n as u64);
        }
        Ok(out)
    }

    /// Multiplies every scale by `factor`, dividing the represented value by it.
    pub fn fold_scale(&mut self, t: &ScaledTensor, factor: f64) -> Result<ScaledTensor> {
        let s = t.scale();
        let values = s
            .values()
            .iter()
            .map(|&v| (f64::from(v) * factor) as f32)
            .collect();
        let scale = ScaleTensor::new(s.shape().to_vec(), values)?;
        self.record(AuditOp::ScaleFold, Lane::Scale, s.len(), s.len() as u64);
        ScaledTensor::new(t.data().clone(), scale)
    }

    pub fn quantize(&mut self, r: &RationalTensor, g: ScaleGranularity) -> Result<ScaledTensor> {
        let out = quantize_auto(r, g, self.precision)?;
        self.record(AuditOp::Quantize, Lane::Payload, r.len(), r.len() as u64);
        Ok(out)
    }

    pub fn dequantize(&mut self, t: &ScaledTensor) -> RationalTensor {
        let n = t.payload().len();
        self.record(AuditOp::Dequantize, Lane::Payload, n, n as u64);
        dequantize(t)
    }

    /// Records a floating point operation on tensor values.
    pub fn record_float(&mut self, op: FloatOp, shape: &[usize], work: u64) {
        self.record(AuditOp::Float(op), Lane::Payload, numel(shape), work);
    }
}
