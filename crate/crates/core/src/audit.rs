//! Append-only record of every operation executed during an inference session.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The integer kernels of the scale-propagation operation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    Add,
    EwMul,
    MatMul,
    PowN,
    Abs,
    Relu,
    SumReduce,
    IntDiv,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Add => "add",
            KernelKind::EwMul => "ew_mul",
            KernelKind::MatMul => "matmul",
            KernelKind::PowN => "pow_n",
            KernelKind::Abs => "abs",
            KernelKind::Relu => "relu",
            KernelKind::SumReduce => "sum_reduce",
            KernelKind::IntDiv => "int_div",
        }
    }
}

/// Floating point operations, only found in reference and baseline paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FloatOp {
    Add,
    Mul,
    MatMul,
    Relu,
    Pow,
    Div,
    Softmax,
    Norm,
}

impl FloatOp {
    pub fn name(self) -> &'static str {
        match self {
            FloatOp::Add => "f32_add",
            FloatOp::Mul => "f32_mul",
            FloatOp::MatMul => "f32_matmul",
            FloatOp::Relu => "f32_relu",
            FloatOp::Pow => "f32_pow",
            FloatOp::Div => "f32_div",
            FloatOp::Softmax => "f32_softmax",
            FloatOp::Norm => "f32_norm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuditOp {
    /// An integer kernel run through the protocol.
    Kernel(KernelKind),
    /// Standalone scale matching (integer payload requantization).
    ScaleMatch,
    /// A rational constant folded into a scale.
    ScaleFold,
    Quantize,
    Dequantize,
    Float(FloatOp),
}

impl AuditOp {
    pub fn name(self) -> &'static str {
        match self {
            AuditOp::Kernel(k) => k.name(),
            AuditOp::ScaleMatch => "scale_match",
            AuditOp::ScaleFold => "scale_fold",
            AuditOp::Quantize => "quantize",
            AuditOp::Dequantize => "dequantize",
            AuditOp::Float(f) => f.name(),
        }
    }

    /// True for operations that do floating point arithmetic on tensor values.
    pub fn is_float(self) -> bool {
        matches!(
            self,
            AuditOp::Quantize | AuditOp::Dequantize | AuditOp::Float(_)
        )
    }
}

/// Which side of `{x, s}` an operation touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lane {
    Payload,
    Scale,
}

/// Network modules that can be individually switched between integer and FP32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleTag {
    Emb,
    Attn,
    Ffn,
    Ln,
    Res,
    Proj,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 6] = [
        ModuleTag::Emb,
        ModuleTag::Attn,
        ModuleTag::Ffn,
        ModuleTag::Ln,
        ModuleTag::Res,
        ModuleTag::Proj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleTag::Emb => "Emb",
            ModuleTag::Attn => "Attn",
            ModuleTag::Ffn => "FFN",
            ModuleTag::Ln => "LN",
            ModuleTag::Res => "Res",
            ModuleTag::Proj => "Proj",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for ModuleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "emb" => Ok(ModuleTag::Emb),
            "attn" => Ok(ModuleTag::Attn),
            "ffn" => Ok(ModuleTag::Ffn),
            "ln" => Ok(ModuleTag::Ln),
            "res" => Ok(ModuleTag::Res),
            "proj" => Ok(ModuleTag::Proj),
            other => Err(Error::InvalidArgument(format!("unknown module {other:?}"))),
        }
    }
}

/// A subset of [`ModuleTag`]s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ModuleSet([bool; 6]);

impl ModuleSet {
    pub fn empty() -> Self {
        Self([false; 6])
    }

    pub fn all() -> Self {
        Self([true; 6])
    }

    pub fn only(tag: ModuleTag) -> Self {
        let mut s = Self::empty();
        s.insert(tag);
        s
    }

    pub fn insert(&mut self, tag: ModuleTag) {
        self.0[tag.index()] = true;
    }

    pub fn contains(&self, tag: ModuleTag) -> bool {
        self.0[tag.index()]
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn iter(&self) -> impl Iterator<Item = ModuleTag> + '_ {
        ModuleTag::ALL.into_iter().filter(|t| self.contains(*t))
    }

    /// Parses `none`, `all`, or a comma separated list such as `ln,res`.
    pub fn parse(csv: &str) -> Result<Self> {
        match csv.trim() {
            "" | "none" => Ok(Self::empty()),
            "all" => Ok(Self::all()),
            list => {
                let mut s = Self::empty();
                for part in list.split(',') {
                    s.insert(part.trim().parse()?);
                }
                Ok(s)
            }
        }
    }
}

impl FromIterator<ModuleTag> for ModuleSet {
    fn from_iter<I: IntoIterator<Item = ModuleTag>>(iter: I) -> Self {
        let mut s = Self::empty();
        for t in iter {
            s.insert(t);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub op: AuditOp,
    pub lane: Lane,
    /// Output elements produced.
    pub elements: usize,
    /// Scalar operations performed (multiply-accumulates for matmul); the time proxy.
    pub work: u64,
    pub rescaled: bool,
    pub module: Option<ModuleTag>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpAuditLog {
    records: Vec<AuditRecord>,
}

impl OpAuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: AuditRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: &OpAuditLog) {
        self.records.extend_from_slice(&other.records);
    }

    pub fn count(&self, op: AuditOp) -> usize {
        self.records.iter().filter(|r| r.op == op).count()
    }

    pub fn dequantize_count(&self) -> usize {
        self.count(AuditOp::Dequantize)
    }

    /// Floating point operations applied to payload values.
    pub fn payload_float_ops(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.lane == Lane::Payload && r.op.is_float())
            .count()
    }

    pub fn rescale_count(&self) -> usize {
        self.records.iter().filter(|r| r.rescaled).count()
    }

    /// No de-quantization and no floating point arithmetic on payloads.
    pub fn is_integer_pure(&self) -> bool {
        self.dequantize_count() == 0 && self.payload_float_ops() == 0
    }

    /// One tab-separated line per record: op, lane, module, elements, work, rescaled.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# op\tlane\tmodule\telements\twork\trescaled\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.op.name(),
                match r.lane {
                    Lane::Payload => "payload",
                    Lane::Scale => "scale",
                },
                r.module.map_or("-", ModuleTag::name),
                r.elements,
                r.work,
                u8::from(r.rescaled)
            ));
        }
        out
    }
}
