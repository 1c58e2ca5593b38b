//! The `SPQ1` container: a little-endian header followed by named tensor records.
//!
//! ```text
//! magic    "SPQ1"
//! version  u16
//! p        u8     (0 for an FP32 file)
//! gran     u8     (0 row, 1 batch-time, 2 batch)
//! layers, d_model, heads, ffn_width, vocab: u32 each
//! records until EOF:
//!   name_len u16, name (UTF-8), rank u8, dims u32 x rank, dtype u8, row-major data
//! ```
//!
//! Integer tensors carry a sibling `f32` record named `<name>.scale`. Payloads are `i8`
//! for `p <= 7` and `i16` above.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scale::{Precision, ScaleGranularity};
use crate::tensor::{IntTensor, RationalTensor, ScaleTensor, ScaledTensor};
use crate::transformer::{
    FloatLayer, FloatModel, IntegerModel, L1LnParams, ModelConfig, PolyParams, QuantL1Ln,
    QuantPoly, TransformerLayerParams,
};

pub const MAGIC: &[u8; 4] = b"SPQ1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 5 * 4;
const SCALE_SUFFIX: &str = ".scale";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    I8 = 0,
    F32 = 1,
    I16 = 2,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::I8),
            1 => Ok(DType::F32),
            2 => Ok(DType::I16),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::I8 => 1,
            DType::I16 => 2,
            DType::F32 => 4,
        }
    }

    /// Narrowest integer dtype holding `p`-bit payloads.
    pub fn for_precision(p: Precision) -> Self {
        if p.bits() <= 7 {
            DType::I8
        } else {
            DType::I16
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    I8(Vec<i8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::I8(_) => DType::I8,
            TensorData::I16(_) => DType::I16,
            TensorData::F32(_) => DType::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::I8(v) => v.len(),
            TensorData::I16(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorRecord {
    /// Serialized size of this record in bytes.
    pub fn encoded_len(&self) -> usize {
        2 + self.name.len() + 1 + 4 * self.shape.len() + 1 + self.data.len() * self.data.dtype().width()
    }

    pub fn is_scale(&self) -> bool {
        self.name.ends_with(SCALE_SUFFIX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u16,
    /// Payload precision; 0 marks an FP32 file.
    pub precision: u8,
    pub granularity: u8,
    pub layers: u32,
    pub d_model: u32,
    pub heads: u32,
    pub ffn_width: u32,
    pub vocab: u32,
}

impl Header {
    fn config(&self, degree: u32) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model as usize,
            heads: self.heads as usize,
            ffn_width: self.ffn_width as usize,
            layers: self.layers as usize,
            vocab: self.vocab as usize,
            degree,
        }
    }

    fn for_config(c: &ModelConfig, precision: u8, granularity: ScaleGranularity) -> Self {
        Self {
            version: VERSION,
            precision,
            granularity: granularity.code(),
            layers: c.layers as u32,
            d_model: c.d_model as u32,
            heads: c.heads as u32,
            ffn_width: c.ffn_width as u32,
            vocab: c.vocab as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub header: Header,
    pub records: Vec<TensorRecord>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.push(h.precision);
        out.push(h.granularity);
        for v in [h.layers, h.d_model, h.heads, h.ffn_width, h.vocab] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.shape.len() as u8);
            for &d in &r.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(r.data.dtype() as u8);
            match &r.data {
                TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
                TensorData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.records.iter().map(TensorRecord::encoded_len).sum::<usize>()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected SPQ1".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let header = Header {
            version,
            precision: r.u8()?,
            granularity: r.u8()?,
            layers: r.u32()?,
            d_model: r.u32()?,
            heads: r.u32()?,
            ffn_width: r.u32()?,
            vocab: r.u32()?,
        };
        ScaleGranularity::from_code(header.granularity)?;
        let mut records = Vec::new();
        while !r.done() {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let dtype = DType::from_tag(r.u8()?)?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: element count overflows")))?;
            let bytes = r.take(n.checked_mul(dtype.width()).ok_or_else(|| {
                Error::Format(format!("{name}: byte count overflows"))
            })?)?;
            let data = match dtype {
                DType::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
                DType::I16 => TensorData::I16(
                    bytes
                        .chunks_exact(2)
                        .map(|c| i16::from_le_bytes([c[0], c[1]]))
                        .collect(),
                ),
                DType::F32 => TensorData::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
            };
            records.push(TensorRecord { name, shape, data });
        }
        let file = Self { header, records };
        file.validate()?;
        Ok(file)
    }

    /// Checks the structural invariants: integer records have exactly one scale sibling,
    /// and their payloads fit the header precision.
    pub fn validate(&self) -> Result<()> {
        let p = self.header.precision;
        for r in &self.records {
            match &r.data {
                TensorData::F32(_) => {}
                int => {
                    if p == 0 {
                        return Err(Error::Format(format!("{}: integer record in an FP32 file", r.name)));
                    }
                    let q = (1i64 << p) - 1;
                    let max = match int {
                        TensorData::I8(v) => v.iter().map(|&x| i64::from(x).abs()).max(),
                        TensorData::I16(v) => v.iter().map(|&x| i64::from(x).abs()).max(),
                        TensorData::F32(_) => unreachable!(),
                    }
                    .unwrap_or(0);
                    if max > q {
                        return Err(Error::Format(format!(
                            "{}: payload {max} exceeds {p}-bit precision",
                            r.name
                        )));
                    }
                    let sibling = format!("{}{SCALE_SUFFIX}", r.name);
                    let count = self.records.iter().filter(|s| s.name == sibling).count();
                    if count != 1 {
                        return Err(Error::Format(format!(
                            "{}: expected one scale record, found {count}",
                            r.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&TensorRecord> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    pub fn is_integer(&self) -> bool {
        self.header.precision != 0
    }

    pub fn precision(&self) -> Result<Precision> {
        Precision::new(u32::from(self.header.precision))
    }

    pub fn granularity(&self) -> Result<ScaleGranularity> {
        ScaleGranularity::from_code(self.header.granularity)
    }

    fn push_real(&mut self, name: String, t: &RationalTensor) {
        self.records.push(TensorRecord {
            name,
            shape: t.shape().to_vec(),
            data: TensorData::F32(t.values().to_vec()),
        });
    }

    fn push_scaled(&mut self, name: String, t: &ScaledTensor) {
        let data = match DType::for_precision(t.precision()) {
            DType::I8 => TensorData::I8(t.payload().iter().map(|&x| x as i8).collect()),
            _ => TensorData::I16(t.payload().iter().map(|&x| x as i16).collect()),
        };
        self.records.push(TensorRecord {
            name: format!("{name}{SCALE_SUFFIX}"),
            shape: t.scale().shape().to_vec(),
            data: TensorData::F32(t.scale().values().to_vec()),
        });
        self.records.insert(
            self.records.len() - 1,
            TensorRecord {
                name,
                shape: t.shape().to_vec(),
                data,
            },
        );
    }

    pub fn real(&self, name: &str) -> Result<RationalTensor> {
        let r = self.get(name)?;
        match &r.data {
            TensorData::F32(v) => RationalTensor::new(r.shape.clone(), v.clone()),
            _ => Err(Error::Format(format!("{name}: expected an f32 record"))),
        }
    }

    pub fn scaled(&self, name: &str) -> Result<ScaledTensor> {
        let p = self.precision()?;
        let r = self.get(name)?;
        let payload: Vec<i64> = match &r.data {
            TensorData::I8(v) => v.iter().map(|&x| i64::from(x)).collect(),
            TensorData::I16(v) => v.iter().map(|&x| i64::from(x)).collect(),
            TensorData::F32(_) => return Err(Error::Format(format!("{name}: expected an integer record"))),
        };
        let s = self.real(&format!("{name}{SCALE_SUFFIX}"))?;
        ScaledTensor::new(
            IntTensor::new(r.shape.clone(), payload, p)?,
            ScaleTensor::new(s.shape().to_vec(), s.into_values())?,
        )
    }

    pub fn from_float(model: &FloatModel, granularity: ScaleGranularity) -> Self {
        let mut f = Self {
            header: Header::for_config(&model.config, 0, granularity),
            records: Vec::new(),
        };
        f.push_real("emb.weight".into(), &model.emb);
        for (i, l) in model.layers.iter().enumerate() {
            let n = |s: &str| format!("layers.{i}.{s}");
            for (name, t) in [
                ("attn.wq", &l.wq),
                ("attn.wk", &l.wk),
                ("attn.wv", &l.wv),
                ("attn.wo", &l.wo),
                ("ffn.w1", &l.w1),
                ("ffn.b1", &l.b1),
                ("ffn.w2", &l.w2),
                ("ffn.b2", &l.b2),
                ("ln1.gain", &l.ln1.gain),
                ("ln1.bias", &l.ln1.bias),
                ("ln2.gain", &l.ln2.gain),
                ("ln2.bias", &l.ln2.bias),
            ] {
                f.push_real(n(name), t);
            }
            let scalar = |v: f32| RationalTensor::new(vec![1, 1], vec![v]).expect("finite scalar");
            f.push_real(n("poly.bias"), &scalar(l.poly.bias));
            f.push_real(n("poly.delta"), &scalar(l.poly.delta));
        }
        f.push_real("proj.weight".into(), &model.proj);
        f
    }

    pub fn from_integer(model: &IntegerModel) -> Self {
        let mut f = Self {
            header: Header::for_config(&model.config, model.precision.bits(), model.granularity),
            records: Vec::new(),
        };
        f.push_scaled("emb.weight".into(), &model.emb);
        for (i, l) in model.layers.iter().enumerate() {
            let n = |s: &str| format!("layers.{i}.{s}");
            for (name, t) in [
                ("attn.wq", &l.wq),
                ("attn.wk", &l.wk),
                ("attn.wv", &l.wv),
                ("attn.wo", &l.wo),
                ("ffn.w1", &l.w1),
                ("ffn.b1", &l.b1),
                ("ffn.w2", &l.w2),
                ("ffn.b2", &l.b2),
                ("ln1.gain", &l.ln1.gain),
                ("ln1.bias", &l.ln1.bias),
                ("ln2.gain", &l.ln2.gain),
                ("ln2.bias", &l.ln2.bias),
                ("poly.bias", &l.poly.bias),
                ("poly.delta", &l.poly.delta),
            ] {
                f.push_scaled(n(name), t);
            }
        }
        f.push_scaled("proj.weight".into(), &model.proj);
        f
    }

    /// Builds the FP32 model; the polynomial degree is not stored in the file.
    pub fn to_float_model(&self, degree: u32) -> Result<FloatModel> {
        if self.is_integer() {
            return Err(Error::Format("expected an FP32 model file".into()));
        }
        let config = self.header.config(degree);
        config.validate()?;
        let layers = (0..config.layers)
            .map(|i| {
                let g = |s: &str| self.real(&format!("layers.{i}.{s}"));
                let scalar = |s: &str| -> Result<f32> {
                    let t = g(s)?;
                    t.values()
                        .first()
                        .copied()
                        .ok_or_else(|| Error::Format(format!("layers.{i}.{s} is empty")))
                };
                Ok(FloatLayer {
                    wq: g("attn.wq")?,
                    wk: g("attn.wk")?,
                    wv: g("attn.wv")?,
                    wo: g("attn.wo")?,
                    w1: g("ffn.w1")?,
                    b1: g("ffn.b1")?,
                    w2: g("ffn.w2")?,
                    b2: g("ffn.b2")?,
                    ln1: L1LnParams {
                        gain: g("ln1.gain")?,
                        bias: g("ln1.bias")?,
                    },
                    ln2: L1LnParams {
                        gain: g("ln2.gain")?,
                        bias: g("ln2.bias")?,
                    },
                    poly: PolyParams {
                        bias: scalar("poly.bias")?,
                        degree,
                        delta: scalar("poly.delta")?,
                    },
                })
            })
            .collect::<Result<_>>()?;
        let model = FloatModel {
            config,
            emb: self.real("emb.weight")?,
            layers,
            proj: self.real("proj.weight")?,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_integer_model(&self, degree: u32) -> Result<IntegerModel> {
        let precision = self.precision()?;
        let config = self.header.config(degree);
        config.validate()?;
        let layers = (0..config.layers)
            .map(|i| {
                let g = |s: &str| self.scaled(&format!("layers.{i}.{s}"));
                Ok(TransformerLayerParams {
                    wq: g("attn.wq")?,
                    wk: g("attn.wk")?,
                    wv: g("attn.wv")?,
                    wo: g("attn.wo")?,
                    w1: g("ffn.w1")?,
                    b1: g("ffn.b1")?,
                    w2: g("ffn.w2")?,
                    b2: g("ffn.b2")?,
                    ln1: QuantL1Ln {
                        gain: g("ln1.gain")?,
                        bias: g("ln1.bias")?,
                    },
                    ln2: QuantL1Ln {
                        gain: g("ln2.gain")?,
                        bias: g("ln2.bias")?,
                    },
                    poly: QuantPoly {
                        bias: g("poly.bias")?,
                        delta: g("poly.delta")?,
                        degree,
                    },
                    d_model: config.d_model,
                    heads: config.heads,
                })
            })
            .collect::<Result<_>>()?;
        let model = IntegerModel {
            config,
            precision,
            granularity: self.granularity()?,
            emb: self.scaled("emb.weight")?,
            layers,
            proj: self.scaled("proj.weight")?,
        };
        model.validate()?;
        Ok(model)
    }

    /// A file holding one FP32 tensor (model inputs and de-quantized outputs).
    pub fn real_tensor(name: &str, t: &RationalTensor) -> Self {
        let mut f = Self {
            header: tensor_header(t.shape(), 0, ScaleGranularity::PerRow),
            records: Vec::new(),
        };
        f.push_real(name.into(), t);
        f
    }

    /// A file holding one integer tensor and its scale.
    pub fn scaled_tensor(name: &str, t: &ScaledTensor) -> Self {
        let mut f = Self {
            header: tensor_header(t.shape(), t.precision().bits(), ScaleGranularity::PerRow),
            records: Vec::new(),
        };
        f.push_scaled(name.into(), t);
        f
    }

    /// The first non-scale record, as a rational tensor (de-quantized if integer).
    pub fn first_tensor(&self) -> Result<RationalTensor> {
        let r = self
            .records
            .iter()
            .find(|r| !r.is_scale())
            .ok_or_else(|| Error::Format("file holds no tensor".into()))?;
        match r.data {
            TensorData::F32(_) => self.real(&r.name),
            _ => Ok(crate::scale::dequantize(&self.scaled(&r.name)?)),
        }
    }
}

fn tensor_header(shape: &[usize], precision: u8, g: ScaleGranularity) -> Header {
    Header {
        version: VERSION,
        precision,
        granularity: g.code(),
        layers: 0,
        d_model: shape.last().copied().unwrap_or(0) as u32,
        heads: 0,
        ffn_width: 0,
        vocab: 0,
    }
}
