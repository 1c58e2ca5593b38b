//! Forward passes. One driver runs every module either on the integer path or on the
//! FP32 path, converting activations at the boundaries, so the integer model, the FP32
//! reference and every ablation in between share the same wiring.

use super::integer;
use super::params::{FloatLayer, FloatModel, IntegerModel, TransformerLayerParams};
use super::reference::{self, AttentionFlavor, ReferenceModel};
use crate::audit::{FloatOp, ModuleSet, ModuleTag};
use crate::error::{Error, Result};
use crate::ops::Kernel;
use crate::protocol::Session;
use crate::scale::{dequantize, ScaleGranularity};
use crate::tensor::{RationalTensor, ScaledTensor};

/// An activation on either path.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Int(ScaledTensor),
    Real(RationalTensor),
}

impl Activation {
    pub fn shape(&self) -> &[usize] {
        match self {
            Activation::Int(t) => t.shape(),
            Activation::Real(r) => r.shape(),
        }
    }

    /// The rational value, de-quantizing outside any session.
    pub fn to_real(&self) -> RationalTensor {
        match self {
            Activation::Int(t) => dequantize(t),
            Activation::Real(r) => r.clone(),
        }
    }

    pub fn as_int(&self) -> Option<&ScaledTensor> {
        match self {
            Activation::Int(t) => Some(t),
            Activation::Real(_) => None,
        }
    }
}

/// The output of one module at one layer (`None` for embedding and projection).
#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub module: ModuleTag,
    pub layer: Option<usize>,
    pub value: RationalTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Hidden state after the last layer, `[T, d_model]`.
    pub hidden: Activation,
    /// `[T, vocab]`.
    pub logits: Activation,
    /// Module outputs in execution order; empty unless requested.
    pub taps: Vec<Tap>,
}

/// A forward pass where the modules in `integer` run on the integer path and all
/// others on the FP32 path.
#[derive(Debug, Clone, Copy)]
pub struct MixedForward<'a> {
    pub integer_model: Option<&'a IntegerModel>,
    pub float_model: Option<&'a FloatModel>,
    pub integer: ModuleSet,
    pub flavor: AttentionFlavor,
    pub eps: f32,
    pub collect_taps: bool,
}

impl<'a> MixedForward<'a> {
    /// Integer modules from `int_model`, FP32 modules from its de-quantized twin.
    pub fn new(int_model: &'a IntegerModel, twin: &'a FloatModel, integer: ModuleSet) -> Self {
        Self {
            integer_model: Some(int_model),
            float_model: Some(twin),
            integer,
            flavor: AttentionFlavor::Poly,
            eps: 1e-5,
            collect_taps: false,
        }
    }

    pub fn with_taps(mut self) -> Self {
        self.collect_taps = true;
        self
    }

    pub fn run(&self, s: &mut Session, x: Activation) -> Result<ForwardOutput> {
        let config = match (self.integer_model, self.float_model) {
            (Some(m), _) => m.config,
            (None, Some(f)) => f.config,
            (None, None) => return Err(Error::InvalidArgument("no model given".into())),
        };
        if let Some(m) = self.integer_model {
            if m.precision != s.precision() {
                return Err(Error::MixedPrecision(m.precision.bits(), s.precision().bits()));
            }
        }
        let mut r = Runner {
            s,
            integer: self.integer,
            flavor: self.flavor,
            eps: self.eps,
            heads: config.heads,
            granularity: self
                .integer_model
                .map_or(ScaleGranularity::PerRow, |m| m.granularity),
            taps: self.collect_taps.then(Vec::new),
        };
        let im = self.integer_model;
        let fm = self.float_model;
        let mut h = r.dense(
            ModuleTag::Emb,
            None,
            x,
            im.map(|m| &m.emb),
            fm.map(|f| &f.emb),
        )?;
        for l in 0..config.layers {
            let il = im.map(|m| &m.layers[l]);
            let fl = fm.map(|f| &f.layers[l]);
            h = r.layer(h, il, fl, l)?;
        }
        let logits = r.dense(
            ModuleTag::Proj,
            None,
            h.clone(),
            im.map(|m| &m.proj),
            fm.map(|f| &f.proj),
        )?;
        let taps = r.taps.take().unwrap_or_default();
        r.s.set_module(None);
        Ok(ForwardOutput {
            hidden: h,
            logits,
            taps,
        })
    }
}

struct Runner<'s> {
    s: &'s mut Session,
    integer: ModuleSet,
    flavor: AttentionFlavor,
    eps: f32,
    heads: usize,
    granularity: ScaleGranularity,
    taps: Option<Vec<Tap>>,
}

fn missing(what: &str) -> Error {
    Error::InvalidArgument(format!("no {what} parameters for the requested path"))
}

impl Runner<'_> {
    fn enter(&mut self, m: ModuleTag) -> bool {
        self.s.set_module(Some(m));
        self.integer.contains(m)
    }

    fn int_in(&mut self, x: Activation) -> Result<ScaledTensor> {
        match x {
            Activation::Int(t) => Ok(t),
            Activation::Real(r) => self.s.quantize(&r, self.granularity),
        }
    }

    fn real_in(&mut self, x: Activation) -> RationalTensor {
        match x {
            Activation::Int(t) => self.s.dequantize(&t),
            Activation::Real(r) => r,
        }
    }

    fn tap(&mut self, module: ModuleTag, layer: Option<usize>, a: &Activation) {
        if let Some(taps) = self.taps.as_mut() {
            taps.push(Tap {
                module,
                layer,
                value: a.to_real(),
            });
        }
    }

    /// A plain `x W^T` projection (embedding or output head).
    fn dense(
        &mut self,
        m: ModuleTag,
        layer: Option<usize>,
        x: Activation,
        w_int: Option<&ScaledTensor>,
        w_real: Option<&RationalTensor>,
    ) -> Result<Activation> {
        let out = if self.enter(m) {
            let w = w_int.ok_or_else(|| missing(m.name()))?;
            let x = self.int_in(x)?;
            Activation::Int(self.s.apply(Kernel::MatMul, &[&x, w])?)
        } else {
            let w = w_real.ok_or_else(|| missing(m.name()))?;
            let x = self.real_in(x);
            let y = reference::matmul_t(&x, w)?;
            let work = (x.len() * w.shape()[0]) as u64;
            self.s.record_float(FloatOp::MatMul, y.shape(), work);
            Activation::Real(y)
        };
        self.tap(m, layer, &out);
        Ok(out)
    }

    fn layer(
        &mut self,
        x: Activation,
        il: Option<&TransformerLayerParams>,
        fl: Option<&FloatLayer>,
        l: usize,
    ) -> Result<Activation> {
        let a = self.ln(x.clone(), il, fl, l, 1)?;
        let att = self.attn(a, il, fl, l)?;
        let y = self.residual(x, att, l)?;
        self.ffn_sublayer(y, il, fl, l)
    }

    fn ffn_sublayer(
        &mut self,
        y: Activation,
        il: Option<&TransformerLayerParams>,
        fl: Option<&FloatLayer>,
        l: usize,
    ) -> Result<Activation> {
        let a = self.ln(y.clone(), il, fl, l, 2)?;
        let f = self.ffn(a, il, fl, l)?;
        self.residual(y, f, l)
    }

    fn ln(
        &mut self,
        x: Activation,
        il: Option<&TransformerLayerParams>,
        fl: Option<&FloatLayer>,
        l: usize,
        which: u8,
    ) -> Result<Activation> {
        let out = if self.enter(ModuleTag::Ln) {
            let p = il.ok_or_else(|| missing("LN"))?;
            let ln = if which == 1 { &p.ln1 } else { &p.ln2 };
            let x = self.int_in(x)?;
            Activation::Int(integer::l1_layer_norm(self.s, &x, ln)?)
        } else {
            let p = fl.ok_or_else(|| missing("LN"))?;
            let ln = if which == 1 { &p.ln1 } else { &p.ln2 };
            let x = self.real_in(x);
            let y = match self.flavor {
                AttentionFlavor::Poly => reference::l1_layer_norm(&x, ln)?,
                AttentionFlavor::Softmax => reference::l2_layer_norm(&x, ln, self.eps)?,
            };
            self.s.record_float(FloatOp::Norm, y.shape(), 4 * y.len() as u64);
            Activation::Real(y)
        };
        self.tap(ModuleTag::Ln, Some(l), &out);
        Ok(out)
    }

    fn attn(
        &mut self,
        a: Activation,
        il: Option<&TransformerLayerParams>,
        fl: Option<&FloatLayer>,
        l: usize,
    ) -> Result<Activation> {
        let out = if self.enter(ModuleTag::Attn) {
            let p = il.ok_or_else(|| missing("Attn"))?;
            let a = self.int_in(a)?;
            Activation::Int(integer::attention_block(self.s, &a, p)?)
        } else {
            let p = fl.ok_or_else(|| missing("Attn"))?;
            let a = self.real_in(a);
            let y = reference::attention_block(&a, p, self.heads, self.flavor)?;
            let (t, d) = (y.shape()[0], y.shape()[1]);
            let weights = match self.flavor {
                AttentionFlavor::Poly => FloatOp::Pow,
                AttentionFlavor::Softmax => FloatOp::Softmax,
            };
            self.s.record_float(FloatOp::MatMul, y.shape(), (4 * t * d * d + 2 * t * t * d) as u64);
            self.s.record_float(weights, &[t, t * self.heads], (t * t * self.heads) as u64);
            Activation::Real(y)
        };
        self.tap(ModuleTag::Attn, Some(l), &out);
        Ok(out)
    }

    fn ffn(
        &mut self,
        a: Activation,
        il: Option<&TransformerLayerParams>,
        fl: Option<&FloatLayer>,
        l: usize,
    ) -> Result<Activation> {
        let out = if self.enter(ModuleTag::Ffn) {
            let p = il.ok_or_else(|| missing("FFN"))?;
            let a = self.int_in(a)?;
            Activation::Int(integer::ffn_block(self.s, &a, p)?)
        } else {
            let p = fl.ok_or_else(|| missing("FFN"))?;
            let a = self.real_in(a);
            let y = reference::ffn_block(&a, p)?;
            let work = 2 * a.len() * p.w1.shape()[0];
            self.s.record_float(FloatOp::MatMul, y.shape(), work as u64);
            self.s.record_float(FloatOp::Relu, &[a.shape()[0], p.w1.shape()[0]], 0);
            Activation::Real(y)
        };
        self.tap(ModuleTag::Ffn, Some(l), &out);
        Ok(out)
    }

    fn residual(&mut self, x: Activation, f: Activation, l: usize) -> Result<Activation> {
        let out = if self.enter(ModuleTag::Res) {
            let x = self.int_in(x)?;
            let f = self.int_in(f)?;
            Activation::Int(self.s.apply(Kernel::Add, &[&x, &f])?)
        } else {
            let x = self.real_in(x);
            let f = self.real_in(f);
            let y = reference::add(&x, &f)?;
            self.s.record_float(FloatOp::Add, y.shape(), y.len() as u64);
            Activation::Real(y)
        };
        self.tap(ModuleTag::Res, Some(l), &out);
        Ok(out)
    }
}

fn integer_runner(s: &mut Session, heads: usize) -> Runner<'_> {
    Runner {
        s,
        integer: ModuleSet::all(),
        flavor: AttentionFlavor::Poly,
        eps: 0.0,
        heads,
        granularity: ScaleGranularity::PerRow,
        taps: None,
    }
}

/// One pre-LN encoder layer on the integer path:
/// `y = x + Attn(LN1(x))`, `out = y + FFN(LN2(y))`.
pub fn layer_forward(
    s: &mut Session,
    x: &ScaledTensor,
    layer: &TransformerLayerParams,
) -> Result<ScaledTensor> {
    let prev = s.module();
    let mut r = integer_runner(s, layer.heads);
    let out = r.layer(Activation::Int(x.clone()), Some(layer), None, 0);
    r.s.set_module(prev);
    Ok(out?.as_int().expect("integer path").clone())
}

/// The feed-forward sublayer with its norm and residual: `x + FFN(LN2(x))`.
pub fn ffn_forward(
    s: &mut Session,
    x: &ScaledTensor,
    layer: &TransformerLayerParams,
) -> Result<ScaledTensor> {
    let prev = s.module();
    let mut r = integer_runner(s, layer.heads);
    let out = r.ffn_sublayer(Activation::Int(x.clone()), Some(layer), None, 0);
    r.s.set_module(prev);
    Ok(out?.as_int().expect("integer path").clone())
}

impl IntegerModel {
    /// Embedding and all layers on the integer path; `x` is the quantized `[T, d]` input.
    pub fn forward(&self, s: &mut Session, x: &ScaledTensor) -> Result<ScaledTensor> {
        let out = MixedForward {
            integer_model: Some(self),
            float_model: None,
            integer: ModuleSet::all(),
            flavor: AttentionFlavor::Poly,
            eps: 0.0,
            collect_taps: false,
        }
        .run(s, Activation::Int(x.clone()))?;
        match out.hidden {
            Activation::Int(t) => Ok(t),
            Activation::Real(_) => unreachable!("all modules are integer"),
        }
    }

    /// Output projection of a hidden state to vocabulary logits.
    pub fn logits(&self, s: &mut Session, hidden: &ScaledTensor) -> Result<ScaledTensor> {
        let prev = s.set_module(Some(ModuleTag::Proj));
        let out = s.apply(Kernel::MatMul, &[hidden, &self.proj]);
        s.set_module(prev);
        out
    }
}

/// Hidden state and logits of the FP32 reference.
pub fn reference_forward(model: &ReferenceModel, x: &RationalTensor) -> Result<ForwardOutput> {
    let mut scratch = Session::new(Default::default());
    MixedForward {
        integer_model: None,
        float_model: Some(&model.model),
        integer: ModuleSet::empty(),
        flavor: model.flavor,
        eps: model.eps,
        collect_taps: false,
    }
    .run(&mut scratch, Activation::Real(x.clone()))
}

/// Reference forward that also returns every module output.
pub fn reference_forward_traced(model: &ReferenceModel, x: &RationalTensor) -> Result<ForwardOutput> {
    let mut scratch = Session::new(Default::default());
    MixedForward {
        integer_model: None,
        float_model: Some(&model.model),
        integer: ModuleSet::empty(),
        flavor: model.flavor,
        eps: model.eps,
        collect_taps: true,
    }
    .run(&mut scratch, Activation::Real(x.clone()))
}
