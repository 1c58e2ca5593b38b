use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scale::{dequantize, quantize_auto, Precision, ScaleGranularity};
use crate::tensor::{RationalTensor, ScaledTensor};

/// Normalizer of the L1 layer norm: `sqrt(pi / 2)`, the ratio between the standard
/// deviation and the mean absolute deviation of a Gaussian.
pub const L1_NORM_CONSTANT: f64 = 1.253_314_137_315_500_3;

/// Architecture dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub layers: usize,
    pub vocab: usize,
    /// Degree of the attention polynomial.
    pub degree: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            ffn_width: 128,
            layers: 2,
            vocab: 64,
            degree: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ffn_width == 0 || self.vocab == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.degree == 0 {
            return Err(Error::InvalidArgument("poly degree must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// `Poly(x) = ReLU(x + bias)^degree + |delta|`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyParams {
    pub bias: f32,
    pub degree: u32,
    pub delta: f32,
}

impl PolyParams {
    pub fn eval(&self, x: f64) -> f64 {
        (x + f64::from(self.bias)).max(0.0).powi(self.degree as i32) + f64::from(self.delta).abs()
    }
}

/// Gain and bias of a layer norm, each shaped `[1, n_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct L1LnParams {
    pub gain: RationalTensor,
    pub bias: RationalTensor,
}

impl L1LnParams {
    pub fn identity(n_h: usize) -> Self {
        Self {
            gain: RationalTensor::new(vec![1, n_h], vec![1.0; n_h]).expect("valid shape"),
            bias: RationalTensor::zeros(vec![1, n_h]).expect("valid shape"),
        }
    }

    pub fn width(&self) -> usize {
        self.gain.len()
    }
}

/// FP32 parameters of one encoder layer. Weight matrices are stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayer {
    pub wq: RationalTensor,
    pub wk: RationalTensor,
    pub wv: RationalTensor,
    pub wo: RationalTensor,
    pub w1: RationalTensor,
    pub b1: RationalTensor,
    pub w2: RationalTensor,
    pub b2: RationalTensor,
    pub ln1: L1LnParams,
    pub ln2: L1LnParams,
    pub poly: PolyParams,
}

/// FP32 parameters of the whole toy model: input embedding projection, layers, and
/// output projection to the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub config: ModelConfig,
    pub emb: RationalTensor,
    pub layers: Vec<FloatLayer>,
    pub proj: RationalTensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> RationalTensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    RationalTensor::new(shape, values).expect("finite uniform samples")
}

fn weight(rng: &mut ChaCha8Rng, out: usize, fan_in: usize) -> RationalTensor {
    let a = (3.0 / fan_in as f32).sqrt();
    uniform(rng, vec![out, fan_in], -a, a)
}

impl FloatModel {
    /// Deterministic random toy model.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.ffn_width;
        let emb = weight(&mut rng, d, d);
        let layers = (0..config.layers)
            .map(|_| {
                let ln = |rng: &mut ChaCha8Rng| L1LnParams {
                    gain: uniform(rng, vec![1, d], 0.8, 1.2),
                    bias: uniform(rng, vec![1, d], -0.1, 0.1),
                };
                let ln1 = ln(&mut rng);
                let ln2 = ln(&mut rng);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                FloatLayer {
                    wq: weight(&mut rng, d, d),
                    wk: weight(&mut rng, d, d),
                    wv: weight(&mut rng, d, d),
                    wo: weight(&mut rng, d, d),
                    w1: weight(&mut rng, f, d),
                    b1: uniform(&mut rng, vec![1, f], -0.1, 0.1),
                    w2: weight(&mut rng, d, f),
                    b2: uniform(&mut rng, vec![1, d], -0.1, 0.1),
                    ln1,
                    ln2,
                    poly: PolyParams {
                        bias: rng.gen_range(0.0..0.5),
                        degree: config.degree,
                        delta: sign * rng.gen_range(0.05..0.3),
                    },
                }
            })
            .collect();
        let proj = weight(&mut rng, config.vocab, d);
        Ok(Self {
            config,
            emb,
            layers,
            proj,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (d, f) = (self.config.d_model, self.config.ffn_width);
        let mut expect = vec![
            ("emb.weight", &self.emb, [d, d]),
            ("proj.weight", &self.proj, [self.config.vocab, d]),
        ];
        if self.layers.len() != self.config.layers {
            return Err(Error::InvalidArgument("layer count mismatch".into()));
        }
        for l in &self.layers {
            expect.extend([
                ("wq", &l.wq, [d, d]),
                ("wk", &l.wk, [d, d]),
                ("wv", &l.wv, [d, d]),
                ("wo", &l.wo, [d, d]),
                ("w1", &l.w1, [f, d]),
                ("b1", &l.b1, [1, f]),
                ("w2", &l.w2, [d, f]),
                ("b2", &l.b2, [1, d]),
                ("ln1.gain", &l.ln1.gain, [1, d]),
                ("ln1.bias", &l.ln1.bias, [1, d]),
                ("ln2.gain", &l.ln2.gain, [1, d]),
                ("ln2.bias", &l.ln2.bias, [1, d]),
            ]);
        }
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::InvalidArgument(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Quantizes every parameter with per-row scales at `prec`.
    pub fn quantize(&self, prec: Precision, granularity: ScaleGranularity) -> Result<IntegerModel> {
        let q = |t: &RationalTensor| quantize_auto(t, ScaleGranularity::PerRow, prec);
        let scalar = |v: f32| {
            quantize_auto(
                &RationalTensor::new(vec![1, 1], vec![v])?,
                ScaleGranularity::PerRow,
                prec,
            )
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(TransformerLayerParams {
                    wq: q(&l.wq)?,
                    wk: q(&l.wk)?,
                    wv: q(&l.wv)?,
                    wo: q(&l.wo)?,
                    w1: q(&l.w1)?,
                    b1: q(&l.b1)?,
                    w2: q(&l.w2)?,
                    b2: q(&l.b2)?,
                    ln1: QuantL1Ln {
                        gain: q(&l.ln1.gain)?,
                        bias: q(&l.ln1.bias)?,
                    },
                    ln2: QuantL1Ln {
                        gain: q(&l.ln2.gain)?,
                        bias: q(&l.ln2.bias)?,
                    },
                    poly: QuantPoly {
                        bias: scalar(l.poly.bias)?,
                        delta: scalar(l.poly.delta)?,
                        degree: l.poly.degree,
                    },
                    d_model: self.config.d_model,
                    heads: self.config.heads,
                })
            })
            .collect::<Result<_>>()?;
        let model = IntegerModel {
            config: self.config,
            precision: prec,
            granularity,
            emb: q(&self.emb)?,
            layers,
            proj: q(&self.proj)?,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Quantized `Poly` parameters: bias and delta as `[1, 1]` scaled scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPoly {
    pub bias: ScaledTensor,
    pub delta: ScaledTensor,
    pub degree: u32,
}

/// Quantized layer norm gain and bias, `[1, n_h]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantL1Ln {
    pub gain: ScaledTensor,
    pub bias: ScaledTensor,
}

impl QuantL1Ln {
    pub fn width(&self) -> usize {
        self.gain.payload().len()
    }
}

/// Quantized parameters of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayerParams {
    pub wq: ScaledTensor,
    pub wk: ScaledTensor,
    pub wv: ScaledTensor,
    pub wo: ScaledTensor,
    pub w1: ScaledTensor,
    pub b1: ScaledTensor,
    pub w2: ScaledTensor,
    pub b2: ScaledTensor,
    pub ln1: QuantL1Ln,
    pub ln2: QuantL1Ln,
    pub poly: QuantPoly,
    pub d_model: usize,
    pub heads: usize,
}

impl TransformerLayerParams {
    pub fn validate(&self, ffn_width: usize) -> Result<()> {
        let d = self.d_model;
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {d} is not divisible by {} heads",
                self.heads
            )));
        }
        let expect = [
            ("wq", &self.wq, [d, d]),
            ("wk", &self.wk, [d, d]),
            ("wv", &self.wv, [d, d]),
            ("wo", &self.wo, [d, d]),
            ("w1", &self.w1, [ffn_width, d]),
            ("b1", &self.b1, [1, ffn_width]),
            ("w2", &self.w2, [d, ffn_width]),
            ("b2", &self.b2, [1, d]),
            ("ln1.gain", &self.ln1.gain, [1, d]),
            ("ln1.bias", &self.ln1.bias, [1, d]),
            ("ln2.gain", &self.ln2.gain, [1, d]),
            ("ln2.bias", &self.ln2.bias, [1, d]),
            ("poly.bias", &self.poly.bias, [1, 1]),
            ("poly.delta", &self.poly.delta, [1, 1]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::InvalidArgument(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.data().in_range() {
                return Err(Error::PrecisionViolation {
                    value: t.data().max_abs(),
                    precision: t.precision().bits(),
                });
            }
        }
        Ok(())
    }
}

/// The integer model: every parameter a [`ScaledTensor`] at one precision.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerModel {
    pub config: ModelConfig,
    pub precision: Precision,
    /// Granularity of activation (input) scales.
    pub granularity: ScaleGranularity,
    pub emb: ScaledTensor,
    pub layers: Vec<TransformerLayerParams>,
    pub proj: ScaledTensor,
}

impl IntegerModel {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d_model;
        if self.emb.shape() != [d, d] || self.proj.shape() != [self.config.vocab, d] {
            return Err(Error::InvalidArgument("embedding or projection shape mismatch".into()));
        }
        if self.layers.len() != self.config.layers {
            return Err(Error::InvalidArgument("layer count mismatch".into()));
        }
        for l in &self.layers {
            l.validate(self.config.ffn_width)?;
        }
        Ok(())
    }

    /// The FP32 twin whose parameters are exactly `D(x, s)` of this model's.
    pub fn dequantize(&self) -> FloatModel {
        let ln = |l: &QuantL1Ln| L1LnParams {
            gain: dequantize(&l.gain),
            bias: dequantize(&l.bias),
        };
        let scalar = |t: &ScaledTensor| dequantize(t).values()[0];
        FloatModel {
            config: self.config,
            emb: dequantize(&self.emb),
            layers: self
                .layers
                .iter()
                .map(|l| FloatLayer {
                    wq: dequantize(&l.wq),
                    wk: dequantize(&l.wk),
                    wv: dequantize(&l.wv),
                    wo: dequantize(&l.wo),
                    w1: dequantize(&l.w1),
                    b1: dequantize(&l.b1),
                    w2: dequantize(&l.w2),
                    b2: dequantize(&l.b2),
                    ln1: ln(&l.ln1),
                    ln2: ln(&l.ln2),
                    poly: PolyParams {
                        bias: scalar(&l.poly.bias),
                        degree: l.poly.degree,
                        delta: scalar(&l.poly.delta),
                    },
                })
                .collect(),
            proj: dequantize(&self.proj),
        }
    }

    /// Quantizes an FP32 input with the model's activation granularity.
    pub fn quantize_input(&self, x: &RationalTensor) -> Result<ScaledTensor> {
        quantize_auto(x, self.granularity, self.precision)
    }
}

/// Deterministic `T x d` input with unit-variance uniform entries.
pub fn random_input(seq_len: usize, d_model: usize, seed: u64) -> Result<RationalTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e);
    let a = 3.0f32.sqrt();
    Ok(uniform(&mut rng, vec![seq_len, d_model], -a, a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_models_are_deterministic() {
        let a = FloatModel::random(ModelConfig::default(), 7).unwrap();
        let b = FloatModel::random(ModelConfig::default(), 7).unwrap();
        let c = FloatModel::random(ModelConfig::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn quantized_model_is_valid_and_twin_matches() {
        let f = FloatModel::random(ModelConfig::default(), 1).unwrap();
        let m = f.quantize(Precision::INT8, ScaleGranularity::PerRow).unwrap();
        m.validate().unwrap();
        assert_eq!(m.layers[0].wq.scale().shape(), &[32, 1]);
        assert_eq!(m.layers[0].b1.scale().shape(), &[1, 1]);
        let twin = m.dequantize();
        assert_eq!(twin.layers[1].w2, dequantize(&m.layers[1].w2));
        // Re-quantizing the twin reproduces the payloads exactly.
        let again = twin.quantize(Precision::INT8, ScaleGranularity::PerRow).unwrap();
        assert_eq!(again.layers[0].w1.payload(), m.layers[0].w1.payload());
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(FloatModel::random(bad, 0).is_err());
    }

    #[test]
    fn l1_constant() {
        assert!((L1_NORM_CONSTANT - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-15);
    }
}
