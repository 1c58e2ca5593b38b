//! The integer transformer: polynomial attention, L1 layer norm, feed-forward blocks,
//! pre-LN encoder layers, and the FP32 twin used as reference.

mod forward;
mod integer;
mod params;
pub mod reference;

pub use forward::{
    ffn_forward, layer_forward, reference_forward, reference_forward_traced, Activation,
    ForwardOutput, MixedForward, Tap,
};
pub use integer::{
    attention_block, ffn_block, l1_layer_norm, poly, poly_attention, poly_attention_traced,
    PolyAttentionTrace,
};
pub use params::{
    random_input, FloatLayer, FloatModel, IntegerModel, L1LnParams, ModelConfig, PolyParams,
    QuantL1Ln, QuantPoly, TransformerLayerParams, L1_NORM_CONSTANT,
};
pub use reference::{AttentionFlavor, ReferenceModel};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::{ModuleSet, ModuleTag};
    use crate::protocol::Session;
    use crate::scale::{Precision, ScaleGranularity};

    fn setup(p: u32) -> (IntegerModel, FloatModel, crate::tensor::RationalTensor) {
        let f = FloatModel::random(ModelConfig::default(), 3).unwrap();
        let m = f
            .quantize(Precision::new(p).unwrap(), ScaleGranularity::PerRow)
            .unwrap();
        let twin = m.dequantize();
        (m, twin, random_input(8, 32, 3).unwrap())
    }

    #[test]
    fn integer_forward_is_pure_and_in_range() {
        let (m, _, x) = setup(7);
        let xq = m.quantize_input(&x).unwrap();
        let mut s = Session::new(m.precision);
        let h = m.forward(&mut s, &xq).unwrap();
        assert_eq!(h.shape(), &[8, 32]);
        assert!(h.data().in_range());
        let logits = m.logits(&mut s, &h).unwrap();
        assert_eq!(logits.shape(), &[8, 64]);
        assert!(s.log().is_integer_pure());
        assert_eq!(s.log().dequantize_count(), 0);
    }

    #[test]
    fn integer_path_tracks_reference() {
        let (m, twin, x) = setup(12);
        let xq = m.quantize_input(&x).unwrap();
        let mut s = Session::new(m.precision);
        let h = crate::scale::dequantize(&m.forward(&mut s, &xq).unwrap());
        let r = reference_forward(&ReferenceModel::poly(twin), &x).unwrap();
        let rh = r.hidden.to_real();
        let (mut err, mut norm) = (0.0f64, 0.0f64);
        for (a, b) in h.values().iter().zip(rh.values()) {
            err += f64::from(a - b).powi(2);
            norm += f64::from(*b).powi(2);
        }
        assert!(err / norm < 1e-3, "relative error {}", err / norm);
    }

    #[test]
    fn full_module_set_equals_integer_path() {
        let (m, twin, x) = setup(7);
        let xq = m.quantize_input(&x).unwrap();
        let mut s = Session::new(m.precision);
        let h = m.forward(&mut s, &xq).unwrap();
        let logits = m.logits(&mut s, &h).unwrap();
        let mut s2 = Session::new(m.precision);
        let mixed = MixedForward::new(&m, &twin, ModuleSet::all())
            .run(&mut s2, Activation::Real(x.clone()))
            .unwrap();
        assert_eq!(mixed.logits, Activation::Int(logits));

        let mut s3 = Session::new(m.precision);
        let none = MixedForward::new(&m, &twin, ModuleSet::empty())
            .run(&mut s3, Activation::Real(x.clone()))
            .unwrap();
        let r = reference_forward(&ReferenceModel::poly(twin), &x).unwrap();
        assert_eq!(none.logits, r.logits);
    }

    #[test]
    fn layer_forward_matches_driver() {
        let (m, _, x) = setup(7);
        let xq = m.quantize_input(&x).unwrap();
        let mut s = Session::new(m.precision);
        let h0 = s.apply(crate::Kernel::MatMul, &[&xq, &m.emb]).unwrap();
        let h1 = layer_forward(&mut s, &h0, &m.layers[0]).unwrap();
        let h2 = layer_forward(&mut s, &h1, &m.layers[1]).unwrap();
        let mut s2 = Session::new(m.precision);
        assert_eq!(m.forward(&mut s2, &xq).unwrap(), h2);
    }

    #[test]
    fn taps_cover_every_module() {
        let (m, twin, x) = setup(7);
        let mut s = Session::new(m.precision);
        let out = MixedForward::new(&m, &twin, ModuleSet::all())
            .with_taps()
            .run(&mut s, Activation::Real(x))
            .unwrap();
        for tag in ModuleTag::ALL {
            assert!(out.taps.iter().any(|t| t.module == tag), "{tag:?}");
        }
        // Per layer: two norms, attention, FFN, two residuals.
        assert_eq!(out.taps.len(), 2 + 2 * 6);
    }

    #[test]
    fn mixed_path_logs_conversions() {
        let (m, twin, x) = setup(7);
        let mut s = Session::new(m.precision);
        MixedForward::new(&m, &twin, ModuleSet::only(ModuleTag::Ffn))
            .run(&mut s, Activation::Real(x))
            .unwrap();
        assert!(s.log().dequantize_count() > 0);
        assert!(!s.log().is_integer_pure());
    }
}
