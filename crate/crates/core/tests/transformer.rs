//! End-to-end checks of the integer transformer blocks against hand traces and the
//! FP32 twin.

use scaleprop::analysis::{module_ablation, precision_loss};
use scaleprop::scale::quantize_auto;
use scaleprop::transformer::{
    ffn_forward, l1_layer_norm, layer_forward, poly, poly_attention, random_input, reference,
    FloatModel, ModelConfig, QuantL1Ln, QuantPoly, ReferenceModel,
};
use scaleprop::{
    dequantize, IntTensor, ModuleSet, ModuleTag, Precision, RationalTensor, ScaleGranularity,
    ScaleTensor, ScaledTensor, Session,
};

const ROW: ScaleGranularity = ScaleGranularity::PerRow;

fn prec(bits: u32) -> Precision {
    Precision::new(bits).unwrap()
}

fn unit(payload: i64, p: Precision) -> ScaledTensor {
    ScaledTensor::new(
        IntTensor::new(vec![1, 1], vec![payload], p).unwrap(),
        ScaleTensor::new(vec![1, 1], vec![1.0]).unwrap(),
    )
    .unwrap()
}

fn real(shape: Vec<usize>, v: Vec<f32>) -> RationalTensor {
    RationalTensor::new(shape, v).unwrap()
}

#[test]
fn poly_hand_trace() {
    // ReLU(-5 + 2)^3 + |-2| = 0 + 2
    let p = prec(7);
    let pp = QuantPoly {
        bias: unit(2, p),
        delta: unit(-2, p),
        degree: 3,
    };
    let mut s = Session::new(p);
    let w = poly(&mut s, &unit(-5, p), &pp).unwrap();
    assert_eq!(dequantize(&w).values(), &[2.0]);
    // ReLU(1 + 2)^3 + 2 = 29
    let w = poly(&mut s, &unit(1, p), &pp).unwrap();
    assert_eq!(dequantize(&w).values(), &[29.0]);
}

#[test]
fn reference_attention_stays_in_the_value_hull_and_integer_follows() {
    let p = prec(10);
    let (t, d) = (6, 4);
    let x = |seed| random_input(t, d, seed).unwrap();
    let (q, k, v) = (x(1), x(2), x(3));
    let params = scaleprop::transformer::PolyParams {
        bias: 0.5,
        degree: 3,
        delta: 0.1,
    };
    let out = reference::poly_attention(&q, &k, &v, &params, d).unwrap();
    for c in 0..d {
        let col: Vec<f32> = (0..t).map(|r| v.values()[r * d + c]).collect();
        let (lo, hi) = col.iter().fold((f32::MAX, f32::MIN), |(a, b), &y| (a.min(y), b.max(y)));
        for r in 0..t {
            let o = out.values()[r * d + c];
            assert!(lo - 1e-5 <= o && o <= hi + 1e-5);
        }
    }
    let scalar = |v: f32| quantize_auto(&real(vec![1, 1], vec![v]), ROW, p).unwrap();
    let pp = QuantPoly {
        bias: scalar(params.bias),
        delta: scalar(params.delta),
        degree: 3,
    };
    let quant = |r: &RationalTensor| quantize_auto(r, ROW, p).unwrap();
    let (qq, kq, vq) = (quant(&q), quant(&k), quant(&v));
    let mut s = Session::new(p);
    let got = dequantize(&poly_attention(&mut s, &qq, &kq, &vq, &pp, d).unwrap());
    let twin = reference::poly_attention(
        &dequantize(&qq),
        &dequantize(&kq),
        &dequantize(&vq),
        &scaleprop::transformer::PolyParams {
            bias: dequantize(&pp.bias).values()[0],
            degree: 3,
            delta: dequantize(&pp.delta).values()[0],
        },
        d,
    )
    .unwrap();
    // A few units of the 10-bit value resolution.
    let tol = 8.0 * v.max_abs() / 1023.0;
    for (a, b) in got.values().iter().zip(twin.values()) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }
}

#[test]
fn l1_norm_tracks_reference_row() {
    let p = prec(7);
    let x = random_input(4, 32, 9).unwrap();
    let ln = scaleprop::transformer::L1LnParams {
        gain: real(vec![1, 32], (0..32).map(|i| 0.8 + i as f32 / 80.0).collect()),
        bias: real(vec![1, 32], (0..32).map(|i| (i as f32 - 16.0) / 64.0).collect()),
    };
    let qln = QuantL1Ln {
        gain: quantize_auto(&ln.gain, ROW, p).unwrap(),
        bias: quantize_auto(&ln.bias, ROW, p).unwrap(),
    };
    let xq = quantize_auto(&x, ROW, p).unwrap();
    let mut s = Session::new(p);
    let got = dequantize(&l1_layer_norm(&mut s, &xq, &qln).unwrap());
    let twin_ln = scaleprop::transformer::L1LnParams {
        gain: dequantize(&qln.gain),
        bias: dequantize(&qln.bias),
    };
    let want = reference::l1_layer_norm(&dequantize(&xq), &twin_ln).unwrap();
    assert!(s.log().is_integer_pure());
    // Normalized, gained and biased outputs are O(1); allow a few 7-bit output units.
    let tol = 4.0 * want.max_abs() / 127.0;
    for (a, b) in got.values().iter().zip(want.values()) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }
}

/// A one-unit model whose parameters are all exactly representable.
fn scalar_model() -> FloatModel {
    let config = ModelConfig {
        d_model: 1,
        heads: 1,
        ffn_width: 1,
        layers: 1,
        vocab: 1,
        degree: 3,
    };
    let mut m = FloatModel::random(config, 0).unwrap();
    let one = |v: f32| real(vec![1, 1], vec![v]);
    let layer = &mut m.layers[0];
    layer.ln2.gain = one(2.0);
    layer.ln2.bias = one(0.5);
    layer.w1 = one(1.5);
    layer.b1 = one(0.25);
    layer.w2 = one(-0.5);
    layer.b2 = one(0.125);
    m
}

#[test]
fn single_unit_ffn_hand_trace() {
    // d = 1: the row is constant, so LN2(x) = bias = 0.5;
    // FFN = ReLU(0.5 * 1.5 + 0.25) * -0.5 + 0.125 = -0.375; out = 0.75 - 0.375.
    let m = scalar_model().quantize(prec(7), ROW).unwrap();
    let x = quantize_auto(&real(vec![1, 1], vec![0.75]), ROW, m.precision).unwrap();
    let mut s = Session::new(m.precision);
    let out = ffn_forward(&mut s, &x, &m.layers[0]).unwrap();
    // Exact up to the truncations of three re-scaled steps at 7 bits.
    let got = dequantize(&out).values()[0];
    assert!((got - 0.375).abs() <= 3.0 * 0.75 / 127.0, "{got}");
    assert_eq!(s.log().dequantize_count(), 0);
}

#[test]
fn layer_with_silent_sublayers_passes_input_through() {
    let mut f = FloatModel::random(ModelConfig::default(), 4).unwrap();
    for layer in &mut f.layers {
        layer.wo = RationalTensor::zeros(layer.wo.shape().to_vec()).unwrap();
        layer.w2 = RationalTensor::zeros(layer.w2.shape().to_vec()).unwrap();
        layer.b2 = RationalTensor::zeros(layer.b2.shape().to_vec()).unwrap();
    }
    let m = f.quantize(prec(7), ROW).unwrap();
    let x = m.quantize_input(&random_input(5, 32, 4).unwrap()).unwrap();
    let mut s = Session::new(m.precision);
    let out = layer_forward(&mut s, &x, &m.layers[0]).unwrap();
    let (a, b) = (dequantize(&out), dequantize(&x));
    for ((u, v), sc) in a.values().iter().zip(b.values()).zip(x.dense_scale()) {
        assert!((u - v).abs() <= 1.0 / sc, "{u} vs {v}");
    }
}

#[test]
fn high_precision_losses_vanish() {
    let f = FloatModel::random(ModelConfig::default(), 11).unwrap();
    let m = f.quantize(prec(15), ROW).unwrap();
    let inputs = vec![random_input(4, 32, 11).unwrap()];
    let report = precision_loss(&m, &ReferenceModel::poly(m.dequantize()), &inputs).unwrap();
    assert_eq!(report.entries.len(), 2 + 4 * m.layers.len());
    for e in &report.entries {
        assert!(e.mse >= 0.0 && e.mse < 1e-6, "{:?}", e);
    }
}

#[test]
fn single_module_ablations_lose_less_than_the_full_set() {
    let (mut full, mut singles) = (0.0, [0.0f64; 6]);
    for seed in 0..6 {
        let m = FloatModel::random(ModelConfig::default(), seed)
            .unwrap()
            .quantize(prec(7), ROW)
            .unwrap();
        let inputs = vec![random_input(6, 32, seed).unwrap()];
        full += module_ablation(&m, &inputs, ModuleSet::all()).unwrap().mse;
        for (i, tag) in ModuleTag::ALL.into_iter().enumerate() {
            singles[i] += module_ablation(&m, &inputs, ModuleSet::only(tag)).unwrap().mse;
        }
    }
    for (tag, single) in ModuleTag::ALL.iter().zip(singles) {
        assert!(single <= full * 1.05, "{tag:?}: {single} > {full}");
    }
}
