//! Python bindings: scaled tensors, the kernel session with its audit log, and toy
//! integer models.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use scaleprop::analysis::{precision_loss, speedup_estimate, storage_report};
use scaleprop::format::ModelFile;
use scaleprop::transformer::{FloatModel, IntegerModel, ModelConfig, ReferenceModel};
use scaleprop::{
    IntTensor, Kernel, Precision, RationalTensor, ScaleGranularity, ScaleTensor,
    ScaledTensor,
};

fn err(e: scaleprop::Error) -> PyErr {
    match e {
        scaleprop::Error::Io(io) => PyIOError::new_err(io.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn precision(bits: u32) -> PyResult<Precision> {
    Precision::new(bits).map_err(err)
}

fn granularity(g: &str) -> PyResult<ScaleGranularity> {
    g.parse().map_err(err)
}

fn real(values: Vec<f32>, shape: Vec<usize>) -> PyResult<RationalTensor> {
    RationalTensor::new(shape, values).map_err(err)
}

/// Integer payload with its scale; the represented value is `payload / scale`.
#[pyclass(name = "ScaledTensor", module = "pyscaleprop")]
struct PyScaledTensor {
    inner: ScaledTensor,
}

#[pymethods]
impl PyScaledTensor {
    #[new]
    #[pyo3(signature = (payload, shape, scale, scale_shape, precision = 7))]
    fn new(
        payload: Vec<i64>,
        shape: Vec<usize>,
        scale: Vec<f32>,
        scale_shape: Vec<usize>,
        precision: u32,
    ) -> PyResult<Self> {
        let p = self::precision(precision)?;
        let data = IntTensor::new(shape, payload, p).map_err(err)?;
        let scale = ScaleTensor::new(scale_shape, scale).map_err(err)?;
        let inner = ScaledTensor::new(data, scale).map_err(err)?;
        if !inner.data().in_range() {
            return Err(PyValueError::new_err(format!("payload exceeds {precision} bits")));
        }
        Ok(Self { inner })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn payload(&self) -> Vec<i64> {
        self.inner.payload().to_vec()
    }

    #[getter]
    fn scale(&self) -> Vec<f32> {
        self.inner.scale().values().to_vec()
    }

    #[getter]
    fn scale_shape(&self) -> Vec<usize> {
        self.inner.scale().shape().to_vec()
    }

    #[getter]
    fn precision(&self) -> u8 {
        self.inner.precision().bits()
    }

    /// Row-major FP32 values `payload / scale`.
    fn dequantize(&self) -> Vec<f32> {
        scaleprop::dequantize(&self.inner).into_values()
    }

    fn __repr__(&self) -> String {
        format!(
            "ScaledTensor(shape={:?}, scale_shape={:?}, precision={})",
            self.inner.shape(),
            self.inner.scale().shape(),
            self.inner.precision().bits()
        )
    }
}

fn wrap(inner: ScaledTensor) -> PyScaledTensor {
    PyScaledTensor { inner }
}

/// Quantizes row-major `values` of `shape` with a fresh scale.
#[pyfunction]
#[pyo3(signature = (values, shape, precision = 7, granularity = "row"))]
fn quantize(values: Vec<f32>, shape: Vec<usize>, precision: u32, granularity: &str) -> PyResult<PyScaledTensor> {
    let r = real(values, shape)?;
    scaleprop::scale::quantize_auto(&r, self::granularity(granularity)?, self::precision(precision)?)
        .map(wrap)
        .map_err(err)
}

/// Re-expresses two tensors under their common (minimum) scale.
#[pyfunction]
fn scale_match(a: PyRef<'_, PyScaledTensor>, b: PyRef<'_, PyScaledTensor>) -> PyResult<(PyScaledTensor, PyScaledTensor)> {
    let mut out = scaleprop::scale_match(&[a.inner.clone(), b.inner.clone()]).map_err(err)?;
    let second = out.pop().expect("two outputs");
    let first = out.pop().expect("two outputs");
    Ok((wrap(first), wrap(second)))
}

fn kernel(name: &str, n: u32, axis: usize, widen_bits: u32) -> PyResult<Kernel> {
    Ok(match name {
        "add" => Kernel::Add,
        "ew_mul" => Kernel::EwMul,
        "matmul" => Kernel::MatMul,
        "pow_n" => Kernel::PowN(n),
        "abs" => Kernel::Abs,
        "relu" => Kernel::Relu,
        "sum_reduce" => Kernel::SumReduce { axis },
        "int_div" => Kernel::IntDiv { widen_bits },
        other => return Err(PyValueError::new_err(format!("unknown kernel {other:?}"))),
    })
}

/// Runs kernels through the re-scaling protocol and records every step.
#[pyclass(name = "Session", module = "pyscaleprop")]
struct PySession {
    inner: scaleprop::Session,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (precision = 7))]
    fn new(precision: u32) -> PyResult<Self> {
        Ok(Self {
            inner: scaleprop::Session::new(self::precision(precision)?),
        })
    }

    /// Applies `kernel` (`add`, `ew_mul`, `matmul`, `pow_n`, `abs`, `relu`,
    /// `sum_reduce`, `int_div`). `matmul` takes `a` and `b^T`.
    #[pyo3(signature = (kernel, inputs, n = 2, axis = 0, widen_bits = 0))]
    fn apply(
        &mut self,
        kernel: &str,
        inputs: Vec<PyRef<'_, PyScaledTensor>>,
        n: u32,
        axis: usize,
        widen_bits: u32,
    ) -> PyResult<PyScaledTensor> {
        let k = self::kernel(kernel, n, axis, widen_bits)?;
        let ins: Vec<&ScaledTensor> = inputs.iter().map(|t| &t.inner).collect();
        self.inner.apply(k, &ins).map(wrap).map_err(err)
    }

    /// The audit log as tab-separated text.
    fn audit_tsv(&self) -> String {
        self.inner.log().to_tsv()
    }

    fn __len__(&self) -> usize {
        self.inner.log().len()
    }

    fn dequantize_count(&self) -> usize {
        self.inner.log().dequantize_count()
    }

    fn is_integer_pure(&self) -> bool {
        self.inner.log().is_integer_pure()
    }
}

/// A quantized toy encoder stack with its FP32 twin.
#[pyclass(name = "Model", module = "pyscaleprop")]
struct PyModel {
    inner: IntegerModel,
}

impl PyModel {
    fn input(&self, values: Vec<f32>) -> PyResult<RationalTensor> {
        let d = self.inner.config.d_model;
        if d == 0 || values.len() % d != 0 {
            return Err(PyValueError::new_err(format!("input length must be a multiple of d_model = {d}")));
        }
        real(values.clone(), vec![values.len() / d, d])
    }
}

#[pymethods]
impl PyModel {
    /// Seeded random FP32 model quantized at `precision`.
    #[staticmethod]
    #[pyo3(signature = (seed = 0, precision = 7, d_model = 32, heads = 2, ffn_width = 128, layers = 2, vocab = 64, degree = 3, granularity = "row"))]
    #[allow(clippy::too_many_arguments)]
    fn random(
        seed: u64,
        precision: u32,
        d_model: usize,
        heads: usize,
        ffn_width: usize,
        layers: usize,
        vocab: usize,
        degree: u32,
        granularity: &str,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            d_model,
            heads,
            ffn_width,
            layers,
            vocab,
            degree,
        };
        let inner = FloatModel::random(config, seed)
            .and_then(|m| m.quantize(Precision::new(precision)?, granularity.parse()?))
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, degree = 3))]
    fn load(path: &str, degree: u32) -> PyResult<Self> {
        let inner = ModelFile::read(path)
            .and_then(|f| f.to_integer_model(degree))
            .map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        ModelFile::from_integer(&self.inner).write(path).map_err(err)
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.config.d_model
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.config.layers
    }

    #[getter]
    fn precision(&self) -> u8 {
        self.inner.precision.bits()
    }

    /// Integer forward pass over a row-major `T x d_model` input; kernels are
    /// recorded in `session`.
    #[pyo3(signature = (values, session, logits = false))]
    fn forward(&self, values: Vec<f32>, session: &mut PySession, logits: bool) -> PyResult<PyScaledTensor> {
        let x = self.inner.quantize_input(&self.input(values)?).map_err(err)?;
        let s = &mut session.inner;
        let mut out = self.inner.forward(s, &x).map_err(err)?;
        if logits {
            out = self.inner.logits(s, &out).map_err(err)?;
        }
        Ok(wrap(out))
    }

    /// `(module, layer, mse)` against the FP32 twin, one entry per module and layer.
    fn precision_loss(&self, inputs: Vec<Vec<f32>>) -> PyResult<Vec<(String, Option<usize>, f64)>> {
        let xs = inputs
            .into_iter()
            .map(|v| self.input(v))
            .collect::<PyResult<Vec<_>>>()?;
        let reference = ReferenceModel::poly(self.inner.dequantize());
        let report = precision_loss(&self.inner, &reference, &xs).map_err(err)?;
        Ok(report
            .entries
            .into_iter()
            .map(|e| (e.module.name().to_string(), e.layer, e.mse))
            .collect())
    }

    /// FP32 over integer file size.
    fn storage_ratio(&self) -> PyResult<f64> {
        storage_report(&self.inner).map(|r| r.ratio).map_err(err)
    }

    /// Amdahl estimate of one forward pass when integer matmuls run `factor`x faster.
    #[pyo3(signature = (values, factor = 6.0))]
    fn speedup(&self, values: Vec<f32>, factor: f64) -> PyResult<f64> {
        let mut s = PySession::new(u32::from(self.inner.precision.bits()))?;
        self.forward(values, &mut s, true)?;
        speedup_estimate(s.inner.log(), factor)
            .map(|e| e.estimate)
            .map_err(err)
    }
}

#[pymodule]
fn pyscaleprop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScaledTensor>()?;
    m.add_class::<PySession>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(scale_match, m)?)?;
    Ok(())
}
