//! Python bindings. Tensors cross the boundary as a flat row-major list of
//! floats plus a `(b, c, h, w)` shape tuple; structured results come back
//! as plain dicts and lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use invnorm::flow::SqueezeStack;
use invnorm::harness::{self, HyperParams};
use invnorm::verify::{self, GradLayer};
use invnorm::{Error, InvNormConfig, Shape, Tensor};

type Dims = (usize, usize, usize, usize);
type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Shape(_) | Error::Size(_) | Error::Config(_) | Error::Format(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor(data: Vec<f32>, shape: Dims) -> PyResult<Tensor<f32>> {
    Tensor::new(Shape::new(shape.0, shape.1, shape.2, shape.3), data).map_err(py_err)
}

fn dims(s: Shape) -> Dims {
    (s.b, s.c, s.h, s.w)
}

fn unpack(t: Tensor<f32>) -> (Vec<f32>, Dims) {
    let s = dims(t.shape());
    (t.data().to_vec(), s)
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    match v {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_bound_py_any(py),
            (None, Some(i)) => i.into_bound_py_any(py),
            _ => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py),
        },
        Value::String(s) => s.into_bound_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            Ok(list.into_any())
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            Ok(dict.into_any())
        }
    }
}

fn serialize<'py, S: serde::Serialize>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &v)
}

/// Encoder output: deep features, per-sample log-det, and the squeeze
/// records `Model.decode` needs.
#[pyclass(module = "invnorm_py")]
struct Encoded {
    features: Tensor<f32>,
    #[pyo3(get)]
    logdet: Vec<f64>,
    records: SqueezeStack,
}

#[pymethods]
impl Encoded {
    #[getter]
    fn features(&self) -> (Vec<f32>, Dims) {
        unpack(self.features.clone())
    }
}

/// InvNorm block: two flow blocks, instance normalization, exact inverse.
#[pyclass(module = "invnorm_py")]
struct Model {
    inner: invnorm::InvNormModel<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (channels = 3, steps_per_block = 5, hidden = 32, seed = 0, identity = false))]
    fn new(
        channels: usize,
        steps_per_block: usize,
        hidden: usize,
        seed: u64,
        identity: bool,
    ) -> PyResult<Self> {
        let config = InvNormConfig::new(channels)
            .with_steps(steps_per_block)
            .with_hidden(hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = if identity {
            invnorm::InvNormModel::identity(config, &mut rng)
        } else {
            invnorm::InvNormModel::new(config, &mut rng)
        }
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: invnorm::invnorm::load_model(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        invnorm::invnorm::save_model(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn initialized(&self) -> bool {
        self.inner.is_initialized()
    }

    /// Data-dependent actnorm initialization from one batch.
    fn initialize(&mut self, data: Vec<f32>, shape: Dims) -> PyResult<()> {
        self.inner.initialize(&tensor(data, shape)?).map_err(py_err)
    }

    /// Style-normalized images with the input's shape.
    fn forward(&self, data: Vec<f32>, shape: Dims) -> PyResult<(Vec<f32>, Dims)> {
        let out = self.inner.forward(&tensor(data, shape)?).map_err(py_err)?;
        Ok(unpack(out.output))
    }

    /// Per-sample, per-channel `(mu, sigma)` of the deep features as
    /// `[b][c]` nested lists.
    fn style_stats(&self, data: Vec<f32>, shape: Dims) -> PyResult<(Rows, Rows)> {
        let stats = self
            .inner
            .forward(&tensor(data, shape)?)
            .map_err(py_err)?
            .stats;
        let rows = |v: &[f64]| v.chunks(stats.channels).map(<[f64]>::to_vec).collect();
        Ok((rows(&stats.mu), rows(&stats.sigma)))
    }

    fn encode(&self, data: Vec<f32>, shape: Dims) -> PyResult<Encoded> {
        let e = self.inner.encode(&tensor(data, shape)?).map_err(py_err)?;
        Ok(Encoded {
            features: e.features,
            logdet: e.logdet,
            records: e.records,
        })
    }

    /// Invert `encode`; `features` defaults to the encoded features.
    #[pyo3(signature = (encoded, features = None))]
    fn decode(
        &self,
        encoded: &Encoded,
        features: Option<(Vec<f32>, Dims)>,
    ) -> PyResult<(Vec<f32>, Dims)> {
        let z = match features {
            Some((data, shape)) => tensor(data, shape)?,
            None => encoded.features.clone(),
        };
        let mut records = encoded.records.clone();
        Ok(unpack(self.inner.decode(&z, &mut records).map_err(py_err)?))
    }

    /// Encoder log|det J| for one sample of `shape`.
    fn logdet(&self, shape: Dims) -> PyResult<f64> {
        self.inner
            .encode_logdet(Shape::new(shape.0, shape.1, shape.2, shape.3))
            .map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (shapes = None, trials = 20, seed = 0, hidden = 32))]
fn roundtrip_check<'py>(
    py: Python<'py>,
    shapes: Option<Vec<Dims>>,
    trials: usize,
    seed: u64,
    hidden: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let shapes: Vec<Shape> = match shapes {
        Some(v) => v
            .into_iter()
            .map(|d| Shape::new(d.0, d.1, d.2, d.3))
            .collect(),
        None => verify::default_roundtrip_shapes(),
    };
    let rows = verify::roundtrip_suite(&shapes, trials, seed, hidden).map_err(py_err)?;
    serialize(py, &rows)
}

#[pyfunction]
#[pyo3(signature = (max_dim = 16, seed = 0))]
fn logdet_check(py: Python<'_>, max_dim: usize, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    let rows = verify::logdet_suite(max_dim, seed).map_err(py_err)?;
    serialize(py, &rows)
}

/// `{layer: worst relative error}` over the selected layers.
#[pyfunction]
#[pyo3(signature = (layers = None, seed = 0))]
fn gradcheck(
    py: Python<'_>,
    layers: Option<Vec<String>>,
    seed: u64,
) -> PyResult<Bound<'_, PyDict>> {
    let layers: Vec<GradLayer> = match layers {
        Some(names) => names
            .iter()
            .map(|n| n.parse())
            .collect::<Result<_, _>>()
            .map_err(py_err)?,
        None => GradLayer::ALL.to_vec(),
    };
    let rows = verify::gradcheck_suite(&layers, invnorm::numerics::check::DEFAULT_EPS, seed)
        .map_err(py_err)?;
    let out = PyDict::new(py);
    for r in rows {
        out.set_item(r.layer.name(), r.worst())?;
    }
    Ok(out)
}

/// Train baseline and InvNorm variants with `held_out` excluded and return
/// both evaluation reports.
#[pyfunction]
#[pyo3(signature = (held_out, seed = 0, epochs = 30, n_per_domain = 500, classes = 5, hw = 32, data_seed = 0))]
#[allow(clippy::too_many_arguments)]
fn leave_one_domain<'py>(
    py: Python<'py>,
    held_out: String,
    seed: u64,
    epochs: usize,
    n_per_domain: usize,
    classes: usize,
    hw: usize,
    data_seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let summary = py
        .detach(move || {
            let data = harness::generate_dataset(
                data_seed,
                &harness::default_domains(),
                n_per_domain,
                classes,
                hw,
            )?;
            let hp = HyperParams {
                epochs,
                ..HyperParams::default()
            };
            harness::train(&data, &held_out, &hp, seed).map(|(_, s)| s)
        })
        .map_err(py_err)?;
    serialize(py, &summary)
}

#[pymodule]
pub fn invnorm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Encoded>()?;
    m.add_function(wrap_pyfunction!(roundtrip_check, m)?)?;
    m.add_function(wrap_pyfunction!(logdet_check, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(leave_one_domain, m)?)?;
    Ok(())
}
