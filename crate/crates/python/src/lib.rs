//! Python bindings. Tensors cross the boundary as flat lists plus shapes.

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use viewreid::distance::{self, AttentionMode, DistanceOptions, FusionWeights};
use viewreid::{eval, io, pooling, FeatureMap, ViewEmbedding, ViewMaskSet, NUM_VIEWS};

create_exception!(pyviewreid, ViewReidError, PyValueError, "Error raised by the viewreid engine.");

fn err(e: viewreid::Error) -> PyErr {
    ViewReidError::new_err(format!("{}: {e}", e.class()))
}

fn attention_mode(name: &str) -> PyResult<AttentionMode> {
    match name {
        "common-visible" => Ok(AttentionMode::CommonVisible),
        "uniform" => Ok(AttentionMode::Uniform),
        other => Err(PyValueError::new_err(format!("unknown attention mode {other:?}"))),
    }
}

/// Pooled global and per-view features of one image.
#[pyclass(name = "Embedding", module = "pyviewreid", frozen, from_py_object)]
#[derive(Clone)]
struct PyEmbedding {
    inner: ViewEmbedding,
}

#[pymethods]
impl PyEmbedding {
    #[new]
    fn new(global: Vec<f32>, locals: [Vec<f32>; NUM_VIEWS], visibilities: [f32; NUM_VIEWS]) -> PyResult<Self> {
        Ok(Self {
            inner: ViewEmbedding::new(global, locals, visibilities).map_err(err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn global_feature(&self) -> Vec<f32> {
        self.inner.global().to_vec()
    }

    #[getter]
    fn locals(&self) -> Vec<Vec<f32>> {
        self.inner.locals().to_vec()
    }

    #[getter]
    fn visibilities(&self) -> [f32; NUM_VIEWS] {
        *self.inner.visibilities()
    }

    fn __repr__(&self) -> String {
        format!("Embedding(dim={}, visibilities={:?})", self.inner.dim(), self.inner.visibilities())
    }
}

fn feature_map(height: usize, width: usize, channels: usize, data: Vec<f32>) -> PyResult<FeatureMap> {
    FeatureMap::new(height, width, channels, data).map_err(err)
}

/// Mask average pooling plus global average pooling and visibilities.
/// `features` is H*W*C row-major, `masks` is 4*H*W view-major.
#[pyfunction]
fn embed(height: usize, width: usize, channels: usize, features: Vec<f32>, masks: Vec<f32>) -> PyResult<PyEmbedding> {
    let f = feature_map(height, width, channels, features)?;
    let m = ViewMaskSet::new(height, width, masks).map_err(err)?;
    Ok(PyEmbedding {
        inner: pooling::embed(&f, &m).map_err(err)?,
    })
}

#[pyfunction]
fn mask_average_pool(
    height: usize,
    width: usize,
    channels: usize,
    features: Vec<f32>,
    masks: Vec<f32>,
) -> PyResult<Vec<Vec<f32>>> {
    let f = feature_map(height, width, channels, features)?;
    let m = ViewMaskSet::new(height, width, masks).map_err(err)?;
    Ok(pooling::mask_average_pool(&f, &m).map_err(err)?.to_vec())
}

#[pyfunction]
fn visibility_scores(height: usize, width: usize, masks: Vec<f32>) -> PyResult<[f32; NUM_VIEWS]> {
    let m = ViewMaskSet::new(height, width, masks).map_err(err)?;
    Ok(pooling::visibility_scores(&m))
}

/// Returns `(weights, degenerate)`.
#[pyfunction]
#[pyo3(signature = (vp, vq, mode = "common-visible"))]
fn attention_weights(vp: [f64; NUM_VIEWS], vq: [f64; NUM_VIEWS], mode: &str) -> PyResult<([f64; NUM_VIEWS], bool)> {
    let a = distance::attention(attention_mode(mode)?, &vp, &vq).map_err(err)?;
    Ok((a.weights, a.degenerate))
}

#[pyfunction]
fn local_distance(p: &PyEmbedding, q: &PyEmbedding) -> PyResult<f64> {
    distance::local_distance(&p.inner, &q.inner).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (p, q, lambda1 = 1.0, lambda2 = 0.5))]
fn fused_distance(p: &PyEmbedding, q: &PyEmbedding, lambda1: f64, lambda2: f64) -> PyResult<f64> {
    let w = FusionWeights::new(lambda1, lambda2).map_err(err)?;
    distance::fused_distance(&p.inner, &q.inner, w).map_err(err)
}

/// Q x G fused distances as nested lists.
#[pyfunction]
#[pyo3(signature = (queries, gallery, lambda1 = 1.0, lambda2 = 0.5, attention = "common-visible", normalize = false))]
fn distance_matrix(
    py: Python<'_>,
    queries: Vec<PyEmbedding>,
    gallery: Vec<PyEmbedding>,
    lambda1: f64,
    lambda2: f64,
    attention: &str,
    normalize: bool,
) -> PyResult<Vec<Vec<f32>>> {
    let opts = DistanceOptions {
        weights: FusionWeights::new(lambda1, lambda2).map_err(err)?,
        attention: attention_mode(attention)?,
        normalize,
    };
    let q: Vec<ViewEmbedding> = queries.into_iter().map(|e| e.inner).collect();
    let g: Vec<ViewEmbedding> = gallery.into_iter().map(|e| e.inner).collect();
    let d = py
        .detach(|| distance::distance_matrix(&q, &g, &opts))
        .map_err(err)?;
    Ok(d.values.chunks(d.num_gallery).map(<[f32]>::to_vec).collect())
}

#[pyfunction]
fn average_precision(ranked_relevance: Vec<bool>) -> PyResult<f64> {
    eval::average_precision(&ranked_relevance).map_err(err)
}

/// Returns `(dims, flat_values)`.
#[pyfunction]
fn read_tensor(path: std::path::PathBuf) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let t = io::read_tensor(path).map_err(err)?;
    Ok((t.dims().to_vec(), t.into_data()))
}

#[pyfunction]
fn write_tensor(path: std::path::PathBuf, dims: Vec<usize>, data: Vec<f32>) -> PyResult<()> {
    let t = io::Tensor::new(dims, data).map_err(err)?;
    io::write_tensor(path, &t).map_err(err)
}

#[pymodule]
fn pyviewreid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ViewReidError", m.py().get_type::<ViewReidError>())?;
    m.add("NUM_VIEWS", NUM_VIEWS)?;
    m.add_class::<PyEmbedding>()?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(mask_average_pool, m)?)?;
    m.add_function(wrap_pyfunction!(visibility_scores, m)?)?;
    m.add_function(wrap_pyfunction!(attention_weights, m)?)?;
    m.add_function(wrap_pyfunction!(local_distance, m)?)?;
    m.add_function(wrap_pyfunction!(fused_distance, m)?)?;
    m.add_function(wrap_pyfunction!(distance_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pyo3::types::PyDict;

    #[test]
    fn module_through_the_interpreter() {
        Python::initialize();
        Python::attach(|py| {
            let m = PyModule::new(py, "pyviewreid").unwrap();
            pyviewreid(&m).unwrap();
            let locals = PyDict::new(py);
            locals.set_item("vr", &m).unwrap();
            py.run(
                c"
w, deg = vr.attention_weights([2, 1, 0, 1], [1, 2, 3, 0])
assert w == (0.5, 0.5, 0.0, 0.0) or list(w) == [0.5, 0.5, 0.0, 0.0], w
assert not deg
e = vr.embed(1, 2, 1, [1.0, 3.0], [1, 1, 0, 0, 0, 1, 0, 0])
assert list(e.global_feature) == [2.0]
assert e.locals[0] == [2.0] and e.locals[2] == [3.0]
assert abs(vr.average_precision([True, False, True, False]) - 5 / 6) < 1e-15
d = vr.distance_matrix([e], [e, e])
assert d == [[0.0, 0.0]]
try:
    vr.mask_average_pool(1, 1, 1, [1.0], [2.0, 0, 0, 0])
    raise AssertionError('expected failure')
except vr.ViewReidError as err:
    assert str(err).startswith('MaskOutOfRange'), err
",
                None,
                Some(&locals),
            )
            .unwrap();
        });
    }

    #[test]
    fn attention_mode_names() {
        assert_eq!(attention_mode("uniform").unwrap(), AttentionMode::Uniform);
        assert!(attention_mode("cv").is_err());
    }
}
