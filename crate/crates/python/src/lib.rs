//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::toxspace as core;
use core::contrastive::PromptPairSet;
use core::eval;
use core::fixture::{gen_planted_model, FixtureShape, PlantedFixture};
use core::microformer::Transformer;
use core::numerics::{self, Basis, Centering, Matrix};
use core::pipeline::{discover, SubspaceParams};
use core::ranking::{self, BadWordsList, GlobalSubspace};
use core::surgery::{self, EditPlan};
use core::tensorstore::TensorMap;

create_exception!(toxspace, ToxspaceError, PyException);

fn err(e: impl std::error::Error) -> PyErr {
    let mut msg = e.to_string();
    let mut cause = e.source();
    while let Some(c) = cause {
        msg.push_str(&format!(": {c}"));
        cause = c.source();
    }
    ToxspaceError::new_err(msg)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

fn bad_list(ids: Vec<u32>, vocab_size: usize) -> PyResult<BadWordsList> {
    BadWordsList::from_ids(ids, vocab_size).map_err(err)
}

/// A validated model checkpoint.
#[pyclass(name = "Checkpoint", module = "toxspace", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: TensorMap,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: core::tensorstore::load_checkpoint(path).map_err(err)? })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: TensorMap::from_bytes(data).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core::tensorstore::save_checkpoint(&self.inner, path).map_err(err)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_bytes().map_err(err)
    }

    fn content_hash(&self) -> PyResult<String> {
        self.inner.content_hash().map_err(err)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.inner.config();
        let d = PyDict::new(py);
        d.set_item("n_layers", c.n_layers)?;
        d.set_item("d_model", c.d_model)?;
        d.set_item("d_ff", c.d_ff)?;
        d.set_item("vocab_size", c.vocab_size)?;
        d.set_item("n_heads", c.n_heads)?;
        d.set_item("max_seq", c.max_seq)?;
        Ok(d)
    }

    fn tensor_names(&self) -> Vec<String> {
        self.inner.tensors().keys().cloned().collect()
    }

    /// `(shape, flat row-major data)` of one tensor.
    fn tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self.inner.get(name).map_err(err)?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// Logits, one row per position.
    fn forward(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let model = Transformer::new(&self.inner).map_err(err)?;
        Ok(rows(&model.forward(&tokens, false, None).map_err(err)?.logits))
    }

    fn perplexity(&self, corpus: Vec<Vec<u32>>) -> PyResult<f64> {
        let model = Transformer::new(&self.inner).map_err(err)?;
        eval::perplexity(&model, &corpus).map_err(err)
    }

    /// Mean bad-token probability over greedy continuations of `prompts`.
    #[pyo3(signature = (prompts, bad_ids, steps = eval::DEFAULT_STEPS))]
    fn badword_mass(&self, prompts: Vec<Vec<u32>>, bad_ids: Vec<u32>, steps: usize) -> PyResult<f64> {
        let model = Transformer::new(&self.inner).map_err(err)?;
        let bad = bad_list(bad_ids, self.inner.config().vocab_size)?;
        eval::badword_mass(&model, &prompts, &bad, steps).map_err(err)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Checkpoint(n_layers={}, d_model={}, d_ff={}, vocab_size={})", c.n_layers, c.d_model, c.d_ff, c.vocab_size)
    }
}

/// Orthonormal toxic (or control) subspace.
#[pyclass(name = "Subspace", module = "toxspace", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySubspace {
    inner: GlobalSubspace,
}

#[pymethods]
impl PySubspace {
    #[new]
    #[pyo3(signature = (basis, kind = "external"))]
    fn new(basis: Vec<Vec<f64>>, kind: &str) -> PyResult<Self> {
        let dim = basis.first().map_or(0, Vec::len);
        let b = Basis::new(dim, basis).map_err(err)?;
        Ok(Self { inner: GlobalSubspace::from_basis(b, kind) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: GlobalSubspace::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn basis(&self) -> Vec<Vec<f64>> {
        self.inner.basis.vectors().to_vec()
    }

    #[getter]
    fn r(&self) -> usize {
        self.inner.r()
    }

    #[getter]
    fn ratio(&self) -> f64 {
        self.inner.ratio()
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.clone()
    }

    #[getter]
    fn direction_scores(&self) -> Vec<f64> {
        self.inner.direction_scores.clone()
    }

    /// `(I − P) v`.
    fn remove_from(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        if v.len() != self.inner.d_model() {
            return Err(ToxspaceError::new_err(format!("expected a vector of length {}, got {}", self.inner.d_model(), v.len())));
        }
        Ok(self.inner.basis.remove_from(&v))
    }

    fn __repr__(&self) -> String {
        format!("Subspace(kind={:?}, r={}, d_model={})", self.inner.kind, self.inner.r(), self.inner.d_model())
    }
}

/// Synthetic model with a planted toxic direction and its ground truth.
#[pyclass(name = "Fixture", module = "toxspace", frozen)]
struct PyFixture {
    inner: PlantedFixture,
}

#[pymethods]
impl PyFixture {
    #[getter]
    fn model(&self) -> PyCheckpoint {
        PyCheckpoint { inner: self.inner.model.clone() }
    }

    #[getter]
    fn v_star(&self) -> Vec<f64> {
        self.inner.v_star.clone()
    }

    #[getter]
    fn bad_ids(&self) -> Vec<u32> {
        self.inner.bad_ids.tokens().iter().copied().collect()
    }

    #[getter]
    fn planted_layers(&self) -> Vec<usize> {
        self.inner.planted_layers.clone()
    }

    #[getter]
    fn pairs(&self) -> Vec<(Vec<u32>, Vec<u32>)> {
        self.inner.pairs.pairs().to_vec()
    }

    #[getter]
    fn toxic_prompts(&self) -> Vec<Vec<u32>> {
        self.inner.toxic_prompts.clone()
    }

    #[getter]
    fn neutral_corpus(&self) -> Vec<Vec<u32>> {
        self.inner.neutral_corpus.clone()
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.inner.vocab.clone()
    }
}

#[pyfunction]
#[pyo3(signature = (seed = 0, n_layers = 4, d_model = 32, d_ff = 64, vocab_size = 100, n_bad = 10))]
fn gen_fixture(
    seed: u64,
    n_layers: usize,
    d_model: usize,
    d_ff: usize,
    vocab_size: usize,
    n_bad: usize,
) -> PyResult<PyFixture> {
    let shape = FixtureShape { n_layers, d_model, d_ff, vocab_size, n_bad, seed };
    Ok(PyFixture { inner: gen_planted_model(shape).map_err(err)? })
}

type Rows = Vec<Vec<f64>>;

/// Thin SVD `(u, sigma, vt)` keeping non-negligible singular values.
#[pyfunction]
fn svd(m: Vec<Vec<f64>>) -> PyResult<(Rows, Vec<f64>, Rows)> {
    let s = numerics::svd(&matrix(m)?).map_err(err)?;
    Ok((rows(&s.u), s.sigma.clone(), rows(&s.vt)))
}

/// Top-`k` right singular vectors and the 1-based ranks flagged degenerate.
#[pyfunction]
fn top_right_singular(m: Vec<Vec<f64>>, k: usize) -> PyResult<(Rows, Vec<f64>, Vec<usize>)> {
    let t = numerics::top_right_singular(&matrix(m)?, k).map_err(err)?;
    let vectors = t.components.iter().map(|c| c.vector.clone()).collect();
    let sigmas = t.components.iter().map(|c| c.sigma).collect();
    Ok((vectors, sigmas, t.degenerate))
}

/// Principal directions reaching `eta` explained variance and their shares.
#[pyfunction]
#[pyo3(signature = (rows, eta, centered = false))]
fn principal_components(rows: Vec<Vec<f64>>, eta: f64, centered: bool) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let centering = if centered { Centering::Centered } else { Centering::Uncentered };
    let pcs = numerics::principal_components(&matrix(rows)?, eta, centering).map_err(err)?;
    Ok((pcs.basis.vectors().to_vec(), pcs.explained))
}

/// `(score, oriented vector, flipped)`.
#[pyfunction]
fn tox_score(v: Vec<f64>, embed: Vec<Vec<f64>>, bad_ids: Vec<u32>, m: usize) -> PyResult<(f64, Vec<f64>, bool)> {
    let e = matrix(embed)?;
    let bad = bad_list(bad_ids, e.rows())?;
    let s = ranking::tox_score(&v, &e, &bad, m).map_err(err)?;
    Ok((s.score, s.oriented, s.flipped))
}

/// Full discovery: contrastive SVD candidates, scoring, selection and PCA.
#[pyfunction]
#[pyo3(signature = (model, pairs, bad_ids, k = 10, m = 100, alpha_sel = 1.0, eta = 0.8))]
fn find_subspace(
    model: &PyCheckpoint,
    pairs: Vec<(Vec<u32>, Vec<u32>)>,
    bad_ids: Vec<u32>,
    k: usize,
    m: usize,
    alpha_sel: f64,
    eta: f64,
) -> PyResult<PySubspace> {
    let t = Transformer::new(&model.inner).map_err(err)?;
    let pairs = PromptPairSet::new(pairs).map_err(err)?;
    let bad = bad_list(bad_ids, model.inner.config().vocab_size)?;
    let params = SubspaceParams { k, m, alpha_sel, eta, ..SubspaceParams::default() };
    Ok(PySubspace { inner: discover(&t, &pairs, &bad, &params).map_err(err)?.subspace })
}

/// Projects the subspace out of every value vector in `layer_start ..= L-1`.
#[pyfunction]
fn apply_gloss(model: &PyCheckpoint, subspace: &PySubspace, layer_start: usize) -> PyResult<PyCheckpoint> {
    let plan = EditPlan::to_last(subspace.inner.clone(), layer_start, model.inner.config()).map_err(err)?;
    Ok(PyCheckpoint { inner: surgery::apply_gloss(&model.inner, &plan).map_err(err)? })
}

#[pyfunction]
fn random_control(subspace: &PySubspace, seed: u64) -> PyResult<PySubspace> {
    Ok(PySubspace { inner: surgery::random_control_subspace(&subspace.inner, seed).map_err(err)? })
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    core::cli::run(std::iter::once("toxspace".to_string()).chain(args))
}

#[pymodule(name = "toxspace")]
fn toxspace(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ToxspaceError", m.py().get_type::<ToxspaceError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PySubspace>()?;
    m.add_class::<PyFixture>()?;
    m.add_function(wrap_pyfunction!(gen_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(top_right_singular, m)?)?;
    m.add_function(wrap_pyfunction!(principal_components, m)?)?;
    m.add_function(wrap_pyfunction!(tox_score, m)?)?;
    m.add_function(wrap_pyfunction!(find_subspace, m)?)?;
    m.add_function(wrap_pyfunction!(apply_gloss, m)?)?;
    m.add_function(wrap_pyfunction!(random_control, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
