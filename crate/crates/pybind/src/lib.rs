//! Python bindings: tensors travel as `(shape, flat_data)` pairs so the
//! module has no numpy dependency.

use denas_core::data::{make_dataset, NoiseCase};
use denas_core::decode::{ArchitecturePlan, DecodedModel};
use denas_core::error::DenasError;
use denas_core::latency::LatencyTable;
use denas_core::prior::{train_prior, PriorModel};
use denas_core::search::{
    decode_outcomes, prepare_part_data, search_all, train_decoded, SearchConfig, TrainConfig,
};
use denas_core::stats::operator_rates;
use denas_core::supernet::{estimate_space_size_for_spec, PartSpec};
use denas_core::tensor::TensorData;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::path::{Path, PathBuf};

fn err(e: DenasError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type PyTensor = ([usize; 4], Vec<f64>);

fn to_tensor((shape, data): PyTensor) -> PyResult<TensorData> {
    TensorData::new(shape, data).map_err(err)
}

fn from_tensor(t: &TensorData) -> PyTensor {
    (t.shape, t.data.clone())
}

/// Part topology description.
#[pyclass(name = "PartSpec", from_py_object)]
#[derive(Clone)]
struct PyPartSpec {
    inner: PartSpec,
}

#[pymethods]
impl PyPartSpec {
    #[new]
    #[pyo3(signature = (rows=2, cells_per_row=4, base_width=16, in_channels=1, seed=0))]
    fn new(
        rows: usize,
        cells_per_row: usize,
        base_width: usize,
        in_channels: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = PartSpec {
            rows,
            cells_per_row,
            base_width,
            in_channels,
            seed,
        };
        inner.validate().map_err(err)?;
        Ok(PyPartSpec { inner })
    }

    fn space_size_log10(&self, parts: usize) -> f64 {
        estimate_space_size_for_spec(&self.inner, parts)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Denoising-design prior (trainable teacher network).
#[pyclass(name = "Prior", unsendable)]
struct PyPrior {
    inner: PriorModel,
}

#[pymethods]
impl PyPrior {
    #[new]
    fn new(in_channels: usize, width: usize, seed: u64) -> Self {
        PyPrior {
            inner: PriorModel::new(in_channels, width, seed),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPrior {
            inner: PriorModel::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Train on (noisy, clean) tensor pairs; returns per-epoch losses.
    fn train(
        &self,
        pairs: Vec<(PyTensor, PyTensor)>,
        epochs: usize,
        lr: f64,
        plateau_tol: f64,
    ) -> PyResult<Vec<f64>> {
        let pairs = py_pairs(pairs)?;
        train_prior(&self.inner, &pairs, epochs, lr, plateau_tol).map_err(err)
    }

    fn denoise(&self, x: PyTensor) -> PyResult<PyTensor> {
        let out = self.inner.denoise(&to_tensor(x)?).map_err(err)?;
        Ok(from_tensor(&out))
    }
}

fn py_pairs(pairs: Vec<(PyTensor, PyTensor)>) -> PyResult<Vec<denas_core::data::PatchPair>> {
    pairs
        .into_iter()
        .map(|(n, c)| {
            Ok(denas_core::data::PatchPair {
                noisy: to_tensor(n)?,
                clean: to_tensor(c)?,
                source_id: 0,
                crop: (0, 0),
            })
        })
        .collect()
}

/// Decoded architecture plan.
#[pyclass(name = "Plan", from_py_object)]
#[derive(Clone)]
struct PyPlan {
    inner: ArchitecturePlan,
}

#[pymethods]
impl PyPlan {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPlan {
            inner: ArchitecturePlan::load(Path::new(&path)).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn parts(&self) -> usize {
        self.inner.parts.len()
    }

    fn cell_count(&self) -> usize {
        self.inner.parts.iter().map(|p| p.cells.len()).sum()
    }

    /// Per-part operator frequency maps.
    fn operator_rates(&self) -> PyResult<Vec<std::collections::BTreeMap<String, f64>>> {
        operator_rates(&self.inner).map_err(err)
    }
}

/// Runnable decoded model with fresh or loaded parameters.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: DecodedModel,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(plan: PyPlan, spec: PyPartSpec, in_channels: usize, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: DecodedModel::new(&plan.inner, &spec.inner, in_channels, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: DecodedModel::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Train from scratch against a prior; returns per-epoch losses.
    #[pyo3(signature = (prior, pairs, epochs=60, batch=8, lr_max=2e-4, lr_min=1e-6, warmup=10, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &self,
        prior: &PyPrior,
        pairs: Vec<(PyTensor, PyTensor)>,
        epochs: usize,
        batch: usize,
        lr_max: f64,
        lr_min: f64,
        warmup: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let cfg = TrainConfig {
            epochs,
            batch,
            lr_max,
            lr_min,
            warmup,
            seed,
        };
        train_decoded(&self.inner, &prior.inner, &py_pairs(pairs)?, &cfg).map_err(err)
    }

    fn denoise(&self, x: PyTensor) -> PyResult<PyTensor> {
        let out = self.inner.denoise(&to_tensor(x)?).map_err(err)?;
        Ok(from_tensor(&out))
    }
}

/// Procedural noisy/clean patch pairs; returns (search_half, holdout_half).
#[pyfunction]
#[pyo3(signature = (patch, count, sigma, seed, split_ratio=0.5))]
fn make_pairs(
    patch: usize,
    count: usize,
    sigma: f64,
    seed: u64,
    split_ratio: f64,
) -> PyResult<(Vec<(PyTensor, PyTensor)>, Vec<(PyTensor, PyTensor)>)> {
    let case = NoiseCase::Awgn { sigma, seed };
    let split = make_dataset(&[], patch, count, split_ratio, &case, seed).map_err(err)?;
    let conv = |v: &[denas_core::data::PatchPair]| {
        v.iter()
            .map(|p| (from_tensor(&p.noisy), from_tensor(&p.clean)))
            .collect()
    };
    Ok((conv(&split.pairs_w), conv(&split.pairs_arch)))
}

/// Full three-part search followed by decoding; returns the plan.
#[pyfunction]
#[pyo3(signature = (prior, spec, pairs, epochs=30, batch=16, seed=0, lambda_=0.001))]
fn search(
    prior: &PyPrior,
    spec: PyPartSpec,
    pairs: Vec<(PyTensor, PyTensor)>,
    epochs: usize,
    batch: usize,
    seed: u64,
    lambda_: f64,
) -> PyResult<PyPlan> {
    let pairs = py_pairs(pairs)?;
    let half = pairs.len() / 2;
    let split = denas_core::data::DatasetSplit {
        pairs_w: pairs[..half].to_vec(),
        pairs_arch: pairs[half..].to_vec(),
        seed,
        manifest: vec![],
    };
    // ensure both alternation splits are populated
    if split.pairs_w.is_empty() || split.pairs_arch.is_empty() {
        return Err(PyValueError::new_err("need at least two pairs"));
    }
    let table = LatencyTable::synthetic(&spec.inner, |op, r, wi, wo| {
        1e-4 * (1.0 + op.len() as f64 + r as f64 + wi as f64 + wo as f64)
    })
    .map_err(err)?;
    let mut cfg = SearchConfig {
        epochs,
        batch,
        seed,
        ..SearchConfig::default()
    };
    cfg.weights.lambda = lambda_;
    // keep the data preparation identical to the CLI path
    let _ = prepare_part_data(&prior.inner, &split).map_err(err)?;
    let outcomes = search_all(&prior.inner, &spec.inner, &split, &table, &cfg, None, false)
        .map_err(err)?;
    Ok(PyPlan {
        inner: decode_outcomes(&outcomes, &spec.inner).map_err(err)?,
    })
}

#[pyfunction]
fn psnr(a: PyTensor, b: PyTensor, data_range: f64) -> PyResult<f64> {
    denas_core::metrics::psnr(&to_tensor(a)?, &to_tensor(b)?, data_range).map_err(err)
}

#[pyfunction]
fn ssim(a: PyTensor, b: PyTensor, data_range: f64) -> PyResult<f64> {
    denas_core::metrics::ssim(&to_tensor(a)?, &to_tensor(b)?, data_range).map_err(err)
}

#[pyfunction]
fn decode_resolution(masses: Vec<f64>) -> Vec<usize> {
    denas_core::decode::decode_resolution(&masses)
}

#[pyfunction]
fn decode_dense(masses: Vec<f64>) -> Vec<usize> {
    denas_core::decode::decode_dense(&masses)
}

#[pymodule]
fn denas_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPartSpec>()?;
    m.add_class::<PyPrior>()?;
    m.add_class::<PyPlan>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(make_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(decode_resolution, m)?)?;
    m.add_function(wrap_pyfunction!(decode_dense, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
