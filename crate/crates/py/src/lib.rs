//! Python bindings. Arrays cross the boundary as flat lists in C order plus
//! a shape tuple. Label masks are returned as `bytes`.

use bitrunet::inference::{self, PredictConfig, Segmenter};
use bitrunet::metrics::{self, BinaryMask, Hd95Config, Hd95Mode, HD95_SENTINEL};
use bitrunet::model::checkpoint::{load_checkpoint, save_checkpoint};
use bitrunet::model::{BiTrUnet, ModelConfig};
use bitrunet::nifti::{self, Datatype, NiftiHeader};
use bitrunet::tensor::Tensor;
use bitrunet::training::{self, LrSchedule};
use bitrunet::volume::{ProbabilityMap, SegmentationMask};
use bitrunet::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(py_err)
}

fn grid(dims: Vec<usize>) -> PyResult<[usize; 3]> {
    dims.try_into()
        .map_err(|d: Vec<usize>| PyValueError::new_err(format!("expected 3 dims, got {}", d.len())))
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: BiTrUnet,
}

#[pymethods]
impl PyModel {
    /// Builds a randomly initialised network.
    #[new]
    #[pyo3(signature = (in_channels=4, input_size=(128, 128, 128), base_width=16, num_classes=4, embed_dim=384, vit_layers=4, heads=8, ffn_hidden=1536, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        in_channels: usize,
        input_size: (usize, usize, usize),
        base_width: usize,
        num_classes: usize,
        embed_dim: usize,
        vit_layers: usize,
        heads: usize,
        ffn_hidden: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            in_channels,
            input_size: [input_size.0, input_size.1, input_size.2],
            base_width,
            num_classes,
            embed_dim,
            vit_layers,
            heads,
            ffn_hidden,
            ..ModelConfig::default()
        };
        Ok(Self {
            inner: BiTrUnet::new(config, seed).map_err(py_err)?,
        })
    }

    /// The small test configuration (base width 4, embedding 16, one layer).
    #[staticmethod]
    #[pyo3(signature = (in_channels, input_size, seed=0))]
    fn tiny(in_channels: usize, input_size: (usize, usize, usize), seed: u64) -> PyResult<Self> {
        let config = ModelConfig::tiny(in_channels, [input_size.0, input_size.1, input_size.2]);
        Ok(Self {
            inner: BiTrUnet::new(config, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(py_err)
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize, usize) {
        let [h, w, d] = self.inner.config().input_size;
        (h, w, d)
    }

    /// Raw class scores for an `(N, C, H, W, D)` input.
    fn forward(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let out = self.inner.forward(&tensor(data, shape)?).map_err(py_err)?;
        Ok((out.data().to_vec(), out.shape().to_vec()))
    }

    /// Label mask in {0, 1, 2, 4} for a `(C, H, W, D)` volume.
    #[pyo3(signature = (data, shape, tta=true))]
    fn predict(&self, data: Vec<f64>, shape: Vec<usize>, tta: bool) -> PyResult<Vec<u8>> {
        let x = tensor(data, shape)?;
        let cfg = PredictConfig {
            tta,
            ..PredictConfig::default()
        };
        let models: [&dyn Segmenter; 1] = [&self.inner];
        let p = inference::predict_case(&models, &x, &cfg).map_err(py_err)?;
        Ok(p.mask.into_vec())
    }
}

fn binary(data: Vec<bool>, dims: [usize; 3]) -> PyResult<BinaryMask> {
    BinaryMask::new(dims, data).map_err(py_err)
}

#[pyfunction]
fn dice(pred: Vec<bool>, truth: Vec<bool>, dims: Vec<usize>) -> PyResult<f64> {
    let dims = grid(dims)?;
    metrics::dice(&binary(pred, dims)?, &binary(truth, dims)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (pred, truth, dims, spacing=(1.0, 1.0, 1.0), sentinel=HD95_SENTINEL, max_directed=false))]
fn hd95(
    pred: Vec<bool>,
    truth: Vec<bool>,
    dims: Vec<usize>,
    spacing: (f64, f64, f64),
    sentinel: f64,
    max_directed: bool,
) -> PyResult<f64> {
    let dims = grid(dims)?;
    let cfg = Hd95Config {
        spacing: [spacing.0, spacing.1, spacing.2],
        sentinel,
        mode: if max_directed { Hd95Mode::MaxDirected } else { Hd95Mode::Pooled },
    };
    metrics::hd95(&binary(pred, dims)?, &binary(truth, dims)?, &cfg).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (iteration, total, base_lr=2e-4, power=0.9))]
fn poly_lr(iteration: usize, total: usize, base_lr: f64, power: f64) -> PyResult<f64> {
    let schedule = LrSchedule {
        base_lr,
        total_iters: total,
        power,
    };
    training::poly_lr(iteration, &schedule).map_err(py_err)
}

/// Per-voxel vote over internal-label masks; `probs[i]` is a flat
/// `(classes, H, W, D)` map for model `i`.
#[pyfunction]
fn majority_vote(masks: Vec<Vec<u8>>, probs: Vec<Vec<f64>>, dims: Vec<usize>, classes: usize) -> PyResult<Vec<u8>> {
    let dims = grid(dims)?;
    let masks = masks
        .into_iter()
        .map(|m| SegmentationMask::new(dims, m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    let probs = probs
        .into_iter()
        .map(|p| {
            Tensor::new(vec![classes, dims[0], dims[1], dims[2]], p).and_then(ProbabilityMap::new)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    Ok(inference::majority_vote(&masks, &probs).map_err(py_err)?.into_vec())
}

/// Returns `(data, shape, spacing)` with shape `(T, X, Y, Z)`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn read_nifti(path: &str) -> PyResult<(Vec<f64>, Vec<usize>, (f64, f64, f64))> {
    let img = nifti::read_nifti(path).map_err(py_err)?;
    let [a, b, c] = img.header.spacing();
    Ok((img.data.data().to_vec(), img.data.shape().to_vec(), (a, b, c)))
}

/// Writes a 3D volume; `datatype` is one of "uint8", "int16", "float32".
#[pyfunction]
#[pyo3(signature = (path, data, dims, spacing=(1.0, 1.0, 1.0), datatype="float32"))]
fn write_nifti(path: &str, data: Vec<f64>, dims: Vec<usize>, spacing: (f64, f64, f64), datatype: &str) -> PyResult<()> {
    let dt = match datatype {
        "uint8" => Datatype::U8,
        "int16" => Datatype::I16,
        "float32" => Datatype::F32,
        other => return Err(PyValueError::new_err(format!("unsupported datatype {other:?}"))),
    };
    let dims = grid(dims)?;
    let header = NiftiHeader::new(dims, [spacing.0, spacing.1, spacing.2], dt);
    nifti::write_nifti(path, &header, &tensor(data, dims.to_vec())?, dt).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "bitrunet")]
fn bitrunet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(read_nifti, m)?)?;
    m.add_function(wrap_pyfunction!(write_nifti, m)?)?;
    Ok(())
}
