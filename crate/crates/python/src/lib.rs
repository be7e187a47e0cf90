//! Python bindings: signal mixing, features, metrics and embedding
//! extraction.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use spkinv::config::ExperimentConfig;
use spkinv::corpus::{build_corpus as build, CorpusConfig};
use spkinv::eval::{self, ScoreSet};
use spkinv::features::{logmel as fbank, FbankConfig};
use spkinv::nn::{checkpoint, features_to_batch, NetConfig, Network};
use spkinv::rng::stream_from_seed;
use spkinv::signal::{self, Waveform};

fn py_err(e: spkinv::Error) -> PyErr {
    match e {
        spkinv::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn scores(labels: Vec<bool>, scores: Vec<f64>) -> PyResult<ScoreSet> {
    ScoreSet::from_labels(&labels, &scores).map_err(py_err)
}

/// SNR in dB of `signal` against `noise`.
#[pyfunction]
fn snr_db(signal: Vec<f64>, noise: Vec<f64>) -> PyResult<f64> {
    signal::snr_db(&Waveform::new(signal, 16_000), &Waveform::new(noise, 16_000)).map_err(py_err)
}

/// Mixes `noise` into `clean` at `snr_db`; the noise is tiled or cropped
/// at a random offset drawn from `seed`.
#[pyfunction]
#[pyo3(signature = (clean, noise, snr_db, seed=0, sample_rate=16_000))]
fn mix_at_snr(clean: Vec<f64>, noise: Vec<f64>, snr_db: f64, seed: u64, sample_rate: u32) -> PyResult<Vec<f64>> {
    let mut rng = stream_from_seed(seed);
    let m = signal::mix_at_snr(&Waveform::new(clean, sample_rate), &Waveform::new(noise, sample_rate), snr_db, &mut rng)
        .map_err(py_err)?;
    Ok(m.mixed.samples)
}

/// Log-mel filterbank, one row per frame.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate=16_000, n_mels=64))]
fn logmel(samples: Vec<f64>, sample_rate: u32, n_mels: usize) -> PyResult<Vec<Vec<f32>>> {
    let cfg = FbankConfig { sample_rate, n_mels, ..FbankConfig::default() };
    let fm = fbank(&Waveform::new(samples, sample_rate), &cfg).map_err(py_err)?;
    Ok((0..fm.shape().0).map(|t| fm.row(t).to_vec()).collect())
}

/// Returns `(eer, threshold)`.
#[pyfunction]
fn eer(labels: Vec<bool>, scores_: Vec<f64>) -> PyResult<(f64, f64)> {
    eval::compute_eer(&scores(labels, scores_)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (labels, scores_, p_target=0.01))]
fn min_dcf(labels: Vec<bool>, scores_: Vec<f64>, p_target: f64) -> PyResult<f64> {
    eval::compute_min_dcf(&scores(labels, scores_)?, p_target).map_err(py_err)
}

/// Mean of the normalized minDCF at P_target 0.01 and 0.001.
#[pyfunction]
fn average_min_dcf(labels: Vec<bool>, scores_: Vec<f64>) -> PyResult<f64> {
    eval::average_min_dcf(&scores(labels, scores_)?).map_err(py_err)
}

#[pyfunction]
fn cosine_score(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::cosine_score(&a, &b).map_err(py_err)
}

/// Writes the default synthetic corpus and returns its utterance count.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=7))]
fn build_corpus(out_dir: PathBuf, seed: u64) -> PyResult<usize> {
    let m = build(&CorpusConfig::default(), seed, &out_dir).map_err(py_err)?;
    Ok(m.utterances.len())
}

/// The default experiment configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_toml().map_err(py_err)
}

/// A speaker embedding network.
#[pyclass(name = "Model")]
struct Model {
    net: Network<f32>,
}

#[pymethods]
impl Model {
    /// Fresh desk-profile network.
    #[new]
    #[pyo3(signature = (n_classes=12, seed=0))]
    fn new(n_classes: usize, seed: u64) -> PyResult<Self> {
        Ok(Model { net: Network::new(NetConfig::desk(n_classes), seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model { net: checkpoint::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.net, &path).map_err(py_err)
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.net.config.embedding_dim
    }

    /// Eval-mode embedding of a waveform.
    #[pyo3(signature = (samples, sample_rate=16_000))]
    fn embed(&self, samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<f64>> {
        let cfg = FbankConfig { sample_rate, n_mels: self.net.config.n_mels, ..FbankConfig::default() };
        let fm = fbank(&Waveform::new(samples, sample_rate), &cfg).map_err(py_err)?;
        let x = features_to_batch::<f32>(&[&fm]).map_err(py_err)?;
        let e = self.net.forward_eval(&x).map_err(py_err)?;
        Ok(e.into_iter().map(f64::from).collect())
    }
}

#[pymodule]
pub fn spkinv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(snr_db, m)?)?;
    m.add_function(wrap_pyfunction!(mix_at_snr, m)?)?;
    m.add_function(wrap_pyfunction!(logmel, m)?)?;
    m.add_function(wrap_pyfunction!(eer, m)?)?;
    m.add_function(wrap_pyfunction!(min_dcf, m)?)?;
    m.add_function(wrap_pyfunction!(average_min_dcf, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_score, m)?)?;
    m.add_function(wrap_pyfunction!(build_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
