//! Python bindings: catalogs, training, baselines, encoding and evaluation.
//!
//! Settings are keyword arguments named like the config-file keys. A
//! trailing underscore is dropped, so `lambda_=2` sets `lambda`.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

use vsid_core::baselines::{rkmeans_fit, ReinforceTrainer};
use vsid_core::catalog::{load_catalog, save_catalog, synth_zipf_catalog};
use vsid_core::cli::LoadedModel;
use vsid_core::config::RunConfig;
use vsid_core::evaluation::{evaluate, micro_ppl as core_micro_ppl, parse_kv, unit_embeddings};
use vsid_core::nn::normal_matrix;
use vsid_core::rng::{stream, Stream};
use vsid_core::trainer::{grad_check, Trainer};
use vsid_core::{DvaeModel, Error, SemanticId};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn settings(base: RunConfig, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut cfg = base;
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = if v.is_none() {
                "none".to_string()
            } else if let Ok(b) = v.cast::<PyBool>() {
                b.is_true().to_string()
            } else {
                v.str()?.to_string()
            };
            cfg.set(key.trim_end_matches('_'), &value).map_err(py_err)?;
        }
    }
    Ok(cfg)
}

/// Item embeddings with interaction counts and cold flags.
#[pyclass(module = "vsid")]
struct Catalog {
    inner: vsid_core::Catalog,
}

#[pymethods]
impl Catalog {
    /// Synthetic Zipfian catalog; keyword settings as for `vsid synth`.
    #[staticmethod]
    #[pyo3(signature = (**kwargs))]
    fn synth(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = settings(RunConfig::default(), kwargs)?;
        Ok(Self { inner: synth_zipf_catalog(&cfg.synth_config()).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_catalog(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_catalog(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn popularity(&self) -> Vec<u64> {
        self.inner.popularity().to_vec()
    }

    #[getter]
    fn cold(&self) -> Vec<bool> {
        self.inner.cold_flags().to_vec()
    }

    /// Raw embeddings as a list of rows.
    fn embeddings(&self) -> Vec<Vec<f32>> {
        self.inner.embeddings().rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n_items()
    }

    fn __repr__(&self) -> String {
        format!("Catalog(n_items={}, dim={})", self.inner.n_items(), self.inner.dim())
    }
}

/// A trained tokenizer: dVAE, REINFORCE sender or residual k-means.
#[pyclass(module = "vsid")]
struct Model {
    inner: LoadedModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: LoadedModel::load(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        match &self.inner {
            LoadedModel::Dvae(s) => s.save(path),
            LoadedModel::Reinforce(s) => s.save(path),
            LoadedModel::RKMeans(m) => m.save(path),
        }
        .map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner {
            LoadedModel::Dvae(_) => "dvae",
            LoadedModel::Reinforce(_) => "reinforce",
            LoadedModel::RKMeans(_) => "rkmeans",
        }
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.inner.coder().max_len()
    }

    /// Semantic ID of every catalog item as a list of token lists.
    fn encode(&self, catalog: &Catalog) -> PyResult<Vec<Vec<u32>>> {
        let emb = unit_embeddings(&catalog.inner).map_err(py_err)?;
        let paths = self.inner.coder().encode_full(&emb).map_err(py_err)?;
        Ok(paths.into_iter().map(|(mut toks, len)| {
            toks.truncate(len);
            toks
        }).collect())
    }

    /// Metric name to value; metrics that do not apply map to `None`.
    #[pyo3(signature = (catalog, **kwargs))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        catalog: &Catalog,
        kwargs: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = settings(RunConfig::default(), kwargs)?;
        let report = evaluate(self.inner.coder(), &catalog.inner, &cfg.eval_options()).map_err(py_err)?;
        let out = PyDict::new(py);
        for (k, v) in parse_kv(&report.to_kv()).map_err(py_err)? {
            out.set_item(k, v.parse::<f64>().ok())?;
        }
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={:?}, max_len={})", self.kind(), self.max_len())
    }
}

/// Trains the variable-length dVAE; keyword settings as for `vsid train`.
#[pyfunction]
#[pyo3(signature = (catalog, **kwargs))]
fn train(catalog: &Catalog, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Model> {
    let cfg = settings(RunConfig::default(), kwargs)?;
    let mut trainer = Trainer::new(&catalog.inner, &cfg.train_config()).map_err(py_err)?;
    trainer.run(None, None).map_err(py_err)?;
    Ok(Model { inner: LoadedModel::Dvae(trainer.state) })
}

/// Trains the REINFORCE sender/receiver baseline.
#[pyfunction]
#[pyo3(signature = (catalog, **kwargs))]
fn train_reinforce(catalog: &Catalog, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Model> {
    let cfg = settings(RunConfig::default(), kwargs)?;
    let mut trainer = ReinforceTrainer::new(&catalog.inner, &cfg.reinforce_config()).map_err(py_err)?;
    trainer.run(None, None).map_err(py_err)?;
    Ok(Model { inner: LoadedModel::Reinforce(trainer.state) })
}

/// Fits residual k-means with `maxlen` levels of `vocab` centroids.
#[pyfunction]
#[pyo3(signature = (catalog, **kwargs))]
fn fit_rkmeans(catalog: &Catalog, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Model> {
    let cfg = settings(RunConfig::default(), kwargs)?;
    let t = &cfg.train;
    let model = rkmeans_fit(&catalog.inner, t.max_len, t.vocab, cfg.kmeans_iters, cfg.seed).map_err(py_err)?;
    Ok(Model { inner: LoadedModel::RKMeans(model) })
}

/// Largest relative error between tape and finite-difference gradients.
#[pyfunction]
#[pyo3(signature = (**kwargs))]
fn gradcheck(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<f64> {
    let cfg = settings(RunConfig::gradcheck_defaults(), kwargs)?;
    let train = cfg.train_config();
    train.validate().map_err(py_err)?;
    let g = cfg.gradcheck;
    let model = DvaeModel::new(train.model_config(cfg.synth.dim), cfg.seed);
    let mut x = normal_matrix(&mut stream(cfg.seed, Stream::Data), g.rows, cfg.synth.dim, 1.0);
    for mut row in x.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row /= n;
    }
    let r = grad_check(&model, &x, &train.prior(), g.tau, g.beta, g.eps, cfg.seed).map_err(py_err)?;
    Ok(r.max_rel_err)
}

/// Exponentiated entropy of all tokens pooled across positions.
#[pyfunction]
fn micro_ppl(codes: Vec<Vec<u32>>) -> f64 {
    let ids: Vec<SemanticId> = codes.into_iter().map(|tokens| SemanticId { tokens }).collect();
    core_micro_ppl(&ids)
}

#[pymodule]
fn vsid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Catalog>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(train_reinforce, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rkmeans, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(micro_ppl, m)?)?;
    Ok(())
}
