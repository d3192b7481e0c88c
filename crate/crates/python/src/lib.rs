//! Python bindings: metrics, the fine-tuning schedule, synthetic families
//! and inference with saved models.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use metainflect::corpus::synth::presets;
use metainflect::corpus::{generate_synthetic_family, FamilySpec, InflectionExample, LanguageId, Split};
use metainflect::evalkit;
use metainflect::metatrain::{simulate_schedule as simulate, FineTuneSchedule};
use metainflect::models::{load_model, DecodeOptions, LoadedModel};

fn py_err(e: metainflect::Error) -> PyErr {
    match e {
        metainflect::Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Fraction of predictions equal to their reference after NFC normalization.
#[pyfunction]
fn word_accuracy(predictions: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    evalkit::word_accuracy(&predictions, &references).map_err(py_err)
}

/// Replays the fine-tuning schedule over per-epoch dev scores and returns
/// `(epochs_run, best_epoch, extensions)`.
#[pyfunction]
#[pyo3(signature = (scores, min_epochs = 300, extension = 100))]
fn simulate_schedule(scores: Vec<f64>, min_epochs: usize, extension: usize) -> PyResult<(usize, Option<usize>, usize)> {
    let t = simulate(&FineTuneSchedule::new(min_epochs, extension), &scores).map_err(py_err)?;
    Ok((t.epochs_run, t.best_epoch, t.extensions))
}

/// TOML spec of a built-in family: `"transfer"` or `"two-families"`.
#[pyfunction]
#[pyo3(signature = (name, source_train = 2000, target_train = 100, dev = 100, test = 500))]
fn preset_spec(name: &str, source_train: usize, target_train: usize, dev: usize, test: usize) -> PyResult<String> {
    let spec = match name {
        "transfer" => presets::transfer_family(source_train, target_train, dev, test),
        "two-families" => presets::two_families(source_train, target_train, dev, test),
        other => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
    };
    Ok(spec.to_toml())
}

type Row = (String, String, String);

/// One synthetic language: name, family and `(lemma, form, tags)` rows per split.
#[pyclass(get_all, frozen)]
struct SyntheticLanguage {
    name: String,
    family: String,
    train: Vec<Row>,
    dev: Vec<Row>,
    test: Vec<Row>,
}

/// Generates every language of a TOML family spec.
#[pyfunction]
fn generate_family(spec: &str, seed: u64) -> PyResult<Vec<SyntheticLanguage>> {
    let spec = FamilySpec::from_toml(spec).map_err(py_err)?;
    let out = generate_synthetic_family(&spec, seed).map_err(py_err)?;
    let rows = |d: &metainflect::corpus::TaskDataset| -> Vec<Row> {
        d.examples.iter().map(|e| (e.lemma.clone(), e.form.clone(), e.tag_string())).collect()
    };
    Ok(out
        .iter()
        .map(|d| SyntheticLanguage {
            name: d.language().0.clone(),
            family: d.family.clone(),
            train: rows(d.data.split(Split::Train)),
            dev: rows(d.data.split(Split::Dev)),
            test: rows(d.data.split(Split::Test)),
        })
        .collect())
}

/// A model file written by the command-line tool.
#[pyclass(frozen)]
struct Model {
    inner: LoadedModel,
}

#[pymethods]
impl Model {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(&path).map_err(py_err)?,
        })
    }

    /// `"med"` or `"pg"`.
    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.model.kind().as_str()
    }

    #[getter]
    fn languages(&self) -> Vec<String> {
        self.inner.info.languages.clone()
    }

    #[getter]
    fn target(&self) -> Option<String> {
        self.inner.info.target.clone()
    }

    /// Inflects `(lemma, tags)` pairs; tags are `;`-joined. `language`
    /// defaults to the model's target language.
    #[pyo3(signature = (inputs, language = None, beam = 1))]
    fn predict(&self, inputs: Vec<(String, String)>, language: Option<String>, beam: usize) -> PyResult<Vec<String>> {
        let lang = language
            .or_else(|| self.inner.info.target.clone())
            .ok_or_else(|| PyValueError::new_err("model has no target language; pass language="))?;
        let lang = LanguageId::new(lang);
        if !self.inner.model.vocab().has_language(&lang) {
            return Err(PyValueError::new_err(format!("language `{lang}` is not in the model's vocabulary")));
        }
        let examples = inputs
            .iter()
            .map(|(lemma, tags)| {
                // the form is unused when decoding
                InflectionExample::new(lemma, tags.split(';').map(str::to_string).collect(), lemma, lang.clone())
            })
            .collect::<metainflect::Result<Vec<_>>>()
            .map_err(py_err)?;
        let opts = match beam {
            0 => return Err(PyValueError::new_err("beam must be at least 1")),
            1 => DecodeOptions::greedy(),
            w => DecodeOptions::beam(w),
        };
        self.inner.model.predict(&self.inner.params, &examples, &opts).map_err(py_err)
    }
}

#[pymodule]
fn metainflect_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(word_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(preset_spec, m)?)?;
    m.add_function(wrap_pyfunction!(generate_family, m)?)?;
    m.add_class::<SyntheticLanguage>()?;
    m.add_class::<Model>()?;
    Ok(())
}
