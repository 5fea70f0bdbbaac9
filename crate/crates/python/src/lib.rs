//! Python bindings: architectures, embeddings, datasets, training, search and evaluation.
//!
//! Structured results (metrics, traces, configs) cross the boundary as plain
//! dicts and lists.

use std::path::PathBuf;

use blockcore::core_tensor::{gauge_matched_blocks, matched_blocks, Preset};
use blockcore::data::{build_dataset, load_dataset_dir, Fact, RawFact};
use blockcore::eval::{evaluate_report, filtered_rank as rank_one, hits_at as hits, mrr as mean_rr};
use blockcore::io;
use blockcore::oracle::lemma1_construct;
use blockcore::planted::{generate_planted, quantile_margin, PlantedSpec, DEFAULT_MAX_DRAWS};
use blockcore::{
    ArchitectureSet, BuildOptions, Dataset, Error, ErrorClass, SearchConfig, SegmentedEmbeddings, Split, TiePolicy,
    TrainConfig,
};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn to_py_err(e: Error) -> PyErr {
    match (&e, e.class()) {
        (Error::Io { .. }, _) => PyOSError::new_err(e.to_string()),
        (_, ErrorClass::Numeric) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrRaise<T> {
    fn or_raise(self) -> PyResult<T>;
}

impl<T> OrRaise<T> for blockcore::Result<T> {
    fn or_raise(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    match value {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_bound_py_any(py),
            None => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py),
        },
        Value::String(s) => s.into_bound_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            Ok(list.into_any())
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            Ok(dict.into_any())
        }
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &json)
}

fn py_to_json(obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    use serde_json::Value;
    if obj.is_none() {
        return Ok(Value::Null);
    }
    if obj.is_instance_of::<PyBool>() {
        return Ok(Value::Bool(obj.extract()?));
    }
    if let Ok(i) = obj.extract::<i64>() {
        return Ok(Value::from(i));
    }
    if let Ok(x) = obj.extract::<f64>() {
        return Ok(Value::from(x));
    }
    if let Ok(s) = obj.extract::<String>() {
        return Ok(Value::String(s));
    }
    if let Ok(dict) = obj.cast::<PyDict>() {
        let mut map = serde_json::Map::new();
        for (k, v) in dict.iter() {
            map.insert(k.extract::<String>()?, py_to_json(&v)?);
        }
        return Ok(Value::Object(map));
    }
    if let Ok(items) = obj.extract::<Vec<Bound<'_, PyAny>>>() {
        return Ok(Value::Array(items.iter().map(py_to_json).collect::<PyResult<_>>()?));
    }
    Err(PyValueError::new_err(format!("cannot convert {obj} to a config value")))
}

/// Settings struct from an optional dict; keys must name fields of `T`.
fn settings<T: Serialize + DeserializeOwned + Default>(what: &str, dict: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let mut value = serde_json::to_value(T::default()).expect("settings serialize");
    if let Some(dict) = dict {
        let object = value.as_object_mut().expect("settings are objects");
        for (k, v) in dict.iter() {
            let key: String = k.extract()?;
            if !object.contains_key(&key) {
                let known: Vec<&str> = object.keys().map(String::as_str).collect();
                return Err(PyValueError::new_err(format!(
                    "unknown {what} setting `{key}`; known settings: {}",
                    known.join(", ")
                )));
            }
            object.insert(key, py_to_json(&v)?);
        }
    }
    serde_json::from_value(value).map_err(|e| PyValueError::new_err(format!("{what} settings: {e}")))
}

fn policy(pessimistic: bool) -> TiePolicy {
    if pessimistic {
        TiePolicy::Pessimistic
    } else {
        TiePolicy::Optimistic
    }
}

/// Block codes per arity over shared segments.
#[pyclass(name = "Architecture", module = "blockcore_py", frozen, skip_from_py_object, eq)]
#[derive(Clone, PartialEq)]
pub struct PyArchitecture(ArchitectureSet);

#[pymethods]
impl PyArchitecture {
    /// One of cp, distmult, complex, simple.
    #[staticmethod]
    fn preset(name: &str, segment_count: usize, max_arity: usize) -> PyResult<Self> {
        let p: Preset = name.parse().or_raise()?;
        Ok(Self(ArchitectureSet::preset(p, segment_count, max_arity).or_raise()?))
    }

    #[staticmethod]
    fn zeros(segment_count: usize, max_arity: usize) -> PyResult<Self> {
        Ok(Self(ArchitectureSet::zeros(segment_count, max_arity).or_raise()?))
    }

    /// Build from flat codes in {-1, 0, 1} keyed by arity.
    #[staticmethod]
    fn from_codes(segment_count: usize, codes: std::collections::BTreeMap<usize, Vec<i64>>) -> PyResult<Self> {
        let max_arity = codes.keys().copied().max().unwrap_or(2);
        let doc = serde_json::json!({ "segment_count": segment_count, "max_arity": max_arity, "cores": codes });
        Ok(Self(io::architecture_from_json(&doc.to_string()).or_raise()?))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self(io::architecture_from_json(text).or_raise()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(io::read_architecture(&path).or_raise()?))
    }

    fn to_json(&self) -> String {
        io::architecture_to_json(&self.0)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_architecture(&path, &self.0).or_raise()
    }

    #[getter]
    fn segment_count(&self) -> usize {
        self.0.segment_count()
    }

    #[getter]
    fn max_arity(&self) -> usize {
        self.0.max_arity()
    }

    fn codes(&self, arity: usize) -> PyResult<Vec<i64>> {
        Ok(self.0.get(arity).or_raise()?.values())
    }

    fn score(&self, embeddings: &PyEmbeddings, relation: u32, entities: Vec<u32>) -> PyResult<f64> {
        self.0.score(&embeddings.0, &Fact::new(relation, entities)).or_raise()
    }

    fn __repr__(&self) -> String {
        let cores: Vec<String> = self
            .0
            .iter()
            .map(|(n, c)| format!("{n}: {:?}", c.values()))
            .collect();
        format!("Architecture(segment_count={}, {{{}}})", self.0.segment_count(), cores.join(", "))
    }
}

/// Entity and relation embedding tables split into equal segments.
#[pyclass(name = "Embeddings", module = "blockcore_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyEmbeddings(SegmentedEmbeddings);

#[pymethods]
impl PyEmbeddings {
    /// Seeded uniform initialization.
    #[staticmethod]
    #[pyo3(signature = (entity_count, relation_count, dim, segment_count, seed=0))]
    fn uniform(entity_count: usize, relation_count: usize, dim: usize, segment_count: usize, seed: u64) -> PyResult<Self> {
        Ok(Self(
            SegmentedEmbeddings::init_uniform(entity_count, relation_count, dim, segment_count, seed).or_raise()?,
        ))
    }

    /// From row lists of equal width.
    #[staticmethod]
    fn from_rows(entities: Vec<Vec<f64>>, relations: Vec<Vec<f64>>, segment_count: usize) -> PyResult<Self> {
        let matrix = |rows: Vec<Vec<f64>>| {
            let cols = rows.first().map_or(0, Vec::len);
            let n = rows.len();
            blockcore::Matrix::from_vec(n, cols, rows.into_iter().flatten().collect())
        };
        let e = matrix(entities).or_raise()?;
        let r = matrix(relations).or_raise()?;
        Ok(Self(SegmentedEmbeddings::new(e, r, segment_count).or_raise()?))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn segment_count(&self) -> usize {
        self.0.segment_count()
    }

    #[getter]
    fn entity_count(&self) -> usize {
        self.0.entity_count()
    }

    #[getter]
    fn relation_count(&self) -> usize {
        self.0.relation_count()
    }

    fn entity(&self, id: u32) -> PyResult<Vec<f64>> {
        if id as usize >= self.0.entity_count() {
            return Err(PyValueError::new_err(format!("entity {id} out of range")));
        }
        Ok(self.0.entity(id).to_vec())
    }

    fn relation(&self, id: u32) -> PyResult<Vec<f64>> {
        if id as usize >= self.0.relation_count() {
            return Err(PyValueError::new_err(format!("relation {id} out of range")));
        }
        Ok(self.0.relation(id).to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Embeddings(entities={}, relations={}, dim={}, segments={})",
            self.0.entity_count(),
            self.0.relation_count(),
            self.0.dim(),
            self.0.segment_count()
        )
    }
}

/// Facts mapped to integer ids, split into train, valid and test.
#[pyclass(name = "Dataset", module = "blockcore_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset(Dataset);

fn raw_rows(rows: Vec<Vec<String>>) -> PyResult<Vec<RawFact>> {
    rows.into_iter()
        .map(|mut row| {
            if row.len() < 3 {
                return Err(PyValueError::new_err("a fact needs a relation and at least two entities"));
            }
            let entities = row.split_off(1);
            Ok(RawFact {
                relation: row.remove(0),
                entities,
            })
        })
        .collect()
}

#[pymethods]
impl PyDataset {
    /// Read `train.tsv`, optional `valid.tsv` and `test.tsv` from a directory.
    #[staticmethod]
    #[pyo3(signature = (dir, holdout_fraction=0.1, seed=0, strict=true))]
    fn load(dir: PathBuf, holdout_fraction: f64, seed: u64, strict: bool) -> PyResult<Self> {
        let options = BuildOptions {
            holdout_fraction,
            seed,
            strict,
        };
        Ok(Self(load_dataset_dir(&dir, &options).or_raise()?))
    }

    /// Build from rows `[relation, entity, entity, ...]` of names.
    #[staticmethod]
    #[pyo3(signature = (train, valid=None, test=None, holdout_fraction=0.1, seed=0, strict=true))]
    fn from_rows(
        train: Vec<Vec<String>>,
        valid: Option<Vec<Vec<String>>>,
        test: Option<Vec<Vec<String>>>,
        holdout_fraction: f64,
        seed: u64,
        strict: bool,
    ) -> PyResult<Self> {
        let options = BuildOptions {
            holdout_fraction,
            seed,
            strict,
        };
        let valid = valid.map(raw_rows).transpose()?;
        let test = test.map(raw_rows).transpose()?.unwrap_or_default();
        Ok(Self(build_dataset(raw_rows(train)?, valid, test, &options).or_raise()?))
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.write_dir(&dir).or_raise()
    }

    #[getter]
    fn entity_count(&self) -> usize {
        self.0.entity_count()
    }

    #[getter]
    fn relation_count(&self) -> usize {
        self.0.relation_count()
    }

    #[getter]
    fn max_arity(&self) -> usize {
        self.0.max_arity
    }

    /// Facts of a split as `(relation, [entities])` id tuples.
    fn facts(&self, split: &str) -> PyResult<Vec<(u32, Vec<u32>)>> {
        let split: Split = split.parse().or_raise()?;
        Ok(self.0.split(split).iter().map(|f| (f.relation, f.entities.clone())).collect())
    }

    fn entity_name(&self, id: u32) -> Option<String> {
        self.0.vocabulary.entity_name(id).map(str::to_string)
    }

    fn relation_name(&self, id: u32) -> Option<String> {
        self.0.vocabulary.relation_name(id).map(str::to_string)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(entities={}, relations={}, train={}, valid={}, test={})",
            self.0.entity_count(),
            self.0.relation_count(),
            self.0.train.len(),
            self.0.valid.len(),
            self.0.test.len()
        )
    }
}

/// Generate a dataset from a hidden architecture; returns `(dataset, truth)`.
///
/// Without `margin`, the margin admits a `keep` share of random tuples.
#[pyfunction]
#[pyo3(signature = (entity_count, relation_count, dim, segment_count, truth="complex", arities=vec![2], facts_per_arity=2000, keep=0.15, margin=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn planted(
    py: Python<'_>,
    entity_count: usize,
    relation_count: usize,
    dim: usize,
    segment_count: usize,
    truth: &str,
    arities: Vec<usize>,
    facts_per_arity: usize,
    keep: f64,
    margin: Option<f64>,
    seed: u64,
) -> PyResult<(PyDataset, PyArchitecture)> {
    let max_arity = arities.iter().copied().max().unwrap_or(2);
    let preset: Preset = truth.parse().or_raise()?;
    let mut spec = PlantedSpec {
        entity_count,
        relation_count,
        arities,
        dim,
        segment_count,
        truth: ArchitectureSet::preset(preset, segment_count, max_arity).or_raise()?,
        facts_per_arity,
        margin: 0.0,
        seed,
        max_draws: DEFAULT_MAX_DRAWS,
    };
    let out = py.detach(|| {
        spec.margin = match margin {
            Some(m) => m,
            None => quantile_margin(&spec, keep, 200_000)?,
        };
        generate_planted(&spec)
    });
    let out = out.or_raise()?;
    Ok((PyDataset(out.dataset), PyArchitecture(out.truth)))
}

/// Train embeddings from scratch; returns `(embeddings, history)`.
#[pyfunction]
#[pyo3(signature = (architecture, dataset, config=None))]
fn train<'py>(
    py: Python<'py>,
    architecture: &PyArchitecture,
    dataset: &PyDataset,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyEmbeddings, Bound<'py, PyAny>)> {
    let config: TrainConfig = settings("train", config)?;
    let out = py
        .detach(|| blockcore::train::train_fixed(&architecture.0, &dataset.0, &config))
        .or_raise()?;
    let history = to_py(py, &out.history)?;
    Ok((PyEmbeddings(out.embeddings), history))
}

/// Architecture search; returns a dict with `architecture`, `theta` (JSON text) and `trace`.
#[pyfunction]
#[pyo3(signature = (dataset, search=None, train=None))]
fn search<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    search: Option<&Bound<'py, PyDict>>,
    train: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let search: SearchConfig = settings("search", search)?;
    let train: TrainConfig = settings("train", train)?;
    let out = py
        .detach(|| blockcore::search::search_loop(&dataset.0, &search, &train))
        .or_raise()?;
    let result = PyDict::new(py);
    result.set_item("architecture", PyArchitecture(out.architecture))?;
    result.set_item("theta", io::theta_to_json(&out.theta))?;
    result.set_item("trace", to_py(py, &out.trace.records)?)?;
    result.set_item("embeddings", PyEmbeddings(out.embeddings))?;
    Ok(result)
}

/// Filtered ranking metrics on one split.
#[pyfunction]
#[pyo3(signature = (embeddings, architecture, dataset, split="test", pessimistic=false))]
fn evaluate<'py>(
    py: Python<'py>,
    embeddings: &PyEmbeddings,
    architecture: &PyArchitecture,
    dataset: &PyDataset,
    split: &str,
    pessimistic: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let split: Split = split.parse().or_raise()?;
    let report = py
        .detach(|| evaluate_report(&embeddings.0, &architecture.0, &dataset.0, split, policy(pessimistic)))
        .or_raise()?;
    to_py(py, &report)
}

/// Width-|facts| embeddings that rank every given fact first.
#[pyfunction]
fn construct(
    facts: Vec<(u32, Vec<u32>)>,
    entity_count: usize,
    relation_count: usize,
) -> PyResult<(PyEmbeddings, PyArchitecture)> {
    let facts: Vec<Fact> = facts.into_iter().map(|(r, es)| Fact::new(r, es)).collect();
    let (emb, arch) = lemma1_construct(&facts, entity_count, relation_count).or_raise()?;
    Ok((PyEmbeddings(emb), PyArchitecture(arch)))
}

/// Blocks matched per arity, raw and up to score-preserving symmetries.
#[pyfunction]
fn diff<'py>(py: Python<'py>, a: &PyArchitecture, b: &PyArchitecture) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    for (n, core) in a.0.iter() {
        let other = b.0.get(n).or_raise()?;
        let entry = PyDict::new(py);
        entry.set_item("blocks", core.block_count())?;
        entry.set_item("matched", matched_blocks(core, other).or_raise()?)?;
        entry.set_item("matched_up_to_symmetry", gauge_matched_blocks(core, other).or_raise()?)?;
        out.set_item(n, entry)?;
    }
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (dir, embeddings, architecture, valid_mrr=None))]
fn save_checkpoint(dir: PathBuf, embeddings: &PyEmbeddings, architecture: &PyArchitecture, valid_mrr: Option<f64>) -> PyResult<()> {
    io::write_checkpoint(&dir, &embeddings.0, &architecture.0, serde_json::json!({}), valid_mrr).or_raise()?;
    Ok(())
}

/// Returns `(embeddings, architecture, meta)`.
#[pyfunction]
fn load_checkpoint<'py>(py: Python<'py>, dir: PathBuf) -> PyResult<(PyEmbeddings, PyArchitecture, Bound<'py, PyAny>)> {
    let ck = io::read_checkpoint(&dir).or_raise()?;
    let meta = to_py(py, &ck.meta)?;
    Ok((PyEmbeddings(ck.embeddings), PyArchitecture(ck.architecture), meta))
}

/// Rank of `truth` among candidates outside `known`, which must contain `truth`.
#[pyfunction]
#[pyo3(signature = (scores, truth, known, pessimistic=false))]
fn filtered_rank(scores: Vec<f64>, truth: u32, mut known: Vec<u32>, pessimistic: bool) -> PyResult<usize> {
    known.sort_unstable();
    known.dedup();
    rank_one(&scores, truth, &known, policy(pessimistic)).or_raise()
}

#[pyfunction]
fn mrr(ranks: Vec<usize>) -> PyResult<f64> {
    mean_rr(&ranks).or_raise()
}

#[pyfunction]
fn hits_at(ranks: Vec<usize>, cutoff: usize) -> PyResult<f64> {
    hits(&ranks, cutoff).or_raise()
}

#[pymodule]
fn blockcore_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyArchitecture>()?;
    m.add_class::<PyEmbeddings>()?;
    m.add_class::<PyDataset>()?;
    for f in [
        wrap_pyfunction!(planted, m)?,
        wrap_pyfunction!(train, m)?,
        wrap_pyfunction!(search, m)?,
        wrap_pyfunction!(evaluate, m)?,
        wrap_pyfunction!(construct, m)?,
        wrap_pyfunction!(diff, m)?,
        wrap_pyfunction!(save_checkpoint, m)?,
        wrap_pyfunction!(load_checkpoint, m)?,
        wrap_pyfunction!(filtered_rank, m)?,
        wrap_pyfunction!(mrr, m)?,
        wrap_pyfunction!(hits_at, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
