//! On-disk documents: architecture files, θ snapshots and checkpoints.
//!
//! JSON documents are pretty-printed with sorted keys and end in a newline.
//! Embedding tables are raw row-major little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::core_tensor::{validate, ArchitectureSet, CoreAssignment};
use crate::embedding::{Matrix, SegmentedEmbeddings};
use crate::error::{Error, Result};
use crate::search::ArchitectureDistribution;

pub const META_FILE: &str = "meta.json";
pub const ARCHITECTURE_FILE: &str = "architecture.json";
pub const ENTITIES_FILE: &str = "entities.bin";
pub const RELATIONS_FILE: &str = "relations.bin";

pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("document types always serialize");
    text.push('\n');
    text
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureDoc {
    segment_count: usize,
    max_arity: usize,
    /// Flat block codes per arity, row-major with the relation segment slowest.
    cores: BTreeMap<usize, Vec<i64>>,
}

impl From<&ArchitectureSet> for ArchitectureDoc {
    fn from(arch: &ArchitectureSet) -> Self {
        Self {
            segment_count: arch.segment_count(),
            max_arity: arch.max_arity(),
            cores: arch.iter().map(|(n, c)| (n, c.values())).collect(),
        }
    }
}

impl TryFrom<ArchitectureDoc> for ArchitectureSet {
    type Error = Error;

    fn try_from(doc: ArchitectureDoc) -> Result<Self> {
        let mut cores = Vec::with_capacity(doc.cores.len());
        for (n, values) in &doc.cores {
            validate(*n, doc.segment_count, values).map_err(|v| {
                let list: Vec<String> = v.iter().map(ToString::to_string).collect();
                Error::InvalidAssignment(format!("arity {n}: {}", list.join("; ")))
            })?;
            cores.push(CoreAssignment::from_values(*n, doc.segment_count, values)?);
        }
        ArchitectureSet::new(doc.segment_count, doc.max_arity, cores)
    }
}

pub fn architecture_to_json(arch: &ArchitectureSet) -> String {
    to_json_string(&ArchitectureDoc::from(arch))
}

pub fn architecture_from_json(text: &str) -> Result<ArchitectureSet> {
    let doc: ArchitectureDoc =
        serde_json::from_str(text).map_err(|e| Error::Data(format!("architecture document: {e}")))?;
    doc.try_into()
}

pub fn write_architecture(path: &Path, arch: &ArchitectureSet) -> Result<()> {
    write_json(path, &ArchitectureDoc::from(arch))
}

pub fn read_architecture(path: &Path) -> Result<ArchitectureSet> {
    let doc: ArchitectureDoc = read_json(path)?;
    doc.try_into().map_err(|e: Error| Error::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThetaDoc {
    segment_count: usize,
    max_arity: usize,
    /// Per arity: three rows of block probabilities for ops -1, 0 and +1.
    theta: BTreeMap<usize, [Vec<f64>; 3]>,
}

impl From<&ArchitectureDistribution> for ThetaDoc {
    fn from(theta: &ArchitectureDistribution) -> Self {
        let rows = theta
            .iter()
            .map(|(n, cols)| (n, std::array::from_fn(|p| cols.iter().map(|c| c[p]).collect())))
            .collect();
        Self {
            segment_count: theta.segment_count(),
            max_arity: theta.max_arity(),
            theta: rows,
        }
    }
}

impl TryFrom<ThetaDoc> for ArchitectureDistribution {
    type Error = Error;

    fn try_from(doc: ThetaDoc) -> Result<Self> {
        let mut columns = BTreeMap::new();
        for (n, rows) in doc.theta {
            let k = rows[0].len();
            if rows.iter().any(|r| r.len() != k) {
                return Err(Error::Shape(format!("arity {n} has rows of unequal length")));
            }
            columns.insert(n, (0..k).map(|j| [rows[0][j], rows[1][j], rows[2][j]]).collect());
        }
        ArchitectureDistribution::from_columns(doc.segment_count, doc.max_arity, columns)
    }
}

pub fn theta_to_json(theta: &ArchitectureDistribution) -> String {
    to_json_string(&ThetaDoc::from(theta))
}

pub fn theta_from_json(text: &str) -> Result<ArchitectureDistribution> {
    let doc: ThetaDoc = serde_json::from_str(text).map_err(|e| Error::Data(format!("theta document: {e}")))?;
    doc.try_into()
}

pub fn write_theta(path: &Path, theta: &ArchitectureDistribution) -> Result<()> {
    write_json(path, &ThetaDoc::from(theta))
}

pub fn read_theta(path: &Path) -> Result<ArchitectureDistribution> {
    let doc: ThetaDoc = read_json(path)?;
    doc.try_into().map_err(|e: Error| Error::Data(format!("{}: {e}", path.display())))
}

/// Contents of `meta.json` in a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub entity_count: usize,
    pub relation_count: usize,
    pub dim: usize,
    pub segment_count: usize,
    pub max_arity: usize,
    /// Architecture file name, relative to the checkpoint directory.
    pub architecture: String,
    /// Effective configuration of the run that produced the checkpoint.
    pub config: serde_json::Value,
    /// Validation MRR of the stored (f32) parameters, if a validation split existed.
    pub valid_mrr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub embeddings: SegmentedEmbeddings,
    pub architecture: ArchitectureSet,
}

fn matrix_bytes(m: &Matrix) -> Vec<u8> {
    m.as_slice().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes for a {rows}x{cols} table, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Write a checkpoint directory, creating it if needed.
///
/// Parameters are stored as `f32`; callers that record a validation MRR should
/// compute it on [`SegmentedEmbeddings::quantize_f32`]'d parameters so a reload
/// reproduces it.
pub fn write_checkpoint(
    dir: &Path,
    embeddings: &SegmentedEmbeddings,
    architecture: &ArchitectureSet,
    config: serde_json::Value,
    valid_mrr: Option<f64>,
) -> Result<CheckpointMeta> {
    if architecture.segment_count() != embeddings.segment_count() {
        return Err(Error::Shape(format!(
            "architecture uses {} segments but embeddings use {}",
            architecture.segment_count(),
            embeddings.segment_count()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CheckpointMeta {
        entity_count: embeddings.entity_count(),
        relation_count: embeddings.relation_count(),
        dim: embeddings.dim(),
        segment_count: embeddings.segment_count(),
        max_arity: architecture.max_arity(),
        architecture: ARCHITECTURE_FILE.to_string(),
        config,
        valid_mrr,
    };
    write_architecture(&dir.join(ARCHITECTURE_FILE), architecture)?;
    for (name, m) in [(ENTITIES_FILE, &embeddings.entities), (RELATIONS_FILE, &embeddings.relations)] {
        let path = dir.join(name);
        fs::write(&path, matrix_bytes(m)).map_err(|e| Error::io(&path, e))?;
    }
    write_json(&dir.join(META_FILE), &meta)?;
    Ok(meta)
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta: CheckpointMeta = read_json(&dir.join(META_FILE))?;
    let architecture = read_architecture(&dir.join(&meta.architecture))?;
    if architecture.segment_count() != meta.segment_count || architecture.max_arity() != meta.max_arity {
        return Err(Error::Data(format!(
            "{}: architecture file disagrees with meta.json",
            dir.display()
        )));
    }
    let entities = read_matrix(&dir.join(ENTITIES_FILE), meta.entity_count, meta.dim)?;
    let relations = read_matrix(&dir.join(RELATIONS_FILE), meta.relation_count, meta.dim)?;
    let embeddings = SegmentedEmbeddings::new(entities, relations, meta.segment_count)?;
    Ok(Checkpoint {
        meta,
        embeddings,
        architecture,
    })
}
