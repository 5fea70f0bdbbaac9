//! Closed-form models that certify expressiveness.

use crate::core_tensor::{ArchitectureSet, Preset};
use crate::data::Fact;
use crate::embedding::{Matrix, SegmentedEmbeddings};
use crate::error::{Error, Result};

/// Embeddings of width `|facts|` with one unsegmented CP core per arity.
///
/// Coordinate `k` is 1 for the relation and every entity of fact `k` and 0 for
/// every other symbol, so each fact scores at least 1 and any tuple whose
/// symbols never appear together in a fact scores 0.
pub fn lemma1_construct(
    facts: &[Fact],
    entity_count: usize,
    relation_count: usize,
) -> Result<(SegmentedEmbeddings, ArchitectureSet)> {
    if facts.is_empty() {
        return Err(Error::InvalidArgument("construction needs at least one fact".into()));
    }
    let dim = facts.len();
    let mut entities = Matrix::zeros(entity_count, dim);
    let mut relations = Matrix::zeros(relation_count, dim);
    let mut max_arity = 2;
    for (k, fact) in facts.iter().enumerate() {
        if fact.arity() < 2 {
            return Err(Error::InvalidArgument(format!("fact {k} has arity below 2")));
        }
        max_arity = max_arity.max(fact.arity());
        let r = fact.relation as usize;
        if r >= relation_count || fact.entities.iter().any(|&e| e as usize >= entity_count) {
            return Err(Error::Shape(format!("fact {k} references ids outside the vocabulary")));
        }
        relations.row_mut(r)[k] = 1.0;
        for &e in &fact.entities {
            entities.row_mut(e as usize)[k] = 1.0;
        }
    }
    let embeddings = SegmentedEmbeddings::new(entities, relations, 1)?;
    let architecture = ArchitectureSet::preset(Preset::Cp, 1, max_arity)?;
    Ok((embeddings, architecture))
}
