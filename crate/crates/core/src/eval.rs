//! Filtered link-prediction evaluation.
//!
//! Each (fact, entity position) is one query: every entity is scored in the
//! blanked slot, other known-true fillers are removed, and the truth's rank
//! among the survivors is recorded.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core_tensor::{ArchitectureSet, CoreAssignment};
use crate::data::{Dataset, EntityId, Fact, FilterIndex, Split};
use crate::embedding::SegmentedEmbeddings;
use crate::error::{Error, Result};
use crate::model::score_all_candidates;

/// How candidates scoring exactly as high as the truth are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    /// Ties never push the truth down.
    #[default]
    Optimistic,
    /// Every tied candidate ranks above the truth.
    Pessimistic,
}

/// Rank of `truth` among candidates not in `known` (the truth itself always stays).
///
/// `known` is the sorted set of fillers that make a true fact and must contain `truth`.
pub fn filtered_rank(scores: &[f64], truth: EntityId, known: &[EntityId], policy: TiePolicy) -> Result<usize> {
    let t = truth as usize;
    if t >= scores.len() {
        return Err(Error::InvalidArgument(format!(
            "true entity {truth} is outside the {} candidates",
            scores.len()
        )));
    }
    if known.binary_search(&truth).is_err() {
        return Err(Error::InvalidArgument(format!(
            "true entity {truth} is missing from its own filter set"
        )));
    }
    let target = scores[t];
    if !target.is_finite() {
        return Err(Error::Numeric(format!("score of the true entity is {target}")));
    }
    let mut above = 0usize;
    for (e, &s) in scores.iter().enumerate() {
        if e == t {
            continue;
        }
        let beats = match policy {
            TiePolicy::Optimistic => s > target,
            TiePolicy::Pessimistic => s >= target,
        };
        if beats && known.binary_search(&(e as EntityId)).is_err() {
            above += 1;
        }
    }
    Ok(above + 1)
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("mean reciprocal rank of no queries".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn hits_at(ranks: &[usize], cutoff: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("hits of no queries".into()));
    }
    if cutoff == 0 {
        return Err(Error::InvalidArgument("hits cutoff must be at least 1".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= cutoff).count() as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: usize,
}

impl RankingMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            mrr: mrr(ranks)?,
            hits1: hits_at(ranks, 1)?,
            hits3: hits_at(ranks, 3)?,
            hits10: hits_at(ranks, 10)?,
            queries: ranks.len(),
        })
    }
}

/// The metrics document written by front ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: usize,
    pub wall_seconds: f64,
}

/// Filtered ranks of one fact, one per entity position.
pub fn fact_ranks(
    core: &CoreAssignment,
    embeddings: &SegmentedEmbeddings,
    fact: &Fact,
    filter: &FilterIndex,
    policy: TiePolicy,
) -> Result<Vec<usize>> {
    (0..fact.arity())
        .map(|p| {
            let scores = score_all_candidates(core, embeddings, fact, p)?;
            let known = filter.known(fact, p);
            filtered_rank(&scores, fact.entities[p], known, policy)
        })
        .collect()
}

/// Ranks of every query in `facts`, in fact order then position order.
pub fn rank_facts(
    architecture: &ArchitectureSet,
    embeddings: &SegmentedEmbeddings,
    facts: &[Fact],
    filter: &FilterIndex,
    policy: TiePolicy,
) -> Result<Vec<usize>> {
    for fact in facts {
        architecture.get(fact.arity())?;
    }
    let per_fact: Vec<Vec<usize>> = facts
        .par_iter()
        .map(|fact| {
            let core = architecture.get(fact.arity())?;
            fact_ranks(core, embeddings, fact, filter, policy)
        })
        .collect::<Result<_>>()?;
    Ok(per_fact.into_iter().flatten().collect())
}

pub fn evaluate_facts(
    architecture: &ArchitectureSet,
    embeddings: &SegmentedEmbeddings,
    facts: &[Fact],
    filter: &FilterIndex,
    policy: TiePolicy,
) -> Result<RankingMetrics> {
    if facts.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    RankingMetrics::from_ranks(&rank_facts(architecture, embeddings, facts, filter, policy)?)
}

/// Evaluate one split of `dataset`, filtering against all splits.
pub fn evaluate(
    embeddings: &SegmentedEmbeddings,
    architecture: &ArchitectureSet,
    dataset: &Dataset,
    split: Split,
    filter: &FilterIndex,
    policy: TiePolicy,
) -> Result<RankingMetrics> {
    let facts = dataset.split(split);
    if facts.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{split}` is empty")));
    }
    evaluate_facts(architecture, embeddings, facts, filter, policy)
}

pub fn evaluate_report(
    embeddings: &SegmentedEmbeddings,
    architecture: &ArchitectureSet,
    dataset: &Dataset,
    split: Split,
    policy: TiePolicy,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let filter = FilterIndex::for_dataset(dataset);
    let m = evaluate(embeddings, architecture, dataset, split, &filter, policy)?;
    Ok(MetricsReport {
        split: split.name().to_string(),
        mrr: m.mrr,
        hits1: m.hits1,
        hits3: m.hits3,
        hits10: m.hits10,
        queries: m.queries,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
