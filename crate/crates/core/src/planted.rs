//! Synthetic datasets generated from a hidden architecture.
//!
//! Random Gaussian embeddings are scored with a ground-truth assignment and
//! tuples clearing a margin become facts. A search run on the result can then
//! be judged against the assignment that produced it.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::core_tensor::ArchitectureSet;
use crate::data::{Dataset, Fact, Vocabulary};
use crate::embedding::{Matrix, SegmentedEmbeddings};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_DRAWS: u64 = 10_000_000;

#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub entity_count: usize,
    pub relation_count: usize,
    pub arities: Vec<usize>,
    pub dim: usize,
    pub segment_count: usize,
    pub truth: ArchitectureSet,
    pub facts_per_arity: usize,
    /// Minimum ground-truth score of a generated fact.
    pub margin: f64,
    pub seed: u64,
    /// Candidate tuples tried per arity before giving up.
    pub max_draws: u64,
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.entity_count == 0 || self.relation_count == 0 {
            return bad("planted data needs at least one entity and one relation".into());
        }
        if self.segment_count == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.segment_count) {
            return bad(format!(
                "dimension {} is not a positive multiple of segment count {}",
                self.dim, self.segment_count
            ));
        }
        if self.truth.segment_count() != self.segment_count {
            return bad("ground truth uses a different segment count".into());
        }
        if self.arities.is_empty() || self.arities.iter().any(|&n| n < 2) {
            return bad("arities must be non-empty and at least 2".into());
        }
        for &n in &self.arities {
            self.truth.get(n)?;
        }
        if self.facts_per_arity < 3 {
            return bad("need at least 3 facts per arity to fill train, valid and test".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PlantedDataset {
    pub dataset: Dataset,
    /// Hidden assignment that generated the facts.
    pub truth: ArchitectureSet,
    /// Hidden embeddings that generated the facts.
    pub embeddings: SegmentedEmbeddings,
}

/// Hidden N(0, 1/d) embeddings; the first draws from the spec's seed.
fn hidden_embeddings(spec: &PlantedSpec, rng: &mut ChaCha8Rng) -> Result<SegmentedEmbeddings> {
    let normal = Normal::new(0.0, 1.0 / (spec.dim as f64).sqrt()).expect("positive sigma");
    let mut draw = |rows: usize| {
        let data = (0..rows * spec.dim).map(|_| normal.sample(&mut *rng)).collect();
        Matrix::from_vec(rows, spec.dim, data).expect("sized correctly")
    };
    let entities = draw(spec.entity_count);
    let relations = draw(spec.relation_count);
    SegmentedEmbeddings::new(entities, relations, spec.segment_count)
}

/// Margin that a fraction `keep` of uniformly drawn tuples clears, estimated
/// from `samples` tuples per arity and minimized over arities.
///
/// The hidden embeddings are the ones [`generate_planted`] will draw for the
/// same spec, so the estimate applies to that dataset.
pub fn quantile_margin(spec: &PlantedSpec, keep: f64, samples: usize) -> Result<f64> {
    spec.validate()?;
    if !(keep > 0.0 && keep <= 1.0) || samples == 0 {
        return Err(Error::InvalidArgument("need 0 < keep <= 1 and at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let embeddings = hidden_embeddings(spec, &mut rng)?;
    let mut probe = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut margin = f64::INFINITY;
    for &n in &spec.arities {
        let core = spec.truth.get(n)?;
        let mut scores = (0..samples)
            .map(|_| {
                let relation = probe.random_range(0..spec.relation_count) as u32;
                let entities = (0..n).map(|_| probe.random_range(0..spec.entity_count) as u32).collect();
                core.score(&embeddings, &Fact::new(relation, entities))
            })
            .collect::<Result<Vec<f64>>>()?;
        scores.sort_by(|a, b| b.total_cmp(a));
        let index = ((keep * samples as f64).ceil() as usize).clamp(1, samples) - 1;
        margin = margin.min(scores[index]);
    }
    Ok(margin)
}

/// Generate a planted dataset. Facts of each arity are split 80/10/10.
pub fn generate_planted(spec: &PlantedSpec) -> Result<PlantedDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let embeddings = hidden_embeddings(spec, &mut rng)?;

    let mut arities = spec.arities.clone();
    arities.sort_unstable();
    arities.dedup();

    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &arities {
        let core = spec.truth.get(n)?;
        let mut seen = HashSet::new();
        let mut positives = Vec::with_capacity(spec.facts_per_arity);
        let mut draws = 0u64;
        while positives.len() < spec.facts_per_arity {
            if draws >= spec.max_draws {
                return Err(Error::Generation(format!(
                    "found only {} of {} arity-{n} facts scoring at least {} in {} draws; try a smaller margin",
                    positives.len(),
                    spec.facts_per_arity,
                    spec.margin,
                    spec.max_draws
                )));
            }
            draws += 1;
            let relation = rng.random_range(0..spec.relation_count) as u32;
            let entities = (0..n).map(|_| rng.random_range(0..spec.entity_count) as u32).collect();
            let fact = Fact::new(relation, entities);
            if core.score(&embeddings, &fact)? >= spec.margin && seen.insert(fact.clone()) {
                positives.push(fact);
            }
        }
        let n_valid = positives.len() / 10;
        let n_test = positives.len() / 10;
        let n_train = positives.len() - n_valid - n_test;
        let mut it = positives.into_iter();
        train.extend(it.by_ref().take(n_train));
        valid.extend(it.by_ref().take(n_valid));
        test.extend(it);
    }

    let dataset = Dataset {
        vocabulary: Vocabulary::synthetic(spec.entity_count, spec.relation_count),
        train,
        valid,
        test,
        max_arity: *arities.last().expect("non-empty"),
    };
    Ok(PlantedDataset {
        dataset,
        truth: spec.truth.clone(),
        embeddings,
    })
}
