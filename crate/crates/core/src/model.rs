//! Candidate scoring, the n-ary multi-class log-loss and its analytic gradient.
//!
//! Because the score is multilinear, blanking one entity slot `p` leaves a
//! linear functional of the candidate embedding. [`context`] builds that
//! functional once per (fact, position), so scoring every entity is a single
//! matrix-vector product over the first `m` segments.

use rayon::prelude::*;

use crate::core_tensor::{ArchitectureSet, CoreAssignment};
use crate::data::Fact;
use crate::embedding::{Matrix, SegmentedEmbeddings};
use crate::error::{Error, Result};

/// Facts per gradient accumulation chunk. Chunk boundaries fix the
/// floating-point summation order, so results do not depend on thread count.
const CHUNK: usize = 16;

/// Gradient congruent to a [`SegmentedEmbeddings`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub entities: Matrix,
    pub relations: Matrix,
}

impl Gradient {
    pub fn zeros_like(embeddings: &SegmentedEmbeddings) -> Self {
        Self {
            entities: Matrix::zeros(embeddings.entity_count(), embeddings.dim()),
            relations: Matrix::zeros(embeddings.relation_count(), embeddings.dim()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        self.entities.add_assign(&other.entities);
        self.relations.add_assign(&other.relations);
    }

    pub fn scale(&mut self, factor: f64) {
        self.entities.scale(factor);
        self.relations.scale(factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.entities.max_abs().max(self.relations.max_abs())
    }
}

fn check_position(fact: &Fact, position: usize) -> Result<()> {
    if position >= fact.arity() {
        return Err(Error::InvalidArgument(format!(
            "position {position} is out of range for a fact of arity {}",
            fact.arity()
        )));
    }
    Ok(())
}

/// Linear functional over the first `m` segments of the entity at `position`
/// (0-based): `score(fact with e' at position) = <E[e'][..m*L], context>`.
pub fn context(core: &CoreAssignment, embeddings: &SegmentedEmbeddings, fact: &Fact, position: usize) -> Vec<f64> {
    let len = embeddings.segment_len();
    let mut ctx = vec![0.0; core.active_segments() * len];
    let relation = embeddings.relation(fact.relation);
    let entities: Vec<&[f64]> = fact.entities.iter().map(|&e| embeddings.entity(e)).collect();
    for (sign, segs) in core.active_blocks() {
        let out = segs[position + 1] * len;
        let r = segs[0] * len;
        for t in 0..len {
            let mut prod = sign * relation[r + t];
            for (i, e) in entities.iter().enumerate() {
                if i != position {
                    prod *= e[segs[i + 1] * len + t];
                }
            }
            ctx[out + t] += prod;
        }
    }
    ctx
}

fn candidate_scores(embeddings: &SegmentedEmbeddings, ctx: &[f64]) -> Vec<f64> {
    let width = ctx.len();
    (0..embeddings.entity_count())
        .map(|e| {
            let row = &embeddings.entity(e as u32)[..width];
            row.iter().zip(ctx).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Scores of every entity placed at `position` (0-based) of `fact`.
pub fn score_all_candidates(
    core: &CoreAssignment,
    embeddings: &SegmentedEmbeddings,
    fact: &Fact,
    position: usize,
) -> Result<Vec<f64>> {
    core.check_compatible(embeddings, fact)?;
    check_position(fact, position)?;
    Ok(candidate_scores(embeddings, &context(core, embeddings, fact, position)))
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Sum over entity positions of `-score(fact) + logsumexp(candidate scores)`.
pub fn multiclass_log_loss(core: &CoreAssignment, embeddings: &SegmentedEmbeddings, fact: &Fact) -> Result<f64> {
    core.check_compatible(embeddings, fact)?;
    let truth = core.score_unchecked(embeddings, fact);
    let mut loss = 0.0;
    for p in 0..fact.arity() {
        let scores = candidate_scores(embeddings, &context(core, embeddings, fact, p));
        loss += log_sum_exp(&scores) - truth;
    }
    Ok(loss)
}

/// Loss of one fact, accumulating its gradient into `grad`.
fn accumulate_fact(core: &CoreAssignment, embeddings: &SegmentedEmbeddings, fact: &Fact, grad: &mut Gradient) -> f64 {
    let len = embeddings.segment_len();
    let arity = fact.arity();
    let relation = embeddings.relation(fact.relation);
    let entities: Vec<&[f64]> = fact.entities.iter().map(|&e| embeddings.entity(e)).collect();
    let mut loss = 0.0;
    let mut slot_values = vec![0.0; arity + 1];

    for p in 0..arity {
        let ctx = context(core, embeddings, fact, p);
        let width = ctx.len();
        let scores = candidate_scores(embeddings, &ctx);
        let lse = log_sum_exp(&scores);
        let truth = fact.entities[p] as usize;
        loss += lse - scores[truth];

        // d loss / d score_e = softmax_e - [e == truth]
        let mut grad_ctx = vec![0.0; width];
        for (e, &s) in scores.iter().enumerate() {
            let w = (s - lse).exp() - if e == truth { 1.0 } else { 0.0 };
            if w == 0.0 {
                continue;
            }
            let row = &embeddings.entity(e as u32)[..width];
            for (g, &x) in grad_ctx.iter_mut().zip(row) {
                *g += w * x;
            }
            for (g, &c) in grad.entities.row_mut(e)[..width].iter_mut().zip(&ctx) {
                *g += w * c;
            }
        }

        // back through the context into the relation and the other entities
        for (sign, segs) in core.active_blocks() {
            let out = segs[p + 1] * len;
            for t in 0..len {
                let upstream = sign * grad_ctx[out + t];
                if upstream == 0.0 {
                    continue;
                }
                slot_values[0] = relation[segs[0] * len + t];
                for (i, e) in entities.iter().enumerate() {
                    slot_values[i + 1] = e[segs[i + 1] * len + t];
                }
                for (slot, &seg) in segs.iter().enumerate().take(arity + 1) {
                    if slot == p + 1 {
                        continue;
                    }
                    let mut prod = upstream;
                    for (other, &v) in slot_values.iter().enumerate() {
                        if other != slot && other != p + 1 {
                            prod *= v;
                        }
                    }
                    let col = seg * len + t;
                    if slot == 0 {
                        grad.relations.row_mut(fact.relation as usize)[col] += prod;
                    } else {
                        grad.entities.row_mut(fact.entities[slot - 1] as usize)[col] += prod;
                    }
                }
            }
        }
    }
    loss
}

fn check_batch(architecture: &ArchitectureSet, embeddings: &SegmentedEmbeddings, batch: &[Fact]) -> Result<()> {
    for fact in batch {
        architecture.get(fact.arity())?.check_compatible(embeddings, fact)?;
    }
    Ok(())
}

/// Summed loss over `batch` and its gradient under one architecture.
pub fn batch_loss_and_gradient(
    architecture: &ArchitectureSet,
    embeddings: &SegmentedEmbeddings,
    batch: &[Fact],
) -> Result<(f64, Gradient)> {
    check_batch(architecture, embeddings, batch)?;
    let partials: Vec<(f64, Gradient)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = Gradient::zeros_like(embeddings);
            let mut loss = 0.0;
            for fact in chunk {
                let core = architecture.get(fact.arity()).expect("checked above");
                loss += accumulate_fact(core, embeddings, fact, &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut total = Gradient::zeros_like(embeddings);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        total.add_assign(g);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("batch loss is {loss}")));
    }
    Ok((loss, total))
}

/// Monte-Carlo average of the batch gradient over sampled architectures.
///
/// Returns the mean summed-batch loss and the mean gradient. Each distinct
/// sample is computed once and weighted by its share of the draws, so a batch
/// of identical samples reproduces the single-architecture gradient exactly.
pub fn mean_gradient(
    samples: &[ArchitectureSet],
    embeddings: &SegmentedEmbeddings,
    batch: &[Fact],
) -> Result<(f64, Gradient)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("at least one architecture sample is required".into()));
    }
    let mut distinct: Vec<(&ArchitectureSet, usize)> = Vec::new();
    for sample in samples {
        match distinct.iter_mut().find(|(s, _)| *s == sample) {
            Some((_, count)) => *count += 1,
            None => distinct.push((sample, 1)),
        }
    }
    let draws = samples.len() as f64;
    let mut total: Option<Gradient> = None;
    let mut loss = 0.0;
    for (sample, count) in distinct {
        let (l, mut g) = batch_loss_and_gradient(sample, embeddings, batch)?;
        let weight = count as f64 / draws;
        if weight != 1.0 {
            g.scale(weight);
        }
        loss += weight * l;
        match total.as_mut() {
            Some(t) => t.add_assign(&g),
            None => total = Some(g),
        }
    }
    Ok((loss, total.expect("at least one sample")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_tensor::{BlockCode, Preset};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_core(arity: usize, m: usize, rng: &mut ChaCha8Rng) -> CoreAssignment {
        CoreAssignment::from_fn(arity, m, |_| BlockCode::OPS[rng.random_range(0..3)]).unwrap()
    }

    #[test]
    fn candidate_entry_at_truth_matches_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = SegmentedEmbeddings::init_uniform(3, 2, 6, 3, 4).unwrap();
        let core = random_core(3, 3, &mut rng);
        let fact = Fact::new(1, vec![2, 0, 1]);
        let direct = core.score(&emb, &fact).unwrap();
        for p in 0..3 {
            let all = score_all_candidates(&core, &emb, &fact, p).unwrap();
            assert!((all[fact.entities[p] as usize] - direct).abs() < 1e-12);
            for (e, &s) in all.iter().enumerate() {
                let other = core.score(&emb, &fact.with_entity(p, e as u32)).unwrap();
                assert!((s - other).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_core_gives_zero_candidates() {
        let emb = SegmentedEmbeddings::init_uniform(4, 1, 4, 2, 0).unwrap();
        let core = CoreAssignment::zeros(2, 2).unwrap();
        let fact = Fact::new(0, vec![1, 2]);
        assert_eq!(score_all_candidates(&core, &emb, &fact, 0).unwrap(), vec![0.0; 4]);
        assert!(score_all_candidates(&core, &emb, &fact, 2).is_err());
    }

    #[test]
    fn uniform_loss_is_n_log_ne() {
        let emb = SegmentedEmbeddings::init_uniform(7, 2, 4, 2, 0).unwrap();
        let fact = Fact::new(0, vec![1, 2, 3]);
        let zero = CoreAssignment::zeros(3, 2).unwrap();
        let loss = multiclass_log_loss(&zero, &emb, &fact).unwrap();
        assert!((loss - 3.0 * 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_entity_loss_is_zero() {
        let emb = SegmentedEmbeddings::init_uniform(1, 1, 4, 2, 0).unwrap();
        let cp = CoreAssignment::preset(Preset::Cp, 2, 2).unwrap();
        let loss = multiclass_log_loss(&cp, &emb, &Fact::new(0, vec![0, 0])).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn toy_loss_matches_hand_formula() {
        // d=1, M=1: score = r * e1 * e2
        let e = Matrix::from_vec(3, 1, vec![1.0, 2.0, -1.0]).unwrap();
        let r = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let emb = SegmentedEmbeddings::new(e, r, 1).unwrap();
        let cp = CoreAssignment::preset(Preset::Cp, 2, 1).unwrap();
        let fact = Fact::new(0, vec![0, 1]);
        // position 0: candidates x * 2 * 0.5 = x -> (1, 2, -1), truth 1
        // position 1: candidates 1 * x * 0.5 -> (0.5, 1, -0.5), truth 1
        let lse = |v: [f64; 3]| v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        let expected = (lse([1.0, 2.0, -1.0]) - 1.0) + (lse([0.5, 1.0, -0.5]) - 1.0);
        let loss = multiclass_log_loss(&cp, &emb, &fact).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_is_shift_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!((log_sum_exp(&[0.0]) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn zero_architecture_has_zero_gradient() {
        let emb = SegmentedEmbeddings::init_uniform(5, 2, 4, 2, 3).unwrap();
        let arch = ArchitectureSet::zeros(2, 3).unwrap();
        let batch = vec![Fact::new(0, vec![1, 2]), Fact::new(1, vec![0, 3, 4])];
        let (loss, grad) = batch_loss_and_gradient(&arch, &emb, &batch).unwrap();
        assert!((loss - (2.0 * 5f64.ln() + 3.0 * 5f64.ln())).abs() < 1e-12);
        assert_eq!(grad.max_abs(), 0.0);
    }

    #[test]
    fn mean_of_identical_samples_equals_single() {
        let emb = SegmentedEmbeddings::init_uniform(5, 2, 4, 2, 3).unwrap();
        let arch = ArchitectureSet::preset(Preset::Complex, 2, 2).unwrap();
        let batch = vec![Fact::new(0, vec![1, 2]), Fact::new(1, vec![0, 3])];
        let single = batch_loss_and_gradient(&arch, &emb, &batch).unwrap();
        let mean = mean_gradient(std::slice::from_ref(&arch), &emb, &batch).unwrap();
        assert_eq!(single, mean);
        assert!(mean_gradient(&[], &emb, &batch).is_err());
    }

    #[test]
    fn missing_arity_is_reported() {
        let emb = SegmentedEmbeddings::init_uniform(5, 2, 4, 2, 3).unwrap();
        let arch = ArchitectureSet::zeros(2, 2).unwrap();
        let batch = vec![Fact::new(0, vec![1, 2, 3])];
        assert!(matches!(
            batch_loss_and_gradient(&arch, &emb, &batch),
            Err(Error::MissingArity(3))
        ));
    }
}
