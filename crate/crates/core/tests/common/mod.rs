//! Reference implementations the library is checked against. They share no
//! code with the crate beyond its data types.

#![allow(dead_code)]

use blockcore::data::Fact;
use blockcore::model::batch_loss_and_gradient;
use blockcore::embedding::SegmentedEmbeddings;
use blockcore::{ArchitectureSet, BlockCode, CoreAssignment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Score by looping over every segment multi-index and every in-segment
/// coordinate, with real-valued codes.
pub fn brute_score(codes: &[f64], arity: usize, segment_count: usize, emb: &SegmentedEmbeddings, fact: &Fact) -> f64 {
    let m = arity.min(segment_count);
    let len = emb.dim() / segment_count;
    let r = emb.relation(fact.relation);
    let es: Vec<&[f64]> = fact.entities.iter().map(|&e| emb.entity(e)).collect();
    let mut total = 0.0;
    let mut index = vec![0usize; arity + 1];
    for (k, &code) in codes.iter().enumerate() {
        // decode k with the relation slot slowest
        let mut rest = k;
        for slot in (0..=arity).rev() {
            index[slot] = rest % m;
            rest /= m;
        }
        if code == 0.0 {
            continue;
        }
        let mut block = 0.0;
        for t in 0..len {
            let mut p = r[index[0] * len + t];
            for (i, e) in es.iter().enumerate() {
                p *= e[index[i + 1] * len + t];
            }
            block += p;
        }
        total += code * block;
    }
    total
}

pub fn codes_f64(core: &CoreAssignment) -> Vec<f64> {
    core.values().iter().map(|&v| v as f64).collect()
}

/// Plain n-way inner product over the first `width` coordinates.
pub fn inner_product(vectors: &[&[f64]], width: usize) -> f64 {
    (0..width).map(|t| vectors.iter().map(|v| v[t]).product::<f64>()).sum()
}

pub fn random_core(arity: usize, segment_count: usize, rng: &mut ChaCha8Rng) -> CoreAssignment {
    CoreAssignment::from_fn(arity, segment_count, |_| BlockCode::OPS[rng.random_range(0..3)]).unwrap()
}

pub fn random_architecture(segment_count: usize, max_arity: usize, rng: &mut ChaCha8Rng) -> ArchitectureSet {
    ArchitectureSet::from_fn(segment_count, max_arity, |n| Ok(random_core(n, segment_count, rng))).unwrap()
}

pub fn random_fact(arity: usize, entity_count: usize, relation_count: usize, rng: &mut ChaCha8Rng) -> Fact {
    Fact::new(
        rng.random_range(0..relation_count) as u32,
        (0..arity).map(|_| rng.random_range(0..entity_count) as u32).collect(),
    )
}

/// Gaussian-free random embeddings in [-1, 1], independent of the crate's initializer.
pub fn random_embeddings(
    entity_count: usize,
    relation_count: usize,
    dim: usize,
    segment_count: usize,
    rng: &mut ChaCha8Rng,
) -> SegmentedEmbeddings {
    use blockcore::Matrix;
    let mut draw = |rows: usize| {
        Matrix::from_vec(rows, dim, (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let e = draw(entity_count);
    let r = draw(relation_count);
    SegmentedEmbeddings::new(e, r, segment_count).unwrap()
}

/// Filtered rank by scoring each candidate separately, then sorting.
pub fn brute_rank(
    arch: &ArchitectureSet,
    emb: &SegmentedEmbeddings,
    fact: &Fact,
    position: usize,
    truths: &[Fact],
    optimistic: bool,
) -> usize {
    let truth_score = arch.score(emb, fact).unwrap();
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for e in 0..emb.entity_count() as u32 {
        if e == fact.entities[position] {
            continue;
        }
        let candidate = fact.with_entity(position, e);
        if truths.contains(&candidate) {
            continue;
        }
        scored.push((arch.score(emb, &candidate).unwrap(), false));
    }
    scored.push((truth_score, true));
    // the truth sorts after its ties under the pessimistic rule
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0).then_with(|| if optimistic { b.1.cmp(&a.1) } else { a.1.cmp(&b.1) })
    });
    scored.iter().position(|s| s.1).unwrap() + 1
}

/// Largest relative deviation between the analytic gradient and central
/// differences, with a floor of 1e-3 on the denominator for tiny entries.
pub fn fd_error(arch: &ArchitectureSet, emb: &SegmentedEmbeddings, batch: &[Fact], h: f64) -> f64 {
    let (_, grad) = batch_loss_and_gradient(arch, emb, batch).unwrap();
    let loss = |e: &SegmentedEmbeddings| batch_loss_and_gradient(arch, e, batch).unwrap().0;
    let mut worst: f64 = 0.0;
    for table in 0..2 {
        let len = if table == 0 { emb.entities.as_slice().len() } else { emb.relations.as_slice().len() };
        for i in 0..len {
            let nudge = |delta: f64| {
                let mut e = emb.clone();
                let table_slice = if table == 0 { e.entities.as_mut_slice() } else { e.relations.as_mut_slice() };
                table_slice[i] += delta;
                e
            };
            let (plus, minus) = (nudge(h), nudge(-h));
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = if table == 0 { grad.entities.as_slice()[i] } else { grad.relations.as_slice()[i] };
            worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3));
        }
    }
    worst
}
