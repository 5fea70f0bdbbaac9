//! Stochastic architecture search over block codes.
//!
//! Every block of every arity's core gets an independent categorical
//! distribution over the ops `(-1, 0, +1)`. The search alternates an Adam step
//! on the embeddings, averaged over architectures sampled from the current
//! distribution, with an adaptive stochastic natural-gradient (ASNG) step on the
//! distribution driven by per-fact validation reciprocal ranks.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core_tensor::{block_count, ArchitectureSet, BlockCode, CoreAssignment};
use crate::data::{Dataset, Fact, FilterIndex};
use crate::embedding::SegmentedEmbeddings;
use crate::error::{Error, Result};
use crate::eval::{fact_ranks, TiePolicy};
use crate::train::{init_seed, rng_for, stream, BatchHooks, EmbeddingTrainer, TrainConfig};

/// Probabilities of `(-1, 0, +1)` for one block.
pub type Column = [f64; 3];

/// Lower clip applied to every probability after an update.
pub const THETA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureDistribution {
    segment_count: usize,
    max_arity: usize,
    columns: BTreeMap<usize, Vec<Column>>,
}

impl ArchitectureDistribution {
    /// Every column `(1/3, 1/3, 1/3)`.
    pub fn uniform(max_arity: usize, segment_count: usize) -> Result<Self> {
        check_shape(max_arity, segment_count)?;
        let third = 1.0 / 3.0;
        let columns = (2..=max_arity)
            .map(|n| (n, vec![[third; 3]; block_count(n, segment_count)]))
            .collect();
        Ok(Self {
            segment_count,
            max_arity,
            columns,
        })
    }

    /// Point mass on a fixed architecture.
    pub fn one_hot(architecture: &ArchitectureSet) -> Self {
        let columns = architecture
            .iter()
            .map(|(n, core)| {
                let cols = core
                    .codes()
                    .iter()
                    .map(|c| {
                        let mut col = [0.0; 3];
                        col[c.op_index()] = 1.0;
                        col
                    })
                    .collect();
                (n, cols)
            })
            .collect();
        Self {
            segment_count: architecture.segment_count(),
            max_arity: architecture.max_arity(),
            columns,
        }
    }

    pub fn from_columns(segment_count: usize, max_arity: usize, columns: BTreeMap<usize, Vec<Column>>) -> Result<Self> {
        check_shape(max_arity, segment_count)?;
        for n in 2..=max_arity {
            let cols = columns.get(&n).ok_or(Error::MissingArity(n))?;
            if cols.len() != block_count(n, segment_count) {
                return Err(Error::Shape(format!(
                    "arity {n} needs {} columns, found {}",
                    block_count(n, segment_count),
                    cols.len()
                )));
            }
        }
        if let Some(&extra) = columns.keys().find(|&&n| n < 2 || n > max_arity) {
            return Err(Error::Shape(format!("unexpected arity {extra} in distribution")));
        }
        let dist = Self {
            segment_count,
            max_arity,
            columns,
        };
        dist.check_simplex(1e-9)?;
        Ok(dist)
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn max_arity(&self) -> usize {
        self.max_arity
    }

    pub fn columns(&self, arity: usize) -> Option<&[Column]> {
        self.columns.get(&arity).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[Column])> {
        self.columns.iter().map(|(&n, c)| (n, c.as_slice()))
    }

    /// Total number of blocks over all arities.
    pub fn total_blocks(&self) -> usize {
        self.columns.values().map(Vec::len).sum()
    }

    pub fn check_simplex(&self, tolerance: f64) -> Result<()> {
        for (n, cols) in &self.columns {
            for (k, col) in cols.iter().enumerate() {
                let sum: f64 = col.iter().sum();
                if col.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > tolerance {
                    return Err(Error::Numeric(format!(
                        "arity {n} block {k} is off the simplex: {col:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mean per-block entropy in nats.
    pub fn mean_entropy(&self) -> f64 {
        let total = self.total_blocks();
        if total == 0 {
            return 0.0;
        }
        let sum: f64 = self
            .columns
            .values()
            .flatten()
            .map(|col| col.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
            .sum();
        sum / total as f64
    }

    /// Draw one architecture; blocks are visited in arity then block order.
    pub fn sample(&self, rng: &mut impl Rng) -> (ArchitectureSet, SufficientStatistic) {
        let mut ops = BTreeMap::new();
        let mut cores = Vec::with_capacity(self.columns.len());
        for (&n, cols) in &self.columns {
            let picks: Vec<u8> = cols.iter().map(|col| sample_column(col, rng)).collect();
            let codes = picks.iter().map(|&i| BlockCode::OPS[i as usize]).collect();
            cores.push(CoreAssignment::new(n, self.segment_count, codes).expect("shape checked at construction"));
            ops.insert(n, picks);
        }
        let arch = ArchitectureSet::new(self.segment_count, self.max_arity, cores).expect("every arity present");
        (arch, SufficientStatistic { ops })
    }

    /// Most probable op per block, ties going to 0, then +1, then -1.
    pub fn derive_final(&self) -> ArchitectureSet {
        let preference = [BlockCode::Zero, BlockCode::Pos, BlockCode::Neg];
        ArchitectureSet::from_fn(self.segment_count, self.max_arity, |n| {
            let codes = self.columns[&n]
                .iter()
                .map(|col| {
                    let mut best = preference[0];
                    for &op in &preference[1..] {
                        if col[op.op_index()] > col[best.op_index()] {
                            best = op;
                        }
                    }
                    best
                })
                .collect();
            CoreAssignment::new(n, self.segment_count, codes)
        })
        .expect("distribution shape is valid")
    }
}

fn check_shape(max_arity: usize, segment_count: usize) -> Result<()> {
    if max_arity < 2 || segment_count == 0 {
        return Err(Error::InvalidArgument(format!(
            "need max arity >= 2 and at least one segment, got N={max_arity}, M={segment_count}"
        )));
    }
    Ok(())
}

fn sample_column(col: &Column, rng: &mut impl Rng) -> u8 {
    let u: f64 = rng.random();
    if u < col[0] {
        0
    } else if u < col[0] + col[1] {
        1
    } else {
        2
    }
}

/// One-hot record of which op each block drew.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SufficientStatistic {
    ops: BTreeMap<usize, Vec<u8>>,
}

impl SufficientStatistic {
    pub fn ops(&self, arity: usize) -> Option<&[u8]> {
        self.ops.get(&arity).map(Vec::as_slice)
    }

    /// The 3xK indicator matrix as columns.
    pub fn one_hot(&self, arity: usize) -> Option<Vec<Column>> {
        self.ops(arity).map(|ops| {
            ops.iter()
                .map(|&i| {
                    let mut col = [0.0; 3];
                    col[i as usize] = 1.0;
                    col
                })
                .collect()
        })
    }

    /// Sampled codes of every arity, concatenated, as `-`, `0`, `+` characters.
    pub fn compact(&self) -> String {
        self.ops
            .values()
            .flatten()
            .map(|&i| ['-', '0', '+'][i as usize])
            .collect()
    }
}

/// How raw per-fact utilities are turned into estimator weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityTransform {
    /// Rank-based weights across the samples: best quarter positive, worst quarter negative.
    #[default]
    Ranked,
    /// Use the reciprocal ranks directly.
    Raw,
}

/// Rank-based utility weights (quantile 1/4), ties sharing the mean weight.
///
/// For two samples this is `+1` for the better, `-1` for the worse, `0` on a tie.
pub fn ranked_utilities(values: &[f64]) -> Vec<f64> {
    let lambda = values.len();
    if lambda < 2 {
        return vec![0.0; lambda];
    }
    let mut order: Vec<usize> = (0..lambda).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mu = (lambda as f64 * 0.25).ceil() as usize;
    let mut by_rank = vec![0.0; lambda];
    for w in by_rank.iter_mut().take(mu) {
        *w = 1.0 / mu as f64;
    }
    for w in by_rank.iter_mut().skip(lambda - mu) {
        *w = -1.0 / mu as f64;
    }
    let mut out = vec![0.0; lambda];
    let mut start = 0;
    while start < lambda {
        let mut end = start + 1;
        while end < lambda && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let mean = by_rank[start..end].iter().sum::<f64>() / (end - start) as f64;
        for &i in &order[start..end] {
            out[i] = mean;
        }
        start = end;
    }
    out
}

/// Ascent direction on the distribution, congruent to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    columns: BTreeMap<usize, Vec<Column>>,
}

impl Direction {
    pub fn zeros_like(theta: &ArchitectureDistribution) -> Self {
        Self {
            columns: theta.columns.iter().map(|(&n, c)| (n, vec![[0.0; 3]; c.len()])).collect(),
        }
    }

    pub fn columns(&self, arity: usize) -> Option<&[Column]> {
        self.columns.get(&arity).map(Vec::as_slice)
    }

    pub fn columns_mut(&mut self, arity: usize) -> Option<&mut [Column]> {
        self.columns.get_mut(&arity).map(Vec::as_mut_slice)
    }

    pub fn scale(&mut self, factor: f64) {
        for col in self.columns.values_mut().flatten() {
            col.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.columns.values().flatten().flatten().all(|x| x.abs() < 1e-18)
    }

    /// Add `(weight / lambda) * sum_i u_i (T_i - theta)` for one arity.
    pub fn accumulate(
        &mut self,
        theta: &ArchitectureDistribution,
        arity: usize,
        stats: &[&SufficientStatistic],
        weights: &[f64],
        scale: f64,
    ) -> Result<()> {
        let cols = self.columns.get_mut(&arity).ok_or(Error::MissingArity(arity))?;
        let probs = &theta.columns[&arity];
        let factor = scale / stats.len() as f64;
        for (stat, &u) in stats.iter().zip(weights) {
            if u == 0.0 {
                continue;
            }
            let ops = stat.ops(arity).ok_or(Error::MissingArity(arity))?;
            for ((dir, p), &op) in cols.iter_mut().zip(probs).zip(ops) {
                for j in 0..3 {
                    let t = if j == op as usize { 1.0 } else { 0.0 };
                    dir[j] += factor * u * (t - p[j]);
                }
            }
        }
        Ok(())
    }
}

/// `(1/lambda) sum_i u~_i (T_i - theta)` over every arity, with `u~` the
/// transformed utilities.
pub fn theta_gradient(
    theta: &ArchitectureDistribution,
    stats: &[&SufficientStatistic],
    utilities: &[f64],
    transform: UtilityTransform,
) -> Result<Direction> {
    if stats.is_empty() || stats.len() != utilities.len() {
        return Err(Error::InvalidArgument(
            "need one utility per sample and at least one sample".into(),
        ));
    }
    let weights = match transform {
        UtilityTransform::Ranked => ranked_utilities(utilities),
        UtilityTransform::Raw => utilities.to_vec(),
    };
    let mut dir = Direction::zeros_like(theta);
    for n in 2..=theta.max_arity {
        dir.accumulate(theta, n, stats, &weights, 1.0)?;
    }
    Ok(dir)
}

/// Step-size adaptation state of the natural-gradient optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsngState {
    /// Initial trust-region radius.
    pub delta_init: f64,
    pub alpha: f64,
    /// Accumulated-signal divisor of the radius.
    pub big_delta: f64,
    pub gamma: f64,
    pub accumulation: Vec<f64>,
    pub steps: u64,
}

impl AsngState {
    pub fn new(theta: &ArchitectureDistribution, delta_init: f64) -> Self {
        Self {
            delta_init,
            alpha: 1.5,
            big_delta: 1.0,
            gamma: 0.0,
            accumulation: vec![0.0; 2 * theta.total_blocks()],
            steps: 0,
        }
    }

    /// Current trust-region radius.
    pub fn delta(&self) -> f64 {
        self.delta_init / self.big_delta
    }

    /// Adaptation rate; tied to the current radius so it slows as the radius shrinks.
    fn beta(&self) -> f64 {
        self.delta() / (self.accumulation.len() as f64).sqrt()
    }
}

fn safe_sqrt_div(x: f64, p: f64) -> f64 {
    if p > 0.0 {
        x / p.sqrt()
    } else {
        0.0
    }
}

/// One natural-gradient step with adaptive radius, then clip each column to
/// `[THETA_FLOOR, 1]` and renormalize.
pub fn asng_update(theta: &mut ArchitectureDistribution, direction: &Direction, state: &mut AsngState) -> Result<()> {
    if direction.columns.len() != theta.columns.len()
        || direction
            .columns
            .iter()
            .any(|(n, c)| theta.columns.get(n).map(Vec::len) != Some(c.len()))
    {
        return Err(Error::Shape("direction does not match the distribution".into()));
    }
    if state.accumulation.len() != 2 * theta.total_blocks() {
        return Err(Error::Shape("optimizer state does not match the distribution".into()));
    }
    let beta = state.beta();
    state.steps += 1;
    if direction.is_zero() {
        let keep = 1.0 - beta;
        state.accumulation.iter_mut().for_each(|s| *s *= keep);
        state.gamma *= keep * keep;
        return Ok(());
    }

    // Fisher-whitened coordinates of the step, using (-1, 0) as free parameters.
    let mut whitened = Vec::with_capacity(state.accumulation.len());
    for (n, dirs) in &direction.columns {
        for (d, p) in dirs.iter().zip(&theta.columns[n]) {
            let head = d[0] + d[1];
            let tail = p[2] + p[2].sqrt();
            for j in 0..2 {
                let cross = if tail > 0.0 { p[j].sqrt() * head / tail } else { 0.0 };
                whitened.push(safe_sqrt_div(d[j], p[j]) + cross);
            }
        }
    }
    let norm = whitened.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-8;
    let step = state.delta() / norm;
    for (n, dirs) in &direction.columns {
        let cols = theta.columns.get_mut(n).expect("shape checked");
        for (col, d) in cols.iter_mut().zip(dirs) {
            for j in 0..3 {
                col[j] += step * d[j];
            }
        }
    }

    let keep = 1.0 - beta;
    let push = (beta * (2.0 - beta)).sqrt() / norm;
    for (s, w) in state.accumulation.iter_mut().zip(&whitened) {
        *s = keep * *s + push * w;
    }
    state.gamma = keep * keep * state.gamma + beta * (2.0 - beta);
    let signal: f64 = state.accumulation.iter().map(|s| s * s).sum();
    // Never widen past the initial radius; this also keeps beta below 1.
    state.big_delta = (state.big_delta * (beta * (state.gamma - signal / state.alpha)).exp()).max(1.0);

    for col in theta.columns.values_mut().flatten() {
        for p in col.iter_mut() {
            *p = p.clamp(THETA_FLOOR, 1.0);
        }
        let sum: f64 = col.iter().sum();
        col.iter_mut().for_each(|p| *p /= sum);
    }
    if theta.columns.values().flatten().flatten().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("architecture distribution became non-finite".into()));
    }
    Ok(())
}

/// Per-fact mean reciprocal filtered rank over entity positions.
pub fn validation_utility(
    embeddings: &SegmentedEmbeddings,
    architecture: &ArchitectureSet,
    facts: &[Fact],
    filter: &FilterIndex,
    policy: TiePolicy,
) -> Result<(Vec<f64>, f64)> {
    if facts.is_empty() {
        return Err(Error::InvalidArgument("validation batch is empty".into()));
    }
    let per_fact = facts
        .iter()
        .map(|fact| {
            let core = architecture.get(fact.arity())?;
            let ranks = fact_ranks(core, embeddings, fact, filter, policy)?;
            Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_fact.iter().sum::<f64>() / per_fact.len() as f64;
    Ok((per_fact, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Architecture samples per iteration.
    pub lambda: usize,
    pub search_epochs: usize,
    pub valid_batch_size: usize,
    /// Initial natural-gradient trust-region radius.
    pub theta_lr: f64,
    pub utility: UtilityTransform,
    pub seed: u64,
    /// Embedding dimension used while searching.
    pub dim: usize,
    pub tie_policy: TiePolicy,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            lambda: 2,
            search_epochs: 10,
            valid_batch_size: 64,
            theta_lr: 1.0,
            utility: UtilityTransform::Ranked,
            seed: 0,
            dim: 32,
            tie_policy: TiePolicy::Optimistic,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda == 0 {
            return Err(Error::InvalidArgument("lambda must be at least 1".into()));
        }
        if self.valid_batch_size == 0 {
            return Err(Error::InvalidArgument("validation batch size must be positive".into()));
        }
        if !(self.theta_lr > 0.0 && self.theta_lr <= 1.0) {
            return Err(Error::InvalidArgument("theta learning rate must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Sampled codes per architecture sample, see [`SufficientStatistic::compact`].
    pub sampled: Vec<String>,
    /// Mean validation utility of each sample over the batch.
    pub utilities: Vec<f64>,
    pub theta_entropy: f64,
    pub valid_mrr: f64,
    pub step_radius: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<SearchRecord>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub architecture: ArchitectureSet,
    pub theta: ArchitectureDistribution,
    pub trace: SearchTrace,
    pub embeddings: SegmentedEmbeddings,
}

struct SearchHooks<'a> {
    dataset: &'a Dataset,
    search: &'a SearchConfig,
    filter: &'a FilterIndex,
    theta: ArchitectureDistribution,
    state: AsngState,
    arch_rng: ChaCha8Rng,
    valid_rng: ChaCha8Rng,
    stats: Vec<SufficientStatistic>,
    trace: SearchTrace,
    epoch: usize,
}

impl BatchHooks for SearchHooks<'_> {
    fn samples(&mut self, _batch: &[Fact]) -> Result<Vec<ArchitectureSet>> {
        self.stats.clear();
        let mut archs = Vec::with_capacity(self.search.lambda);
        for _ in 0..self.search.lambda {
            let (arch, stat) = self.theta.sample(&mut self.arch_rng);
            archs.push(arch);
            self.stats.push(stat);
        }
        Ok(archs)
    }

    fn after_step(&mut self, embeddings: &SegmentedEmbeddings, train_loss: f64, archs: &[ArchitectureSet]) -> Result<()> {
        let valid = &self.dataset.valid;
        let size = self.search.valid_batch_size.min(valid.len());
        let batch: Vec<Fact> = index::sample(&mut self.valid_rng, valid.len(), size)
            .iter()
            .map(|i| valid[i].clone())
            .collect();

        // utilities[i][f]: sample i, fact f
        let utilities = archs
            .iter()
            .map(|arch| validation_utility(embeddings, arch, &batch, self.filter, self.search.tie_policy).map(|(u, _)| u))
            .collect::<Result<Vec<_>>>()?;

        let stat_refs: Vec<&SufficientStatistic> = self.stats.iter().collect();
        let mut direction = Direction::zeros_like(&self.theta);
        let scale = 1.0 / batch.len() as f64;
        let mut per_sample = vec![0.0; archs.len()];
        for (f, fact) in batch.iter().enumerate() {
            let raw: Vec<f64> = utilities.iter().map(|u| u[f]).collect();
            let weights = match self.search.utility {
                UtilityTransform::Ranked => ranked_utilities(&raw),
                UtilityTransform::Raw => raw.clone(),
            };
            direction.accumulate(&self.theta, fact.arity(), &stat_refs, &weights, scale)?;
            for (acc, u) in per_sample.iter_mut().zip(&raw) {
                *acc += u * scale;
            }
        }
        asng_update(&mut self.theta, &direction, &mut self.state)?;

        let valid_mrr = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        self.trace.records.push(SearchRecord {
            iteration: self.trace.records.len(),
            epoch: self.epoch,
            train_loss,
            sampled: self.stats.iter().map(SufficientStatistic::compact).collect(),
            utilities: per_sample,
            theta_entropy: self.theta.mean_entropy(),
            valid_mrr,
            step_radius: self.state.delta(),
        });
        Ok(())
    }
}

/// Alternate embedding and distribution updates, then take the argmax architecture.
///
/// The search uses `search.dim` as embedding dimension and `search.seed` for
/// every random stream; learning rate, decay and batch size come from `train`.
pub fn search_loop(dataset: &Dataset, search: &SearchConfig, train: &TrainConfig) -> Result<SearchOutcome> {
    let theta = ArchitectureDistribution::uniform(dataset.max_arity, train.segment_count)?;
    search_loop_from(dataset, search, train, theta)
}

pub fn search_loop_from(
    dataset: &Dataset,
    search: &SearchConfig,
    train: &TrainConfig,
    theta: ArchitectureDistribution,
) -> Result<SearchOutcome> {
    search.validate()?;
    let config = TrainConfig {
        dim: search.dim,
        seed: search.seed,
        mc_samples: search.lambda,
        ..train.clone()
    };
    config.validate()?;
    if theta.segment_count() != config.segment_count {
        return Err(Error::Shape("distribution and training disagree on segment count".into()));
    }
    if dataset.max_arity > theta.max_arity() {
        return Err(Error::MissingArity(dataset.max_arity));
    }
    if dataset.valid.is_empty() {
        return Err(Error::Data("search needs a validation split".into()));
    }
    if dataset.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }

    let filter = FilterIndex::for_dataset(dataset);
    let init = SegmentedEmbeddings::init_uniform(
        dataset.entity_count(),
        dataset.relation_count(),
        config.dim,
        config.segment_count,
        init_seed(config.seed),
    )?;
    let mut hooks = SearchHooks {
        dataset,
        search,
        filter: &filter,
        state: AsngState::new(&theta, search.theta_lr),
        theta,
        arch_rng: rng_for(config.seed, stream::ARCHITECTURES),
        valid_rng: rng_for(config.seed, stream::VALIDATION),
        stats: Vec::new(),
        trace: SearchTrace::default(),
        epoch: 0,
    };
    let mut trainer = EmbeddingTrainer::new(init, &dataset.train, &config, config.seed);
    for epoch in 0..search.search_epochs {
        hooks.epoch = epoch;
        trainer.run_epoch(epoch, &mut hooks)?;
    }

    let SearchHooks { theta, trace, .. } = hooks;
    Ok(SearchOutcome {
        architecture: theta.derive_final(),
        theta,
        trace,
        embeddings: trainer.embeddings,
    })
}
