//! Fixed-architecture training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core_tensor::ArchitectureSet;
use crate::data::{Dataset, Fact, FilterIndex, Split};
use crate::embedding::SegmentedEmbeddings;
use crate::error::{Error, Result};
use crate::eval::{evaluate, TiePolicy};
use crate::model::{batch_loss_and_gradient, mean_gradient};
use crate::optim::{adam_step, AdamState};

/// Independent random streams derived from one seed.
pub(crate) mod stream {
    pub const INIT: u64 = 0;
    pub const BATCHES: u64 = 1;
    pub const ARCHITECTURES: u64 = 2;
    pub const VALIDATION: u64 = 3;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub segment_count: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Architecture samples per gradient estimate.
    pub mc_samples: usize,
    /// Validation evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    /// Epochs between validation evaluations.
    pub eval_every: usize,
    pub tie_policy: TiePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            segment_count: 2,
            learning_rate: 0.01,
            decay_rate: 0.995,
            batch_size: 128,
            max_epochs: 100,
            seed: 0,
            mc_samples: 2,
            patience: 10,
            eval_every: 1,
            tie_policy: TiePolicy::Optimistic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.dim == 0 || self.segment_count == 0 || !self.dim.is_multiple_of(self.segment_count) {
            return bad("dimension must be a positive multiple of the segment count");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate.is_finite()) {
            return bad("decay rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.mc_samples == 0 {
            return bad("at least one architecture sample is required");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    /// Mean per-fact loss over the epoch, measured before each batch's update.
    pub mean_loss: f64,
    pub facts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_mrr: Option<f64>,
}

/// Per-batch callbacks of [`EmbeddingTrainer::run_epoch`].
pub(crate) trait BatchHooks {
    /// Architectures whose mean gradient updates the embeddings for `batch`.
    fn samples(&mut self, batch: &[Fact]) -> Result<Vec<ArchitectureSet>>;

    /// Called after the optimizer step with the batch's mean per-fact loss.
    fn after_step(
        &mut self,
        _embeddings: &SegmentedEmbeddings,
        _batch_loss: f64,
        _samples: &[ArchitectureSet],
    ) -> Result<()> {
        Ok(())
    }
}

struct FixedSamples(Vec<ArchitectureSet>);

impl BatchHooks for FixedSamples {
    fn samples(&mut self, _batch: &[Fact]) -> Result<Vec<ArchitectureSet>> {
        Ok(self.0.clone())
    }
}

/// Epoch/batch bookkeeping shared by fixed training and the search loop, so
/// both walk identical batches and learning rates for a given seed.
pub(crate) struct EmbeddingTrainer<'a> {
    pub embeddings: SegmentedEmbeddings,
    adam: AdamState,
    batch_rng: ChaCha8Rng,
    order: Vec<usize>,
    train: &'a [Fact],
    config: &'a TrainConfig,
}

impl<'a> EmbeddingTrainer<'a> {
    pub fn new(embeddings: SegmentedEmbeddings, train: &'a [Fact], config: &'a TrainConfig, seed: u64) -> Self {
        Self {
            adam: AdamState::new(&embeddings),
            embeddings,
            batch_rng: rng_for(seed, stream::BATCHES),
            order: (0..train.len()).collect(),
            train,
            config,
        }
    }

    /// Run one epoch over shuffled mini-batches.
    pub fn run_epoch(&mut self, epoch: usize, hooks: &mut dyn BatchHooks) -> Result<LossReport> {
        let lr = self.config.learning_rate * self.config.decay_rate.powi(epoch as i32);
        self.order.shuffle(&mut self.batch_rng);
        let mut loss_sum = 0.0;
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for chunk in self.order.chunks(self.config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| self.train[i].clone()));
            let archs = hooks.samples(&batch)?;
            let (loss, grad) = mean_gradient(&archs, &self.embeddings, &batch)?;
            adam_step(&mut self.embeddings, &grad, &mut self.adam, lr)?;
            loss_sum += loss;
            hooks.after_step(&self.embeddings, loss / batch.len() as f64, &archs)?;
        }
        Ok(LossReport {
            epoch,
            mean_loss: loss_sum / self.train.len().max(1) as f64,
            facts: self.train.len(),
            valid_mrr: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub embeddings: SegmentedEmbeddings,
    pub history: Vec<LossReport>,
    /// Mean per-fact training loss of the initial embeddings.
    pub initial_loss: f64,
    pub best_valid_mrr: Option<f64>,
    pub epochs_run: usize,
}

/// Mean per-fact loss over `facts` under `architecture`.
pub fn mean_loss(architecture: &ArchitectureSet, embeddings: &SegmentedEmbeddings, facts: &[Fact]) -> Result<f64> {
    if facts.is_empty() {
        return Ok(0.0);
    }
    let (loss, _) = batch_loss_and_gradient(architecture, embeddings, facts)?;
    Ok(loss / facts.len() as f64)
}

/// Train embeddings from a fresh seeded initialization.
pub fn train_fixed(architecture: &ArchitectureSet, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let init = SegmentedEmbeddings::init_uniform(
        dataset.entity_count(),
        dataset.relation_count(),
        config.dim,
        config.segment_count,
        init_seed(config.seed),
    )?;
    train_fixed_from(architecture, dataset, config, init)
}

pub(crate) fn init_seed(seed: u64) -> u64 {
    use rand::RngCore;
    rng_for(seed, stream::INIT).next_u64()
}

/// Train starting from the given embeddings.
pub fn train_fixed_from(
    architecture: &ArchitectureSet,
    dataset: &Dataset,
    config: &TrainConfig,
    init: SegmentedEmbeddings,
) -> Result<TrainOutcome> {
    config.validate()?;
    architecture.ensure_covers(dataset.arities())?;
    if init.segment_count() != architecture.segment_count() {
        return Err(Error::Shape(format!(
            "embeddings have {} segments, architecture expects {}",
            init.segment_count(),
            architecture.segment_count()
        )));
    }
    if dataset.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let initial_loss = mean_loss(architecture, &init, &dataset.train)?;
    let filter = FilterIndex::for_dataset(dataset);
    let mut hooks = FixedSamples(vec![architecture.clone(); config.mc_samples]);

    let mut trainer = EmbeddingTrainer::new(init, &dataset.train, config, config.seed);
    let mut history = Vec::new();
    let mut best: Option<f64> = None;
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        let mut report = trainer.run_epoch(epoch, &mut hooks)?;
        let check = config.patience > 0 && !dataset.valid.is_empty() && (epoch + 1) % config.eval_every == 0;
        if check {
            let m = evaluate(
                &trainer.embeddings,
                architecture,
                dataset,
                Split::Valid,
                &filter,
                config.tie_policy,
            )?;
            report.valid_mrr = Some(m.mrr);
            if best.is_none_or(|b| m.mrr > b) {
                best = Some(m.mrr);
                stale = 0;
            } else {
                stale += 1;
            }
        }
        history.push(report);
        if check && stale >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        epochs_run: history.len(),
        embeddings: trainer.embeddings,
        history,
        initial_loss,
        best_valid_mrr: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_tensor::Preset;
    use crate::data::{build_dataset, BuildOptions, RawFact};

    fn toy() -> Dataset {
        let train: Vec<RawFact> = (0..12)
            .map(|i| RawFact::new(format!("r{}", i % 2), &[&format!("e{}", i % 5), &format!("e{}", (i + 1) % 5)]))
            .collect();
        let mut seen = std::collections::HashSet::new();
        let train: Vec<RawFact> = train.into_iter().filter(|f| seen.insert(f.clone())).collect();
        build_dataset(train, None, vec![], &BuildOptions { holdout_fraction: 0.2, seed: 1, strict: false }).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = toy();
        let arch = ArchitectureSet::preset(Preset::Cp, 2, 2).unwrap();
        let config = TrainConfig {
            dim: 4,
            learning_rate: 0.0,
            max_epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let init = SegmentedEmbeddings::init_uniform(data.entity_count(), data.relation_count(), 4, 2, init_seed(0)).unwrap();
        let out = train_fixed(&arch, &data, &config).unwrap();
        assert_eq!(out.embeddings, init);
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn training_reduces_loss() {
        let data = toy();
        let arch = ArchitectureSet::preset(Preset::Cp, 2, 2).unwrap();
        let config = TrainConfig {
            dim: 8,
            learning_rate: 0.05,
            max_epochs: 30,
            batch_size: 4,
            patience: 0,
            ..TrainConfig::default()
        };
        let out = train_fixed(&arch, &data, &config).unwrap();
        assert_eq!(out.history.len(), 30);
        let last = mean_loss(&arch, &out.embeddings, &data.train).unwrap();
        assert!(last < out.initial_loss, "{last} >= {}", out.initial_loss);
    }

    #[test]
    fn missing_arity_fails_before_training() {
        let train = vec![RawFact::new("r", &["a", "b", "c"]), RawFact::new("r", &["b", "c", "a"])];
        let data = build_dataset(train, None, vec![], &BuildOptions { holdout_fraction: 0.0, ..Default::default() }).unwrap();
        let arch = ArchitectureSet::preset(Preset::Complex, 2, 2).unwrap();
        let config = TrainConfig { dim: 4, ..TrainConfig::default() };
        assert!(matches!(train_fixed(&arch, &data, &config), Err(Error::MissingArity(3))));
    }

    #[test]
    fn deterministic_under_seed() {
        let data = toy();
        let arch = ArchitectureSet::preset(Preset::Complex, 2, 2).unwrap();
        let config = TrainConfig {
            dim: 4,
            max_epochs: 3,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let a = train_fixed(&arch, &data, &config).unwrap();
        let b = train_fixed(&arch, &data, &config).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn bad_configs_rejected() {
        let c = TrainConfig { dim: 5, segment_count: 2, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { mc_samples: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }
}
