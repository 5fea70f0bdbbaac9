//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use blockcore::{BuildOptions, Error, Result, SearchConfig, TiePolicy, TrainConfig, UtilityTransform};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Use every arity in the data with one shared embedding table.
    #[default]
    MixedArity,
    /// Keep only facts of the target arity.
    FixedArity,
}

/// Every knob a run can set. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub arity: Option<usize>,
    pub holdout_fraction: f64,
    pub strict: bool,
    pub seed: u64,
    pub tie_policy: TiePolicy,

    pub dim: usize,
    pub segment_count: usize,
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub mc_samples: usize,
    pub patience: usize,
    pub eval_every: usize,

    pub lambda: usize,
    pub search_epochs: usize,
    pub search_dim: usize,
    pub valid_batch_size: usize,
    pub theta_lr: f64,
    pub utility: UtilityTransform,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let search = SearchConfig::default();
        let data = BuildOptions::default();
        Self {
            mode: Mode::MixedArity,
            arity: None,
            holdout_fraction: data.holdout_fraction,
            strict: data.strict,
            seed: 0,
            tie_policy: TiePolicy::Optimistic,
            dim: train.dim,
            segment_count: train.segment_count,
            learning_rate: train.learning_rate,
            decay_rate: train.decay_rate,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            mc_samples: train.mc_samples,
            patience: train.patience,
            eval_every: train.eval_every,
            lambda: search.lambda,
            search_epochs: search.search_epochs,
            search_dim: search.dim,
            valid_batch_size: search.valid_batch_size,
            theta_lr: search.theta_lr,
            utility: search.utility,
        }
    }
}

impl RunConfig {
    /// Overlay the keys of a TOML file onto `self`; keys the file omits keep their values.
    pub fn overlay_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        let mut merged = self.to_json();
        let object = merged.as_object_mut().expect("config is a JSON object");
        for (key, value) in table {
            let value = serde_json::to_value(value).expect("TOML values map to JSON");
            object.insert(key, value);
        }
        serde_json::from_value(merged).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn check(&self) -> Result<()> {
        if self.mode == Mode::FixedArity && self.arity.is_none() {
            return Err(Error::InvalidArgument("fixed-arity mode needs a target arity (--arity)".into()));
        }
        if let Some(n) = self.arity {
            if n < 2 {
                return Err(Error::InvalidArgument(format!("target arity {n} is below 2")));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidArgument("holdout fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            holdout_fraction: self.holdout_fraction,
            seed: self.seed,
            strict: self.strict,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            segment_count: self.segment_count,
            learning_rate: self.learning_rate,
            decay_rate: self.decay_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed: self.seed,
            mc_samples: self.mc_samples,
            patience: self.patience,
            eval_every: self.eval_every,
            tie_policy: self.tie_policy,
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            lambda: self.lambda,
            search_epochs: self.search_epochs,
            valid_batch_size: self.valid_batch_size,
            theta_lr: self.theta_lr,
            utility: self.utility,
            seed: self.seed,
            dim: self.search_dim,
            tie_policy: self.tie_policy,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config always serializes")
    }
}

/// Options for reading a dataset directory.
#[derive(Debug, Clone, Default, Args)]
pub struct DataFlags {
    /// Dataset directory with train.tsv, optional valid.tsv and test.tsv
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Target arity for fixed-arity mode
    #[arg(long)]
    pub arity: Option<usize>,
    /// Share of train held out for validation when no valid.tsv exists
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
    /// Accept validation and test symbols never seen in training
    #[arg(long)]
    pub lenient: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Count score ties against the truth
    #[arg(long)]
    pub pessimistic: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long = "segments")]
    pub segment_count: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Per-epoch learning-rate decay factor
    #[arg(long = "decay")]
    pub decay_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "epochs")]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Validation checks without improvement before stopping; 0 disables
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SearchFlags {
    /// Architecture samples per iteration
    #[arg(long)]
    pub lambda: Option<usize>,
    #[arg(long)]
    pub search_epochs: Option<usize>,
    /// Embedding dimension while searching
    #[arg(long)]
    pub search_dim: Option<usize>,
    #[arg(long)]
    pub valid_batch_size: Option<usize>,
    /// Initial natural-gradient step radius, in (0, 1]
    #[arg(long)]
    pub theta_lr: Option<f64>,
    /// Feed reciprocal ranks to the estimator instead of ranked weights
    #[arg(long)]
    pub raw_utility: bool,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl DataFlags {
    pub fn apply(&self, c: &mut RunConfig) {
        set(&mut c.mode, self.mode);
        if self.arity.is_some() {
            c.arity = self.arity;
        }
        set(&mut c.holdout_fraction, self.holdout_fraction);
        set(&mut c.seed, self.seed);
        if self.lenient {
            c.strict = false;
        }
        if self.pessimistic {
            c.tie_policy = TiePolicy::Pessimistic;
        }
    }
}

impl TrainFlags {
    pub fn apply(&self, c: &mut RunConfig) {
        set(&mut c.dim, self.dim);
        set(&mut c.segment_count, self.segment_count);
        set(&mut c.learning_rate, self.learning_rate);
        set(&mut c.decay_rate, self.decay_rate);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.max_epochs, self.max_epochs);
        set(&mut c.mc_samples, self.mc_samples);
        set(&mut c.patience, self.patience);
        set(&mut c.eval_every, self.eval_every);
    }
}

impl SearchFlags {
    pub fn apply(&self, c: &mut RunConfig) {
        set(&mut c.lambda, self.lambda);
        set(&mut c.search_epochs, self.search_epochs);
        set(&mut c.search_dim, self.search_dim);
        set(&mut c.valid_batch_size, self.valid_batch_size);
        set(&mut c.theta_lr, self.theta_lr);
        if self.raw_utility {
            c.utility = UtilityTransform::Raw;
        }
    }
}
