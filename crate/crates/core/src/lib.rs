//! Block-sparse core tensor models for n-ary relational facts.
//!
//! Embeddings are split into `M` segments and every arity gets a core whose
//! segment blocks are coded -1, 0 or +1. The crate covers data handling,
//! scoring and training, filtered evaluation, and a stochastic natural-gradient
//! search over block codes.

pub mod core_tensor;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod planted;
pub mod search;
pub mod train;

pub use core_tensor::{ArchitectureSet, BlockCode, CoreAssignment, Preset};
pub use data::{BuildOptions, Dataset, Fact, FilterIndex, RawFact, Split, Vocabulary};
pub use embedding::{Matrix, SegmentedEmbeddings};
pub use error::{Error, ErrorClass, Result};
pub use eval::{MetricsReport, RankingMetrics, TiePolicy};
pub use search::{ArchitectureDistribution, SearchConfig, SearchOutcome, SearchTrace, UtilityTransform};
pub use train::{TrainConfig, TrainOutcome};
