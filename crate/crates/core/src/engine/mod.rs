//! Training, optimization, checkpointing and gradient verification.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod train;

pub use adam::Adam;
pub use checkpoint::{config_hash, load_checkpoint, peek_dtype, save_checkpoint, Checkpoint};
pub use config::{Precision, TrainConfig, SEED_ENV};
pub use gradcheck::{gradcheck, probe_registry, GradcheckOptions, GradcheckReport};
pub use train::{split_indices, train, train_model, validate_split, write_metrics_csv, EpochSummary, StepMetrics, TrainOutcome};
