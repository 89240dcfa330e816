//! Toy transformer-MoE model, synthetic corpus, optimizer, and training loop.

pub mod checkpoint;
mod config;
mod corpus;
mod gradcheck;
mod metrics;
mod model;
mod objective;
mod optim;
mod trainer;

pub use config::{Attention, ModelConfig, TrainConfig};
pub use corpus::{synth_corpus, Batch, Corpus, CONTEXT_SUPPORT};
pub use gradcheck::{gradcheck, GradSample, GradcheckOptions, GradcheckReport};
pub use metrics::{metrics_header, MetricsRecord, MetricsWriter};
pub use model::{expected_param_count, AttentionLayout, BlockLayout, Forward, Layout, Model, BIAS_INIT};
pub use objective::{objective, Objective};
pub use optim::{clip_global_norm, global_norm, AdamW};
pub use trainer::{evaluate_loss, gradients, train_loop, ObjectiveValues, Trainer};
