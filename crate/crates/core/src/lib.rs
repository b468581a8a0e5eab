//! Soft valence-weighted contrastive pre-training over a minimal
//! differentiable transformer encoder, with a momentum encoder and queue.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`affect`] — lexicons, corpora, vocabulary, token/valence alignment
//! - [`tensor`] / [`autodiff`] / [`gradcheck`] — f64 tensors with
//!   reverse-mode differentiation and a finite-difference checker
//! - [`encoder`] — the transformer encoder
//! - [`losses`] — contrastive and MLM objectives
//! - [`momentum`] — momentum encoder maintenance and the FIFO key queue
//! - [`trainer`] — the pre-training loop, optimizer, checkpointing
//! - [`metrics`] — rank correlations, probes, collapse diagnostics
//! - [`synth`] — synthetic lexicon/corpus generation
//! - [`experiments`] — sweep and loss-comparison drivers

pub mod affect;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod experiments;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod momentum;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use affect::{AnnotatedSentence, Lexicon, TokenizedSentence, ValenceRating, Vocabulary};
pub use config::{ConfigError, RunConfig};
pub use encoder::{
    clone_params, EncodedBatch, Encoder, EncoderConfig, EncoderError, EncoderParams, ParamVars,
};
pub use gradcheck::{grad_check, GradCheckReport, NamedTensors};
pub use losses::{LossBreakdown, LossError, Polarity};
pub use metrics::{
    accuracy, collapse_diagnostics, kendall_tau, mae, pearson_r, spearman_rho, valence_probe,
    CollapseDiagnostics, MetricReport, MetricsError,
};
pub use momentum::{loss_momentum_cl, momentum_update, MomentumQueue, MomentumState};
pub use tensor::{NumericError, Tensor};
pub use trainer::{LossMode, TrainConfig, TrainError, TrainLogRecord, Trainer};
