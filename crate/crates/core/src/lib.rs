//! Residual vector quantization whose deepest stages quantize against small
//! codebooks drawn at random from one large, fixed, untrained codebook.
//!
//! The crate covers the quantizer cascade itself, EMA codebook fitting for
//! the trainable stages, usage and distortion diagnostics, a feature
//! front-end, and an experiment harness that runs variant grids.

pub mod codebook;
pub mod error;
pub mod features;
pub mod harness;
pub mod matrix;
pub mod metrics;
pub mod par;
pub mod quantizer;
pub mod report;
pub mod rng;
pub mod store;
pub mod tokens;
pub mod training;

pub use codebook::{init_gaussian, l2_normalize_rows, make_projection, sample_subcodebook, BigCodebook, Codebook, ProjectionPair, SubCodebook};
pub use error::{Error, Result};
pub use features::FeatureSet;
pub use harness::{compare_truncation, run_experiment, run_grid, ExperimentConfig, ExperimentReport, Mitigants};
pub use matrix::Matrix;
pub use metrics::{perplexity, si_sdr, usage_histogram, UsageReport};
pub use par::Execution;
pub use quantizer::{dequantize, nearest_neighbour, FrameQuantization, QuantizationResult, QuantizerStack, QuantizerStage, ResampleMode, Token};
pub use training::{ema_update, fit_codebooks, EmaState, TrainingConfig};
