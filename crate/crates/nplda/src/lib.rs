//! Speaker-verification back-end toolkit.
//!
//! Scores pairs of fixed-dimensional speaker embeddings with:
//!
//! * a generative PLDA model estimated by EM, scored in closed form
//!   through the P/Q matrices, with an exact joint-Gaussian LLR oracle;
//! * a pairwise discriminative network (affine / length-norm / affine /
//!   quadratic layers) trained by hand-derived backpropagation under
//!   BCE, regularized BCE, or a differentiable approximation of the
//!   detection cost with learnable thresholds;
//! * two baseline discriminative back-ends (quadratic-expansion linear
//!   scoring and a pairwise Gaussian model);
//! * detection-cost metrics, EER, and affine score calibration;
//! * a synthetic-data generator for end-to-end experiments.
//!
//! Everything is deterministic given explicit seeds; all persisted
//! artifacts are line-oriented text.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model_io;
pub mod neural;
pub mod pipeline;
pub mod plda;
pub mod preprocess;
pub mod trainer;

pub use error::{Error, Result};
pub use io::{Embedding, EmbeddingSet, Gender, Label, ScoreSet, Trial};
pub use model_io::Model;
pub use neural::NeuralPldaParams;
pub use pipeline::{DpldaPipeline, GbPipeline, GenerativePipeline};
pub use plda::{GenerativePlda, ScoreMatrices};
pub use preprocess::{AffineTransform, Preprocessor};
pub use trainer::{TrainConfig, TrainHistory, TrainableModel};