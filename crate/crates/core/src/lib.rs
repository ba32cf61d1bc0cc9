//! Generator-pretester network for joint video question-answer generation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`params`], [`optim`], [`gradcheck`],
//!   [`layers`], [`checkpoint`]: dense `f64` arithmetic with reverse-mode
//!   differentiation, Adam, and persistence.
//! - [`encoder`], [`jqag`], [`pretester`], [`model`]: the network itself.
//! - [`synthdata`]: a deterministic synthetic corpus with a ground-truth
//!   oracle.
//! - [`metrics`]: BLEU, ROUGE-L, CIDEr, QA accuracy and answerability.
//! - [`trainer`]: training loop, evaluation and the ablation harness.

pub mod autodiff;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod jqag;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretester;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{GpnError, Result};
pub use model::{Ablation, Batch, Gpn, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
