//! Content-routed sparse attention with local, strided, dense and
//! random-routing baselines, a small byte-level autoregressive language model
//! built on top of them, and the tools used to train and analyze it.

// `!(a > b)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use corpus::{load_byte_corpus, ByteCorpus};
pub use error::{Error, Result};
pub use model::{HeadKind, HeadPlan, LanguageModel, ModelConfig};
pub use routing::{CentroidSet, RoutingPlan};
pub use tensor::{Precision, Scalar, Tensor};
