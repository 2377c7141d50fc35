//! Knowledge tracing with temporal graph memory networks.
//!
//! The pipeline: ingest or synthesize interaction logs ([`datasets`]), build
//! the question/KC bipartite graph and its hop labels ([`kcgraph`]), pretrain
//! frozen key embeddings ([`pretrain`]), then train the memory network
//! ([`tgm`], [`seqctx`], [`model`]) with the harness in [`train`] and the
//! metrics in [`metrics`]. [`cli`] ties the stages to the `tgmn` binary.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod kcgraph;
pub mod matrix_io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pretrain;
pub mod seqctx;
pub mod tgm;
pub mod train;

pub use autodiff::Real;
pub use error::{Result, TgmnError};
