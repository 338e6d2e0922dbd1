//! Retrieval-augmented time-series forecasting.
//!
//! A frozen backbone embeds a query window, the knowledge base returns the
//! nearest stored windows, and the adaptive retrieval mixer fuses their
//! future horizons into the backbone representation before the output head.

pub mod arm;
pub mod backbone;
pub mod benchmark;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod linalg;
pub mod optim;
pub mod retrieval;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
