//! Feature attribution for feed-forward neural networks.
//!
//! A model is a directed acyclic graph of layers ([`model::ModelGraph`]).
//! [`forward::forward`] records every intermediate value and the methods in
//! [`attribution`] walk the graph backwards from the selected outputs to the
//! inputs. [`results`] reshapes, aggregates and exports the relevances.

pub mod attribution;
pub mod error;
pub mod forward;
pub mod model;
pub mod oracle;
pub mod results;
pub mod tensor;

pub use error::{Error, Result};
