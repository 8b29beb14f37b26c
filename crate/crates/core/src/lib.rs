//! Personalized product search over a successive behavior graph.
//!
//! Products are linked to the short-term purchase sequences they appear in;
//! a parameter-free jumping graph convolution enriches product embeddings
//! over that graph, and a zero-attention user model consumes the enriched
//! embeddings to rank products for `(user, query)` pairs.

pub mod checkpoint;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod seed;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
