//! Coarse-to-fine differentiable architecture search for image denoising.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`graph`]), a zoo of slimmable denoising operators ([`zoo`]), the
//! three-level searchable supernet ([`supernet`]), the two search
//! regularizers ([`latency`], [`loss`]), the alternating search driver
//! ([`search`]), architecture decoding ([`decode`]) and the synthetic
//! data / metrics pipeline ([`data`], [`metrics`]).

pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod fd;
pub mod graph;
pub mod latency;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod prior;
pub mod search;
pub mod stats;
pub mod supernet;
pub mod tensor;
pub mod zoo;

pub use error::{DenasError, Result};
pub use graph::{Graph, Parameter, Var};
pub use tensor::TensorData;
