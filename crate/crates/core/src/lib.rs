//! Approximate k-nearest-neighbor search with spiking neurons.
//!
//! Points are encoded with a PCA/ICA transform, stored as 8-bit synaptic
//! weights across a simulated mesh of chips, and searched by injecting the
//! query as a spike-latency pattern. Integrate-and-fire neurons whose stored
//! pattern best matches the query cross threshold first, so the order of
//! output spikes is the order of the matches.
//!
//! * [`encoding`] fits and applies the encoding transform.
//! * [`spikecodec`] turns an encoded key into input spike times.
//! * [`neurocore`] holds one chip: quantized weights and neuron dynamics.
//! * [`mesh`] steps all chips under a barrier and aggregates matches.
//! * [`search`] builds, loads and queries an on-disk index.
//! * [`bench`] provides the exact oracle, recall metrics and dataset IO.

extern crate blas_src;

pub mod bench;
mod binio;
pub mod config;
pub mod encoding;
pub mod error;
pub mod mesh;
pub mod neurocore;
pub mod search;
pub mod spikecodec;

pub use error::{Error, Result};
