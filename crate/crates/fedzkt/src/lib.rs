//! Zero-shot knowledge transfer for federated learning with heterogeneous
//! on-device models.
//!
//! A server-side generator is trained adversarially against the ensemble of
//! device models to synthesize transfer data, letting devices with different
//! architectures distill knowledge into each other without sharing data.
//! The crate bundles the pieces a simulation needs: a small dense/conv
//! network engine with hand-written reverse-mode gradients ([`nn`]), the
//! model catalog ([`zoo`]), disagreement losses ([`loss`]), dataset loading
//! and client partitioning ([`data`]), and the federation protocol itself
//! ([`fed`]).
//!
//! All arithmetic is f64 and every run is reproducible: given the same seed
//! and configuration, results are bit-identical whether the data-parallel
//! `parallel` feature is active or not.

pub mod data;
pub mod error;
pub mod exec;
pub mod fed;
pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
