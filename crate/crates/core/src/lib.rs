//! Knowledge-free black-box watermarking for image classifiers.
//!
//! Identity keys expand into a one-way code chain; each code maps to a
//! trigger image and a pseudorandom label. Triggers (optionally hardened
//! into post-triggers) are injected alongside generator-produced anchors,
//! and ownership is proven by disclosing sliding windows of the chain to a
//! verifier that runs a one-sided test against chance accuracy.

pub mod attacks;
pub mod capacity;
pub mod codec;
pub mod data;
pub mod dfd;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod injector;
pub mod nn;
pub mod package;
pub mod rng;
pub mod verifier;

pub use error::{Error, Result};
