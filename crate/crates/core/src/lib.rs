//! Rationale evaluation by conditional V-information.
//!
//! A rationale is scored by how much it raises an evaluator's log-probability
//! of a label over a vacuous baseline that restates the input and label:
//!
//! ```text
//! rev(x, y, r) = log f[r, b](y) - log f[b](y),   b = baseline(x, y)
//! ```
//!
//! The crate also implements the simulatability baselines LAS and RQ, an
//! exact synthetic oracle with enumerable conditional mutual information, a
//! noise-perturbed generation stub for sensitivity sweeps, and the experiment
//! harness behind the `rev-eval` binary.

pub mod baseline;
pub mod corpus;
pub mod generators;
pub mod harness;
pub mod metrics;
pub mod scorer;
pub mod synth;
pub mod transport;
pub mod util;
