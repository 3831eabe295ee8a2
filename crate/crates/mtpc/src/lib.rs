//! Multi-token prediction windows modeled as probabilistic circuits.
//!
//! The library builds layered sum/product circuits over a window of `n`
//! future tokens (fully factorized, rank-r mixture, latent-chain, and
//! binary-tree factorizations), parameterizes them per context from a toy
//! layered encoder, trains them against synthetic teachers with a
//! discounted multi-offset loss, and uses them as draft models inside
//! lossless speculative decoding against a single-token verifier.
//! A benchmark harness measures the acceptance / latency / throughput
//! trade-off across configurations.
//!
//! Modules mirror the pipeline:
//!
//! - [`circuit`]: circuit structure, the four architecture builders,
//!   structural validation, JSON round-trip.
//! - [`inference`]: log-domain evaluation, prefix marginals, conditionals,
//!   ancestral sampling, greedy drafting, and the enumeration table.
//! - [`oracle`]: independent closed-form joint implementations used for
//!   differential testing against the circuit evaluator.
//! - [`neural`]: toy backbone encoder, draft adapter, parameter heads,
//!   initialization schemes, checkpoint serialization.
//! - [`training`]: discounted window loss, hand-rolled gradients with a
//!   finite-difference check, Adam loop, synthetic teachers.
//! - [`specdec`]: token-level verification with residual sampling, the
//!   shared-state decode loop, greedy variant, and the AR baseline.
//! - [`bench`]: metric records, throughput measurement, configuration
//!   sweeps.

pub mod bench;
pub mod circuit;
pub mod inference;
pub mod neural;
pub mod oracle;
pub mod specdec;
pub mod training;

/// Deterministic generator used everywhere randomness is needed.
/// RNGs are always explicit arguments; there is no ambient randomness.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Library-wide error type. The three variants mirror the three failure
/// classes the operations distinguish: invalid construction arguments,
/// violated call contracts, and tripped safety guards.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid structural arguments (bad n, r, v, unknown kind).
    #[error("specification error: {0}")]
    Spec(String),
    /// A caller violated an operation's preconditions (shape mismatch,
    /// token out of range, empty prefix).
    #[error("contract error: {0}")]
    Contract(String),
    /// A safety guard tripped (table too large, undefined residual).
    #[error("guard error: {0}")]
    Guard(String),
    /// Training produced a non-finite loss.
    #[error("diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn spec_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Spec(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn guard_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Guard(msg.into()))
}
