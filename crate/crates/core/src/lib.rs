//! Learning memory-dependent flow maps for the observed part of a dynamical
//! system.
//!
//! Only a subset `z` of the state is observed. The reduced dynamics of `z`
//! carry memory, so the one-step model maps a window of the current and
//! `n_mem` previous states to the next one:
//!
//! ```text
//! z_{n+1} = z_n + N(z_n, z_{n-1}, ..., z_{n-n_mem})
//! ```
//!
//! where `N` is a fully connected tanh network. The crate covers the whole
//! pipeline: ground-truth generation ([`dynamics`]), memory-window datasets
//! ([`data`]), the network and its gradients ([`net`]), Adam training
//! ([`train`]), rollouts and error studies ([`rollout`]), and the experiment
//! presets driven by the command line ([`experiment`]).

pub mod data;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod net;
pub mod rollout;
pub mod seed;
pub mod train;
mod textio;

pub use error::{Error, Result};
