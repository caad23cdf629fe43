//! Uncertainty-based multi-task data sharing for offline reinforcement
//! learning in finite-horizon linear MDPs.
//!
//! The crate is organized bottom-up:
//!
//! * [`mdp`] defines linear MDPs, task families with shared dynamics, and
//!   exact dynamic-programming oracles.
//! * [`datasets`] generates behavior datasets, relabels rewards across tasks,
//!   merges shared datasets and persists them.
//! * [`uncertainty`] holds the ridge covariance, LCB penalties, exact
//!   Gaussian Q-posteriors, finite ensembles and OOD sampling.
//! * [`pevi`] runs closed-form pessimistic least-squares value iteration with
//!   in-distribution and OOD penalties.
//! * [`bench`] provides baselines, evaluation metrics and the sharing sweep.
//! * [`verify`] bundles the self-contained theory checks.

pub mod bench;
pub mod datasets;
pub mod error;
pub mod mdp;
pub mod pevi;
pub mod seeds;
pub mod uncertainty;
pub mod verify;

pub(crate) mod fmt;

pub use error::{Error, Result};
