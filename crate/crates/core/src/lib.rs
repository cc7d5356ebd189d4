//! Deterministic, single-process laboratory for personalized federated
//! learning with context-modulated meta-learning.
//!
//! The crate is organized around six subsystems:
//!
//! - [`autodiff`]: reverse-mode automatic differentiation over dense tensors,
//!   enough for MLPs and the modulation machinery.
//! - [`networks`]: the gated base network, the federated modulator that
//!   predicts per-layer modulation parameters from a client batch, and
//!   seeded initialization.
//! - [`partition`]: synthetic non-i.i.d. task families (rotation and
//!   concept shift), shards and Dirichlet partitioners, and an IDX loader.
//! - [`fedcore`]: personalization, client rounds, server aggregation and
//!   the federation loop.
//! - [`baselines`]: FedAvg, FedAvg-FT and first-order Per-FedAvg.
//! - [`experiment`]: config parsing, seeded multi-run execution, CSV
//!   metrics and summary tables.
//!
//! Everything is seeded and single-threaded by default: the same config
//! produces byte-identical CSV output.

pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod experiment;
pub mod fedcore;
pub mod gradcheck;
pub mod networks;
pub mod partition;
pub mod seed;

pub use autodiff::{one_hot, one_hot_rows, sgd_step, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use fedcore::{
    ClientUpdate, Method, MetricsLog, Phase, RoundConfig, TrainedModel,
};
pub use networks::{ArchConfig, BaseParams, GlobalModel, ModulationMode, ModulationParams, ModulatorParams};
pub use partition::{ClientDataset, LabeledDataset, ShiftSpec, TaskFamilyConfig};
