//! Path-integral propagation of a system density matrix coupled to a
//! harmonic bath, using the quasi-adiabatic influence functional with
//! sparse memory masks, path filtering and merging of equivalent paths.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bath;
pub mod distributed;
pub mod engine;
pub mod error;
pub mod oracle;
pub mod pathstore;
pub mod quad;
pub mod system;

pub use bath::{EtaClass, EtaTable, SpectralDensity};
pub use distributed::{MergeMessage, RouteMap, RunOptions, RunReport, WorkerCtx};
pub use engine::{Engine, Mode, Propagated, RunSpec, Trajectory};
pub use error::{Error, Result};
pub use pathstore::{Configuration, Mask, OmegaStore, PathKey};
pub use system::{CMatrix, RCModelSpec, SystemModel};
