//! Non-Markovian model-based reinforcement learning with fractional-order
//! dynamical models.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only the numerical
//! core: Grünwald–Letnikov operators, system identification, a dense QP
//! solver, fractional MPC, the MBRL loop, the glucose plants and an exact
//! bound checker for small history-dependent processes. File formats and the
//! command line live in the `fracrl` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod glucose;
pub mod gl;
pub mod mbrl;
pub mod model;
pub mod mpc;
pub mod qp;
pub mod seed;
pub mod sysid;
pub mod theory;

pub use gl::{FractionalOrders, GlWeightTable, StateTrajectory};
pub use model::FracModel;
pub use sysid::{EpisodeDataset, HurstFit, Provenance};
