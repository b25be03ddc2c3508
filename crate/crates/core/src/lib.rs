//! Volumetric registration engine for motorized 3D transrectal ultrasound.
//!
//! The crate tracks a gland across repeated 3D acquisitions in three stages:
//! a systematic search over a kinematic model of probe placements, local
//! rigid refinement by a direction-set optimizer, and inverse-consistent
//! elastic registration driven by a shift-invariant correlation metric.
//! Synthetic phantoms with known ground truth and the evaluation tooling
//! used to validate the pipeline live here as well.
//!
//! All heavy loops run data-parallel when the default `parallel` feature is
//! enabled and sequentially otherwise; results are bitwise identical either
//! way and for any thread count.

pub mod beam;
pub mod elastic;
pub mod error;
pub mod eval;
pub mod field;
pub mod filter;
pub mod forces;
pub mod kinematics;
pub mod metrics;
pub mod multigrid;
pub mod par;
pub mod phantom;
pub mod powell;
pub mod pyramid;
pub mod rigid;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
