//! Weak KAM selection of viscosity solutions on sub-Riemannian tori: exact
//! potentials on control graphs, static classes, graph minimization over
//! classes and the stochastic and Fokker–Planck cross-checks.
//!
//! Numerical routines default to `f64`; the Fokker–Planck solver and grid
//! fields are generic over [`Scalar`].

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::should_implement_trait)]

pub mod action;
pub mod aubry;
pub mod extreal;
pub mod fieldlang;
pub mod fokkerplanck;
pub mod graphcalc;
pub mod potential;
pub mod scalar;
pub mod scenario;
pub mod selector;
pub mod srgeom;
pub mod stochastic;

pub use aubry::{ClassSystem, CompactClass, ManualClass};
pub use fieldlang::{parse, Expr};
pub use fokkerplanck::FpSolution;
pub use graphcalc::{compute_w, GraphResult, IGraph};
pub use potential::{ControlGraphSpec, GridField, PeriodicGrid, PotentialSolver};
pub use scalar::Scalar;
pub use scenario::Scenario;
pub use selector::SelectedSolution;
pub use srgeom::{SRStructure, TorusGeometry};

pub type Field = GridField<f64>;
pub type FieldF32 = GridField<f32>;
pub type FpSolution64 = FpSolution<f64>;
pub type FpSolution32 = FpSolution<f32>;
