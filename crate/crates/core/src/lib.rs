//! Conditional and distributional dependence analysis for cross-country
//! indicator tables.
//!
//! The pipeline runs complete-case standardization ([`dataset`]), least-squares
//! diagnostics ([`diagnostics`]), country clustering ([`clustering`]),
//! additive-model partialling-out ([`gam`]), sparse Gaussian graphical models
//! ([`glasso`]) and quantile-on-quantile effect surfaces ([`qqr`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod dataset;
pub mod diagnostics;
pub mod gam;
pub mod glasso;
pub mod linalg;
pub mod qqr;
pub mod quantreg;
pub mod synthetic;
