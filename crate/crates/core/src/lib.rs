//! Numerical laboratory for parabolic equations on evolving Finsler tori.
//!
//! The crate simulates `u_t = Δu + R1 u + R2 u^α + R3 u (log u)^β` with the
//! nonlinear Finsler Laplacian of a metric measure space `(T², F(t), e^Φ dx)`
//! whose metric evolves by `∂_t g = -2h`, and checks Shi-type and
//! Hamilton-type gradient bounds (and the Harnack inequalities they imply)
//! against the computed solutions, with every constant assembled from
//! measured curvature, coefficient and solution bounds.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::large_enum_variant)]

pub mod checker;
pub mod error;
pub mod connection;
pub mod expr;
pub mod finsler;
pub mod flow;
pub mod geodesic;
pub mod grid;
pub mod laplacian;
pub mod pde;
pub mod run;
pub mod scenario;

pub use error::{Error, Result};

/// Tangent vectors and covectors in the global chart.
pub type Vec2 = nalgebra::Vector2<f64>;
/// Symmetric 2-tensors in the global chart.
pub type Mat2 = nalgebra::Matrix2<f64>;
