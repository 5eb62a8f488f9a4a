//! Numerical toolkit for the stationary linearized kinetic boundary-value
//! problem f = J g + S K f on bounded convex domains: explicit hard-sphere
//! collision operators, backward-exit transport geometry, a Neumann-series
//! solver with a Monte Carlo cross-check, and the weighted-norm experiments
//! that expose how boundary curvature sets the W^{1,p} regularity threshold
//! (flat face: gradient integrability fails at p = 2; ball: at p = 3).

pub mod analysis;
pub mod collision;
pub mod config;
pub mod error;
pub mod geometry;
pub mod quad;
pub mod report;
pub mod solver;
pub mod transport;

pub use error::{GkinError, Result};
pub use geometry::{BoundaryPoint, ConvexDomain, Footpoint, V3};
