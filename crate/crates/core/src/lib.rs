//! Laminate decompositions of gradient measures of periodic piecewise-affine
//! maps, with independent certificate checks.

pub mod convexity;
pub mod fixedpoint;
pub mod geometry;
pub mod hn;
pub mod linalg;
pub mod lp;
pub mod pwa;
pub mod pipeline;
pub mod qp;
pub mod scalar;
pub mod serialization;
pub mod theta;
