//! B-spline regression with simultaneous knot selection.
//!
//! A spline on `l - 1` candidate knots is fitted by least squares plus a
//! trimmed-l1 exact penalty on the scaled `(p+1)`-th differences of its
//! coefficients, so that at most `K` knots remain in use. The problem is
//! reduced to the difference variables and solved by a proximal-gradient
//! method with Barzilai-Borwein steps and a nonmonotone line search.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aspline;
pub mod cli;
pub mod diff;
pub mod error;
pub mod experiments;
pub mod gist;
pub mod io;
pub mod knots;
pub mod reduction;
pub mod timing;
pub mod trimmed;

pub use error::{Error, Result};
