//! State-observation sampling particle filter, the multifrequency learning
//! economy it was built for, and the estimation and risk tools around them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod economy;
pub mod error;
pub mod experiments;
pub mod fi;
pub mod filter;
pub mod ii;
pub mod io;
pub mod kernels;
pub mod linear_gaussian;
pub mod numeric;
pub mod risk;
pub mod rng;

pub use error::{Error, Result};
