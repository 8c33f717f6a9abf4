//! Hybrid-policy MPC for flying a quadrotor through a swinging gate.
//!
//! The drone and gate simulators live in [`dynamics`], the online gate
//! forecaster in [`predictor`], the solver in [`mpc`], and the two ways of
//! choosing the cost blend in [`search`] and [`deep`]. [`harness`] runs
//! closed-loop episodes and experiment suites.

pub mod deep;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod math;
pub mod mpc;
pub mod nnet;
pub mod predictor;
pub mod search;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub struct Overview;
    #[doc = include_str!("../../../book/src/models.md")]
    pub struct Models;
    #[doc = include_str!("../../../book/src/predictor.md")]
    pub struct Predictor;
    #[doc = include_str!("../../../book/src/mpc.md")]
    pub struct Mpc;
    #[doc = include_str!("../../../book/src/search.md")]
    pub struct Search;
    #[doc = include_str!("../../../book/src/deep.md")]
    pub struct Deep;
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub struct Experiments;
}
