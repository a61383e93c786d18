//! Homogenization of a diffusion whose drift is periodic on either side of a
//! flat interface.
//!
//! The pipeline solves the periodic cell problems of both tails
//! ([`torus_cell`]), the invariant measure on a truncated strip around the
//! interface ([`strip_measure`]), assembles the limit model
//! ([`effective_model`]) and compares Monte Carlo simulations of the
//! rescaled process ([`eps_sim`]) with the limit process ([`limit_sim`]) in
//! [`verify`].

pub mod config;
pub mod effective_model;
pub mod eps_sim;
pub mod error;
pub mod export;
pub mod field;
pub mod grid;
pub mod limit_sim;
pub mod operator;
pub mod profiles;
pub mod rng;
pub mod sparse;
pub mod stats;
pub mod strip_measure;
pub mod torus_cell;
pub mod verify;

pub use error::{HomogError, Result};
