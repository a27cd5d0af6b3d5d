//! Robust SPR synthesis and decentralized ASSC switching control for a rigid
//! payload carried by single-rotor robots grouped in four quadrants.
//!
//! The crate is organised as a pipeline: [`dynamics`] builds the near-hover
//! model and its 12-state error system, [`synthesis`] solves the vertex LMI
//! problem through the [`lmi`] feasibility engine, [`controller`] runs the
//! per-robot switching law and [`simulator`] closes the loop on the nonlinear
//! model. [`config`] ties everything to the TOML scenario files.

pub mod config;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod lmi;
pub mod simulator;
pub mod synthesis;

pub use error::{Error, Result};
