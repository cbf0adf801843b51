//! Galerkin simulation of a self-propelled rigid body in a nonhomogeneous
//! incompressible viscous fluid, coupled through a Navier slip condition and
//! posed in the frame attached to the body.

pub mod basis;
pub mod bodyframe;
pub mod cli;
pub mod config;
pub mod error;
pub mod galerkin;
pub mod geometry;
pub mod jet;
pub mod propulsion;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
