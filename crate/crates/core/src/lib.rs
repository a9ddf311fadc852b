//! Cache-friendly recommendation: Markov request model, myopic and
//! augmented-Lagrangian recommendation policies, datasets and simulation.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model;
pub mod optim;
pub mod qp;
pub mod sim;

pub use error::{Error, Result};
