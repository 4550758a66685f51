//! Cross-corpus speech emotion recognition with decoupled emotion and corpus
//! representations.

pub mod autograd;
pub mod cli;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pseudo;
pub mod trainer;

pub use error::{Error, Result};
