pub mod error;
pub mod linalg;
pub mod seeding;

pub mod blackbox;
pub mod cli;
pub mod curriculum;
pub mod data;
pub mod losses;
pub mod nnet;
pub mod pseudolabel;
pub mod separation;
pub mod trainer;

pub use error::{Error, Result};
