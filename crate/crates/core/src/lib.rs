//! Numerical toolkit for Hardy-type inequalities on Carnot–Carathéodory spaces.
pub mod capacity;
pub mod cli;
pub mod cover;
pub mod error;
pub mod frames;
pub mod grid;
pub mod hardy;
pub mod metric;
pub mod nsw;
pub mod poly;

pub use error::{Error, Result, ResultExt};
