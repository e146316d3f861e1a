//! Neural-augmented geometric tracking control for quadrotors.

pub mod ad;
pub mod bench;
pub mod config;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod math;
pub mod ren;
pub mod sim;
pub mod training;
pub mod trajectory;
pub mod youla;

pub use error::{Error, Result};
