//! Very deep hierarchical variational autoencoders on a small reverse-mode
//! autodiff engine.

pub mod arch;
pub mod autodiff;
pub mod checks;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
