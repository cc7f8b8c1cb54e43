//! Staged personalization training for latent diffusion models, with a
//! regularizer that aligns the cross-attention statistics of a learned concept
//! token to those of its super-category word.

pub mod attention;
pub mod backend;
pub mod checkpoint;
pub mod cli;
pub mod concept;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod objectives;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
