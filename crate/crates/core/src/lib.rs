#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backbone;
pub mod contrastive;
pub mod encoders;
pub mod error;
pub mod glgf;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod router;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
