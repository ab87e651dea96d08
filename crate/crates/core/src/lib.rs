#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod battery;
pub mod blocks;
pub mod engine;
pub mod error;
pub mod losses;
pub mod network;
pub mod parallel;
pub mod params;
pub mod phantom;
pub mod real;
pub mod tensor;
pub mod train;

pub use engine::{Tape, Var};
pub use error::{Error, Result};
pub use network::{CsuNet3d, NetVariant, NetworkConfig};
pub use params::{ParamBuilder, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
