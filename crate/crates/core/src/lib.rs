//! Expression classification guided by a dense segmentation prior and
//! sparse landmark prior, trained on procedurally generated occluded faces.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod gradscope;
pub mod kernels;
pub mod losses;
pub mod mcm;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod report;
pub mod rng;
pub mod ssgm;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TokenGrid};
