pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod fft;
pub mod freq;
pub mod equiv;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod resize;
pub mod tensor;
pub mod train;

pub use autodiff::{CVar, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{ComplexTensor, Tensor};
