pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod losses;
pub mod nn;
pub mod quantize;
pub mod resample;
pub mod semantic;
pub mod sequence;
pub mod tensor;
pub mod train;
pub mod token_io;

pub use config::{CodecConfig, ValidatedConfig};
pub use error::{Error, ErrorClass, Result};
pub use sequence::{LatentSequence, PcmBuffer};
pub use tensor::Tensor;
