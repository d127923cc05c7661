//! Building blocks for a wavelet/state-space CT denoiser: selective scans,
//! Z-shaped traversals, wavelet and Fourier blocks, radial noise power spectra,
//! a small reverse-mode tape, the network, its losses and the training loop.

pub mod autograd;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fft;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod nps;
pub mod params;
pub mod scan_order;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
