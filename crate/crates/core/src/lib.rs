//! Flow-guided recurrent monocular depth prediction.
//!
//! A small CPU tensor engine with reverse-mode differentiation, the
//! two-stream encoder / flow-guided ConvGRU / decoder network, training
//! losses, evaluation metrics, a synthetic scene generator and file I/O.

pub mod autodiff;
pub mod conv;
pub mod elementwise;
pub mod error;
pub mod flowgru;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod synth;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{backward, Gradients, Var};
pub use conv::ConvSpec;
pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
