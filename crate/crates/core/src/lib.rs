//! Bit-packed binary neural network inference.
//!
//! Activations and weights are stored NHWC with the channel axis packed into
//! machine words ([`tensor::BitTensor`]). Convolutions reduce to xor and
//! popcount ([`kernels`]); bias, batch norm and the sign activation are
//! folded offline into one threshold comparison per channel ([`graph::build`]).
//! The [`oracle`] module evaluates the same networks unfused in `f64` and is
//! what the engine is tested against.
//!
//! With the default `parallel` feature, layers split their output rows over
//! the current rayon pool. Without it everything runs on the calling thread.

pub mod error;
pub mod exec;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod oracle;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{build, fuse, load, save, Activation, Layer, NetworkGraph, RawLayerSpec};
pub use tensor::{BitTensor, ByteTensor, FloatTensor, Shape, Word};
