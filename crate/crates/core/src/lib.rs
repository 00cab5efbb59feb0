//! Numeric core of LatentFace: tensors and a reverse-mode tape, the face
//! renderer, network zoo, stage-1 autoencoder training, latent diffusion,
//! the synthetic face generator and linear probes. Builds without `std`.

#![no_std]
extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod batch;
pub mod diffusion;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nets;
pub mod optim;
pub mod params;
pub mod probe;
pub mod real;
pub mod render;
pub mod rng;
pub mod stage1;
pub mod stats;
pub mod synth;
pub mod tensor;

pub use real::Real;
pub use tensor::Tensor;
