//! Non-intrusive reduced-order modeling of time-dependent field data.
//!
//! Snapshots are compressed into a latent space (POD or per-field
//! autoencoders), latent dynamics are propagated with a neural ODE, RBF
//! increment interpolation, or DMD, and predictions are reconstructed and
//! scored in the full space.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the
//! `*64` aliases below fix the scalar to `f64`, which is what the file
//! formats store and what the CLI uses.

pub mod autoencoder;
pub mod dmd;
pub mod linalg;
pub mod metrics;
pub mod neuralnet;
pub mod node;
pub mod ode;
pub mod pipeline;
pub mod pod;
pub mod rbf;
pub mod scalar;
pub mod snapstore;
pub mod synthgen;

pub use linalg::Matrix;
pub use neuralnet::Mlp;
pub use scalar::Real;
pub use pod::{LatentTrajectory, PodBasis};
pub use snapstore::{FieldSegment, ScalingParams, SnapshotSet};
pub use synthgen::GeneratorSpec;

pub type Matrix64 = Matrix<f64>;
pub type SnapshotSet64 = SnapshotSet<f64>;
pub type ScalingParams64 = ScalingParams<f64>;
pub type LatentTrajectory64 = LatentTrajectory<f64>;
pub type PodBasis64 = PodBasis<f64>;
pub type Mlp64 = Mlp<f64>;
