//! Feature-level render-and-compare for joint object classification and
//! 3D pose estimation.
//!
//! Each object category is represented by a cuboid mesh carrying a *neural
//! texture* (one feature vector per vertex). Inference projects the mesh
//! into the feature lattice of an input image, optimizes the pose by
//! gradient descent on a reconstruction likelihood, and classifies by
//! comparing the per-category reconstruction losses. A feed-forward
//! shortcut (confidence-thresholded class/pose heads) turns this into a
//! three-stage cascade that trades compute for robustness.
//!
//! All numeric code is generic over the scalar type via [`scalar::Real`]
//! (`f32` or `f64`); the pipeline instantiates `f64` by default, with
//! `f32` aliases exported at the crate root.

pub mod camera;
pub mod config;
pub mod error;
pub mod eval;
pub mod geom;
pub mod inference;
pub mod io;
pub mod likelihood;
pub mod mesh;
pub mod scalar;
pub mod seeds;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

/// Scalar type used by the default pipeline instantiation.
pub type DefaultScalar = f64;

pub type PoseF32 = camera::Pose<f32>;
pub type FeatureMapF32 = likelihood::FeatureMap<f32>;
pub type NeuralMeshModelF32 = mesh::NeuralMeshModel<f32>;
pub type ModelBankF32 = mesh::ModelBank<f32>;
