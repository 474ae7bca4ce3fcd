//! Core library for detecting and segmenting power-transmission towers in
//! airborne LiDAR point clouds.
//!
//! The pipeline mirrors a classify-then-segment design: scenes are normalized
//! to height above ground, cut into fixed-size windows, a light PointNet
//! classifier flags windows that are likely to contain a tower, and a
//! companion segmentation network labels the points of flagged windows.
//! Everything runs on the CPU with an explicitly differentiated network
//! engine, so results are reproducible bit-for-bit under a fixed seed.
//!
//! The crate is organised bottom-up:
//!
//! * [`cloud`] — point records, labelled clouds, ground rasters, tile I/O;
//! * [`preprocess`] — height normalization, filtering, windowing, features;
//! * [`sampling`] — height-constrained down/up-sampling of window points;
//! * [`nn`] — tensors, layers, losses, Adam, gradient checking;
//! * [`models`] — the light/full PointNet classifier and segmenter;
//! * [`training`] — dataset assembly and the training loop;
//! * [`inference`] — sliding-window scene inference and label merging;
//! * [`evaluation`] — scene-level scoring of predictions;
//! * [`metrics`] — confusion counts, F1, per-class IoU;
//! * [`synth`] — procedural scene generator used for tests and examples.
//!
//! Numeric kernels are generic over the floating-point type through the
//! [`Scalar`] trait: `f32` is the working precision for training and
//! inference, `f64` backs the finite-difference gradient checks.

pub mod cloud;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision used by training and inference.
pub type Real = f32;
/// High precision used by gradient checks and numeric oracles.
pub type Wide = f64;

/// Feature matrix in working precision.
pub type FeatureMatrixR = preprocess::FeatureMatrix<Real>;
/// Classifier in working precision.
pub type ClassifierR = models::PointNetClassifier<Real>;
/// Segmenter in working precision.
pub type SegmenterR = models::PointNetSegmenter<Real>;
