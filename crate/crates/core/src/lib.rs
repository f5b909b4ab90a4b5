//! Semantic organ segmentation on hyperspectral datacubes.
//!
//! The crate covers the whole benchmark pipeline:
//!
//! 1. [`hsicube`]: datacube / label-map model, bit-exact file I/O and a
//!    synthetic labeled-scene generator.
//! 2. [`preprocess`]: per-pixel ℓ1 normalization and the 5×5×3 median filter.
//! 3. [`superpixel`]: SLICO superpixels, fuzzy labels, superpixel cubes and the
//!    modal-label performance limit.
//! 4. [`nnet`]: a small dense-tensor network core with reverse-mode gradients,
//!    losses, Adam and stochastic weight averaging.
//! 5. [`models`]: pixel, superpixel, patch and image model families, their
//!    training loop and full-image inference.
//! 6. [`dataload`]: multi-worker streaming loader with a ring buffer and
//!    per-image geometric augmentation.
//! 7. [`metrics`]: DSC, symmetric ASD, NSD with class-specific tolerances,
//!    hierarchical aggregation, confusion matrices and rater agreement.
//! 8. [`ranking`]: bootstrap rank stability and mean-then-rank.
//! 9. [`experiments`]: subject-level splits, generalization tracking and the
//!    training-set-size study.
//!
//! Runnable walkthroughs for each stage live in this crate's `examples/`.

pub mod cli;
pub mod dataload;
mod error;
pub mod experiments;
pub mod hsicube;
mod imgops;
pub mod metrics;
pub mod models;
pub mod nnet;
pub mod preprocess;
pub mod ranking;
mod rng;
pub mod superpixel;

pub use error::{Error, Result};
pub use hsicube::{ClassTable, Datacube, LabelMap, Modality, IGNORE};
