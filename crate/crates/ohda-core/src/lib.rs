//! Syn-to-real unsupervised domain adaptation for toy indoor 3D object
//! detection.
//!
//! The crate generates paired source/target scene datasets with a
//! configurable domain shift, trains a miniature point-based detector on the
//! (object-aware augmented) source domain, and adapts it to the unlabeled
//! target domain with a mean-teacher loop: progressive class-aware pseudo
//! label thresholding (PCAT), perturbation-based reweighting (MPR), and
//! proposal-level adversarial alignment (HLA). Evaluation reports per-class
//! AP at IoU 0.25/0.5.
//!
//! Modules mirror the pipeline stages:
//!
//! - [`geometry`]: axis-aligned box algebra, IoU, NMS, center matching
//! - [`scenegen`]: synthetic scene/dataset generation with domain knobs
//! - [`augment`]: object-aware augmentation and virtual scan simulation
//! - [`nn`]: minimal reverse-mode autodiff (dense/relu/dropout/grad-reverse)
//! - [`detector`]: seed-proposal detector with decoder heads + discriminator
//! - [`losses`]: supervised, pseudo-label (CLA) and adversarial (HLA) losses
//! - [`pseudo`]: pseudo-label refinement (PCAT thresholds, MPR weights)
//! - [`trainer`]: pretraining and adaptation loops, checkpointing
//! - [`eval`]: average-precision evaluation and reports

pub mod augment;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod parallel;
pub mod pseudo;
pub mod rng;
pub mod scenegen;
pub mod trainer;

pub use error::Error;
