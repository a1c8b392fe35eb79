//! Core library for a desk-scale semi-supervised object detector.
//!
//! The crate is organised around the training system's moving parts:
//!
//! - [`geometry`]: bounding-box algebra (IoU, CIoU, NMS).
//! - [`netcore`]: a minimal differentiable compute core (conv stack,
//!   reverse-mode gradients, gradient reversal, EMA weights, SGD,
//!   checkpoint codec).
//! - [`detector`]: the dense grid head — label assignment with
//!   multi-positive sampling, CIoU objectness targets, grid decoding.
//! - [`losses`]: supervised, unsupervised, domain-adaptation and burn-in
//!   objectives with analytic gradients.
//! - [`pla`]: the pseudo-label assigner — reliable/uncertain partition,
//!   soft objectness targets, pseudo-label quality statistics.
//! - [`epoch_adaptor`]: stage scheduling, per-class ground-truth counting
//!   and dynamic threshold computation, plus the domain classifier.
//! - [`augment`]: weak/strong augmentation pipelines with exact box
//!   transforms.
//! - [`synthdata`]: deterministic synthetic shapes dataset with COCO-subset
//!   annotation I/O.

pub mod augment;
pub mod detector;
pub mod epoch_adaptor;
pub mod geometry;
pub mod losses;
pub mod netcore;
pub mod pla;
pub mod rng;
pub mod synthdata;
