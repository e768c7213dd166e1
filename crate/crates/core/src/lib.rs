//! Stereo-guided few-shot novel view synthesis at desk scale.
//!
//! The pipeline runs from rectified stereo pairs of a synthetic scene to
//! rendered novel views:
//!
//! 1. [`scenegen`] ray-casts a procedural scene into a multi-view stereo dataset
//!    with exact depth.
//! 2. [`stereo`] matches every pair coarse-to-fine, producing a sequence of
//!    disparity estimates, stereo depth, pseudo ground truth and per-pixel
//!    matching-cost features.
//! 3. [`features`] builds multi-scale image features and fuses the two eyes
//!    with row-wise stereo attention.
//! 4. [`costvol`] sweeps depth planes (guided by the stereo depth) through a
//!    three-stage cascade of variance cost volumes.
//! 5. [`render`] gathers volume and image features along rays, runs the small
//!    trainable renderer and alpha-composites color and depth.
//! 6. [`losses`] and [`trainer`] implement the training objective, the
//!    optimizer loop, evaluation metrics and the ablation ladder.

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod costvol;
pub mod dataset;
pub mod diff;
pub mod error;
pub mod features;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod render;
pub mod scene;
pub mod scenegen;
pub mod selftest;
pub mod stereo;
pub mod trainer;

pub use error::{Error, Result};
