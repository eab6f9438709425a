//! Deterministic core for connectivity-based out-of-distribution learning.
//!
//! This crate holds everything that computes: a reverse-mode autodiff tape
//! over dense `f64` matrices, the feature-mask / encoder / subgraph-sampler
//! model built on it, the training loop, and the evaluation and
//! interpretation utilities. It is `no_std` (with `alloc`): all
//! transcendentals go through `libm`, every reduction runs in a fixed order,
//! and all randomness flows from explicitly derived seeds, so identical
//! inputs produce bitwise-identical outputs on every platform and profile.
//!
//! IO, file formats, and the command-line interface live in the companion
//! `brainood` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adam;
pub mod braindata;
pub mod encoders;
pub mod extractor;
pub mod fmath;
pub mod gradcheck;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selector;
pub mod tape;
pub mod tensor;
pub mod trainer;
