//! Multi-view scene reconstruction from a single image of a sphere-mirror
//! array: calibration, ray restoration and a warped neural radiance field.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod evalkit;
pub mod geometry;
pub mod imageio;
pub mod neuralfield;
pub mod parallel;
pub mod raybank;
pub mod renderer;
pub mod simulator;
pub mod trainer;
