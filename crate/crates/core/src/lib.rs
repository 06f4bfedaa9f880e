//! Cox regression for stratified, calibrated and multi-phase case-cohort samples.

pub mod coxfit;
pub mod dataset;
pub mod design;
pub mod linalg;
pub mod calibration;
pub mod influence;
pub mod variance;
pub mod analysis;
pub mod simharness;
