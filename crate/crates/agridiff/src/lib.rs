//! Differentiable crop modeling toolkit: a reverse-mode scalar tape, a
//! daily process-based crop model built on it, neural components, four
//! hybrid process/learning architectures, a synthetic-twin dataset, and
//! an experiment harness with noise, few-shot, and spatial protocols.

pub mod autodiff;
pub mod data;
pub mod evaluation;
pub mod hybrid;
pub mod neural;
pub mod pbm;
pub mod training;
