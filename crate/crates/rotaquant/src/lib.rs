//! IO companion to `rotaquant-core`: checkpoint container, experiment
//! configs, and the batch CLI plumbing.

pub mod container;
pub mod experiment;
