//! Synthetic verifiable tasks, experiment sweeps and history rendering on top
//! of `maskdiff-core`.

pub mod experiments;
pub mod render;
pub mod tasks;
pub mod vocab;
