//! Filesystem and orchestration layer over `glimpse-core`: IDX datasets,
//! binary checkpoints, the key-value run configuration, training/eval/attack
//! drivers, pixmap visualization and the CLI plumbing.

pub mod checkpoint;
pub mod config;
pub mod idx;
pub mod parallel;
pub mod robustness;
pub mod runner;
pub mod viz;
