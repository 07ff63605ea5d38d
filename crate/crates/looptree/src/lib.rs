//! File formats, timing and the session protocol around `looptree-core`.

pub mod bench;
pub mod data;
pub mod format;
pub mod session;

pub use looptree_core as core;
