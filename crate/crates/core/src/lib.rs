//! Core of a small tensor-contraction compiler.
//!
//! A program is an annotated [`ir::Dfg`]. [`schedule`] mutates its loop
//! annotations, [`lower`] turns it into an explicit [`lower::LoopTree`], and
//! [`backend`] compiles the tree into a [`backend::KernelProgram`] for a
//! virtual vector machine. [`feedback`] has the naive reference evaluator and
//! the FLOP / intensity analytics; [`tuner`] runs a scripted schedule sweep.
//!
//! The crate is `no_std` and only needs `alloc`.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backend;
pub mod error;
pub mod feedback;
pub mod frontend;
pub mod ir;
pub mod lower;
pub mod models;
pub mod schedule;
pub mod tuner;

pub use error::{Error, Result};
