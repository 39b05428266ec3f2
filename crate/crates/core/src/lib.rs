//! Compression and accelerator modeling toolkit for small 1-D CNNs.
//!
//! The crate is organised the way the compression flow runs:
//!
//! - [`ir`]: network descriptions, shape inference and parameter/operation accounting.
//! - [`nn`]: the floating-point reference engine every other result is checked against.
//! - [`compress`]: near-zero pruning, bias-driven channel pruning, K-means weight
//!   clustering, mixed-width quantization, BN folding and the compression ledger.
//! - [`fxp`]: a bit-accurate fixed-point emulator of the 128-lane process engine.
//! - [`hwsim`]: the 16-PE schedule, BRAM reuse checking and the dual-clock
//!   performance model.
//! - [`io`], [`pipeline`], [`report`]: file formats, synthetic data and the end-to-end
//!   run report used by the `picoconv` command-line tool.

pub mod compress;
pub mod error;
pub mod fxp;
pub mod hwsim;
pub mod io;
pub mod ir;
pub mod nn;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
