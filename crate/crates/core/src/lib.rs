//! Desk-scale underwater detection testbed.
//!
//! Four layers, bottom up:
//!
//! * [`tensor`] — deterministic f64 tensor kernels with analytic backward
//!   passes and a finite-difference gradient oracle.
//! * [`nn`] — parameterized layers built on the kernels: conv blocks, the
//!   four-branch split-attention bottleneck, and three pyramid neck variants
//!   with exact parameter/FLOP accounting.
//! * [`sim`] — underwater optical degradation (attenuation, forward scatter,
//!   veiling light), synthetic scene generation, and a radial power-spectrum
//!   analyzer.
//! * [`det`] — a toy single-class detector: tiny backbone, pluggable
//!   neck/bottleneck, grid head, SGD trainer, and a mAP evaluator.
//!
//! With the default `parallel` feature, data-parallel inner loops run on
//! rayon; without it everything is sequential. The two builds produce
//! bitwise-identical results.

pub mod check;
pub mod det;
pub mod error;
pub mod nn;
pub mod parallel;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
