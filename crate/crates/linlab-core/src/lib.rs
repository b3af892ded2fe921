//! Numerical core for studying how wide neural networks behave like linear
//! models near initialization.
//!
//! The crate treats a network output (or any single neuron) as an *assembly*:
//! a scaled linear combination of sub-models with disjoint private parameters.
//! Everything here is built around measuring that structure exactly at finite
//! width: deterministic sampling, exact reverse-mode gradients and
//! Hessian-vector products, Taylor-remainder and gradient-orthogonality
//! metrics, and Monte-Carlo checks of the norm bounds those measurements rely
//! on.
//!
//! All arithmetic is 64-bit. Transcendental functions go through `libm`, so
//! results are bit-identical across platforms for a fixed seed. The crate is
//! `no_std` (with `alloc`); IO, experiment orchestration and the CLI live in
//! the companion `linlab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod grad;
pub mod linearity;
pub mod models;
pub mod numerics;

pub use error::{Error, Result};

/// Thin wrappers over `libm` so every transcendental in the crate resolves to
/// the same software implementation on every platform.
pub(crate) mod fmath {
    #[inline]
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    #[inline]
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    #[inline]
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    #[inline]
    pub fn ln_1p(x: f64) -> f64 {
        libm::log1p(x)
    }
    #[inline]
    pub fn tanh(x: f64) -> f64 {
        libm::tanh(x)
    }
    #[inline]
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
    #[inline]
    pub fn sin(x: f64) -> f64 {
        libm::sin(x)
    }
    #[inline]
    pub fn abs(x: f64) -> f64 {
        libm::fabs(x)
    }
}
