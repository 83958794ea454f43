//! Learned affine transformations for microscaling (MX) quantization, at desk
//! scale.
//!
//! This crate is a self-contained laboratory for studying how invertible
//! affine transformations of activations interact with shared-scale block
//! quantization. It provides:
//!
//! - [`linalg`]: dependency-free dense kernels (LU, Jacobi singular values,
//!   power iteration, matrix exponential, Hadamard construction).
//! - [`mxquant`]: MX block quantization with power-of-two shared scales for
//!   FP4 (E2M1), INT4 and FP8 (E4M3) element formats, plus RTN and GPTQ
//!   weight quantizers.
//! - [`transform`]: invertible affine transforms parameterized through LU or
//!   QR factors, initialization schemes, and diagnostics.
//! - [`model`]: a tiny decoder-only transformer with exact folding of
//!   normalization gains and transforms into weights.
//! - [`learn`]: reverse-mode gradients over the transformed quantized forward
//!   pass, a distillation objective, and an AdamW trainer.
//! - [`bounds`]: numerical verifiers for the quantization error bound, the
//!   sub-Gaussian max lemma, and the perplexity-gap proposition.
//! - [`container`], [`calib`], [`pipeline`]: tensor file format, synthetic
//!   calibration data, and the experiment commands behind the `latmix` binary.
//!
//! The primary interface is the `examples/` directory; each example is a
//! runnable walkthrough of one capability:
//!
//! ```text
//! cargo run --example dirac_hadamard      # two-block worked example
//! cargo run --example mx_roundtrip       # quantize/dequantize in all formats
//! cargo run --example fold_into_weights  # exact transform folding
//! cargo run --example learn_transforms   # distillation training loop
//! cargo run --example verify_bounds      # bound checkers
//! cargo run --example ablate_transforms  # method comparison table
//! cargo run --example sweep_blocksize    # error vs block size
//! cargo run --example gptq_vs_rtn        # weight quantizer comparison
//! ```
//!
//! The same capabilities are scriptable through the thin `latmix` binary
//! (`learn`, `quantize`, `ablate`, `sweep-blocksize`, `verify-bounds`,
//! `gen-data` subcommands).
//!
//! All randomness is seeded; every command, test and example is bitwise
//! reproducible on a given platform.

pub mod bounds;
pub mod calib;
pub mod container;
pub mod error;
pub mod learn;
pub mod linalg;
pub mod model;
pub mod mxquant;
pub mod pipeline;
pub mod transform;

pub(crate) mod tape;

pub use error::{Error, Result};
