//! Weight-decomposed low-rank quantization-aware training at desk scale.
//!
//! The crate trains fake-quantized linear layers whose weights are the
//! quantization of a frozen base plus a low-rank update, scaled by a
//! learnable per-group magnitude, under a two-phase schedule: first the
//! quantization space (scale `s`, offset `b`) is learned and frozen, then
//! the magnitude `m` and the adapter matrices `A`, `B` are fine-tuned
//! inside it. Around that core sit a byte-level toy transformer, a
//! deterministic trainer with a six-setting ablation harness, an analytic
//! parameter auditor, and a bit-exact packed serialization format.
//!
//! Modules:
//! - [`tensor`], [`graph`]: dense `f64` tensors with tape-based reverse-mode
//!   autodiff and custom-gradient ops.
//! - [`quant`]: group-wise asymmetric fake quantization, its initialization,
//!   and straight-through gradients.
//! - [`adapter`]: the quantized LoRA linear layer and ablation settings.
//! - [`optim`], [`trainer`]: AdamW and the two-phase training loop.
//! - [`model`], [`data`]: the toy LLaMA-style LM, corpus handling, and
//!   perplexity evaluation.
//! - [`audit`]: analytic trainable-parameter accounting over architecture
//!   shape catalogs.
//! - [`pack`]: the packed n-bit weight container.
//! - [`gradcheck`]: the finite-difference and closed-form gradient suites.

pub mod adapter;
pub mod audit;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod pack;
pub mod quant;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use adapter::{AblationSetting, DlqatLinear, LoraAdapter, ParamKind, Phase};
pub use error::{Error, PackError, Result};
pub use graph::{Graph, Var};
pub use quant::{Granularity, QuantParams, QuantSpec};
pub use tensor::Tensor;
