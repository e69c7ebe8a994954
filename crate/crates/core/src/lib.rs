//! Group-mix attention and a hierarchical vision backbone built on a small
//! f64 reverse-mode autodiff engine.

pub mod analysis;
pub mod backbone;
pub mod config;
pub mod error;
pub mod gma;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod params;
pub mod rng;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod weights;

pub use backbone::{build_model, Mode, Model, ModelConfig, Preset, StageConfig};
pub use error::{Error, Result};
pub use gma::{AggregatorKind, AggregatorSpec, BranchPlan, GmaBlock, GmaConfig};
pub use gradcheck::{grad_check, grad_check_at, GradCheckOptions, GradCheckReport};
pub use ops::conv::PoolKind;
pub use ops::reduce::LN_EPS;
pub use params::{Bound, ParamId, ParamStore};
pub use rng::SeededRng;
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
