//! The TSception family: configuration, parameters and forward pass.
//!
//! ```text
//! x [B,1,C,T]
//!   ├─ tception   parallel (1,k) convs → LeakyReLU → AP / ADP, concat on time → BN_t
//!   ├─ sception   (C,1) and (C/2,1)-strided convs → LeakyReLU → ADP, stack rows → BN_s
//!   ├─ fusion     (3,1) conv → LeakyReLU → ADP → BN_f1 ─┬─ GAP → y_f1
//!   │                                                   └─ (1,1) conv → LeakyReLU → AP → BN_f2 → GAP → y_f2
//!   └─ classifier y_f2 → [FC → ReLU → dropout] × 2 → FC → softmax
//! ```

mod config;
mod forward;
mod params;

pub use config::{temporal_kernel_size, ModelConfig, Pooling, TemporalBranch, Variant};
pub use forward::{model_forward, predict, ForwardOutput, FusionOutput, ModelGraph, Prediction};
pub use params::{build_model, ModelParams};
