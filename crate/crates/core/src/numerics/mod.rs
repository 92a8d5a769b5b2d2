//! Dense-tensor arithmetic, manual backprop for a closed layer family,
//! batch normalization, Adam and the cosine schedule.

mod conv;
pub mod loss;
pub mod network;
pub mod norm;
pub mod optim;

pub use loss::softmax_cross_entropy;
pub use network::{
    conv_specs, mlp_specs, ForwardCache, Gradients, Layer, LayerKind, LayerSpec, LinearLayer, Mode, Network,
    NormLayer, ParamId, QuantCtx, Slot,
};
pub use norm::{norm_apply, NormKey, NormStats, FLOAT_BITS, NORM_EPS, NORM_MOMENTUM};
pub use optim::{adam_step_flat, cosine_lr, Adam, AdamConfig, AdamState};
