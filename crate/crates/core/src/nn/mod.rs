//! Deterministic numerics substrate: tensors, reverse-mode autodiff,
//! parameter storage, AdamW, checkpoints, and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod var;

pub use checkpoint::{load_params, read_params, save_params};
pub use gradcheck::grad_check;
pub use layers::{multi_head_attention, Conv2dLayer, Conv3dLayer, EncoderLayer, LayerNormLayer, Linear, Mha, TransformerDecoder, TransformerEncoder};
pub use optim::{optimizer_step, OptimConfig};
pub use params::{Ctx, Param, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use var::{Grads, Var};
