//! Reverse-mode differentiation over a recorded composition of tensor ops.

pub mod adam;
pub mod conv;
pub mod layers;
pub mod model;
pub mod ops;
pub mod param;
pub mod tape;
pub mod tensor;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use conv::Padding;
pub use layers::{channel_plan, ray_reduce_head, voxel_head, RayReduceParams};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use model::{FusionMode, HeadKind, ToyModel, ToyModelConfig};
pub use tensor::Tensor;
pub use train::{load_checkpoint, save_checkpoint, train_toy, TrainReport};
