//! Minimal differentiable network stack: tensors, a reverse-mode tape, RoI
//! cropping, the two-stage detector and its optimizers.

pub mod graph;
pub mod input;
pub mod model;
pub mod optim;
pub mod params;
pub mod roi;
pub mod tensor;
pub mod train;

pub use graph::{Graph, NodeId};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Init, ParamId, ParamStore};
pub use roi::{fuse, roi_align, roi_crop, roi_pool, FusionMode, RoiOp};
pub use tensor::Tensor;
pub use model::{InputMode, Model, ModelConfig};
pub use train::{evaluate, TrainState};
