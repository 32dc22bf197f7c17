//! The surrogate foundation model: frozen blocks, bottleneck adapters,
//! losses, hand-written gradients and Adam.

mod adam;
mod grad;
mod loss;
mod model;

pub use adam::{adam_step, AdamState};
pub use grad::{grad_adapters, objective_and_grad, ObjectiveGrad};
pub use loss::{objective, reg_loss, seg_loss, Batch, PROB_EPS};
pub(crate) use loss::sigmoid;
pub use model::{
    adapter_forward, model_forward, AdapterParams, Backbone, BackboneConfig, FrozenBlock, Matrix,
    ModelDims, ToyFM,
};
