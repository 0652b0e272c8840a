//! Small f64 reverse-mode autograd tailored to this pipeline: NCHW conv /
//! batch-norm / FFT ops, exact gradients, fully deterministic. Values are
//! computed eagerly as the graph is built; `Graph::backward` runs the tape in
//! reverse. No threads, no global state.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use layers::{
    batch_norm, bn_init, conv2d_layer, conv_init, linear_init, linear_layer, BnUpdate,
};
pub use optim::{clip_grad_norm, clip_grad_norm_many, Adam, AdamConfig, PlateauScheduler};
pub use params::{Bound, GradMap, ParamSet};
pub use tensor::Tensor;
