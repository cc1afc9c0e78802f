//! Dense-array computation with reverse-mode automatic differentiation,
//! the layer set the experiments need, optimisers and checkpointing.

pub mod checkpoint;
pub mod fdcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use graph::{backward, Graph, Var};
pub use nn::{
    forward_graph, forward_tensor, grads_as_params, init_params, log_softmax_rows, softmax_rows,
    BoundParams, LayerSpec, Mode, NetworkParams, NetworkSpec, Segment,
};
pub use optim::{clip_global_norm, AdamConfig, Optimizer, RmsPropConfig};
pub use tensor::{ConvGeom, Tensor};
