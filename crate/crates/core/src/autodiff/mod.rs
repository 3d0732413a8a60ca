//! Reverse-mode differentiation, parameter storage and optimizers.

pub mod checkpoint;
pub mod dropout;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, restore_into, save_checkpoint};
pub use dropout::{dropout_apply, Mode};
pub use gradcheck::{finite_diff_check, finite_diff_check_all};
pub use graph::{CustomOp, Graph, NodeId};
pub use optim::{adam_step, clip_global_norm, sgd_step, OptimConfig, OptimizerKind};
pub use params::{Gradients, Param, ParamId, ParamStore};
