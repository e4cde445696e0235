//! Dense differentiable kernel: matrices, a reverse-mode tape, the point
//! backbone and heads, SGD with polynomial decay, and binary checkpoints.

mod backbone;
mod checkpoint;
mod gradcheck;
mod graph;
mod heads;
mod model;
mod optim;
mod params;
mod tensor;
mod train;

pub use backbone::{Backbone, BackboneConfig, PreparedCloud};
pub use checkpoint::{Checkpoint, TrainMeta};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_FLOOR};
pub use graph::{softmax, vib_terms, Gradients, Graph, Neighborhood, NodeId, StdMode};
pub use heads::{OffsetHead, SemanticHead};
pub use model::{ForwardOutput, Model, ModelConfig};
pub use optim::{poly_lr, Sgd};
pub use params::{ParamId, ParamStore};
pub use tensor::Matrix;
pub use train::{iteration_rng, train, IterLog, Schedule, StepLoss, TrainEvent};
