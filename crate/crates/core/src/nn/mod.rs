//! Minimal dense autodiff, layers and optimiser used by the agents.

mod graph;
mod layers;
mod mat;
mod optim;
mod params;
pub mod testing;

pub use graph::{sigmoid, Graph, NodeId};
pub(crate) use graph::nearest_sq;
pub use layers::{dropout_mask, Linear, Lstm, LstmState};
pub use mat::{argmax, log_softmax, order_free_sum, softmax, Mat};
pub use optim::{Adam, PlateauHalving};
pub use params::{uniform, xavier, Grads, Param, ParamId, ParamSet};
