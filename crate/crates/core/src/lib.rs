//! Relevance-guided unit freezing for task-incremental learning.
//!
//! After each task, layer-wise relevance propagation scores every neuron and
//! filter on a small reference set. Units are pruned in ascending relevance
//! order until accuracy on the task drops past a threshold; the survivors are
//! frozen (learning-rate multiplier zero) before the next task is trained.

pub mod data;
pub mod error;
pub mod experiment;
pub mod freeze;
pub mod lrp;
pub mod net;
pub mod optim;
pub mod protocols;
pub mod tensor;

pub use error::{Error, Result};
pub use net::checkpoint::Checkpoint;
pub use net::{ForwardTrace, Gradients, HeadId, LayerSpec, Network, ParamKey, UndoRecord, UnitId};
pub use optim::{AdamConfig, AdamState, FreezeState};
pub use tensor::Tensor;
pub use data::{Dataset, Split};
pub use experiment::{ExperimentConfig, Summary};
pub use freeze::{PlanResult, PruneConfig};
pub use lrp::RelevanceReport;
pub use protocols::{RunMetrics, TaskStream};
