//! Model construction, RMSProp training and checkpointing.

pub mod checkpoint;
mod model;
mod optim;
mod spec;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{build_model, LossAndGrads, Model, Param};
pub use optim::{effective_lr, RmsProp};
pub use spec::{LayerSpec, ModelSpec, Placement, Widths, BUILTIN_NAMES};
pub use trainer::{batch_ranges, Counters, LogRow, LogWriter, SnrSet, SnrSetName, TrainConfig, Trainer, LOG_HEADER};
