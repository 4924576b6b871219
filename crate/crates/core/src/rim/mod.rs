//! Recurrent inference machine: a convolutional GRU cell unrolled over `T`
//! gradient-informed refinement steps, with a small reverse-mode autodiff
//! engine for training it.

pub mod array;
pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod train;

pub use array::Array;
pub use graph::{Graph, Tape};
pub use model::{loss_and_gradients, record_loss, rim_infer, rim_loss, rim_step, Recorded, RimConfig, RimModel, RimState};
pub use checkpoint::Checkpoint;
pub use train::{rim_train, tape_gradcheck, Acquisition, Adam, GradcheckReport, TrainSchedule, Trainer, TrainingSample};
