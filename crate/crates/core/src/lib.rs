pub mod autodiff;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sensing;
pub mod shred;
pub mod sim;
pub mod temporal;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use metrics::{nrmse, rmse, MetricsReport};
pub use pipeline::{ExperimentConfig, InferenceResult, SensorWindow, TrainedPipeline};
pub use sensing::{EnsembleDataset, SensorLayout, Split};
pub use shred::{ShredConfig, ShredMode, ShredModel};
pub use sim::{FieldSequence, SimConfig, System};
pub use temporal::{ARModel, Direction, LatentTrajectory, Seq2SeqTemporalModel, TemporalModel};
pub use tensor::{Real, Tensor};
