//! Continual learning with calibrated gradient estimators.
//!
//! The crate provides differentiable models, class-incremental and task-free
//! data streams, a reservoir replay buffer, the ER / SVRG / SSVRG / DGC
//! gradient estimators with their training loops, and the usual
//! continual-learning metrics.

pub mod buffer;
pub mod calib;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;
pub mod stream;
pub mod verify;

pub use buffer::ReservoirBuffer;
pub use calib::{
    run_cil, run_tfcl, CalibratorState, CombinedForm, Method, RunOutput, StageEndMode,
    TaskWeighting, TrainConfig,
};
pub use error::{Error, Result};
pub use metrics::{AccuracyMatrix, LossTrajectory};
pub use model::{ConvexityParams, LabeledBatch, ModelKind, ModelSpec, Sample};
pub use params::ParameterVector;
pub use stream::{StreamConfig, StreamMode, Task, TaskStream};
