//! Class-incremental learning with repetition on a small CPU model.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the runner uses.

pub mod ablation;
pub mod array;
pub mod autodiff;
pub mod buffer;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pool;
pub mod report;
pub mod scalar;
pub mod stream;
pub mod trainer;

pub use array::Array;
pub use autodiff::{Gradients, Tape, Var};
pub use buffer::{Exemplar, MemoryBuffer};
pub use config::{AblationFlags, RunConfig};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossSchedule};
pub use nn::{ModelConfig, ModelParams};
pub use optim::{Adam, AdamConfig};
pub use pool::ModelPool;
pub use scalar::Scalar;
pub use stream::{ImageSource, StreamConfig, UnlabeledScenario};
pub use trainer::{run_stream, Learner, RunMetrics, RunOptions};

pub type RealArray = Array<f64>;
pub type Params = ModelParams<f64>;
pub type Buffer = MemoryBuffer<f64>;
pub type Pool = ModelPool<f64>;
pub type Optimizer = Adam<f64>;
