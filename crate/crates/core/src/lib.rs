pub mod accounting;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod deviation;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod report;
pub mod sampler;
pub mod schedule;
pub mod task;
pub mod tensor;
pub mod train;
pub mod upcycle;

pub use autodiff::{Gradients, Tape, Var};
pub use config::{DenoiserConfig, MoEConfig};
pub use error::{Error, Result};
pub use model::{Denoiser, ModelInput, MtuLayout, Routing};
pub use params::{BindMode, Bound, Component, ComponentClass, ParamTree};
pub use schedule::NoiseSchedule;
pub use task::TaskId;
pub use tensor::{DType, Float, Tensor};
