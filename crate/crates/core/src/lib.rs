pub mod attention;
pub mod config;
pub mod error;
pub mod guidance;
pub mod hallucination;
pub mod io;
pub mod kv_bank;
pub mod linalg;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod scheduler;
pub mod synthetic;
pub mod tensor;
pub mod toy;
pub mod video;
pub mod weights;

pub use error::{KvLockError, Result};

pub type Latent = tensor::Latent4D<f32>;
pub type Latent64 = tensor::Latent4D<f64>;
pub type Model = model::DitLite<f32>;
pub type Model64 = model::DitLite<f64>;
pub type Bank = kv_bank::KvBank<f32>;
pub type Schedule = scheduler::NoiseSchedule<f32>;
