//! Everything around the models: configuration, data, optimization,
//! metrics, persistence, training loops and evaluation.

pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod enhancer_train;
pub mod evaluate;
pub mod gendeg_train;
pub mod metrics;
pub mod optim;
pub mod pipeline;

pub use backbone::Backbone;
pub use checkpoint::Checkpoint;
pub use config::{RunConfig, Stage};
pub use evaluate::{KindMetrics, MetricsReport};
pub use metrics::{psnr, ssim, PSNR_CAP};
pub use optim::{halving_lr, Adam};
