//! Label-LDP point GAN for synthetic spatial point data.
//!
//! The crate covers the whole pipeline: [`ingest`] raw coordinates,
//! [`privacy`] (randomized-response label flipping), the point-set networks
//! in [`model`], the adversarial [`training`] loop, distributional
//! [`metrics`] and the location [`analytics`] workloads. [`pipeline`] ties
//! the stages together for the command-line driver.

pub mod analytics;
pub mod checkpoint;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod privacy;
pub mod rng;
pub mod training;

pub use ingest::{DatasetBounds, Frame, PointSet, RegionMask, Units};
pub use model::{ArchitectureConfig, ModelState, NoisePrior};
pub use privacy::{LabeledPoint, PrivacyBudget, PrivatizedDataset};
pub use rng::Seeds;
pub use training::{TrainConfig, TrainLog};
