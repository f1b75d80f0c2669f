//! Treatment-effect estimation with an identifiable, treatment-conditional variational
//! autoencoder, together with synthetic and IHDP data pipelines and diagnostics.

pub mod balancing;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod gaussian;
pub mod ihdp;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod synthetic;
pub mod training;

pub use balancing::BalanceConfig;
pub use dataset::{Dataset, Split};
pub use error::{Error, Result};
pub use estimation::{ate, estimate_effects, latent_means, EffectEstimate, EffectMode};
pub use experiments::{ExperimentConfig, ExperimentKind, RunRecord};
pub use ihdp::{IhdpArchive, IhdpReplication};
pub use metrics::{AffineFit, EvalReport, LineFit, RunMeta};
pub use model::{ModelConfig, ModelParams};
pub use synthetic::{DgpSpec, OutcomeFamily, Structure, SynthDataset};
pub use training::{train, TrainConfig, TrainTrace};
