//! Gradient boosting with separable weak learners whose linear weights are
//! eliminated in closed form, run as a functional trust-region method.

pub mod boost;
pub mod datasets;
pub mod diagnostics;
pub mod error;
pub mod featurizer;
pub mod losses;
pub mod metrics;
pub mod trainer;
pub mod varpro;

pub use boost::{boost, ensemble_predict, optimal_constant, BoostConfig, BoostRun, Ensemble, StageRecord};
pub use datasets::{Dataset, SyntheticTask, Task};
pub use error::{Error, Result};
pub use featurizer::{Activation, FeaturizerSpec, ThetaVector};
pub use losses::{LossKind, LossTag, Targets};
pub use trainer::{TrainConfig, TrainVariant};
