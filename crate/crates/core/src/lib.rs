//! Confusing-group subnets for multi-class classifiers.
//!
//! A trained classifier's confusion matrix is cut into groups of classes
//! that it mixes up. Each group gets a small extra head on the shared,
//! frozen encoder, trained on `{others} ∪ group`. The heads' outputs are
//! mapped back into the full label space and fused with the main head.
//! A cross-entropy variant that also penalizes probability on confusing
//! classes can be used for any head.
//!
//! Runnable walkthroughs live in `examples/`:
//!
//! - `generate_dataset`: synthetic clusters with planted confusable pairs
//! - `confusing_groups`: confusion matrix, groups and weight matrix
//! - `improved_loss_gradcheck`: the loss, its gradient and the FD check
//! - `output_space_fusion`: mapping subnet outputs and fusing them
//! - `train_and_evaluate`: baseline, subnets and the evaluation report
//! - `ablation`: the four-arm experiment end to end

pub mod confusion;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod pipeline;

pub use confusion::{ConfusingGroup, ConfusionMatrix, GroupPartition, WeightMatrix};
pub use data::{Dataset, SyntheticSpec};
pub use ensemble::{FusionConfig, FusionRule};
pub use error::{Error, Result};
pub use loss::LossConfig;
pub use metrics::EvalReport;
pub use model::{ModelState, TrainConfig};
pub use numeric::{DenseMatrix, ProbabilityVector};
pub use pipeline::{run_experiment, AblationResult, Arm, ExperimentConfig};
