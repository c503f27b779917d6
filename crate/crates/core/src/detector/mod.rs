//! Toy oriented detector, fine-tuning policies, training and evaluation.

pub mod data;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod policy;
pub mod train;

pub use data::{ks_statistic, synth_dataset, synth_sample, Domain, SceneSample, NUM_CLASSES};
pub use eval::{average_precision, decode, evaluate, mean_ap, DecodeConfig, Detection, EvalMetrics};
pub use gradcheck::{gradcheck, gradcheck_point, relative_error, GradcheckReport, GRAD_FLOOR};
pub use geometry::{rotated_iou, wrap_half_pi, OrientedBox};
pub use loss::{detection_loss, LossVars};
pub use model::{DetectorConfig, DetectorModel, DetectorVars, Predictions, RoiCell, Targets};
pub use policy::{apply_policy, apply_policy_with, FinetunePolicy, PolicyMask};
pub use train::{dataset_loss, sample_gradients, train, AdamW, OptimizerConfig, TrainConfig, TrainLog};
