//! The pretrain-on-D1, fine-tune-on-the-mixture protocol shared by the CLI
//! and the end-to-end checks.

use crate::config::ExperimentConfig;
use crate::detector::{
    apply_policy, synth_dataset, train, DetectorModel, Domain, FinetunePolicy, OptimizerConfig, PolicyMask,
    SceneSample, TrainConfig, TrainLog,
};
use crate::error::Result;
use crate::linalg::derive_seed;
use crate::package::{base_archive, load_base, TensorArchive};

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    /// D1 only.
    pub pretrain: Vec<SceneSample>,
    /// D1 followed by D2, `finetune_size` scenes each.
    pub finetune: Vec<SceneSample>,
    /// Held-out D1 followed by D2, `test_size` scenes each.
    pub test: Vec<SceneSample>,
}

fn mixture(seed: u64, n: usize, image_size: usize) -> Result<Vec<SceneSample>> {
    let mut out = synth_dataset(seed, Domain::D1, n, image_size)?;
    out.extend(synth_dataset(seed, Domain::D2, n, image_size)?);
    Ok(out)
}

impl Splits {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let size = cfg.detector.backbone.image_size;
        Ok(Self {
            pretrain: synth_dataset(derive_seed(cfg.seed, "data-pretrain", 0), Domain::D1, cfg.pretrain_size, size)?,
            finetune: mixture(derive_seed(cfg.seed, "data-finetune", 0), cfg.finetune_size, size)?,
            test: mixture(derive_seed(cfg.seed, "data-test", 0), cfg.test_size, size)?,
        })
    }
}

/// Fresh model trained end to end on `data`.
pub fn pretrain(cfg: &ExperimentConfig, data: &[SceneSample]) -> Result<(DetectorModel, TrainLog)> {
    let mut model = DetectorModel::new(&cfg.detector, cfg.seed)?;
    let mask = apply_policy(&model.store, FinetunePolicy::FullFinetune)?;
    let tc = TrainConfig {
        optimizer: OptimizerConfig { lr: cfg.pretrain_lr, ..cfg.optimizer },
        batch_size: cfg.batch_size,
        epochs: cfg.pretrain_epochs,
        seed: derive_seed(cfg.seed, "pretrain", 0),
    };
    let log = train(&mut model, &mask, data, &tc)?;
    Ok((model, log))
}

/// Fresh model (new adapters) carrying the weights of `base`.
pub fn model_from_base(cfg: &ExperimentConfig, base: &TensorArchive) -> Result<DetectorModel> {
    let mut model = DetectorModel::new(&cfg.detector, cfg.seed)?;
    load_base(&mut model.store, base)?;
    Ok(model)
}

/// Fine-tunes a copy of `base` under `policy`.
pub fn finetune(
    cfg: &ExperimentConfig,
    base: &DetectorModel,
    policy: FinetunePolicy,
    data: &[SceneSample],
) -> Result<(DetectorModel, PolicyMask, TrainLog)> {
    let mut model = model_from_base(cfg, &base_archive(&base.store)?)?;
    let mask = apply_policy(&model.store, policy)?;
    let tc = TrainConfig {
        optimizer: cfg.optimizer,
        batch_size: cfg.batch_size,
        epochs: cfg.finetune_epochs,
        seed: derive_seed(cfg.seed, "finetune", 0),
    };
    let log = train(&mut model, &mask, data, &tc)?;
    Ok((model, mask, log))
}
