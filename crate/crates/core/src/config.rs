//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. List values are comma
//! separated; a single value for `heads` or `window` applies to every stage.
//! Unknown or repeated keys are errors.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::detector::{DetectorConfig, FinetunePolicy, OptimizerConfig};
use crate::error::{Error, Result};
use crate::swin::StageConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub detector: DetectorConfig,
    pub policy: FinetunePolicy,
    /// Optimizer for fine-tuning.
    pub optimizer: OptimizerConfig,
    pub pretrain_lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    /// D1 scenes used for pretraining.
    pub pretrain_size: usize,
    /// Scenes per domain in the fine-tuning mixture.
    pub finetune_size: usize,
    /// Scenes per domain in the held-out mixture.
    pub test_size: usize,
    pub workdir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::toy(),
            policy: FinetunePolicy::LoraDetHybrid,
            optimizer: OptimizerConfig { lr: 1e-3, adapter_lr_scale: 5.0, ..OptimizerConfig::default() },
            pretrain_lr: 1e-3,
            batch_size: 4,
            pretrain_epochs: 6,
            finetune_epochs: 10,
            seed: 0,
            pretrain_size: 300,
            finetune_size: 150,
            test_size: 100,
            workdir: PathBuf::from("run"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "image_size",
    "patch",
    "dims",
    "depths",
    "heads",
    "window",
    "mlp_ratio",
    "backbone_ranks",
    "neck_channels",
    "roi_levels",
    "roi_crop",
    "head_hidden",
    "head_ranks",
    "classes",
    "policy",
    "lr",
    "pretrain_lr",
    "adapter_lr_scale",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "pretrain_epochs",
    "finetune_epochs",
    "seed",
    "pretrain_size",
    "finetune_size",
    "test_size",
    "workdir",
];

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("'{key}': cannot parse '{v}': {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|s| parse_one(key, s.trim())).collect()
}

fn per_stage(key: &str, v: &str, stages: usize) -> Result<Vec<usize>> {
    let list: Vec<usize> = parse_list(key, v)?;
    match list.len() {
        1 => Ok(vec![list[0]; stages]),
        n if n == stages => Ok(list),
        n => Err(Error::Config(format!("'{key}' has {n} values for {stages} stages"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: HashMap<&str, &str> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key '{k}'", lineno + 1)));
            }
            if kv.insert(k, v).is_some() {
                return Err(Error::Config(format!("line {}: '{k}' given twice", lineno + 1)));
            }
        }

        let mut cfg = Self::default();
        let bb = &mut cfg.detector.backbone;
        if let Some(v) = kv.get("dims") {
            let dims: Vec<usize> = parse_list("dims", v)?;
            let template = bb.stages[0].clone();
            bb.stages = dims.into_iter().map(|dim| StageConfig { dim, ..template.clone() }).collect();
            let r = bb.lora_ranks[0];
            bb.lora_ranks = vec![r; bb.stages.len()];
        }
        let n = bb.stages.len();
        if let Some(v) = kv.get("depths") {
            for (st, d) in bb.stages.iter_mut().zip(per_stage("depths", v, n)?) {
                st.depth = d;
            }
        }
        if let Some(v) = kv.get("heads") {
            for (st, h) in bb.stages.iter_mut().zip(per_stage("heads", v, n)?) {
                st.heads = h;
            }
        }
        if let Some(v) = kv.get("window") {
            for (st, w) in bb.stages.iter_mut().zip(per_stage("window", v, n)?) {
                st.window = w;
            }
        }
        if let Some(v) = kv.get("backbone_ranks") {
            bb.lora_ranks = per_stage("backbone_ranks", v, n)?;
        }
        if let Some(v) = kv.get("image_size") {
            bb.image_size = parse_one("image_size", v)?;
        }
        if let Some(v) = kv.get("patch") {
            bb.patch = parse_one("patch", v)?;
        }
        if let Some(v) = kv.get("mlp_ratio") {
            bb.mlp_ratio = parse_one("mlp_ratio", v)?;
        }

        let det = &mut cfg.detector;
        if let Some(v) = kv.get("neck_channels") {
            det.neck_channels = parse_one("neck_channels", v)?;
        }
        if let Some(v) = kv.get("roi_levels") {
            det.roi_levels = parse_list("roi_levels", v)?;
        }
        if let Some(v) = kv.get("roi_crop") {
            det.roi_crop = parse_one("roi_crop", v)?;
        }
        if let Some(v) = kv.get("head_hidden") {
            det.head_hidden = parse_one("head_hidden", v)?;
        }
        if let Some(v) = kv.get("head_ranks") {
            match parse_list::<usize>("head_ranks", v)?.as_slice() {
                [r1, r2] => det.head_ranks = (*r1, *r2),
                _ => return Err(Error::Config("'head_ranks' needs two values (fc1, fc2)".into())),
            }
        }
        if let Some(v) = kv.get("classes") {
            det.classes = parse_one("classes", v)?;
        }

        if let Some(v) = kv.get("policy") {
            cfg.policy = v.parse()?;
        }
        let opt = &mut cfg.optimizer;
        for (key, slot) in [
            ("lr", &mut opt.lr),
            ("weight_decay", &mut opt.weight_decay),
            ("beta1", &mut opt.beta1),
            ("beta2", &mut opt.beta2),
            ("eps", &mut opt.eps),
            ("pretrain_lr", &mut cfg.pretrain_lr),
            ("adapter_lr_scale", &mut opt.adapter_lr_scale),
        ] {
            if let Some(v) = kv.get(key) {
                *slot = parse_one(key, v)?;
            }
        }
        for (key, slot) in [
            ("batch_size", &mut cfg.batch_size),
            ("pretrain_epochs", &mut cfg.pretrain_epochs),
            ("finetune_epochs", &mut cfg.finetune_epochs),
            ("pretrain_size", &mut cfg.pretrain_size),
            ("finetune_size", &mut cfg.finetune_size),
            ("test_size", &mut cfg.test_size),
        ] {
            if let Some(v) = kv.get(key) {
                *slot = parse_one(key, v)?;
            }
        }
        if let Some(v) = kv.get("seed") {
            cfg.seed = parse_one("seed", v)?;
        }
        if let Some(v) = kv.get("workdir") {
            cfg.workdir = PathBuf::from(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `workdir` resolves against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.workdir.is_relative() {
            let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            cfg.workdir = base.join(&cfg.workdir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.optimizer.validate()?;
        if !(self.pretrain_lr > 0.0) {
            return Err(Error::Config("pretrain_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.pretrain_size == 0 || self.finetune_size == 0 || self.test_size == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let bb = &self.detector.backbone;
        let join = |v: Vec<usize>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let o = &self.optimizer;
        let lines = [
            ("image_size", bb.image_size.to_string()),
            ("patch", bb.patch.to_string()),
            ("dims", join(bb.stages.iter().map(|s| s.dim).collect())),
            ("depths", join(bb.stages.iter().map(|s| s.depth).collect())),
            ("heads", join(bb.stages.iter().map(|s| s.heads).collect())),
            ("window", join(bb.stages.iter().map(|s| s.window).collect())),
            ("mlp_ratio", bb.mlp_ratio.to_string()),
            ("backbone_ranks", join(bb.lora_ranks.clone())),
            ("neck_channels", self.detector.neck_channels.to_string()),
            ("roi_levels", join(self.detector.roi_levels.clone())),
            ("roi_crop", self.detector.roi_crop.to_string()),
            ("head_hidden", self.detector.head_hidden.to_string()),
            ("head_ranks", join(vec![self.detector.head_ranks.0, self.detector.head_ranks.1])),
            ("classes", self.detector.classes.to_string()),
            ("policy", self.policy.name().to_string()),
            ("lr", o.lr.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("adapter_lr_scale", o.adapter_lr_scale.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("eps", o.eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("finetune_epochs", self.finetune_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("pretrain_size", self.pretrain_size.to_string()),
            ("finetune_size", self.finetune_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("workdir", self.workdir.display().to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
