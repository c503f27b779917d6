use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamInfo, ParamStore};

/// Which tensors a fine-tuning run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FinetunePolicy {
    Pretrained,
    FullFinetune,
    BackboneOnly,
    HeadOnly,
    /// Backbone adapters, everything after the backbone fully trained.
    LoraBackboneFullHead,
    /// All adapters plus the terminal cls/reg layers.
    LoraDet,
    /// `LoraDet` plus the neck and objectness convolutions.
    LoraDetHybrid,
}

impl FinetunePolicy {
    pub const ALL: [FinetunePolicy; 7] = [
        FinetunePolicy::Pretrained,
        FinetunePolicy::FullFinetune,
        FinetunePolicy::BackboneOnly,
        FinetunePolicy::HeadOnly,
        FinetunePolicy::LoraBackboneFullHead,
        FinetunePolicy::LoraDet,
        FinetunePolicy::LoraDetHybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FinetunePolicy::Pretrained => "Pretrained",
            FinetunePolicy::FullFinetune => "FullFinetune",
            FinetunePolicy::BackboneOnly => "BackboneOnly",
            FinetunePolicy::HeadOnly => "HeadOnly",
            FinetunePolicy::LoraBackboneFullHead => "LoRA",
            FinetunePolicy::LoraDet => "LoRA-Det",
            FinetunePolicy::LoraDetHybrid => "LoRA-Det-hybrid",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|p| p.name()).collect::<Vec<_>>().join(", ")
    }

    /// Default trainability of one tensor.
    pub fn trains(self, info: &ParamInfo) -> bool {
        let adapter = info.role.is_adapter();
        let backbone = info.group == ParamGroup::Backbone;
        match self {
            FinetunePolicy::Pretrained => false,
            FinetunePolicy::FullFinetune => !adapter,
            FinetunePolicy::BackboneOnly => !adapter && backbone,
            FinetunePolicy::HeadOnly => !adapter && !backbone,
            FinetunePolicy::LoraBackboneFullHead => {
                if backbone {
                    adapter
                } else {
                    !adapter
                }
            }
            FinetunePolicy::LoraDet => adapter || info.group == ParamGroup::HeadOut,
            FinetunePolicy::LoraDetHybrid => {
                adapter || matches!(info.group, ParamGroup::HeadOut | ParamGroup::Neck | ParamGroup::Rpn)
            }
        }
    }
}

impl fmt::Display for FinetunePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn canonical(s: &str) -> String {
    s.chars()
        .filter(|c| !matches!(c, '-' | '_' | ' '))
        .flat_map(char::to_lowercase)
        .collect()
}

impl FromStr for FinetunePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = canonical(s);
        let aliases: [(&str, FinetunePolicy); 2] = [
            ("lorabackbonefullhead", FinetunePolicy::LoraBackboneFullHead),
            ("loradethybrid", FinetunePolicy::LoraDetHybrid),
        ];
        Self::ALL
            .iter()
            .copied()
            .find(|p| canonical(p.name()) == key)
            .or_else(|| aliases.iter().find(|(a, _)| *a == key).map(|&(_, p)| p))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown policy '{s}'; valid policies: {}",
                    Self::valid_names()
                ))
            })
    }
}

/// Trainable mask over a store plus its parameter census.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyMask {
    pub policy: FinetunePolicy,
    pub mask: Vec<bool>,
    pub trainable: usize,
    /// Scalars of the deployed (adapter-free) model.
    pub total: usize,
}

impl PolicyMask {
    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }

    pub fn trainable_names<'s>(&self, store: &'s ParamStore) -> Vec<&'s str> {
        store
            .ids()
            .filter(|id| self.mask[id.0])
            .map(|id| store.name(id))
            .collect()
    }
}

pub fn apply_policy(store: &ParamStore, policy: FinetunePolicy) -> Result<PolicyMask> {
    apply_policy_with(store, policy, &[])
}

/// Like [`apply_policy`], with per-tensor `(name, trainable)` overrides.
pub fn apply_policy_with(
    store: &ParamStore,
    policy: FinetunePolicy,
    overrides: &[(&str, bool)],
) -> Result<PolicyMask> {
    let mut mask: Vec<bool> = store.ids().map(|id| policy.trains(store.info(id))).collect();
    for &(name, on) in overrides {
        let id = store.require(name)?;
        mask[id.0] = on;
    }
    let trainable = store.scalar_count(store.ids().filter(|id| mask[id.0]));
    Ok(PolicyMask {
        policy,
        mask,
        trainable,
        total: store.base_scalar_count(),
    })
}
