use std::collections::HashMap;

use crate::autograd::ParamId;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// What a parameter tensor is, independent of where it lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormGain,
    NormShift,
    RelBias,
    LoraA,
    LoraB,
}

impl ParamRole {
    pub fn is_adapter(self) -> bool {
        matches!(self, ParamRole::LoraA | ParamRole::LoraB)
    }
}

/// Top-level detector component a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Backbone,
    Neck,
    Rpn,
    /// Shared fully connected RoI layers.
    HeadFc,
    /// Terminal classification / regression layers.
    HeadOut,
}

#[derive(Clone, Debug)]
pub struct ParamInfo {
    pub name: String,
    pub role: ParamRole,
    pub group: ParamGroup,
    /// For adapter factors: the base weight they update.
    pub adapter_of: Option<ParamId>,
    /// For base weights wrapped by an adapter: the `(A, B)` pair.
    pub adapter: Option<(ParamId, ParamId)>,
}

/// Flat, ordered storage for every tensor of a model.
///
/// Ids are dense indices in registration order; names are unique and stable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    infos: Vec<ParamInfo>,
    values: Vec<Matrix>,
    merged: Vec<bool>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Matrix,
        role: ParamRole,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.infos.len());
        self.by_name.insert(name.clone(), id);
        self.infos.push(ParamInfo {
            name,
            role,
            group,
            adapter_of: None,
            adapter: None,
        });
        self.values.push(value);
        self.merged.push(false);
        id
    }

    /// Registers `A` (r×k) and `B` (d×r, zero-initialized by the caller) for `base`.
    pub fn add_adapter(&mut self, base: ParamId, a: Matrix, b: Matrix) -> (ParamId, ParamId) {
        let (name, group) = {
            let info = &self.infos[base.0];
            (info.name.clone(), info.group)
        };
        let a_id = self.add(format!("{name}.lora_A"), a, ParamRole::LoraA, group);
        let b_id = self.add(format!("{name}.lora_B"), b, ParamRole::LoraB, group);
        self.infos[a_id.0].adapter_of = Some(base);
        self.infos[b_id.0].adapter_of = Some(base);
        self.infos[base.0].adapter = Some((a_id, b_id));
        (a_id, b_id)
    }

    pub fn len(&self) -> usize {
        self.infos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.infos.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.infos.len()).map(ParamId)
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.infos[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.lookup(name)
            .ok_or_else(|| Error::Config(format!("unknown tensor name '{name}'")))
    }

    /// Whether the adapter on `base` has been folded into it.
    pub fn is_merged(&self, base: ParamId) -> bool {
        self.merged[base.0]
    }

    /// Scalar count over non-adapter tensors: the size of the deployed model.
    pub fn base_scalar_count(&self) -> usize {
        self.ids()
            .filter(|&id| !self.info(id).role.is_adapter())
            .map(|id| self.value(id).len())
            .sum()
    }

    pub fn scalar_count(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter().map(|id| self.value(id).len()).sum()
    }

    /// Adapter-carrying base weights in registration order.
    pub fn adapted_weights(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.info(id).adapter.is_some())
    }

    /// `B·A` for the adapter on `base`.
    pub fn adapter_delta(&self, base: ParamId) -> Option<Matrix> {
        let (a, b) = self.info(base).adapter?;
        Some(
            self.value(b)
                .matmul(self.value(a))
                .expect("adapter factor shapes fixed at registration"),
        )
    }

    /// Folds every adapter into its base weight: `W ← W + B·A`.
    pub fn merge_adapters(&mut self) -> Result<()> {
        let bases: Vec<ParamId> = self.adapted_weights().collect();
        if let Some(&b) = bases.iter().find(|&&b| self.merged[b.0]) {
            return Err(Error::State(format!("adapter on '{}' already merged", self.name(b))));
        }
        for base in bases {
            let delta = self.adapter_delta(base).expect("adapted weight");
            self.values[base.0].add_assign(&delta)?;
            self.merged[base.0] = true;
        }
        Ok(())
    }

    /// Reverses [`ParamStore::merge_adapters`].
    pub fn unmerge_adapters(&mut self) -> Result<()> {
        let bases: Vec<ParamId> = self.adapted_weights().collect();
        if let Some(&b) = bases.iter().find(|&&b| !self.merged[b.0]) {
            return Err(Error::State(format!("adapter on '{}' is not merged", self.name(b))));
        }
        for base in bases {
            let delta = self.adapter_delta(base).expect("adapted weight");
            self.values[base.0].sub_assign(&delta)?;
            self.merged[base.0] = false;
        }
        Ok(())
    }

    pub fn any_merged(&self) -> bool {
        self.merged.iter().any(|&m| m)
    }
}
