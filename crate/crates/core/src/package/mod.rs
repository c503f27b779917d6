//! Base-weight archives, trainable-delta packages and their onboard merge.

mod archive;
mod dataset;
mod uplink;

pub use archive::{verify_archive, ArchiveEntry, EntryRole, IntegrityReport, TensorArchive, MAGIC, VERSION};
pub use dataset::{load_dataset, save_dataset};
pub use uplink::{uplink_time, UplinkBudget};

use crate::detector::PolicyMask;
use crate::error::{Error, Result};
use crate::nn::{ParamRole, ParamStore};

/// Every non-adapter tensor of the store as a `base` entry.
pub fn base_archive(store: &ParamStore) -> Result<TensorArchive> {
    if store.any_merged() {
        return Err(Error::State("base archive requested while adapters are merged".into()));
    }
    let mut archive = TensorArchive::new();
    for id in store.ids() {
        if !store.info(id).role.is_adapter() {
            archive.push(ArchiveEntry::from_matrix(store.name(id), EntryRole::Base, store.value(id))?)?;
        }
    }
    Ok(archive)
}

/// Overwrites every non-adapter tensor from `archive`.
pub fn load_base(store: &mut ParamStore, archive: &TensorArchive) -> Result<()> {
    if store.any_merged() {
        return Err(Error::State("cannot load base weights into a merged model".into()));
    }
    let ids: Vec<_> = store.ids().filter(|&id| !store.info(id).role.is_adapter()).collect();
    for id in ids {
        let name = store.name(id).to_owned();
        let entry = archive
            .get(&name)
            .ok_or_else(|| Error::Merge(format!("archive has no tensor '{name}'")))?;
        let m = entry.to_matrix()?;
        let target = store.value_mut(id);
        if m.shape() != target.shape() {
            return Err(Error::shape(
                "load_base",
                format!("'{name}' is {:?} in the archive, {:?} in the model", m.shape(), target.shape()),
            ));
        }
        *target = m;
    }
    Ok(())
}

/// Every tensor of the store, adapter factors included.
pub fn checkpoint_archive(store: &ParamStore) -> Result<TensorArchive> {
    if store.any_merged() {
        return Err(Error::State("checkpoint requested while adapters are merged".into()));
    }
    let mut archive = TensorArchive::new();
    for id in store.ids() {
        let role = match store.info(id).role {
            ParamRole::LoraA => EntryRole::LoraA,
            ParamRole::LoraB => EntryRole::LoraB,
            _ => EntryRole::Base,
        };
        archive.push(ArchiveEntry::from_matrix(store.name(id), role, store.value(id))?)?;
    }
    Ok(archive)
}

/// Restores a [`checkpoint_archive`]; every tensor must be present with its shape.
pub fn load_checkpoint(store: &mut ParamStore, archive: &TensorArchive) -> Result<()> {
    if store.any_merged() {
        return Err(Error::State("cannot load a checkpoint into a merged model".into()));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_owned();
        let m = archive
            .get(&name)
            .ok_or_else(|| Error::Merge(format!("checkpoint has no tensor '{name}'")))?
            .to_matrix()?;
        let target = store.value_mut(id);
        if m.shape() != target.shape() {
            return Err(Error::shape(
                "load_checkpoint",
                format!("'{name}' is {:?} in the checkpoint, {:?} in the model", m.shape(), target.shape()),
            ));
        }
        *target = m;
    }
    Ok(())
}

/// Exactly the trainable tensors: adapter factors as `lora_A`/`lora_B`,
/// everything else as `full_replace`.
pub fn build_package(store: &ParamStore, mask: &PolicyMask) -> Result<TensorArchive> {
    if mask.mask.len() != store.len() {
        return Err(Error::shape("build_package", "mask does not cover the model"));
    }
    if store.any_merged() {
        return Err(Error::State("cannot package a model whose adapters are merged".into()));
    }
    let mut archive = TensorArchive::new();
    for id in store.ids().filter(|id| mask.mask[id.0]) {
        let info = store.info(id);
        let role = match info.role {
            ParamRole::LoraA => EntryRole::LoraA,
            ParamRole::LoraB => EntryRole::LoraB,
            _ => EntryRole::FullReplace,
        };
        if let Some(base) = info.adapter_of {
            let (a, b) = store.info(base).adapter.expect("adapter registered with its base");
            if !(mask.mask[a.0] && mask.mask[b.0]) {
                return Err(Error::State(format!(
                    "adapter on '{}' is only partly trainable",
                    store.name(base)
                )));
            }
        }
        archive.push(ArchiveEntry::from_matrix(store.name(id), role, store.value(id))?)?;
    }
    Ok(archive)
}

fn strip_suffix<'n>(name: &'n str, suffix: &str) -> Option<&'n str> {
    name.strip_suffix(suffix).filter(|b| !b.is_empty())
}

/// Merges a package into a base archive: `W ← W + B·A` accumulated in f64
/// and rounded once to f32; `full_replace` overwrites.
///
/// LoRA pairs add on every call, so a package must be applied exactly once.
pub fn apply_package(base: &TensorArchive, pkg: &TensorArchive) -> Result<TensorArchive> {
    let mut updates: Vec<(String, Vec<f32>)> = Vec::new();
    for entry in pkg.entries() {
        match entry.role {
            EntryRole::FullReplace => {
                let target = base
                    .get(&entry.name)
                    .ok_or_else(|| Error::Merge(format!("package replaces unknown tensor '{}'", entry.name)))?;
                if target.dims != entry.dims {
                    return Err(Error::shape(
                        "apply_package",
                        format!("'{}': {:?} vs base {:?}", entry.name, entry.dims, target.dims),
                    ));
                }
                updates.push((entry.name.clone(), entry.data.clone()));
            }
            EntryRole::LoraA => {
                let name = strip_suffix(&entry.name, ".lora_A")
                    .ok_or_else(|| Error::Format(format!("lora_A entry '{}' lacks the .lora_A suffix", entry.name)))?;
                let b_entry = pkg
                    .get(&format!("{name}.lora_B"))
                    .filter(|e| e.role == EntryRole::LoraB)
                    .ok_or_else(|| Error::Format(format!("'{}' has no matching lora_B", entry.name)))?;
                let target = base
                    .get(name)
                    .ok_or_else(|| Error::Merge(format!("package adapts unknown tensor '{name}'")))?;
                let a = entry.to_matrix()?;
                let b = b_entry.to_matrix()?;
                let w = target.to_matrix()?;
                if b.cols() != a.rows() || (b.rows(), a.cols()) != w.shape() {
                    return Err(Error::shape(
                        "apply_package",
                        format!(
                            "'{name}': B {:?} · A {:?} does not fit W {:?}",
                            b.shape(),
                            a.shape(),
                            w.shape()
                        ),
                    ));
                }
                let merged = w.add(&b.matmul(&a)?)?;
                updates.push((name.to_owned(), merged.data().iter().map(|&v| v as f32).collect()));
            }
            EntryRole::LoraB => {
                let name = strip_suffix(&entry.name, ".lora_B")
                    .ok_or_else(|| Error::Format(format!("lora_B entry '{}' lacks the .lora_B suffix", entry.name)))?;
                if pkg.get(&format!("{name}.lora_A")).map(|e| e.role) != Some(EntryRole::LoraA) {
                    return Err(Error::Format(format!("'{}' has no matching lora_A", entry.name)));
                }
            }
            EntryRole::Base => {
                return Err(Error::Format(format!("package carries base entry '{}'", entry.name)));
            }
        }
    }
    let mut merged = TensorArchive::new();
    for e in base.entries() {
        let mut e = e.clone();
        if let Some((_, data)) = updates.iter().rev().find(|(n, _)| *n == e.name) {
            e.data = data.clone();
        }
        merged.push(e)?;
    }
    Ok(merged)
}
