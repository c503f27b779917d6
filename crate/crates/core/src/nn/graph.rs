use std::ops::{Deref, DerefMut};

use crate::autograd::{ParamId, Tape, Var};
use crate::nn::ParamStore;

/// A [`Tape`] bound to a parameter store and a trainable mask.
///
/// Each parameter is registered as a leaf at most once per graph, so shared
/// weights (e.g. a conv applied to every pyramid level) accumulate gradients
/// in a single place.
pub struct Graph<'a> {
    tape: Tape<'a>,
    store: &'a ParamStore,
    trainable: &'a [bool],
    leaves: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a [bool]) -> Self {
        assert_eq!(store.len(), trainable.len(), "mask must cover every parameter");
        Self {
            tape: Tape::new(),
            store,
            trainable,
            leaves: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let v = self
            .tape
            .param(id, self.store.value(id), self.trainable[id.0]);
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn into_tape(self) -> Tape<'a> {
        self.tape
    }
}

impl<'a> Deref for Graph<'a> {
    type Target = Tape<'a>;

    fn deref(&self) -> &Self::Target {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.tape
    }
}
