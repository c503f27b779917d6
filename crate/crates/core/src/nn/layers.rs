use crate::autograd::{ParamId, Var};
use crate::error::Result;
use crate::linalg::{gaussian_matrix, Matrix, Rng};
use crate::lora::{check_rank, DEFAULT_INIT_STDDEV};
use crate::nn::{Graph, ParamGroup, ParamRole, ParamStore};

/// Dense layer over row tokens: `y = x·Wᵀ + b` with `W` out×in.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// Truncated-normal-free Xavier-style init used for every dense layer.
pub fn init_weight(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Matrix {
    let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
    gaussian_matrix(out_dim, in_dim, std, rng).expect("positive extents")
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.w"),
            init_weight(out_dim, in_dim, rng),
            ParamRole::Weight,
            group,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.b"),
                Matrix::zeros(1, out_dim),
                ParamRole::Bias,
                group,
            )
        });
        Self { weight, bias }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).rows()
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let mut y = g.matmul_nt(x, w)?;
        if let Some(b) = self.bias {
            let bv = g.param(b);
            y = g.add_row(y, bv)?;
        }
        Ok(y)
    }
}

/// A [`Linear`] whose weight carries a low-rank adapter pair in the store.
#[derive(Clone, Copy, Debug)]
pub struct LoraSlot {
    pub base: Linear,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

impl LoraSlot {
    /// Adds `A ~ N(0, 0.02²)` and `B = 0` next to an existing layer.
    pub fn attach(store: &mut ParamStore, base: Linear, rank: usize, rng: &mut Rng) -> Result<Self> {
        let (d, k) = store.value(base.weight).shape();
        check_rank(rank, d, k)?;
        let a = gaussian_matrix(rank, k, DEFAULT_INIT_STDDEV, rng)?;
        let (a, b) = store.add_adapter(base.weight, a, Matrix::zeros(d, rank));
        Ok(Self { base, a, b, rank })
    }

    /// `x·Wᵀ + (x·Aᵀ)·Bᵀ + b`; the adapter path is skipped once merged.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.base.weight);
        let mut y = g.matmul_nt(x, w)?;
        if !g.store().is_merged(self.base.weight) {
            let a = g.param(self.a);
            let b = g.param(self.b);
            let xa = g.matmul_nt(x, a)?;
            let delta = g.matmul_nt(xa, b)?;
            y = g.add(y, delta)?;
        }
        if let Some(bias) = self.base.bias {
            let bv = g.param(bias);
            y = g.add_row(y, bv)?;
        }
        Ok(y)
    }
}

/// Either a plain or an adapted dense layer.
#[derive(Clone, Copy, Debug)]
pub enum Dense {
    Plain(Linear),
    Lora(LoraSlot),
}

impl Dense {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self {
            Dense::Plain(l) => l.forward(g, x),
            Dense::Lora(l) => l.forward(g, x),
        }
    }

    pub fn linear(&self) -> Linear {
        match self {
            Dense::Plain(l) => *l,
            Dense::Lora(l) => l.base,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gamma = store.add(
            format!("{name}.g"),
            Matrix::filled(1, dim, 1.0),
            ParamRole::NormGain,
            group,
        );
        let beta = store.add(
            format!("{name}.b"),
            Matrix::zeros(1, dim),
            ParamRole::NormShift,
            group,
        );
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraLinear;

    #[test]
    fn slot_matches_standalone_adapter() {
        let mut rng = Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lin = Linear::register(&mut store, "fc", 6, 4, true, ParamGroup::HeadFc, &mut rng);
        let slot = LoraSlot::attach(&mut store, lin, 2, &mut rng).unwrap();
        *store.value_mut(slot.b) = gaussian_matrix(4, 2, 0.3, &mut rng).unwrap();
        *store.value_mut(lin.bias.unwrap()) = gaussian_matrix(1, 4, 0.3, &mut rng).unwrap();

        let standalone = LoraLinear::from_parts(
            store.value(lin.weight).clone(),
            store.value(slot.a).clone(),
            store.value(slot.b).clone(),
        )
        .unwrap()
        .with_bias(store.value(lin.bias.unwrap()).row(0).to_vec())
        .unwrap();

        let x = gaussian_matrix(5, 6, 1.0, &mut rng).unwrap();
        let mask = vec![false; store.len()];
        let mut g = Graph::new(&store, &mask);
        let xv = g.constant(x.clone());
        let y = slot.forward(&mut g, xv).unwrap();
        let expect = standalone.forward(&x.transpose()).unwrap().transpose();
        assert!(g.value(y).rel_frobenius_diff(&expect) < 1e-13);
    }

    #[test]
    fn store_merge_roundtrip() {
        let mut rng = Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let lin = Linear::register(&mut store, "fc", 5, 5, false, ParamGroup::HeadFc, &mut rng);
        let slot = LoraSlot::attach(&mut store, lin, 2, &mut rng).unwrap();
        *store.value_mut(slot.b) = gaussian_matrix(5, 2, 0.3, &mut rng).unwrap();
        let w0 = store.value(lin.weight).clone();
        store.merge_adapters().unwrap();
        assert!(store.merge_adapters().is_err());
        store.unmerge_adapters().unwrap();
        assert!(store.value(lin.weight).max_abs_diff(&w0) < 1e-12);
        assert_eq!(store.name(slot.a), "fc.w.lora_A");
        assert_eq!(store.base_scalar_count(), 25);
    }
}
