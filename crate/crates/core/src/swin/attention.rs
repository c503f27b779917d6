//! Multi-head self-attention inside local windows with a learned relative
//! position bias:
//!
//! ```text
//! Attention(Q, K, V) = softmax(Q·Kᵀ/√d_head + B)·V
//! ```
//!
//! `B` (M²×M²) is gathered per head from a (2M−1)²-entry table indexed by the
//! relative offset of each token pair. `W_q` and `W_v` carry LoRA adapters;
//! `W_k` and the output projection stay plain.

use std::sync::Arc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, Matrix, Rng};
use crate::lora::LoraLinear;
use crate::nn::{Graph, Linear, LoraSlot, ParamGroup, ParamRole, ParamStore};

/// Additive penalty on token pairs that wrap across shifted-window regions.
pub const MASK_PENALTY: f64 = -1e9;

/// Relative-offset table index for each (query, key) pair of an `m×m` window.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let span = 2 * m - 1;
    let n = m * m;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / m, i % m);
        for j in 0..n {
            let (yj, xj) = (j / m, j % m);
            let dy = yi + m - 1 - yj;
            let dx = xi + m - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Per-window masks for a grid rolled by `-shift`: pairs from different
/// pre-roll regions get [`MASK_PENALTY`].
pub fn shifted_window_masks(height: usize, width: usize, m: usize, shift: usize) -> Vec<Arc<Matrix>> {
    let region = |v: usize, extent: usize| {
        if v < extent - m {
            0
        } else if v < extent - shift {
            1
        } else {
            2
        }
    };
    let n = m * m;
    let mut masks = Vec::new();
    for wy in 0..height / m {
        for wx in 0..width / m {
            let ids: Vec<usize> = (0..n)
                .map(|t| {
                    let (y, x) = (wy * m + t / m, wx * m + t % m);
                    region(y, height) * 3 + region(x, width)
                })
                .collect();
            masks.push(Arc::new(Matrix::from_fn(n, n, |i, j| {
                if ids[i] == ids[j] {
                    0.0
                } else {
                    MASK_PENALTY
                }
            })));
        }
    }
    masks
}

/// Attention parameters registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub q: LoraSlot,
    pub k: Linear,
    pub v: LoraSlot,
    pub proj: Linear,
    pub rel_bias: crate::autograd::ParamId,
    pub heads: usize,
    pub window: usize,
    bias_index: Vec<Arc<Vec<usize>>>,
}

impl WindowAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        rank: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let q = Linear::register(store, &format!("{name}.q"), dim, dim, true, group, rng);
        let k = Linear::register(store, &format!("{name}.k"), dim, dim, true, group, rng);
        let v = Linear::register(store, &format!("{name}.v"), dim, dim, true, group, rng);
        let proj = Linear::register(store, &format!("{name}.proj"), dim, dim, true, group, rng);
        let q = LoraSlot::attach(store, q, rank, rng)?;
        let v = LoraSlot::attach(store, v, rank, rng)?;
        let span = 2 * window - 1;
        let table = gaussian_matrix(span * span, heads, 0.02, rng)?;
        let rel_bias = store.add(format!("{name}.rel_bias"), table, ParamRole::RelBias, group);
        Ok(Self::assemble(q, k, v, proj, rel_bias, heads, window))
    }

    fn assemble(
        q: LoraSlot,
        k: Linear,
        v: LoraSlot,
        proj: Linear,
        rel_bias: crate::autograd::ParamId,
        heads: usize,
        window: usize,
    ) -> Self {
        let rel = relative_position_index(window);
        let bias_index = (0..heads)
            .map(|h| Arc::new(rel.iter().map(|&r| r * heads + h).collect()))
            .collect();
        Self {
            q,
            k,
            v,
            proj,
            rel_bias,
            heads,
            window,
            bias_index,
        }
    }

    /// Attention over window-major tokens `x` ((windows·M²)×C). `masks`, when
    /// given, holds one additive M²×M² mask per window.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, masks: Option<&[Arc<Matrix>]>) -> Result<Var> {
        let (rows, c) = g.value(x).shape();
        let per = self.window * self.window;
        if rows % per != 0 || c % self.heads != 0 {
            return Err(Error::shape(
                "window_attention",
                format!("{rows}x{c} tokens for {per}-token windows and {} heads", self.heads),
            ));
        }
        let n_windows = rows / per;
        if let Some(m) = masks {
            if m.len() != n_windows {
                return Err(Error::shape("window_attention", "one mask per window required"));
            }
        }
        let d_head = c / self.heads;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let table = g.param(self.rel_bias);
        let biases: Vec<Var> = self
            .bias_index
            .iter()
            .map(|idx| g.gather_elems(table, idx, per, per))
            .collect::<Result<_>>()?;
        let mask_vars: Option<Vec<Var>> =
            masks.map(|ms| ms.iter().map(|m| g.constant(Matrix::clone(m))).collect());

        let inv_sqrt = 1.0 / (d_head as f64).sqrt();
        let mut window_outs = Vec::with_capacity(n_windows);
        for w in 0..n_windows {
            let mut head_outs = Vec::with_capacity(self.heads);
            for (h, &bias) in biases.iter().enumerate() {
                let qs = g.slice(q, w * per, per, h * d_head, d_head)?;
                let ks = g.slice(k, w * per, per, h * d_head, d_head)?;
                let vs = g.slice(v, w * per, per, h * d_head, d_head)?;
                let scores = g.matmul_nt(qs, ks)?;
                let scores = g.scale(scores, inv_sqrt);
                let mut scores = g.add(scores, bias)?;
                if let Some(mv) = &mask_vars {
                    scores = g.add(scores, mv[w])?;
                }
                let attn = g.softmax_rows(scores);
                head_outs.push(g.matmul(attn, vs)?);
            }
            window_outs.push(g.concat_cols(&head_outs)?);
        }
        let merged = g.concat_rows(&window_outs)?;
        self.proj.forward(g, merged)
    }
}

/// Self-contained attention weights for a single window, for use outside a model.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: LoraLinear,
    pub wk: Matrix,
    pub wv: LoraLinear,
    pub wo: Matrix,
    /// (2M−1)² × heads.
    pub rel_bias_table: Matrix,
    pub heads: usize,
    pub window: usize,
}

impl AttentionWeights {
    pub fn rel_index(&self) -> Vec<usize> {
        relative_position_index(self.window)
    }

    fn to_store(&self) -> Result<(ParamStore, WindowAttention)> {
        let mut store = ParamStore::new();
        let g = ParamGroup::Backbone;
        let lora = |store: &mut ParamStore, name: &str, l: &LoraLinear| -> Result<LoraSlot> {
            let w = store.add(format!("{name}.w"), l.weight().clone(), ParamRole::Weight, g);
            let bias = l.bias().map(|b| {
                store.add(
                    format!("{name}.b"),
                    Matrix::from_parts(1, b.len(), b.to_vec()),
                    ParamRole::Bias,
                    g,
                )
            });
            let (a, b) = store.add_adapter(w, l.a().clone(), l.b().clone());
            if l.is_merged() {
                return Err(Error::State("attention adapters must be unmerged".into()));
            }
            Ok(LoraSlot {
                base: Linear { weight: w, bias },
                a,
                b,
                rank: l.rank(),
            })
        };
        let q = lora(&mut store, "q", &self.wq)?;
        let v = lora(&mut store, "v", &self.wv)?;
        let k = Linear {
            weight: store.add("k.w", self.wk.clone(), ParamRole::Weight, g),
            bias: None,
        };
        let proj = Linear {
            weight: store.add("proj.w", self.wo.clone(), ParamRole::Weight, g),
            bias: None,
        };
        let span = 2 * self.window - 1;
        if self.rel_bias_table.shape() != (span * span, self.heads) {
            return Err(Error::shape("AttentionWeights", "relative bias table size"));
        }
        let rel = store.add("rel_bias", self.rel_bias_table.clone(), ParamRole::RelBias, g);
        Ok((
            store,
            WindowAttention::assemble(q, k, v, proj, rel, self.heads, self.window),
        ))
    }
}

/// Attention over one window of M²×C tokens.
pub fn window_attention(tokens: &Matrix, weights: &AttentionWeights) -> Result<Matrix> {
    let per = weights.window * weights.window;
    if tokens.rows() != per {
        return Err(Error::shape(
            "window_attention",
            format!("expected {per} tokens, got {}", tokens.rows()),
        ));
    }
    let (store, attn) = weights.to_store()?;
    let mask = vec![false; store.len()];
    let mut g = Graph::new(&store, &mask);
    let x = g.constant_ref(tokens);
    let y = attn.forward(&mut g, x, None)?;
    Ok(g.value(y).clone())
}
