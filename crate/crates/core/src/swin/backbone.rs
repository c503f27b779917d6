use std::sync::Arc;

use crate::autograd::{RowGather, Var};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::nn::{Graph, LayerNorm, Linear, ParamGroup, ParamStore};
use crate::swin::attention::{shifted_window_masks, WindowAttention};
use crate::swin::window::{invert_permutation, partition_order, shift_order, FeatureMap};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub dim: usize,
    /// Number of blocks; always even (regular/shifted pairs).
    pub depth: usize,
    pub heads: usize,
    /// Window side `M` in patches.
    pub window: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(Error::Config(format!(
                "stage depth must be a positive even number, got {}",
                self.depth
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "stage dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub stages: Vec<StageConfig>,
    pub mlp_ratio: usize,
    /// LoRA rank on `W_q`/`W_v`, one per stage.
    pub lora_ranks: Vec<usize>,
}

impl BackboneConfig {
    /// Desk-scale default: 64×64 input, patch 4, dims 16/32/64/128, two blocks
    /// per stage, two heads, window 4.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            patch: 4,
            stages: [16, 32, 64, 128]
                .into_iter()
                .map(|dim| StageConfig {
                    dim,
                    depth: 2,
                    heads: 2,
                    window: 4,
                })
                .collect(),
            mlp_ratio: 4,
            lora_ranks: vec![4, 4, 4, 4],
        }
    }

    pub fn grid_extents(&self) -> Vec<usize> {
        let base = self.image_size / self.patch;
        (0..self.stages.len()).map(|s| base >> s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.lora_ranks.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "{} LoRA ranks for {} stages",
                self.lora_ranks.len(),
                self.stages.len()
            )));
        }
        let down = self.patch << (self.stages.len() - 1);
        if self.patch == 0 || self.image_size == 0 || self.image_size % down != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {} × 2^{}",
                self.image_size,
                self.patch,
                self.stages.len() - 1
            )));
        }
        for (s, (st, &extent)) in self.stages.iter().zip(&self.grid_extents()).enumerate() {
            st.validate()?;
            if s > 0 && st.dim != 2 * self.stages[s - 1].dim {
                return Err(Error::Config(format!(
                    "stage {s} dim {} must double the previous stage",
                    st.dim
                )));
            }
            if extent > st.window && extent % st.window != 0 {
                return Err(Error::Config(format!(
                    "stage {s} grid {extent} not divisible by window {}",
                    st.window
                )));
            }
            let r = self.lora_ranks[s];
            if r == 0 || r > st.dim {
                return Err(Error::Config(format!(
                    "stage {s} LoRA rank {r} outside [1, {}]",
                    st.dim
                )));
            }
        }
        Ok(())
    }
}

/// Precomputed token orderings for one stage's grid.
#[derive(Clone, Debug)]
pub struct StageGeometry {
    pub height: usize,
    pub width: usize,
    /// Effective window: the configured size, or the whole grid when smaller.
    pub window: usize,
    pub shift: usize,
    to_windows: Arc<RowGather>,
    from_windows: Arc<RowGather>,
    to_shifted_windows: Arc<RowGather>,
    from_shifted_windows: Arc<RowGather>,
    masks: Vec<Arc<Matrix>>,
}

impl StageGeometry {
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self> {
        let window = window.min(height).min(width);
        let shift = if window < height.min(width) { window / 2 } else { 0 };
        let part = partition_order(height, width, window)?;
        let rolled = shift_order(height, width, -(shift as isize), -(shift as isize));
        let shifted_part: Vec<usize> = part.iter().map(|&p| rolled[p]).collect();
        let masks = if shift > 0 {
            shifted_window_masks(height, width, window, shift)
        } else {
            Vec::new()
        };
        Ok(Self {
            height,
            width,
            window,
            shift,
            from_windows: Arc::new(RowGather::permutation(&invert_permutation(&part))),
            to_windows: Arc::new(RowGather::permutation(&part)),
            from_shifted_windows: Arc::new(RowGather::permutation(&invert_permutation(&shifted_part))),
            to_shifted_windows: Arc::new(RowGather::permutation(&shifted_part)),
            masks,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shifted: bool,
}

impl SwinBlock {
    /// LN → (S)W-MSA → residual → LN → MLP → residual.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, geo: &StageGeometry) -> Result<Var> {
        let shifted = self.shifted && geo.shift > 0;
        let (to, from, masks) = if shifted {
            (&geo.to_shifted_windows, &geo.from_shifted_windows, Some(geo.masks.as_slice()))
        } else {
            (&geo.to_windows, &geo.from_windows, None)
        };
        let h = self.norm1.forward(g, x)?;
        let h = g.gather(h, to)?;
        let h = self.attn.forward(g, h, masks)?;
        let h = g.gather(h, from)?;
        let x = g.add(x, h)?;
        let m = self.norm2.forward(g, x)?;
        let m = self.fc1.forward(g, m)?;
        let m = g.gelu(m);
        let m = self.fc2.forward(g, m)?;
        g.add(x, m)
    }
}

/// Gather building the 4C-wide 2×2 neighbourhood rows used by patch merging.
pub fn patch_merge_gather(height: usize, width: usize) -> Result<RowGather> {
    if height % 2 != 0 || width % 2 != 0 || height == 0 || width == 0 {
        return Err(Error::shape(
            "patch_merging",
            format!("{height}x{width} grid must have even extents"),
        ));
    }
    let mut src = Vec::with_capacity(height * width);
    for y in (0..height).step_by(2) {
        for x in (0..width).step_by(2) {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                src.push(Some(((y + dy) * width + x + dx) as u32));
            }
        }
    }
    Ok(RowGather::new(4, src))
}

/// 2×2 neighbourhood concatenation followed by a dense 4C→2C reduction.
pub fn patch_merging(f: &FeatureMap, reduction: &Matrix) -> Result<FeatureMap> {
    let gather = patch_merge_gather(f.height, f.width)?;
    let cat = gather.apply(&f.data);
    let out = cat.matmul_nt(reduction)?;
    FeatureMap::new(f.height / 2, f.width / 2, out)
}

#[derive(Clone, Debug)]
pub struct SwinStage {
    pub merge: Option<(Linear, Arc<RowGather>)>,
    pub blocks: Vec<SwinBlock>,
    pub out_norm: LayerNorm,
    pub geometry: StageGeometry,
    pub dim: usize,
}

impl SwinStage {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        cfg: &StageConfig,
        in_grid: (usize, usize),
        merge: bool,
        rank: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let group = ParamGroup::Backbone;
        let (mut h, mut w) = in_grid;
        let merge = if merge {
            let gather = Arc::new(patch_merge_gather(h, w)?);
            let lin = Linear::register(store, &format!("{name}.merge"), 2 * cfg.dim, cfg.dim, false, group, rng);
            h /= 2;
            w /= 2;
            Some((lin, gather))
        } else {
            None
        };
        let geometry = StageGeometry::new(h, w, cfg.window)?;
        let hidden = cfg.dim * mlp_ratio;
        let blocks = (0..cfg.depth)
            .map(|b| {
                let bn = format!("{name}.b{b}");
                Ok(SwinBlock {
                    norm1: LayerNorm::register(store, &format!("{bn}.ln1"), cfg.dim, group),
                    attn: WindowAttention::register(
                        store,
                        &format!("{bn}.attn"),
                        cfg.dim,
                        cfg.heads,
                        geometry.window,
                        rank,
                        group,
                        rng,
                    )?,
                    norm2: LayerNorm::register(store, &format!("{bn}.ln2"), cfg.dim, group),
                    fc1: Linear::register(store, &format!("{bn}.fc1"), cfg.dim, hidden, true, group, rng),
                    fc2: Linear::register(store, &format!("{bn}.fc2"), hidden, cfg.dim, true, group, rng),
                    shifted: b % 2 == 1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out_norm = LayerNorm::register(store, &format!("{name}.norm"), cfg.dim, group);
        Ok(Self {
            merge,
            blocks,
            out_norm,
            geometry,
            dim: cfg.dim,
        })
    }

    /// Runs the transformer blocks only (no merging, no output norm).
    pub fn forward_blocks(&self, g: &mut Graph<'_>, mut x: Var) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(g, x, &self.geometry)?;
        }
        Ok(x)
    }

    /// Returns `(carry, output)`: the pre-norm activations handed to the next
    /// stage and the normalized stage output.
    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var) -> Result<(Var, Var)> {
        if let Some((lin, gather)) = &self.merge {
            x = g.gather(x, gather)?;
            x = lin.forward(g, x)?;
        }
        let x = self.forward_blocks(g, x)?;
        let out = self.out_norm.forward(g, x)?;
        Ok((x, out))
    }
}

/// Runs a stage's block pairs on a feature map with every parameter frozen.
pub fn swin_block_pair_forward(store: &ParamStore, stage: &SwinStage, f: &FeatureMap) -> Result<FeatureMap> {
    let geo = &stage.geometry;
    if (f.height, f.width) != (geo.height, geo.width) || f.channels() != stage.dim {
        return Err(Error::shape(
            "swin_block_pair_forward",
            format!(
                "feature map {}x{}x{} for a {}x{}x{} stage",
                f.height,
                f.width,
                f.channels(),
                geo.height,
                geo.width,
                stage.dim
            ),
        ));
    }
    let mask = vec![false; store.len()];
    let mut g = Graph::new(store, &mask);
    let x = g.constant_ref(&f.data);
    let y = stage.forward_blocks(&mut g, x)?;
    FeatureMap::new(f.height, f.width, g.value(y).clone())
}

/// One stage output on the graph.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub var: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_embed: Linear,
    pub embed_norm: LayerNorm,
    pub stages: Vec<SwinStage>,
}

impl Backbone {
    pub fn register(store: &mut ParamStore, config: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let group = ParamGroup::Backbone;
        let p = config.patch;
        let d0 = config.stages[0].dim;
        let patch_embed = Linear::register(store, "backbone.embed", p * p, d0, true, group, rng);
        let embed_norm = LayerNorm::register(store, "backbone.embed_ln", d0, group);
        let g0 = config.image_size / p;
        let mut grid = (g0, g0);
        let mut stages = Vec::with_capacity(config.stages.len());
        for (s, st) in config.stages.iter().enumerate() {
            let stage = SwinStage::register(
                store,
                &format!("backbone.s{s}"),
                st,
                grid,
                s > 0,
                config.lora_ranks[s],
                config.mlp_ratio,
                rng,
            )?;
            grid = (stage.geometry.height, stage.geometry.width);
            stages.push(stage);
        }
        Ok(Self {
            config: config.clone(),
            patch_embed,
            embed_norm,
            stages,
        })
    }

    /// Non-overlapping `patch × patch` pixel blocks as token rows.
    pub fn patchify(&self, image: &Matrix) -> Result<Matrix> {
        let n = self.config.image_size;
        let p = self.config.patch;
        if image.shape() != (n, n) {
            return Err(Error::shape(
                "backbone_forward",
                format!("expected a {n}x{n} image, got {:?}", image.shape()),
            ));
        }
        let g = n / p;
        Ok(Matrix::from_fn(g * g, p * p, |t, k| {
            let (ty, tx) = (t / g, t % g);
            image.get(ty * p + k / p, tx * p + k % p)
        }))
    }

    pub fn forward(&self, g: &mut Graph<'_>, image: &Matrix) -> Result<Vec<StageOutput>> {
        let tokens = self.patchify(image)?;
        let x = g.constant(tokens);
        let x = self.patch_embed.forward(g, x)?;
        let mut x = self.embed_norm.forward(g, x)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (carry, out) = stage.forward(g, x)?;
            outs.push(StageOutput {
                var: out,
                height: stage.geometry.height,
                width: stage.geometry.width,
                channels: stage.dim,
            });
            x = carry;
        }
        Ok(outs)
    }
}

/// Backbone features with all parameters frozen.
pub fn backbone_forward(store: &ParamStore, backbone: &Backbone, image: &Matrix) -> Result<Vec<FeatureMap>> {
    let mask = vec![false; store.len()];
    let mut g = Graph::new(store, &mask);
    let outs = backbone.forward(&mut g, image)?;
    outs.iter()
        .map(|o| FeatureMap::new(o.height, o.width, g.value(o.var).clone()))
        .collect()
}
