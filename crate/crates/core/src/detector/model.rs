//! The detector: backbone → pyramid neck → objectness stand-in → RoI head.
//!
//! Proposal generation and rotated RoI alignment are replaced by a fixed grid:
//! every cell of the configured pyramid levels is one RoI, and its feature is
//! the flattened `crop × crop` neighbourhood around the cell.

use std::sync::Arc;

use crate::autograd::{RowGather, Var};
use crate::detector::data::{SceneSample, NUM_CLASSES};
use crate::detector::geometry::{wrap_half_pi, OrientedBox};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::nn::{Graph, Linear, LoraSlot, ParamGroup, ParamStore};
use crate::swin::{Backbone, BackboneConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub neck_channels: usize,
    /// Pyramid levels (0 = finest) whose cells act as RoIs.
    pub roi_levels: Vec<usize>,
    /// Side of the square feature neighbourhood fed to the head.
    pub roi_crop: usize,
    pub head_hidden: usize,
    /// LoRA ranks of the two shared head layers.
    pub head_ranks: (usize, usize),
    pub classes: usize,
}

impl DetectorConfig {
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            neck_channels: 32,
            roi_levels: vec![1, 2],
            roi_crop: 3,
            head_hidden: 128,
            head_ranks: (16, 16),
            classes: NUM_CLASSES,
        }
    }

    /// Smallest configuration that still has every component; used for
    /// finite-difference checks.
    pub fn tiny() -> Self {
        use crate::swin::StageConfig;
        Self {
            backbone: BackboneConfig {
                image_size: 16,
                patch: 2,
                stages: [4, 8]
                    .into_iter()
                    .map(|dim| StageConfig {
                        dim,
                        depth: 2,
                        heads: 2,
                        window: 4,
                    })
                    .collect(),
                mlp_ratio: 2,
                lora_ranks: vec![2, 2],
            },
            neck_channels: 4,
            roi_levels: vec![0, 1],
            roi_crop: 2,
            head_hidden: 8,
            head_ranks: (2, 2),
            classes: NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let levels = self.backbone.stages.len();
        if self.roi_levels.is_empty() || self.roi_levels.iter().any(|&l| l >= levels) {
            return Err(Error::Config(format!(
                "roi levels {:?} must be non-empty and below {levels}",
                self.roi_levels
            )));
        }
        if self.roi_levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("roi levels must be strictly ascending".into()));
        }
        if self.neck_channels == 0 || self.head_hidden == 0 || self.roi_crop == 0 || self.classes == 0 {
            return Err(Error::Config("neck, head and crop sizes must be positive".into()));
        }
        let fc1_in = self.roi_crop * self.roi_crop * self.neck_channels;
        let (r1, r2) = self.head_ranks;
        if r1 == 0 || r1 > fc1_in.min(self.head_hidden) {
            return Err(Error::Config(format!(
                "head fc1 rank {r1} outside [1, {}]",
                fc1_in.min(self.head_hidden)
            )));
        }
        if r2 == 0 || r2 > self.head_hidden {
            return Err(Error::Config(format!("head fc2 rank {r2} outside [1, {}]", self.head_hidden)));
        }
        Ok(())
    }

    pub fn stride(&self, level: usize) -> usize {
        self.backbone.patch << level
    }

    /// Reference box side for a level.
    pub fn anchor(&self, level: usize) -> f64 {
        2.0 * self.stride(level) as f64
    }
}

/// `k×k` neighbourhood rows with zero padding; `k` odd centres on the cell,
/// `k` even extends down/right.
pub fn neighborhood_gather(height: usize, width: usize, k: usize) -> RowGather {
    let lo = (k as isize - 1) / 2;
    let mut src = Vec::with_capacity(height * width * k * k);
    for y in 0..height as isize {
        for x in 0..width as isize {
            for dy in 0..k as isize {
                for dx in 0..k as isize {
                    let (sy, sx) = (y + dy - lo, x + dx - lo);
                    let inside = sy >= 0 && sx >= 0 && sy < height as isize && sx < width as isize;
                    src.push(inside.then(|| (sy * width as isize + sx) as u32));
                }
            }
        }
    }
    RowGather::new(k * k, src)
}

/// Nearest-neighbour 2× upsampling from `(h/2, w/2)` to `(h, w)`.
pub fn upsample_gather(height: usize, width: usize) -> RowGather {
    let half_w = width.div_ceil(2);
    let src = (0..height)
        .flat_map(|y| (0..width).map(move |x| Some(((y / 2) * half_w + x / 2) as u32)))
        .collect();
    RowGather::new(1, src)
}

#[derive(Clone, Debug)]
pub struct Neck {
    pub laterals: Vec<Linear>,
    pub smooth: Vec<Linear>,
    upsample: Vec<Arc<RowGather>>,
    conv3: Vec<Arc<RowGather>>,
}

#[derive(Clone, Debug)]
pub struct RpnStandin {
    pub conv: Linear,
    pub objectness: Linear,
}

#[derive(Clone, Debug)]
pub struct RoiHead {
    pub fc1: LoraSlot,
    pub fc2: LoraSlot,
    pub cls: Linear,
    pub reg: Linear,
    crops: Vec<Arc<RowGather>>,
}

/// One RoI of the fixed grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiCell {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    pub stride: f64,
    pub anchor: f64,
}

impl RoiCell {
    pub fn center(&self) -> (f64, f64) {
        ((self.x as f64 + 0.5) * self.stride, (self.y as f64 + 0.5) * self.stride)
    }

    /// `(δcx, δcy, δw, δh, δθ)` taking this cell to `b`.
    pub fn encode(&self, b: &OrientedBox) -> [f64; 5] {
        let (cx, cy) = self.center();
        [
            (b.cx - cx) / self.stride,
            (b.cy - cy) / self.stride,
            (b.w / self.anchor).ln(),
            (b.h / self.anchor).ln(),
            wrap_half_pi(b.theta),
        ]
    }

    pub fn decode(&self, d: &[f64]) -> OrientedBox {
        let (cx, cy) = self.center();
        let clamp = |v: f64| v.clamp(-4.0, 4.0);
        OrientedBox {
            cx: cx + d[0] * self.stride,
            cy: cy + d[1] * self.stride,
            w: self.anchor * clamp(d[2]).exp(),
            h: self.anchor * clamp(d[3]).exp(),
            theta: wrap_half_pi(d[4]),
        }
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DetectorVars {
    /// R × (classes+1); column 0 is background.
    pub cls: Var,
    /// R × 5 box deltas.
    pub reg: Var,
    /// One objectness logit per cell of every pyramid level.
    pub objectness: Var,
}

/// Forward results as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub cls: Matrix,
    pub reg: Matrix,
    pub objectness: Matrix,
}

/// Training targets for one scene.
#[derive(Clone, Debug)]
pub struct Targets {
    pub classes: Arc<Vec<usize>>,
    pub deltas: Arc<Matrix>,
    pub positives: Arc<Vec<usize>>,
    pub objectness: Arc<Vec<f64>>,
    /// RoI row assigned to each ground-truth object, if any.
    pub assigned: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub neck: Neck,
    pub rpn: RpnStandin,
    pub head: RoiHead,
    cells: Vec<RoiCell>,
    /// Row offset of each pyramid level in the objectness column.
    level_offsets: Vec<usize>,
    /// Row offset of each RoI level inside the RoI rows.
    roi_offsets: Vec<usize>,
}

impl DetectorModel {
    pub fn new(config: &DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, "init", 0);
        let mut store = ParamStore::new();
        let backbone = Backbone::register(&mut store, &config.backbone, &mut rng)?;
        let extents = config.backbone.grid_extents();
        let cn = config.neck_channels;

        let mut laterals = Vec::new();
        let mut smooth = Vec::new();
        for (l, st) in config.backbone.stages.iter().enumerate() {
            laterals.push(Linear::register(&mut store, &format!("neck.lat{l}"), st.dim, cn, true, ParamGroup::Neck, &mut rng));
        }
        for l in 0..extents.len() {
            smooth.push(Linear::register(&mut store, &format!("neck.out{l}"), 9 * cn, cn, true, ParamGroup::Neck, &mut rng));
        }
        let neck = Neck {
            laterals,
            smooth,
            upsample: extents[..extents.len() - 1]
                .iter()
                .map(|&e| Arc::new(upsample_gather(e, e)))
                .collect(),
            conv3: extents.iter().map(|&e| Arc::new(neighborhood_gather(e, e, 3))).collect(),
        };

        let rpn = RpnStandin {
            conv: Linear::register(&mut store, "rpn.conv", 9 * cn, cn, true, ParamGroup::Rpn, &mut rng),
            objectness: Linear::register(&mut store, "rpn.obj", cn, 1, true, ParamGroup::Rpn, &mut rng),
        };

        let crop_in = config.roi_crop * config.roi_crop * cn;
        let hidden = config.head_hidden;
        let fc1 = Linear::register(&mut store, "head.fc1", crop_in, hidden, true, ParamGroup::HeadFc, &mut rng);
        let fc2 = Linear::register(&mut store, "head.fc2", hidden, hidden, true, ParamGroup::HeadFc, &mut rng);
        let fc1 = LoraSlot::attach(&mut store, fc1, config.head_ranks.0, &mut rng)?;
        let fc2 = LoraSlot::attach(&mut store, fc2, config.head_ranks.1, &mut rng)?;
        let head = RoiHead {
            fc1,
            fc2,
            cls: Linear::register(&mut store, "head.cls", hidden, config.classes + 1, true, ParamGroup::HeadOut, &mut rng),
            reg: Linear::register(&mut store, "head.reg", hidden, 5, true, ParamGroup::HeadOut, &mut rng),
            crops: config
                .roi_levels
                .iter()
                .map(|&l| Arc::new(neighborhood_gather(extents[l], extents[l], config.roi_crop)))
                .collect(),
        };

        let mut cells = Vec::new();
        let mut roi_offsets = Vec::new();
        for &l in &config.roi_levels {
            roi_offsets.push(cells.len());
            for y in 0..extents[l] {
                for x in 0..extents[l] {
                    cells.push(RoiCell {
                        level: l,
                        y,
                        x,
                        stride: config.stride(l) as f64,
                        anchor: config.anchor(l),
                    });
                }
            }
        }
        let mut level_offsets = Vec::new();
        let mut acc = 0;
        for &e in &extents {
            level_offsets.push(acc);
            acc += e * e;
        }

        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            neck,
            rpn,
            head,
            cells,
            level_offsets,
            roi_offsets,
        })
    }

    pub fn cells(&self) -> &[RoiCell] {
        &self.cells
    }

    pub fn num_rois(&self) -> usize {
        self.cells.len()
    }

    pub fn num_pyramid_cells(&self) -> usize {
        self.config.backbone.grid_extents().iter().map(|e| e * e).sum()
    }

    /// Pyramid features P0..P(L-1), finest first.
    pub fn neck_forward(&self, g: &mut Graph<'_>, image: &Matrix) -> Result<Vec<Var>> {
        let feats = self.backbone.forward(g, image)?;
        let n = feats.len();
        let mut lateral: Vec<Var> = feats
            .iter()
            .zip(&self.neck.laterals)
            .map(|(f, lat)| lat.forward(g, f.var))
            .collect::<Result<_>>()?;
        for l in (0..n - 1).rev() {
            let up = g.gather(lateral[l + 1], &self.neck.upsample[l])?;
            lateral[l] = g.add(lateral[l], up)?;
        }
        lateral
            .into_iter()
            .enumerate()
            .map(|(l, p)| {
                let cols = g.gather(p, &self.neck.conv3[l])?;
                self.neck.smooth[l].forward(g, cols)
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph<'_>, image: &Matrix) -> Result<DetectorVars> {
        let pyramid = self.neck_forward(g, image)?;

        let mut obj_parts = Vec::with_capacity(pyramid.len());
        for (l, &p) in pyramid.iter().enumerate() {
            let cols = g.gather(p, &self.neck.conv3[l])?;
            let h = self.rpn.conv.forward(g, cols)?;
            let h = g.relu(h);
            obj_parts.push(self.rpn.objectness.forward(g, h)?);
        }
        let objectness = g.concat_rows(&obj_parts)?;

        let mut crops = Vec::with_capacity(self.config.roi_levels.len());
        for (i, &l) in self.config.roi_levels.iter().enumerate() {
            crops.push(g.gather(pyramid[l], &self.head.crops[i])?);
        }
        let rois = g.concat_rows(&crops)?;
        let h = self.head.fc1.forward(g, rois)?;
        let h = g.relu(h);
        let h = self.head.fc2.forward(g, h)?;
        let h = g.relu(h);
        let cls = self.head.cls.forward(g, h)?;
        let reg = self.head.reg.forward(g, h)?;
        Ok(DetectorVars {
            cls,
            reg,
            objectness,
        })
    }

    /// Forward pass with every parameter frozen.
    pub fn predict(&self, image: &Matrix) -> Result<Predictions> {
        let mask = vec![false; self.store.len()];
        let mut g = Graph::new(&self.store, &mask);
        let v = self.forward(&mut g, image)?;
        Ok(Predictions {
            cls: g.value(v.cls).clone(),
            reg: g.value(v.reg).clone(),
            objectness: g.value(v.objectness).clone(),
        })
    }

    /// Pyramid level whose anchor best matches the box's long side.
    fn level_for(&self, b: &OrientedBox) -> usize {
        let long = b.w.max(b.h);
        *self
            .config
            .roi_levels
            .iter()
            .min_by(|&&x, &&y| {
                let dx = (long / self.config.anchor(x)).ln().abs();
                let dy = (long / self.config.anchor(y)).ln().abs();
                dx.total_cmp(&dy)
            })
            .expect("validated non-empty")
    }

    /// Each object is assigned to the cell containing its centre on the
    /// level whose anchor matches its size; the first object wins a contested cell.
    pub fn assign_targets(&self, sample: &SceneSample) -> Targets {
        let r = self.num_rois();
        let mut classes = vec![0usize; r];
        let mut deltas = Matrix::zeros(r, 5);
        let mut positives = Vec::new();
        let mut objectness = vec![0.0; self.num_pyramid_cells()];
        let mut assigned = Vec::with_capacity(sample.boxes.len());
        let extents = self.config.backbone.grid_extents();
        for (b, &label) in sample.boxes.iter().zip(&sample.labels) {
            let level = self.level_for(b);
            let li = self.config.roi_levels.iter().position(|&l| l == level).expect("roi level");
            let stride = self.config.stride(level) as f64;
            let e = extents[level];
            let cx = ((b.cx / stride).floor().max(0.0) as usize).min(e - 1);
            let cy = ((b.cy / stride).floor().max(0.0) as usize).min(e - 1);
            let row = self.roi_offsets[li] + cy * e + cx;
            if classes[row] != 0 {
                assigned.push(None);
                continue;
            }
            classes[row] = label + 1;
            let enc = self.cells[row].encode(b);
            deltas.row_mut(row).copy_from_slice(&enc);
            positives.push(row);
            objectness[self.level_offsets[level] + cy * e + cx] = 1.0;
            assigned.push(Some(row));
        }
        Targets {
            classes: Arc::new(classes),
            deltas: Arc::new(deltas),
            positives: Arc::new(positives),
            objectness: Arc::new(objectness),
            assigned,
        }
    }

    /// Objectness row of a RoI cell.
    pub fn objectness_row(&self, roi: usize) -> usize {
        let c = &self.cells[roi];
        let e = self.config.backbone.grid_extents()[c.level];
        self.level_offsets[c.level] + c.y * e + c.x
    }

    /// Row range of a RoI level inside the RoI rows.
    pub fn roi_level_range(&self, index: usize) -> std::ops::Range<usize> {
        let start = self.roi_offsets[index];
        let end = self.roi_offsets.get(index + 1).copied().unwrap_or(self.cells.len());
        start..end
    }
}
