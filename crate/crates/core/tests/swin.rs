mod common;

use common::{dense, fd_check, gelu, layer_norm_rows, randomize_b, seeded, softmax_row, weighted_sum};
use loradet_core::linalg::{Matrix, Rng};
use loradet_core::lora::LoraLinear;
use loradet_core::nn::{Graph, ParamStore};
use loradet_core::swin::*;

/// Effective weight `W + B·A` by explicit loops.
fn effective(store: &ParamStore, base: &str) -> Matrix {
    let w = store.value(store.require(&format!("{base}.w")).unwrap());
    let a = store.value(store.require(&format!("{base}.w.lora_A")).unwrap());
    let b = store.value(store.require(&format!("{base}.w.lora_B")).unwrap());
    Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        w.get(i, j) + (0..a.rows()).map(|r| b.get(i, r) * a.get(r, j)).sum::<f64>()
    })
}

fn param<'s>(store: &'s ParamStore, name: &str) -> &'s Matrix {
    store.value(store.require(name).unwrap())
}

/// Attention of `tokens` (one window, row-major inside the window) given
/// projections and an optional additive mask, by explicit loops.
#[allow(clippy::too_many_arguments)]
fn naive_window(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    table: &Matrix,
    heads: usize,
    m: usize,
    mask: Option<&dyn Fn(usize, usize) -> bool>,
) -> Matrix {
    let n = m * m;
    let c = q.cols();
    let dh = c / heads;
    let mut out = Matrix::zeros(n, c);
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    let dot: f64 = (0..dh).map(|d| q.get(i, h * dh + d) * k.get(j, h * dh + d)).sum();
                    let dy = (i / m) as isize - (j / m) as isize + m as isize - 1;
                    let dx = (i % m) as isize - (j % m) as isize + m as isize - 1;
                    let bias = table.get(dy as usize * (2 * m - 1) + dx as usize, h);
                    let penalty = match mask {
                        Some(f) if f(i, j) => -1e9,
                        _ => 0.0,
                    };
                    dot / (dh as f64).sqrt() + bias + penalty
                })
                .collect();
            let p = softmax_row(&scores);
            for d in 0..dh {
                let val: f64 = (0..n).map(|j| p[j] * v.get(j, h * dh + d)).sum();
                out.set(i, h * dh + d, val);
            }
        }
    }
    out
}

fn seeded_weights(dim: usize, heads: usize, m: usize, rank: usize, seed: u64) -> AttentionWeights {
    let mut rng = Rng::seed_from_u64(seed);
    let mut lora = |s: u64| {
        let w = seeded(dim, dim, 0.3, seed * 10 + s);
        let mut l = LoraLinear::init(w, rank, 0.02, &mut rng).unwrap();
        *l.b_mut() = seeded(dim, rank, 0.5, seed * 10 + s + 5);
        l
    };
    AttentionWeights {
        wq: lora(1),
        wk: seeded(dim, dim, 0.3, seed * 10 + 2),
        wv: lora(3),
        wo: seeded(dim, dim, 0.3, seed * 10 + 4),
        rel_bias_table: seeded((2 * m - 1) * (2 * m - 1), heads, 0.5, seed * 10 + 9),
        heads,
        window: m,
    }
}

#[test]
fn window_attention_matches_loop_oracle() {
    for seed in 0..5 {
        let (dim, heads, m) = (8, 2, 3);
        let w = seeded_weights(dim, heads, m, 2, seed);
        let x = seeded(m * m, dim, 1.0, 100 + seed);
        let got = window_attention(&x, &w).unwrap();

        let eff = |l: &LoraLinear| l.weight().add(&l.b().matmul(l.a()).unwrap()).unwrap();
        let q = dense(&x, &eff(&w.wq), None);
        let k = dense(&x, &w.wk, None);
        let v = dense(&x, &eff(&w.wv), None);
        let attn = naive_window(&q, &k, &v, &w.rel_bias_table, heads, m, None);
        let want = dense(&attn, &w.wo, None);
        assert!(got.max_abs_diff(&want) <= 1e-12 * want.max_abs().max(1.0), "seed {seed}");
    }
}

#[test]
fn window_attention_rejects_wrong_token_count() {
    let w = seeded_weights(8, 2, 3, 2, 1);
    assert!(window_attention(&Matrix::zeros(8, 8), &w).is_err());
}

#[test]
fn relative_bias_is_shared_by_equal_offsets() {
    let m = 3;
    let idx = relative_position_index(m);
    let n = m * m;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    let off = |a: usize, b: usize| ((a / m) as isize - (b / m) as isize, (a % m) as isize - (b % m) as isize);
                    if off(i, j) == off(k, l) {
                        assert_eq!(idx[i * n + j], idx[k * n + l]);
                    }
                }
            }
        }
    }
}

fn build_stage(dim: usize, grid: usize, window: usize, seed: u64) -> (ParamStore, SwinStage) {
    let mut store = ParamStore::new();
    let mut rng = Rng::seed_from_u64(seed);
    let cfg = StageConfig { dim, depth: 2, heads: 2, window };
    let stage = SwinStage::register(&mut store, "s", &cfg, (grid, grid), false, 2, 2, &mut rng).unwrap();
    randomize_b(&mut store, seed + 7, 0.3);
    // non-trivial norm parameters
    let mut r = Rng::seed_from_u64(seed + 11);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_owned();
        if name.ends_with(".ln1.g") || name.ends_with(".ln2.g") || name.ends_with(".ln1.b") {
            for v in store.value_mut(id).data_mut() {
                *v += 0.2 * r.standard_normal();
            }
        }
    }
    (store, stage)
}

/// One block, written directly from the definition.
fn naive_block(store: &ParamStore, name: &str, x: &Matrix, grid: usize, m: usize, shift: usize) -> Matrix {
    let c = x.cols();
    let h = layer_norm_rows(x, param(store, &format!("{name}.ln1.g")), param(store, &format!("{name}.ln1.b")));
    // rolled[y][x] = h[(y+s) mod H][(x+s) mod W]
    let src = |y: usize, xx: usize| ((y + shift) % grid) * grid + (xx + shift) % grid;
    let wrapped = |y: usize, xx: usize| ((y + shift >= grid) as u8, (xx + shift >= grid) as u8);
    let q_w = effective(store, &format!("{name}.attn.q"));
    let v_w = effective(store, &format!("{name}.attn.v"));
    let table = param(store, &format!("{name}.attn.rel_bias"));
    let mut attn_out = Matrix::zeros(grid * grid, c);
    for wy in 0..grid / m {
        for wx in 0..grid / m {
            let cells: Vec<(usize, usize)> = (0..m * m).map(|t| (wy * m + t / m, wx * m + t % m)).collect();
            let tokens = Matrix::from_fn(m * m, c, |t, j| h.get(src(cells[t].0, cells[t].1), j));
            let q = dense(&tokens, &q_w, Some(param(store, &format!("{name}.attn.q.b"))));
            let k = dense(&tokens, param(store, &format!("{name}.attn.k.w")), Some(param(store, &format!("{name}.attn.k.b"))));
            let v = dense(&tokens, &v_w, Some(param(store, &format!("{name}.attn.v.b"))));
            let masked = |i: usize, j: usize| {
                shift > 0 && wrapped(cells[i].0, cells[i].1) != wrapped(cells[j].0, cells[j].1)
            };
            let a = naive_window(&q, &k, &v, table, 2, m, Some(&masked));
            let o = dense(&a, param(store, &format!("{name}.attn.proj.w")), Some(param(store, &format!("{name}.attn.proj.b"))));
            for (t, &(y, xx)) in cells.iter().enumerate() {
                let dst = src(y, xx);
                for j in 0..c {
                    attn_out.set(dst, j, o.get(t, j));
                }
            }
        }
    }
    let x1 = x.add(&attn_out).unwrap();
    let n2 = layer_norm_rows(&x1, param(store, &format!("{name}.ln2.g")), param(store, &format!("{name}.ln2.b")));
    let f1 = dense(&n2, param(store, &format!("{name}.fc1.w")), Some(param(store, &format!("{name}.fc1.b")))).map(gelu);
    let f2 = dense(&f1, param(store, &format!("{name}.fc2.w")), Some(param(store, &format!("{name}.fc2.b"))));
    x1.add(&f2).unwrap()
}

#[test]
fn block_pair_matches_replay_oracle() {
    for (grid, window, seed) in [(8, 4, 1), (6, 3, 2), (8, 2, 3)] {
        let dim = 8;
        let (store, stage) = build_stage(dim, grid, window, seed);
        let x = seeded(grid * grid, dim, 1.0, 40 + seed);
        let got = swin_block_pair_forward(&store, &stage, &FeatureMap::new(grid, grid, x.clone()).unwrap()).unwrap();
        let shift = window / 2;
        let y = naive_block(&store, "s.b0", &x, grid, window, 0);
        let want = naive_block(&store, "s.b1", &y, grid, window, shift);
        let err = got.data.max_abs_diff(&want) / want.max_abs();
        assert!(err <= 1e-12, "grid {grid} window {window}: {err:e}");
    }
}

#[test]
fn shifted_block_differs_from_unshifted() {
    let (store, stage) = build_stage(8, 8, 4, 5);
    let x = seeded(64, 8, 1.0, 6);
    let got = swin_block_pair_forward(&store, &stage, &FeatureMap::new(8, 8, x.clone()).unwrap()).unwrap();
    let y = naive_block(&store, "s.b0", &x, 8, 4, 0);
    let unshifted = naive_block(&store, "s.b1", &y, 8, 4, 0);
    assert!(got.data.max_abs_diff(&unshifted) > 1e-6);
}

#[test]
fn window_clamps_to_small_grids() {
    let geo = StageGeometry::new(2, 2, 4).unwrap();
    assert_eq!((geo.window, geo.shift), (2, 0));
    let geo = StageGeometry::new(8, 8, 4).unwrap();
    assert_eq!((geo.window, geo.shift), (4, 2));
}

#[test]
fn stage_gradients_match_finite_differences() {
    let (grid, dim) = (4, 8);
    let (store, stage) = build_stage(dim, grid, 2, 9);
    let x = seeded(grid * grid, dim, 1.0, 10);
    let r = seeded(grid * grid, dim, 1.0, 12);
    let mask = vec![true; store.len()];
    let loss = |s: &ParamStore, mask: &[bool]| {
        let mut g = Graph::new(s, mask);
        let xv = g.constant(x.clone());
        let y = stage.forward_blocks(&mut g, xv).unwrap();
        let l = weighted_sum(&mut g, y, &r);
        (g.value(l).get(0, 0), if mask.iter().any(|&m| m) { Some(g.backward(l).unwrap()) } else { None })
    };
    let (_, grads) = loss(&store, &mask);
    let grads = grads.unwrap();
    let ids: Vec<_> = store.ids().collect();
    let frozen = vec![false; store.len()];
    let (worst, checked) = fd_check(&store, &ids, &grads, 1e-5, 1e-4, |s| loss(s, &frozen).0);
    assert_eq!(checked, store.ids().map(|id| store.value(id).len()).sum::<usize>());
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn patch_merging_matches_gather_oracle() {
    let (h, w, c) = (4, 6, 3);
    let x = seeded(h * w, c, 1.0, 3);
    let red = seeded(2 * c, 4 * c, 0.5, 4);
    let got = patch_merging(&FeatureMap::new(h, w, x.clone()).unwrap(), &red).unwrap();
    assert_eq!((got.height, got.width, got.channels()), (2, 3, 2 * c));
    for y in 0..2 {
        for xx in 0..3 {
            let mut cat = Vec::new();
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                cat.extend_from_slice(x.row((2 * y + dy) * w + 2 * xx + dx));
            }
            for o in 0..2 * c {
                let want: f64 = (0..4 * c).map(|k| red.get(o, k) * cat[k]).sum();
                assert!((got.data.get(y * 3 + xx, o) - want).abs() < 1e-12);
            }
        }
    }
    assert!(patch_merging(&FeatureMap::new(3, 4, seeded(12, c, 1.0, 1)).unwrap(), &red).is_err());
}

#[test]
fn cyclic_shift_round_trips() {
    let f = FeatureMap::new(6, 6, seeded(36, 2, 1.0, 8)).unwrap();
    let there = cyclic_shift(&f, -2, -2);
    assert_eq!(there.token(0, 0), f.token(2, 2));
    let back = cyclic_shift(&there, 2, 2);
    assert_eq!(back.data, f.data);
}

#[test]
fn partition_then_unpartition_is_identity() {
    let f = FeatureMap::new(8, 4, seeded(32, 3, 1.0, 2)).unwrap();
    let windows = window_partition(&f, 2).unwrap();
    assert_eq!(windows.len(), 8);
    assert_eq!(windows[1].row(0), f.token(0, 2));
    let back = window_unpartition(&windows, 8, 4, 2).unwrap();
    assert_eq!(back.data, f.data);
}

#[test]
fn toy_backbone_shapes_and_adapter_neutrality() {
    let cfg = BackboneConfig::toy();
    let mut store = ParamStore::new();
    let bb = Backbone::register(&mut store, &cfg, &mut Rng::seed_from_u64(4)).unwrap();
    let img = seeded(64, 64, 1.0, 5);
    let feats = backbone_forward(&store, &bb, &img).unwrap();
    let shapes: Vec<_> = feats.iter().map(|f| (f.height, f.width, f.channels())).collect();
    assert_eq!(shapes, vec![(16, 16, 16), (8, 8, 32), (4, 4, 64), (2, 2, 128)]);

    // zero-initialized adapters change nothing, merged or not
    let mut merged = store.clone();
    merged.merge_adapters().unwrap();
    let again = backbone_forward(&merged, &bb, &img).unwrap();
    for (a, b) in feats.iter().zip(&again) {
        assert_eq!(a.data, b.data);
    }

    assert!(backbone_forward(&store, &bb, &seeded(32, 32, 1.0, 1)).is_err());
}

#[test]
fn merged_backbone_matches_adapter_form() {
    let mut cfg = BackboneConfig::toy();
    cfg.image_size = 32;
    let mut store = ParamStore::new();
    let bb = Backbone::register(&mut store, &cfg, &mut Rng::seed_from_u64(8)).unwrap();
    randomize_b(&mut store, 3, 0.2);
    let img = seeded(32, 32, 1.0, 2);
    let adapter = backbone_forward(&store, &bb, &img).unwrap();
    store.merge_adapters().unwrap();
    let merged = backbone_forward(&store, &bb, &img).unwrap();
    for (a, b) in adapter.iter().zip(&merged) {
        assert!(a.data.rel_frobenius_diff(&b.data) < 1e-12);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = BackboneConfig::toy();
    cfg.stages[1].depth = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = BackboneConfig::toy();
    cfg.image_size = 60;
    assert!(cfg.validate().is_err());
    let mut cfg = BackboneConfig::toy();
    cfg.lora_ranks = vec![4, 4];
    assert!(cfg.validate().is_err());
}
