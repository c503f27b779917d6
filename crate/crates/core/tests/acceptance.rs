//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::time::Instant;

use common::{fd_check, randomize_b, seeded, weighted_sum};
use loradet_core::config::ExperimentConfig;
use loradet_core::detector::{
    apply_policy, evaluate, gradcheck, gradcheck_point, synth_dataset, synth_sample, train, DetectorConfig,
    DetectorModel, Domain, FinetunePolicy, OptimizerConfig, TrainConfig,
};
use loradet_core::experiment::{finetune, pretrain, Splits};
use loradet_core::linalg::{gaussian_matrix, svd, ErrorMetric, Matrix, Rng};
use loradet_core::lora::{param_budget, LoraLinear, DEFAULT_INIT_STDDEV};
use loradet_core::nn::{Graph, ParamStore};
use loradet_core::package::{
    apply_package, base_archive, build_package, load_base, uplink_time, verify_archive, TensorArchive, UplinkBudget,
};
use loradet_core::rank::{analyze_matrix, select_rank, RankCriterion};
use loradet_core::swin::{StageConfig, SwinStage};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn param_ratio_table() -> Outcome {
    let rows = [
        (96, 96, 48, "1"),
        (192, 192, 48, "0.5"),
        (384, 384, 48, "0.25"),
        (768, 768, 48, "0.125"),
        (1024, 12544, 64, "0.0676"),
        (1024, 1024, 16, "0.03125"),
    ];
    let mut shown = Vec::new();
    for (d, k, r, printed) in rows {
        let p = param_budget(d, k, r).map_err(|e| e.to_string())?.compressed_ratio;
        let decimals = printed.split('.').nth(1).map_or(0, str::len);
        let rounded = format!("{p:.decimals$}");
        let want: f64 = printed.parse().unwrap();
        check(rounded.parse::<f64>().unwrap() == want, format!("({d},{k},{r}) gives {p}, printed {printed}"))?;
        shown.push(rounded);
    }
    Ok(shown.join(" / "))
}

fn neutrality_and_merge() -> Outcome {
    let mut worst_neutral = 0f64;
    let mut worst_merge = 0f64;
    for seed in 0..100u64 {
        let mut rng = Rng::seed_from_u64(seed);
        let (d, k) = (2 + rng.below(30), 2 + rng.below(30));
        let r = 1 + rng.below(d.min(k));
        let w = gaussian_matrix(d, k, 1.0, &mut rng).unwrap();
        let x = gaussian_matrix(k, 5, 1.0, &mut rng).unwrap();
        let fresh = LoraLinear::init(w.clone(), r, DEFAULT_INIT_STDDEV, &mut rng).unwrap();
        worst_neutral = worst_neutral.max(fresh.forward(&x).unwrap().max_abs_diff(&w.matmul(&x).unwrap()));

        let a = gaussian_matrix(r, k, 0.5, &mut rng).unwrap();
        let b = gaussian_matrix(d, r, 0.5, &mut rng).unwrap();
        let mut layer = LoraLinear::from_parts(w, a, b).unwrap();
        let adapter_form = layer.forward(&x).unwrap();
        let merged = layer.merge().unwrap().clone();
        worst_merge = worst_merge.max(adapter_form.rel_frobenius_diff(&merged.matmul(&x).unwrap()));
    }
    check(worst_neutral <= 1e-15, format!("fresh adapter deviates by {worst_neutral:e}"))?;
    check(worst_merge <= 1e-12, format!("merged form deviates by {worst_merge:e}"))?;
    Ok(format!("neutral max-abs {worst_neutral:e}, merge rel {worst_merge:e} over 100 layers"))
}

fn lora_layer_gradients() -> Result<f64, String> {
    let mut rng = Rng::seed_from_u64(21);
    let w = gaussian_matrix(8, 6, 1.0, &mut rng).unwrap();
    let a = gaussian_matrix(3, 6, 0.7, &mut rng).unwrap();
    let b = gaussian_matrix(8, 3, 0.7, &mut rng).unwrap();
    let x = gaussian_matrix(6, 4, 1.0, &mut rng).unwrap();
    let up = gaussian_matrix(8, 4, 1.0, &mut rng).unwrap();
    let loss = |a: &Matrix, b: &Matrix| -> f64 {
        let y = LoraLinear::from_parts(w.clone(), a.clone(), b.clone()).unwrap().forward(&x).unwrap();
        y.data().iter().zip(up.data()).map(|(p, q)| p * q).sum()
    };
    let grads = LoraLinear::from_parts(w.clone(), a.clone(), b.clone()).unwrap().backward(&x, &up).unwrap();
    let h = 1e-5;
    let mut worst = 0f64;
    for (which, analytic) in [(0, &grads.grad_a), (1, &grads.grad_b)] {
        for i in 0..analytic.len() {
            let (mut ap, mut bp, mut am, mut bm) = (a.clone(), b.clone(), a.clone(), b.clone());
            if which == 0 {
                ap.data_mut()[i] += h;
                am.data_mut()[i] -= h;
            } else {
                bp.data_mut()[i] += h;
                bm.data_mut()[i] -= h;
            }
            let fd = (loss(&ap, &bp) - loss(&am, &bm)) / (2.0 * h);
            let an = analytic.data()[i];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-4));
        }
    }
    Ok(worst)
}

fn stage_gradients() -> Result<f64, String> {
    let (grid, dim, seed) = (4, 8, 9);
    let mut store = ParamStore::new();
    let cfg = StageConfig { dim, depth: 2, heads: 2, window: 2 };
    let stage = SwinStage::register(&mut store, "s", &cfg, (grid, grid), false, 2, 2, &mut Rng::seed_from_u64(seed))
        .map_err(|e| e.to_string())?;
    randomize_b(&mut store, seed + 7, 0.3);
    let x = seeded(grid * grid, dim, 1.0, 10);
    let r = seeded(grid * grid, dim, 1.0, 12);
    let all = vec![true; store.len()];
    let none = vec![false; store.len()];
    let run = |s: &ParamStore, mask: &[bool]| {
        let mut g = Graph::new(s, mask);
        let xv = g.constant(x.clone());
        let y = stage.forward_blocks(&mut g, xv).unwrap();
        let l = weighted_sum(&mut g, y, &r);
        let value = g.value(l).get(0, 0);
        (value, mask.iter().any(|&m| m).then(|| g.backward(l).unwrap()))
    };
    let grads = run(&store, &all).1.unwrap();
    let ids: Vec<_> = store.ids().collect();
    let (worst, checked) = fd_check(&store, &ids, &grads, 1e-5, 1e-4, |s| run(s, &none).0);
    check(checked == store.ids().map(|id| store.value(id).len()).sum::<usize>(), "stage scalars skipped")?;
    Ok(worst)
}

fn gradient_suite() -> Outcome {
    let layer = lora_layer_gradients()?;
    check(layer <= 1e-6, format!("LoRA layer relative error {layer:e}"))?;
    let stage = stage_gradients()?;
    check(stage <= 1e-4, format!("Swin stage relative error {stage:e}"))?;
    let mut worst = 0f64;
    let mut scalars = 0;
    for policy in FinetunePolicy::ALL {
        let mut model = DetectorModel::new(&DetectorConfig::tiny(), 5).unwrap();
        gradcheck_point(&mut model, 5, 0.1).unwrap();
        let sample = synth_sample(2, Domain::D1, 0, 16);
        let mask = apply_policy(&model.store, policy).unwrap();
        let report = gradcheck(&model, &mask.mask, &sample, 1e-5).map_err(|e| e.to_string())?;
        check(report.checked == mask.trainable, format!("{policy}: checked {} of {}", report.checked, mask.trainable))?;
        check(report.max_rel_error <= 1e-4, format!("{policy}: relative error {:e} at {:?}", report.max_rel_error, report.worst))?;
        worst = worst.max(report.max_rel_error);
        scalars += report.checked;
    }
    Ok(format!("layer {layer:.1e}, stage {stage:.1e}, detector {worst:.1e} over {scalars} scalars"))
}

/// Orthonormal basis of a random `r`-dimensional subspace of R^d.
fn random_basis(d: usize, r: usize, rng: &mut Rng) -> Matrix {
    let g = gaussian_matrix(d, r, 1.0, rng).unwrap();
    let mut q = Matrix::zeros(d, r);
    for j in 0..r {
        let mut v = g.column(j);
        for _ in 0..2 {
            for p in 0..j {
                let dot: f64 = (0..d).map(|i| q.get(i, p) * v[i]).sum();
                for (i, vi) in v.iter_mut().enumerate() {
                    *vi -= dot * q.get(i, p);
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, vi) in v.iter().enumerate() {
            q.set(i, j, vi / norm);
        }
    }
    q
}

fn svd_suite() -> Outcome {
    let mut worst_recon = 0f64;
    let mut worst_tail = 0f64;
    let mut closest = f64::INFINITY;
    for seed in 0..100u64 {
        let mut rng = Rng::derive(seed, "acceptance-svd", 0);
        let (d, k) = (2 + rng.below(63), 2 + rng.below(63));
        let w = gaussian_matrix(d, k, 1.0, &mut rng).unwrap();
        let s = svd(&w).map_err(|e| e.to_string())?;
        worst_recon = worst_recon.max(s.reconstruct(s.max_rank()).unwrap().rel_frobenius_diff(&w));
        let r = 1 + rng.below(s.max_rank() - 1);
        let best = w.sub(&s.reconstruct(r).unwrap()).unwrap().frobenius_norm();
        let tail = s.tail_error(r);
        worst_tail = worst_tail.max((best - tail).abs() / w.frobenius_norm().max(1.0));
        for _ in 0..100 {
            // best approximation within a random rank-r column space
            let q = random_basis(d, r, &mut rng);
            let alt = q.matmul(&q.matmul_tn(&w).unwrap()).unwrap();
            let err = w.sub(&alt).unwrap().frobenius_norm();
            check(best <= err, format!("seed {seed}: random rank-{r} alternative wins ({err} < {best})"))?;
            closest = closest.min(err / best.max(1e-300));
        }
    }
    check(worst_recon <= 1e-8, format!("reconstruction error {worst_recon:e}"))?;
    check(worst_tail <= 1e-9, format!("tail identity off by {worst_tail:e}"))?;
    Ok(format!(
        "reconstruction {worst_recon:.1e}, tail {worst_tail:.1e}, 10000/10000 alternatives beaten (closest ratio {closest:.3})"
    ))
}

fn rank_fidelity() -> Outcome {
    for (n, q, seed) in [(20, 3, 1), (32, 5, 2), (48, 1, 3), (64, 8, 4)] {
        let w = seeded(n, q, 1.0, seed).matmul(&seeded(q, n, 1.0, seed + 100)).unwrap();
        let ranks: Vec<usize> = (1..=n).collect();
        let curve = analyze_matrix("planted", &w, &ranks, ErrorMetric::Frobenius).map_err(|e| e.to_string())?;
        for pt in curve.points.iter().filter(|p| p.r >= q) {
            check(pt.abs_error <= 1e-9, format!("planted rank {q}: error {:e} at r={}", pt.abs_error, pt.r))?;
        }
        let sel = select_rank(&curve, RankCriterion::ErrorTolerance(1e-6)).map_err(|e| e.to_string())?;
        check(sel.rank == q, format!("planted rank {q}: selected {}", sel.rank))?;
    }
    let mut min_half = f64::INFINITY;
    for (d, k, seed) in [(64, 64, 5), (48, 96, 6), (96, 32, 7)] {
        let w = seeded(d, k, 1.0, seed);
        let ranks: Vec<usize> = (1..=d.min(k)).collect();
        let curve = analyze_matrix("gaussian", &w, &ranks, ErrorMetric::Frobenius).map_err(|e| e.to_string())?;
        check(curve.points.windows(2).all(|p| p[1].error < p[0].error), format!("{d}x{k}: curve not strictly decreasing"))?;
        let half = curve.points[d.min(k) / 2 - 1].error;
        check(half > 0.1, format!("{d}x{k}: relative error {half} at half rank"))?;
        min_half = min_half.min(half);
    }
    Ok(format!("4 planted ranks recovered, Gaussian half-rank error >= {min_half:.3}"))
}

fn packaging_integrity() -> Outcome {
    let data = synth_dataset(2, Domain::D2, 4, 16).unwrap();
    for policy in FinetunePolicy::ALL {
        let mut model = DetectorModel::new(&DetectorConfig::tiny(), 2).unwrap();
        let before = model.store.clone();
        let mask = apply_policy(&model.store, policy).unwrap();
        let tc = TrainConfig { optimizer: OptimizerConfig { lr: 1e-3, ..Default::default() }, batch_size: 4, epochs: 1, seed: 1 };
        train(&mut model, &mask, &data, &tc).map_err(|e| e.to_string())?;
        for id in before.ids() {
            if !mask.mask[id.0] {
                check(before.value(id) == model.store.value(id), format!("{policy}: frozen {} changed", before.name(id)))?;
            }
        }
    }

    let toy = DetectorModel::new(&DetectorConfig::toy(), 4).unwrap();
    let full_bytes = base_archive(&toy.store).unwrap().byte_len() as f64;
    for policy in FinetunePolicy::ALL {
        let mask = apply_policy(&toy.store, policy).unwrap();
        let pkg = build_package(&toy.store, &mask).map_err(|e| e.to_string())?;
        let mut got: Vec<&str> = pkg.names().collect();
        let mut want = mask.trainable_names(&toy.store);
        got.sort_unstable();
        want.sort_unstable();
        check(got == want, format!("{policy}: package set differs from trainable set"))?;
    }
    let mask = apply_policy(&toy.store, FinetunePolicy::LoraDetHybrid).unwrap();
    let byte_ratio = build_package(&toy.store, &mask).unwrap().byte_len() as f64 / full_bytes;
    let ratio_dev = (byte_ratio - mask.ratio()).abs() / mask.ratio();
    check(ratio_dev <= 0.01, format!("byte ratio {byte_ratio} vs parameter ratio {}", mask.ratio()))?;

    let mut ground = toy.clone();
    let base = base_archive(&ground.store).unwrap();
    load_base(&mut ground.store, &base).unwrap();
    let tc = TrainConfig { optimizer: OptimizerConfig { lr: 1e-2, ..Default::default() }, batch_size: 2, epochs: 1, seed: 4 };
    train(&mut ground, &mask, &synth_dataset(4, Domain::D2, 4, 64).unwrap(), &tc).map_err(|e| e.to_string())?;
    let bytes = build_package(&ground.store, &mask).unwrap().to_bytes();
    let pkg = TensorArchive::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let mut onboard = toy.clone();
    load_base(&mut onboard.store, &apply_package(&base, &pkg).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut worst = 0f64;
    for i in 0..100 {
        let img = synth_sample(1000, if i % 2 == 0 { Domain::D1 } else { Domain::D2 }, i, 64).image;
        let a = ground.predict(&img).unwrap();
        let b = onboard.predict(&img).unwrap();
        for (x, y) in [(&a.cls, &b.cls), (&a.reg, &b.reg), (&a.objectness, &b.objectness)] {
            worst = worst.max(y.max_abs_diff(x) / x.max_abs().max(1e-12));
        }
    }
    check(worst <= 1e-6, format!("onboard model deviates by {worst:e}"))?;

    // every bit of a small package, plus random bits of the full one
    let small = build_package(&DetectorModel::new(&DetectorConfig::tiny(), 3).unwrap().store, &{
        let m = DetectorModel::new(&DetectorConfig::tiny(), 3).unwrap();
        apply_policy(&m.store, FinetunePolicy::LoraDet).unwrap()
    })
    .unwrap()
    .to_bytes();
    let mut flips = 0;
    for i in 0..small.len() {
        for bit in 0..8 {
            let mut bad = small.clone();
            bad[i] ^= 1 << bit;
            check(verify_archive(&bad).is_err(), format!("flip at byte {i} bit {bit} undetected"))?;
            flips += 1;
        }
    }
    let mut rng = Rng::seed_from_u64(77);
    for _ in 0..2000 {
        let mut bad = bytes.clone();
        let i = rng.below(bad.len());
        bad[i] ^= 1 << rng.below(8);
        check(verify_archive(&bad).is_err(), format!("flip in byte {i} of the toy package undetected"))?;
        flips += 1;
    }
    Ok(format!(
        "freeze contract x{} policies, byte/param deviation {:.2}%, round trip {worst:.1e}, {flips} bit flips detected",
        FinetunePolicy::ALL.len(),
        100.0 * ratio_dev
    ))
}

fn finetune_efficacy() -> Outcome {
    let policies = [
        FinetunePolicy::FullFinetune,
        FinetunePolicy::LoraDetHybrid,
        FinetunePolicy::HeadOnly,
        FinetunePolicy::BackboneOnly,
    ];
    // columns: Pretrained, then `policies`
    let mut sums = [0f64; 5];
    let mut hybrid_ratio = 0.0;
    let seeds = [1u64, 2, 3];
    for &seed in &seeds {
        let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        let splits = Splits::generate(&cfg).map_err(|e| e.to_string())?;
        let (base, _) = pretrain(&cfg, &splits.pretrain).map_err(|e| e.to_string())?;
        let mut row = vec![evaluate(&base, &splits.test, 0.5).map_err(|e| e.to_string())?.ap50];
        for policy in policies {
            let (model, mask, _) = finetune(&cfg, &base, policy, &splits.finetune).map_err(|e| e.to_string())?;
            if policy == FinetunePolicy::LoraDetHybrid {
                hybrid_ratio = mask.ratio();
            }
            row.push(evaluate(&model, &splits.test, 0.5).map_err(|e| e.to_string())?.ap50);
        }
        println!(
            "    seed {seed}: Pretrained {:.3}  Full {:.3}  hybrid {:.3}  HeadOnly {:.3}  BackboneOnly {:.3}",
            row[0], row[1], row[2], row[3], row[4]
        );
        for (s, v) in sums.iter_mut().zip(&row) {
            *s += v;
        }
    }
    let n = seeds.len() as f64;
    let [pre, full, hybrid, head, backbone] = sums.map(|s| s / n);
    let recovery = (hybrid - pre) / (full - pre);
    let summary = format!(
        "mean AP50 Pretrained {pre:.3}, Full {full:.3}, hybrid {hybrid:.3} ({:.1}% of parameters, {:.0}% of gap), HeadOnly {head:.3}, BackboneOnly {backbone:.3}",
        100.0 * hybrid_ratio,
        100.0 * recovery
    );
    check(hybrid_ratio <= 0.15, format!("{summary}: hybrid trains too much"))?;
    check(full > pre && recovery >= 0.7, format!("{summary}: recovery below 70%"))?;
    check(head < hybrid && backbone < hybrid, format!("{summary}: a baseline matches the hybrid policy"))?;
    Ok(summary)
}

fn uplink_arithmetic() -> Outcome {
    let budget = UplinkBudget::new(1e6, 1.0).map_err(|e| e.to_string())?;
    let lora = uplink_time(5_520_000 * 4, &budget);
    let full = uplink_time(44_760_000 * 4, &budget);
    check((lora - 176.64).abs() < 1e-9, format!("LoRA-Det upload {lora} s"))?;
    check((full - 1432.32).abs() < 1e-9, format!("full upload {full} s"))?;
    let ratio = lora / full;
    check(format!("{ratio:.4}") == "0.1233", format!("ratio {ratio}"))?;
    Ok(format!("{lora:.2} s vs {full:.2} s, ratio {ratio:.4}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("compressed parameter ratios", param_ratio_table),
        ("LoRA neutrality and merge", neutrality_and_merge),
        ("gradient suite", gradient_suite),
        ("SVD and optimal truncation", svd_suite),
        ("rank-analysis fidelity", rank_fidelity),
        ("policy and packaging integrity", packaging_integrity),
        ("fine-tuning efficacy", finetune_efficacy),
        ("uplink arithmetic", uplink_arithmetic),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} [{secs:.1} s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
