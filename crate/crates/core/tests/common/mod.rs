#![allow(dead_code)]

use loradet_core::autograd::{Gradients, ParamId};
use loradet_core::linalg::{gaussian_matrix, Matrix, Rng};
use loradet_core::nn::{Graph, ParamRole, ParamStore};

pub fn seeded(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix {
    gaussian_matrix(rows, cols, std, &mut Rng::seed_from_u64(seed)).unwrap()
}

/// Replaces every LoRA `B` in the store with seeded noise.
pub fn randomize_b(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.info(id).role == ParamRole::LoraB).collect();
    for id in ids {
        let (r, c) = store.value(id).shape();
        *store.value_mut(id) = gaussian_matrix(r, c, std, &mut rng).unwrap();
    }
}

pub fn layer_norm_rows(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
    let c = x.cols();
    Matrix::from_fn(x.rows(), c, |i, j| {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        (row[j] - mean) / (var + 1e-5).sqrt() * gamma.get(0, j) + beta.get(0, j)
    })
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// `x·Wᵀ + b` with explicit loops.
pub fn dense(x: &Matrix, w: &Matrix, b: Option<&Matrix>) -> Matrix {
    Matrix::from_fn(x.rows(), w.rows(), |i, o| {
        let mut acc = b.map_or(0.0, |b| b.get(0, o));
        for k in 0..x.cols() {
            acc += x.get(i, k) * w.get(o, k);
        }
        acc
    })
}

pub fn softmax_row(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Central-difference check of `loss` against `analytic` for every listed
/// parameter; returns the worst `|a-n| / max(|a|, |n|, floor)`.
pub fn fd_check(
    store: &ParamStore,
    ids: &[ParamId],
    analytic: &Gradients,
    h: f64,
    floor: f64,
    loss: impl Fn(&ParamStore) -> f64,
) -> (f64, usize) {
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for &id in ids {
        for i in 0..probe.value(id).len() {
            let orig = probe.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let plus = loss(&probe);
            probe.value_mut(id).data_mut()[i] = orig - h;
            let minus = loss(&probe);
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
            checked += 1;
        }
    }
    (worst, checked)
}

/// `Σ (y ⊙ r)` as a 1×1 graph value.
pub fn weighted_sum(g: &mut Graph<'_>, y: loradet_core::autograd::Var, r: &Matrix) -> loradet_core::autograd::Var {
    let rv = g.constant(r.clone());
    let prod = g.mul(y, rv).unwrap();
    let (n, c) = r.shape();
    let ones_c = g.constant(Matrix::filled(c, 1, 1.0));
    let ones_n = g.constant(Matrix::filled(1, n, 1.0));
    let col = g.matmul(prod, ones_c).unwrap();
    g.matmul(ones_n, col).unwrap()
}
