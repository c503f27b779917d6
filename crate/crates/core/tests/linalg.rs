mod common;

use common::seeded;
use loradet_core::linalg::{approx_error, gaussian_matrix, svd, ErrorMetric, Matrix, Rng};
use proptest::prelude::*;

fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop_exactly() {
    let a = seeded(5, 4, 1.0, 1);
    let b = seeded(4, 3, 1.0, 2);
    assert_eq!(a.matmul(&b).unwrap(), triple_loop(&a, &b));
    let a = seeded(13, 9, 1.0, 3);
    let b = seeded(9, 7, 1.0, 4);
    assert_eq!(a.matmul(&b).unwrap(), triple_loop(&a, &b));
    assert_eq!(a.transpose().matmul_tn(&b).unwrap(), triple_loop(&a, &b));
    assert_eq!(a.matmul_nt(&b.transpose()).unwrap(), triple_loop(&a, &b));
}

#[test]
fn svd_small_cases() {
    assert_eq!(svd(&Matrix::identity(3)).unwrap().sigma, vec![1.0, 1.0, 1.0]);
    let s = svd(&Matrix::from_diag(&[1.0, 3.0, 2.0])).unwrap();
    assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
    let w = seeded(8, 5, 1.0, 5);
    let s = svd(&w).unwrap();
    assert!(s.reconstruct(5).unwrap().rel_frobenius_diff(&w) <= 1e-10);
    assert!(s.sigma.windows(2).all(|p| p[0] >= p[1]));
}

#[test]
fn truncation_errors() {
    let diag = Matrix::from_diag(&[3.0, 2.0, 1.0]);
    let s = svd(&diag).unwrap();
    let r2 = s.reconstruct(2).unwrap();
    assert!((approx_error(&diag, &r2, ErrorMetric::Frobenius).unwrap() - 1.0).abs() < 1e-12);
    assert!((approx_error(&diag, &r2, ErrorMetric::Spectral).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(approx_error(&diag, &diag, ErrorMetric::Frobenius).unwrap(), 0.0);

    let w = seeded(6, 6, 1.0, 6);
    let s = svd(&w).unwrap();
    let err = approx_error(&w, &s.reconstruct(3).unwrap(), ErrorMetric::Frobenius).unwrap();
    let tail = (s.sigma[3].powi(2) + s.sigma[4].powi(2) + s.sigma[5].powi(2)).sqrt();
    assert!((err - tail).abs() <= 1e-9 * tail);
}

#[test]
fn frobenius_error_matches_elementwise_oracle() {
    let a = seeded(7, 4, 1.0, 7);
    let b = seeded(7, 4, 1.0, 8);
    let mut acc = 0.0;
    for i in 0..7 {
        for j in 0..4 {
            acc += (a.get(i, j) - b.get(i, j)).powi(2);
        }
    }
    let got = approx_error(&a, &b, ErrorMetric::Frobenius).unwrap();
    assert!((got - acc.sqrt()).abs() <= 1e-12 * acc.sqrt());
    assert!(approx_error(&a, &seeded(4, 7, 1.0, 1), ErrorMetric::Frobenius).is_err());
}

#[test]
fn gaussian_init_statistics() {
    let m = gaussian_matrix(100, 100, 0.02, &mut Rng::seed_from_u64(11)).unwrap();
    let mean = m.data().iter().sum::<f64>() / m.len() as f64;
    assert!(mean.abs() <= 3.0 * 0.02 / 100.0);
    assert_eq!(m, gaussian_matrix(100, 100, 0.02, &mut Rng::seed_from_u64(11)).unwrap());
}

#[test]
fn truncation_beats_random_alternatives() {
    let w = seeded(12, 9, 1.0, 12);
    let s = svd(&w).unwrap();
    let mut rng = Rng::seed_from_u64(13);
    for r in 1..9 {
        let best = approx_error(&w, &s.reconstruct(r).unwrap(), ErrorMetric::Frobenius).unwrap();
        for _ in 0..20 {
            let b = gaussian_matrix(12, r, 1.0, &mut rng).unwrap();
            let a = gaussian_matrix(r, 9, 1.0, &mut rng).unwrap();
            let alt = b.matmul(&a).unwrap();
            assert!(best <= approx_error(&w, &alt, ErrorMetric::Frobenius).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn svd_factors_are_orthonormal(d in 1usize..12, k in 1usize..12, seed in any::<u64>()) {
        let w = seeded(d, k, 1.0, seed);
        let s = svd(&w).unwrap();
        prop_assert!(s.u.transpose().matmul(&s.u).unwrap().max_abs_diff(&Matrix::identity(d)) <= 1e-10);
        prop_assert!(s.v.transpose().matmul(&s.v).unwrap().max_abs_diff(&Matrix::identity(k)) <= 1e-10);
        prop_assert!(s.reconstruct(d.min(k)).unwrap().max_abs_diff(&w) <= 1e-10 * w.max_abs().max(1.0));
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
    }
}
