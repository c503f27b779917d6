mod common;

use common::seeded;
use loradet_core::linalg::{ErrorMetric, Matrix};
use loradet_core::rank::*;
use loradet_core::Error;

fn planted(n: usize, q: usize, seed: u64) -> Matrix {
    seeded(n, q, 1.0, seed).matmul(&seeded(q, n, 1.0, seed + 1)).unwrap()
}

#[test]
fn planted_rank_gives_flat_tail() {
    let w = planted(20, 3, 1);
    let ranks: Vec<usize> = (1..=20).collect();
    let curve = analyze_matrix("head", &w, &ranks, ErrorMetric::Frobenius).unwrap();
    for pt in &curve.points {
        if pt.r >= 3 {
            assert!(pt.error <= 1e-9, "r={} error {}", pt.r, pt.error);
        } else {
            assert!(pt.error > 1e-3);
        }
    }
    let sel = select_rank(&curve, RankCriterion::ErrorTolerance(1e-6)).unwrap();
    assert_eq!(sel.rank, 3);
    let any = select_rank(&curve, RankCriterion::ErrorTolerance(f64::INFINITY)).unwrap();
    assert_eq!(any.rank, 1);
}

#[test]
fn gaussian_matrix_has_no_low_intrinsic_rank() {
    let w = seeded(64, 64, 1.0, 5);
    let curve = analyze_matrix("backbone", &w, &default_ranks(64, 64), ErrorMetric::Frobenius).unwrap();
    assert_eq!(curve.points.iter().map(|p| p.r).collect::<Vec<_>>(), vec![1, 2, 4, 8, 16, 32, 64]);
    assert!(curve.points.windows(2).all(|p| p[1].error < p[0].error));
    assert!(curve.points.iter().find(|p| p.r == 32).unwrap().error > 0.1);
    assert!(curve.points.last().unwrap().error <= 1e-10);
}

#[test]
fn budget_selection() {
    let w = seeded(96, 96, 1.0, 6);
    let ranks: Vec<usize> = (1..=96).collect();
    let curve = analyze_matrix("stage1", &w, &ranks, ErrorMetric::Frobenius).unwrap();
    let sel = select_rank(&curve, RankCriterion::ParamBudget(1.0)).unwrap();
    assert_eq!(sel.rank, 48);
    assert_eq!(sel.p, 1.0);
    assert!(matches!(
        select_rank(&curve, RankCriterion::ParamBudget(1e-6)),
        Err(Error::Selection(_))
    ));
    assert!(analyze_matrix("x", &w, &[4, 2], ErrorMetric::Frobenius).is_err());
    assert!(analyze_matrix("x", &w, &[0], ErrorMetric::Frobenius).is_err());
    assert!(analyze_matrix("x", &w, &[97], ErrorMetric::Frobenius).is_err());
}

#[test]
fn spectral_metric_uses_next_singular_value() {
    let w = Matrix::from_diag(&[5.0, 3.0, 1.0]);
    let curve = analyze_matrix("d", &w, &[1, 2, 3], ErrorMetric::Spectral).unwrap();
    let abs: Vec<f64> = curve.points.iter().map(|p| p.abs_error).collect();
    assert!((abs[0] - 3.0).abs() < 1e-12 && (abs[1] - 1.0).abs() < 1e-12 && abs[2] == 0.0);
    assert!((curve.norm - 5.0).abs() < 1e-12);
}

#[test]
fn csv_round_trip() {
    let curve = analyze_matrix("m", &seeded(10, 7, 1.0, 2), &[1, 3, 7], ErrorMetric::Frobenius).unwrap();
    let parsed = parse_curve_csv(&curve_csv(&curve)).unwrap();
    assert_eq!(parsed.len(), curve.points.len());
    for (a, b) in parsed.iter().zip(&curve.points) {
        assert_eq!(a.r, b.r);
        assert_eq!(a.p, round_sig9(b.p));
        assert_eq!(a.error, round_sig9(b.error));
        assert_eq!(a.abs_error, round_sig9(b.abs_error));
    }
    assert_eq!(parse_curve_csv(&curve_csv(&curve)).unwrap(), parsed);
    assert!(parse_curve_csv("a,b\n1,2\n").is_err());
}

#[test]
fn empty_report_is_valid_json() {
    let v: serde_json::Value = serde_json::from_str(&summary_json(&[], &[])).unwrap();
    assert!(v.is_object());
}

#[test]
fn report_files_are_deterministic() {
    let items: Vec<(String, Matrix)> = vec![
        ("b.attn.q".into(), seeded(16, 16, 1.0, 1)),
        ("a.head.fc".into(), planted(16, 2, 3)),
    ];
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let curves = analyze_matrices(&items, ErrorMetric::Frobenius).unwrap();
        let sel: Vec<_> = curves.iter().map(|c| select_rank(c, RankCriterion::ErrorTolerance(1e-6)).unwrap_or_else(|_| select_rank(c, RankCriterion::ParamBudget(1.0)).unwrap())).collect();
        let files = emit_report(dir.path(), &curves, &sel).unwrap();
        let out: Vec<(String, Vec<u8>)> = files
            .iter()
            .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(f).unwrap()))
            .collect();
        (curves, out)
    };
    let (curves, a) = run();
    let (_, b) = run();
    assert_eq!(a, b);
    assert_eq!(curves[0].name, "a.head.fc");
    assert!(a.iter().any(|(n, _)| n == "summary.json"));
}
