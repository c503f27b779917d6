//! Rank sweeps: truncation error against compressed parameter ratio, and
//! rank selection under an error tolerance or a parameter budget.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{svd, ErrorMetric, Matrix};
use crate::lora::param_budget;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub r: usize,
    pub p: f64,
    /// Error relative to the norm of the matrix.
    pub error: f64,
    pub abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankCurve {
    pub name: String,
    pub d: usize,
    pub k: usize,
    /// Norm of the analyzed matrix in the curve's metric.
    pub norm: f64,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RankCriterion {
    /// Smallest rank whose absolute error is at most ε.
    ErrorTolerance(f64),
    /// Largest rank whose compressed ratio is at most `p_max`.
    ParamBudget(f64),
}

impl fmt::Display for RankCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankCriterion::ErrorTolerance(e) => write!(f, "error tolerance {e}"),
            RankCriterion::ParamBudget(p) => write!(f, "parameter budget {p}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankSelection {
    pub name: String,
    pub rank: usize,
    pub criterion: RankCriterion,
    pub error: f64,
    pub p: f64,
}

/// Powers of two below `min(d, k)`, then `min(d, k)` itself.
pub fn default_ranks(d: usize, k: usize) -> Vec<usize> {
    let full = d.min(k);
    let mut ranks: Vec<usize> = std::iter::successors(Some(1usize), |r| r.checked_mul(2))
        .take_while(|&r| r < full)
        .collect();
    if full > 0 {
        ranks.push(full);
    }
    ranks
}

/// One SVD, reused for every sampled rank.
pub fn analyze_matrix(name: &str, w: &Matrix, ranks: &[usize], metric: ErrorMetric) -> Result<RankCurve> {
    let (d, k) = w.shape();
    let full = d.min(k);
    if ranks.is_empty() {
        return Err(Error::Argument("rank sweep is empty".into()));
    }
    if ranks.windows(2).any(|p| p[0] >= p[1]) || ranks[0] == 0 || ranks[ranks.len() - 1] > full {
        return Err(Error::Argument(format!(
            "ranks {ranks:?} must ascend strictly within [1, {full}]"
        )));
    }
    let s = svd(w)?;
    let norm = match metric {
        ErrorMetric::Frobenius => s.tail_error(0),
        ErrorMetric::Spectral => s.sigma.first().copied().unwrap_or(0.0),
    };
    let points = ranks
        .iter()
        .map(|&r| {
            let abs_error = match metric {
                ErrorMetric::Frobenius => s.tail_error(r),
                ErrorMetric::Spectral => s.sigma.get(r).copied().unwrap_or(0.0),
            };
            Ok(CurvePoint {
                r,
                p: param_budget(d, k, r)?.compressed_ratio,
                error: if norm > 0.0 { abs_error / norm } else { 0.0 },
                abs_error,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RankCurve {
        name: name.to_owned(),
        d,
        k,
        norm,
        points,
    })
}

/// Analyzes named matrices concurrently with the default sweep; the result is
/// sorted by name.
pub fn analyze_matrices(items: &[(String, Matrix)], metric: ErrorMetric) -> Result<Vec<RankCurve>> {
    let mut curves = items
        .par_iter()
        .map(|(name, w)| analyze_matrix(name, w, &default_ranks(w.rows(), w.cols()), metric))
        .collect::<Result<Vec<_>>>()?;
    curves.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(curves)
}

pub fn select_rank(curve: &RankCurve, criterion: RankCriterion) -> Result<RankSelection> {
    if curve.points.is_empty() {
        return Err(Error::Argument(format!("curve '{}' has no points", curve.name)));
    }
    let chosen = match criterion {
        RankCriterion::ErrorTolerance(eps) => curve.points.iter().find(|pt| pt.abs_error <= eps),
        RankCriterion::ParamBudget(p_max) => curve.points.iter().rev().find(|pt| pt.p <= p_max),
    };
    let pt = chosen.ok_or_else(|| Error::Selection(format!("{criterion} on '{}'", curve.name)))?;
    Ok(RankSelection {
        name: curve.name.clone(),
        rank: pt.r,
        criterion,
        error: pt.abs_error,
        p: pt.p,
    })
}

/// `v` rounded to 9 significant digits.
pub fn round_sig9(v: f64) -> f64 {
    if !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn fmt9(v: f64) -> String {
    format!("{}", round_sig9(v))
}

fn csv_file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    format!("{safe}.csv")
}

pub fn curve_csv(curve: &RankCurve) -> String {
    let mut s = String::from("r,p,error,abs_error\n");
    for pt in &curve.points {
        s.push_str(&format!("{},{},{},{}\n", pt.r, fmt9(pt.p), fmt9(pt.error), fmt9(pt.abs_error)));
    }
    s
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "r,p,error,abs_error" || h.trim() == "r,p,error" => {}
        other => return Err(Error::Format(format!("unexpected CSV header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Format(format!("CSV row {}: '{line}'", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 3 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            let error = num(f[2])?;
            Ok(CurvePoint {
                r: f[0].trim().parse().map_err(|_| bad())?,
                p: num(f[1])?,
                error,
                abs_error: f.get(3).map(|s| num(s)).transpose()?.unwrap_or(error),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct CurveSummary<'a> {
    name: &'a str,
    d: usize,
    k: usize,
    norm: f64,
    csv: String,
}

#[derive(Serialize)]
struct SelectionSummary<'a> {
    name: &'a str,
    criterion: &'static str,
    threshold: Option<f64>,
    rank: usize,
    error: f64,
    p: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    curves: Vec<CurveSummary<'a>>,
    selections: Vec<SelectionSummary<'a>>,
}

pub fn summary_json(curves: &[RankCurve], selections: &[RankSelection]) -> String {
    let summary = Summary {
        curves: curves
            .iter()
            .map(|c| CurveSummary {
                name: &c.name,
                d: c.d,
                k: c.k,
                norm: round_sig9(c.norm),
                csv: csv_file_name(&c.name),
            })
            .collect(),
        selections: selections
            .iter()
            .map(|s| {
                let (criterion, t) = match s.criterion {
                    RankCriterion::ErrorTolerance(e) => ("error_tolerance", e),
                    RankCriterion::ParamBudget(p) => ("param_budget", p),
                };
                SelectionSummary {
                    name: &s.name,
                    criterion,
                    threshold: t.is_finite().then(|| round_sig9(t)),
                    rank: s.rank,
                    error: round_sig9(s.error),
                    p: round_sig9(s.p),
                }
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
    s.push('\n');
    s
}

/// Writes one CSV per curve plus `summary.json` into `dir`; returns the paths.
pub fn emit_report(dir: &Path, curves: &[RankCurve], selections: &[RankSelection]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(curves.len() + 1);
    for c in curves {
        let path = dir.join(csv_file_name(&c.name));
        fs::write(&path, curve_csv(c)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = dir.join("summary.json");
    fs::write(&path, summary_json(curves, selections)).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
