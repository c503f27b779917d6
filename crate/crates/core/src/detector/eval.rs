use rayon::prelude::*;

use crate::detector::data::SceneSample;
use crate::detector::geometry::{rotated_iou, OrientedBox};
use crate::detector::model::{DetectorModel, Predictions};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub label: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            top_k: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    /// Mean over classes that have ground truth.
    pub ap50: f64,
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean IoU of true-positive matches.
    pub mean_iou: f64,
    /// Argmax accuracy of the class logits at cells assigned to objects.
    pub accuracy: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cell scores are `max_c p(c) · sigmoid(objectness)`; a cell is kept only if
/// no neighbour on its level scores higher.
pub fn decode(model: &DetectorModel, pred: &Predictions, config: &DecodeConfig) -> Vec<Detection> {
    let cells = model.cells();
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(cells.len());
    for r in 0..cells.len() {
        let row = pred.cls.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let (label, p) = row[1..]
            .iter()
            .enumerate()
            .map(|(c, v)| (c, (v - max).exp() / z))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        let obj = sigmoid(pred.objectness.get(model.objectness_row(r), 0));
        scored.push((p * obj, label));
    }
    let extents = model.config.backbone.grid_extents();
    let mut out = Vec::new();
    for li in 0..model.config.roi_levels.len() {
        let range = model.roi_level_range(li);
        let e = extents[model.config.roi_levels[li]];
        for r in range.clone() {
            let (score, label) = scored[r];
            if score < config.score_threshold {
                continue;
            }
            let (y, x) = (cells[r].y as isize, cells[r].x as isize);
            let mut peak = true;
            'nb: for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (ny, nx) = (y + dy, x + dx);
                    if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= e as isize || nx >= e as isize {
                        continue;
                    }
                    let n = range.start + ny as usize * e + nx as usize;
                    // Ties go to the earlier cell.
                    if scored[n].0 > score || (scored[n].0 == score && n < r) {
                        peak = false;
                        break 'nb;
                    }
                }
            }
            if peak {
                let bbox = cells[r].decode(pred.reg.row(r));
                out.push(Detection { bbox, label, score });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(config.top_k);
    out
}

/// Non-interpolated AP at one IoU threshold with greedy matching by
/// descending confidence; `detections[i]` belongs to `truths[i]`.
pub fn average_precision(
    detections: &[Vec<Detection>],
    truths: &[(Vec<OrientedBox>, Vec<usize>)],
    classes: usize,
    iou_threshold: f64,
) -> Result<(Vec<Option<f64>>, Vec<f64>)> {
    if detections.len() != truths.len() {
        return Err(Error::Argument("one detection list per image required".into()));
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut matched_ious = Vec::new();
    for c in 0..classes {
        let npos: usize = truths.iter().map(|(_, l)| l.iter().filter(|&&x| x == c).count()).sum();
        let mut dets: Vec<(f64, usize, &OrientedBox)> = detections
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.iter().filter(|d| d.label == c).map(move |d| (d.score, i, &d.bbox)))
            .collect();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut used: Vec<Vec<bool>> = truths.iter().map(|(b, _)| vec![false; b.len()]).collect();
        let mut tp = 0usize;
        let mut ap = 0.0;
        for (rank, &(_, img, bbox)) in dets.iter().enumerate() {
            let (boxes, labels) = &truths[img];
            let mut best: Option<(usize, f64)> = None;
            for (j, (gt, &l)) in boxes.iter().zip(labels).enumerate() {
                if l != c || used[img][j] {
                    continue;
                }
                let iou = rotated_iou(bbox, gt)?;
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, iou)) = best {
                used[img][j] = true;
                tp += 1;
                matched_ious.push(iou);
                ap += tp as f64 / (rank + 1) as f64;
            }
        }
        per_class.push((npos > 0).then(|| ap / npos as f64));
    }
    Ok((per_class, matched_ious))
}

pub fn evaluate(model: &DetectorModel, data: &[SceneSample], iou_threshold: f64) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let decode_cfg = DecodeConfig::default();
    let per_image = data
        .par_iter()
        .map(|s| {
            let pred = model.predict(&s.image)?;
            let targets = model.assign_targets(s);
            let mut hits = 0usize;
            let mut assigned = 0usize;
            for (&row, &label) in targets.assigned.iter().zip(&s.labels) {
                if let Some(row) = row {
                    assigned += 1;
                    let r = pred.cls.row(row);
                    let argmax = (0..r.len()).fold(0, |b, i| if r[i] > r[b] { i } else { b });
                    hits += usize::from(argmax == label + 1);
                }
            }
            Ok((decode(model, &pred, &decode_cfg), hits, assigned))
        })
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<_> = data.iter().map(|s| (s.boxes.clone(), s.labels.clone())).collect();
    let detections: Vec<_> = per_image.iter().map(|(d, _, _)| d.clone()).collect();
    let (per_class_ap, ious) = average_precision(&detections, &truths, model.config.classes, iou_threshold)?;
    let hits: usize = per_image.iter().map(|p| p.1).sum();
    let assigned: usize = per_image.iter().map(|p| p.2).sum();
    Ok(EvalMetrics {
        ap50: mean_ap(&per_class_ap),
        per_class_ap,
        mean_iou: if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 },
        accuracy: if assigned == 0 { 0.0 } else { hits as f64 / assigned as f64 },
    })
}

pub fn mean_ap(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}
