use crate::autograd::Var;
use crate::detector::model::{DetectorVars, Targets};
use crate::error::{Error, Result};
use crate::nn::Graph;

/// Graph handles of the loss terms; `total` is the backward root.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub classification: Var,
    pub regression: Var,
    pub objectness: Var,
}

/// Mean cross-entropy over RoI cells, smooth-L1 over positive cells divided
/// by their count, and mean objectness BCE over every pyramid cell.
pub fn detection_loss(g: &mut Graph<'_>, pred: &DetectorVars, targets: &Targets) -> Result<LossVars> {
    for (what, v) in [("class logits", pred.cls), ("box deltas", pred.reg), ("objectness", pred.objectness)] {
        if !g.value(v).is_finite() {
            return Err(Error::Numeric(format!("non-finite {what} in detection loss")));
        }
    }
    let rois = targets.classes.len();
    let cells = targets.objectness.len();
    let classification = g.cross_entropy(pred.cls, targets.classes.clone(), 1.0 / rois as f64)?;
    let npos = targets.positives.len().max(1);
    let regression = g.smooth_l1(
        pred.reg,
        targets.deltas.clone(),
        targets.positives.clone(),
        1.0 / npos as f64,
    )?;
    let objectness = g.bce_with_logits(pred.objectness, targets.objectness.clone(), 1.0 / cells as f64)?;
    let partial = g.add(classification, regression)?;
    let total = g.add(partial, objectness)?;
    Ok(LossVars {
        total,
        classification,
        regression,
        objectness,
    })
}
