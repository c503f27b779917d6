use rayon::prelude::*;

use crate::detector::data::SceneSample;
use crate::detector::model::DetectorModel;
use crate::detector::train::sample_gradients;
use crate::error::Result;
use crate::linalg::{gaussian_matrix, Rng};
use crate::nn::ParamRole;

/// Gradients below this magnitude are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Errors above this are re-measured with a ten times smaller step.
pub const RETRY_ABOVE: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor, flat index)` of the worst scalar.
    pub worst: Option<(String, usize)>,
}

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Moves a model to a generic point for gradient checking. Every LoRA `B`
/// factor gets seeded entries so gradients reach both factors, and every bias
/// is jittered: with zero biases a dead ReLU row puts the next pre-activation
/// exactly on the kink, where central differences see half the slope.
pub fn gradcheck_point(model: &mut DetectorModel, seed: u64, stddev: f64) -> Result<()> {
    let mut rng = Rng::derive(seed, "perturb-adapters", 0);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let store = &mut model.store;
        if store.info(id).role == ParamRole::LoraB {
            let (r, c) = store.value(id).shape();
            *store.value_mut(id) = gaussian_matrix(r, c, stddev, &mut rng)?;
        } else if store.name(id).ends_with(".b") {
            for v in store.value_mut(id).data_mut() {
                *v += 0.5 * stddev * rng.standard_normal();
            }
        }
    }
    Ok(())
}

/// Compares every trainable scalar's gradient with a central difference of
/// step `h`, falling back to `h / 10` for scalars that disagree.
pub fn gradcheck(model: &DetectorModel, mask: &[bool], sample: &SceneSample, h: f64) -> Result<GradcheckReport> {
    let targets = model.assign_targets(sample);
    let (_, grads) = sample_gradients(model, mask, sample, &targets)?;
    let frozen = vec![false; mask.len()];
    let ids: Vec<_> = model.store.ids().filter(|id| mask[id.0]).collect();
    let per_tensor = ids
        .par_iter()
        .map(|&id| {
            let mut probe = model.clone();
            let analytic = grads.get(id).cloned();
            let n = probe.store.value(id).len();
            let mut worst = (0.0f64, 0usize);
            for i in 0..n {
                let orig = probe.store.value(id).data()[i];
                let mut eval = |v: f64| -> Result<f64> {
                    probe.store.value_mut(id).data_mut()[i] = v;
                    Ok(sample_gradients(&probe, &frozen, sample, &targets)?.0)
                };
                let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
                let mut rel = f64::INFINITY;
                // A ReLU kink within one step skews the difference quotient;
                // a wrong gradient stays wrong at every step.
                for step in [h, h / 10.0] {
                    let numeric = (eval(orig + step)? - eval(orig - step)?) / (2.0 * step);
                    rel = rel.min(relative_error(a, numeric));
                    if rel <= RETRY_ABOVE {
                        break;
                    }
                }
                eval(orig)?;
                if rel > worst.0 {
                    worst = (rel, i);
                }
            }
            Ok((id, n, worst))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = GradcheckReport::default();
    for (id, n, (rel, i)) in per_tensor {
        report.checked += n;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((model.store.name(id).to_owned(), i));
            }
        }
    }
    Ok(report)
}
