//! Query-level diagnostics: classification scores of matched vs unmatched
//! queries, and how close unmatched queries sit to a ground truth.

use crate::autodiff::Graph;
use crate::detector::Model;
use crate::error::Result;
use crate::geometry::iou;
use crate::losses::LossWeights;
use crate::matching::{match_predictions, MatcherConfig, MatcherKind};
use crate::scene::Scene;

/// Pooled over scenes for one decoder layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerDiagnostics {
    pub layer: usize,
    /// Max-over-categories score of matched queries.
    pub matched_scores: Vec<f64>,
    pub unmatched_scores: Vec<f64>,
    /// Largest IoU between each unmatched query and any ground truth.
    pub unmatched_max_iou: Vec<f64>,
}

impl LayerDiagnostics {
    pub fn mean(v: &[f64]) -> f64 {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Labels every decoder query as matched or unmatched with the given matcher
/// and collects scores and unmatched IoUs per layer.
pub fn collect_diagnostics(
    model: &Model,
    scenes: &[Scene],
    weights: &LossWeights,
    matcher: &MatcherConfig,
    kind: MatcherKind,
) -> Result<Vec<LayerDiagnostics>> {
    let mut out: Vec<LayerDiagnostics> = (1..=model.cfg.layers)
        .map(|layer| LayerDiagnostics {
            layer,
            ..Default::default()
        })
        .collect();
    for scene in scenes {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, scene)?;
        for (diag, q) in out.iter_mut().zip(&fwd.layers) {
            let pred = q.snapshot(&g);
            let a = match_predictions(&pred, &scene.objects, kind, weights, matcher)?;
            let owner = a.query_to_gt(pred.len());
            let scores = pred.max_scores();
            for (i, s) in scores.into_iter().enumerate() {
                if owner[i].is_some() {
                    diag.matched_scores.push(s);
                } else {
                    diag.unmatched_scores.push(s);
                    let best = scene.objects.iter().map(|o| iou(&pred.boxes[i], &o.bbox)).fold(0.0, f64::max);
                    diag.unmatched_max_iou.push(best);
                }
            }
        }
    }
    Ok(out)
}

/// `(value, fraction of samples <= value)` at every distinct value; an empty
/// sample gives the step at 0.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    if values.is_empty() {
        return vec![(0.0, 1.0)];
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = frac,
            _ => out.push((*x, frac)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_examples() {
        assert_eq!(empirical_cdf(&[0.3, 0.3, 0.3]), vec![(0.3, 1.0)]);
        assert_eq!(empirical_cdf(&[]), vec![(0.0, 1.0)]);
        let c = empirical_cdf(&[0.5, 0.1, 0.9, 0.1]);
        assert_eq!(c, vec![(0.1, 0.5), (0.5, 0.75), (0.9, 1.0)]);
        assert!(c.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
    }
}
