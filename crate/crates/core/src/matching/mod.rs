//! Bipartite ground-truth ↔ query assignment and the cost builders that feed it.
//!
//! Costs are built from detached [`Predictions`](crate::query::Predictions);
//! nothing here touches the gradient graph.

mod cost;
mod hungarian;

pub use cost::{high_order_cost, linear_cost, select_matcher, HighOrderBase, MatcherKind, MatcherSchedule};
pub use hungarian::{hungarian, Assignment, CostMatrix};

use crate::error::Result;
use crate::losses::LossWeights;
use crate::query::Predictions;
use crate::scene::GroundTruth;

/// Full matcher settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatcherConfig {
    pub alpha: f64,
    pub base: HighOrderBase,
    pub schedule: MatcherSchedule,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            base: HighOrderBase::Iou,
            schedule: MatcherSchedule::default(),
        }
    }
}

/// Builds the cost of the requested kind and solves it.
pub fn match_predictions(
    pred: &Predictions,
    gts: &[GroundTruth],
    kind: MatcherKind,
    weights: &LossWeights,
    cfg: &MatcherConfig,
) -> Result<Assignment> {
    if gts.is_empty() {
        return Ok(Assignment::empty());
    }
    let cost = match kind {
        MatcherKind::Linear => linear_cost(pred, gts, weights),
        MatcherKind::HighOrder => high_order_cost(pred, gts, cfg.alpha, cfg.base)?,
    };
    hungarian(&cost)
}
