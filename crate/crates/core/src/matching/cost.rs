use crate::error::{Error, Result};
use crate::geometry::{l1_box, overlap};
use crate::losses::{focal_loss, LossWeights};
use crate::query::Predictions;
use crate::scene::GroundTruth;

use super::CostMatrix;

/// Which localisation score the high-order cost raises to the power `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HighOrderBase {
    Iou,
    /// `(GIoU + 1) / 2`
    NormGiou,
}

impl HighOrderBase {
    pub fn as_str(&self) -> &'static str {
        match self {
            HighOrderBase::Iou => "iou",
            HighOrderBase::NormGiou => "norm_giou",
        }
    }
}

impl std::str::FromStr for HighOrderBase {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "iou" => Ok(Self::Iou),
            "norm_giou" => Ok(Self::NormGiou),
            other => Err(format!("unknown high-order base `{other}` (expected iou|norm_giou)")),
        }
    }
}

/// Weighted-sum matching cost: `-λ_giou·GIoU + λ_l1·ℓ1 + λ_cls·FL(p̂[c])`.
/// Entry `(j, i)` pairs ground truth `j` with query `i`.
pub fn linear_cost(pred: &Predictions, gts: &[GroundTruth], w: &LossWeights) -> CostMatrix {
    CostMatrix::from_fn(gts.len(), pred.len(), |j, i| {
        let gt = &gts[j];
        let b = &pred.boxes[i];
        -w.lambda_giou * overlap(b, &gt.bbox).giou
            + w.lambda_l1 * l1_box(b, &gt.bbox)
            + w.lambda_cls * focal_loss(pred.prob(i, gt.category), true, w.gamma)
    })
}

/// High-order matching score `p̂[c] · base^alpha`, stored negated so that the
/// minimising assignment maximises the score.
pub fn high_order_cost(
    pred: &Predictions,
    gts: &[GroundTruth],
    alpha: f64,
    base: HighOrderBase,
) -> Result<CostMatrix> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Validation(format!("alpha must be positive, got {alpha}")));
    }
    Ok(CostMatrix::from_fn(gts.len(), pred.len(), |j, i| {
        let o = overlap(&pred.boxes[i], &gts[j].bbox);
        let loc = match base {
            HighOrderBase::Iou => o.iou,
            HighOrderBase::NormGiou => (o.giou + 1.0) / 2.0,
        };
        let score = pred.prob(i, gts[j].category) * loc.powf(alpha);
        // keep IoU = 0 entries at exactly zero
        if score == 0.0 {
            0.0
        } else {
            -score
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MatcherKind {
    Linear,
    HighOrder,
}

impl MatcherKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MatcherKind::Linear => "linear",
            MatcherKind::HighOrder => "high_order",
        }
    }
}

/// When the high-order cost takes over from the linear one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatcherSchedule {
    /// Fraction of total steps after which the high-order cost is active.
    pub switch_fraction: f64,
}

impl MatcherSchedule {
    pub fn new(switch_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&switch_fraction) {
            return Err(Error::Validation(format!(
                "switch_fraction must lie in [0, 1], got {switch_fraction}"
            )));
        }
        Ok(Self { switch_fraction })
    }
}

impl Default for MatcherSchedule {
    fn default() -> Self {
        Self { switch_fraction: 0.5 }
    }
}

/// Linear before `switch_fraction · total_steps`, high-order from there on.
pub fn select_matcher(step: usize, total_steps: usize, schedule: MatcherSchedule) -> MatcherKind {
    if step as f64 >= schedule.switch_fraction * total_steps as f64 {
        MatcherKind::HighOrder
    } else {
        MatcherKind::Linear
    }
}
