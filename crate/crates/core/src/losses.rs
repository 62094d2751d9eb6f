//! Classification losses (focal, GIoU-aware focal, varifocal) and the
//! per-layer set-prediction loss.

use crate::autodiff::{Graph, Value};
use crate::error::{Error, Result};
use crate::geometry::{boxes_to_rows, iou_giou_rows, l1_rows};
use crate::matching::Assignment;
use crate::query::QueryState;
use crate::scene::GroundTruth;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    pub lambda_cls: f64,
    /// Focal exponent.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            lambda_cls: 2.0,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_giou, self.lambda_l1, self.lambda_cls, self.gamma];
        if all.iter().all(|x| x.is_finite() && *x >= 0.0) {
            Ok(())
        } else {
            Err(Error::Validation(format!("loss weights must be finite and nonnegative: {self:?}")))
        }
    }
}

/// Loss applied to the matched (query, category) entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClsLossKind {
    Focal,
    GiouFocal,
    Varifocal,
}

impl ClsLossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClsLossKind::Focal => "focal",
            ClsLossKind::GiouFocal => "giou_focal",
            ClsLossKind::Varifocal => "varifocal",
        }
    }
}

impl std::str::FromStr for ClsLossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "focal" => Ok(Self::Focal),
            "giou_focal" => Ok(Self::GiouFocal),
            "varifocal" => Ok(Self::Varifocal),
            other => Err(format!("unknown loss kind `{other}` (expected focal|giou_focal|varifocal)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetKind {
    IouPow,
    NormGiouPow,
}

impl TargetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetKind::IouPow => "iou_pow",
            TargetKind::NormGiouPow => "norm_giou_pow",
        }
    }
}

impl std::str::FromStr for TargetKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "iou_pow" => Ok(Self::IouPow),
            "norm_giou_pow" => Ok(Self::NormGiouPow),
            other => Err(format!("unknown target kind `{other}` (expected iou_pow|norm_giou_pow)")),
        }
    }
}

/// How the soft positive target `t` is derived from the matched pair's overlap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetTransform {
    pub kind: TargetKind,
    pub power: f64,
}

impl Default for TargetTransform {
    fn default() -> Self {
        Self {
            kind: TargetKind::NormGiouPow,
            power: 1.0,
        }
    }
}

impl TargetTransform {
    pub fn apply(&self, iou: f64, giou: f64) -> Result<f64> {
        let v = match self.kind {
            TargetKind::IouPow => iou,
            TargetKind::NormGiouPow => giou,
        };
        target_transform(self.kind, v, self.power)
    }
}

/// `IoU^power` or `((GIoU + 1) / 2)^power`.
pub fn target_transform(kind: TargetKind, giou_or_iou: f64, power: f64) -> Result<f64> {
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::Validation(format!("target power must be positive, got {power}")));
    }
    let base = match kind {
        TargetKind::IouPow => giou_or_iou,
        TargetKind::NormGiouPow => (giou_or_iou + 1.0) / 2.0,
    };
    Ok(base.max(0.0).powf(power))
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Sigmoid focal loss for one entry: `-(1-p)^γ log p` for positives,
/// `-p^γ log(1-p)` for negatives.
pub fn focal_loss(p_hat: f64, positive: bool, gamma: f64) -> f64 {
    let p = clamp_prob(p_hat);
    if positive {
        -(1.0 - p).powf(gamma) * p.ln()
    } else {
        -p.powf(gamma) * (1.0 - p).ln()
    }
}

fn check_target(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("soft target must lie in (0, 1], got {t}")))
    }
}

fn soft_bce(p: f64, t: f64) -> f64 {
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// `-|t - p|^γ · [t log p + (1 - t) log(1 - p)]`.
pub fn giou_focal_loss(p_hat: f64, t: f64, gamma: f64) -> Result<f64> {
    check_target(t)?;
    let p = clamp_prob(p_hat);
    Ok((t - p).abs().powf(gamma) * soft_bce(p, t))
}

/// `-t · [t log p + (1 - t) log(1 - p)]`.
pub fn varifocal_loss(p_hat: f64, t: f64) -> Result<f64> {
    check_target(t)?;
    let p = clamp_prob(p_hat);
    Ok(t * soft_bce(p, t))
}

/// Differentiable classification loss summed over an `[n, K]` probability
/// matrix. `targets` holds the soft target of every positive entry and 0
/// elsewhere; `positive` marks the positive entries. Negatives always take the
/// plain focal term.
pub fn classification_loss(
    g: &mut Graph,
    probs: Value,
    targets: &[f64],
    positive: &[bool],
    kind: ClsLossKind,
    gamma: f64,
) -> Result<Value> {
    let shape = g.shape(probs).to_vec();
    if targets.len() != g.data(probs).len() || positive.len() != targets.len() {
        return Err(Error::Contract(format!(
            "targets ({}) / mask ({}) do not cover probabilities {shape:?}",
            targets.len(),
            positive.len()
        )));
    }
    let t: Vec<f64> = targets
        .iter()
        .zip(positive)
        .map(|(&t, &pos)| match (pos, kind) {
            (false, _) => 0.0,
            (true, ClsLossKind::Focal) => 1.0,
            (true, _) => t.clamp(PROB_EPS, 1.0),
        })
        .collect();
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let tv = g.constant(&shape, t.clone())?;
    let one_minus_t = g.constant(&shape, t.iter().map(|x| 1.0 - x).collect())?;
    let log_p = g.log(p);
    let q = g.neg(p);
    let q = g.add_const(q, 1.0);
    let log_q = g.log(q);
    let a = g.mul(tv, log_p)?;
    let b = g.mul(one_minus_t, log_q)?;
    let ce = g.add(a, b)?;
    let ce = g.neg(ce);
    let modulator = match kind {
        ClsLossKind::Focal | ClsLossKind::GiouFocal => {
            let d = g.sub(tv, p)?;
            let d = g.abs(d);
            g.pow_const(d, gamma)
        }
        ClsLossKind::Varifocal => {
            let neg_mask = g.constant(&shape, positive.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect())?;
            let pg = g.pow_const(p, gamma);
            let neg = g.mul(neg_mask, pg)?;
            let pos = g.constant(
                &shape,
                t.iter().zip(positive).map(|(&t, &m)| if m { t } else { 0.0 }).collect(),
            )?;
            g.add(neg, pos)?
        }
    };
    let l = g.mul(modulator, ce)?;
    Ok(g.sum(l))
}

/// Classification-loss settings of a training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClsLossConfig {
    pub kind: ClsLossKind,
    pub target: TargetTransform,
}

impl Default for ClsLossConfig {
    fn default() -> Self {
        Self {
            kind: ClsLossKind::Focal,
            target: TargetTransform::default(),
        }
    }
}

/// The three weighted terms of one layer's loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Value,
    pub giou: f64,
    pub l1: f64,
    pub cls: f64,
    /// Mean IoU over matched pairs (0 when nothing is matched).
    pub matched_iou: f64,
}

/// Set-prediction loss of one layer:
/// `Σ_matched [λ_giou(1 − GIoU) + λ_l1·ℓ1] + λ_cls · Σ_entries cls`, where the
/// classification sum runs over every (query, category) entry, the matched
/// (query, gt category) entries being positives and the rest negatives.
pub fn composite_loss(
    g: &mut Graph,
    pred: &QueryState,
    gts: &[GroundTruth],
    assignment: &Assignment,
    w: &LossWeights,
    cls: &ClsLossConfig,
) -> Result<LossTerms> {
    check_assignment(pred.num_queries(g), gts, assignment)?;
    let targets = positive_targets(g, pred, gts, assignment, cls)?;
    composite_loss_with_targets(g, pred, gts, assignment, w, cls.kind, &targets)
}

fn check_assignment(n: usize, gts: &[GroundTruth], assignment: &Assignment) -> Result<()> {
    let mut seen = vec![false; n];
    for &(j, q) in &assignment.pairs {
        if j >= gts.len() || q >= n {
            return Err(Error::Contract(format!(
                "assignment pair ({j}, {q}) out of range for {} gts / {n} queries",
                gts.len()
            )));
        }
        if std::mem::replace(&mut seen[q], true) {
            return Err(Error::Contract(format!("query {q} assigned twice")));
        }
    }
    Ok(())
}

/// Soft target of each matched pair, computed from detached overlaps
/// (1 for the plain focal loss).
pub fn positive_targets(
    g: &Graph,
    pred: &QueryState,
    gts: &[GroundTruth],
    assignment: &Assignment,
    cls: &ClsLossConfig,
) -> Result<Vec<f64>> {
    let boxes = g.data(pred.boxes);
    assignment
        .pairs
        .iter()
        .map(|&(j, q)| {
            if cls.kind == ClsLossKind::Focal {
                return Ok(1.0);
            }
            let b = crate::geometry::BBox::from_slice(&boxes[4 * q..4 * q + 4]);
            let o = crate::geometry::overlap(&b, &gts[j].bbox);
            cls.target.apply(o.iou, o.giou)
        })
        .collect()
}

/// [`composite_loss`] with the positive targets supplied by the caller, one
/// per assignment pair.
pub fn composite_loss_with_targets(
    g: &mut Graph,
    pred: &QueryState,
    gts: &[GroundTruth],
    assignment: &Assignment,
    w: &LossWeights,
    kind: ClsLossKind,
    pair_targets: &[f64],
) -> Result<LossTerms> {
    let n = pred.num_queries(g);
    let k = g.shape(pred.probs)[1];
    check_assignment(n, gts, assignment)?;
    if pair_targets.len() != assignment.pairs.len() {
        return Err(Error::Contract("one target per matched pair required".into()));
    }
    let m = assignment.pairs.len();
    let mut targets = vec![0.0; n * k];
    let mut positive = vec![false; n * k];
    let mut total = g.scalar(0.0);
    let (mut giou_term, mut l1_term, mut matched_iou) = (0.0, 0.0, 0.0);
    if m > 0 {
        let qs: Vec<usize> = assignment.pairs.iter().map(|p| p.1).collect();
        let gt_rows = boxes_to_rows(&assignment.pairs.iter().map(|p| gts[p.0].bbox).collect::<Vec<_>>());
        let pb = g.take_rows(pred.boxes, &qs)?;
        let gb = g.constant(&[m, 4], gt_rows)?;
        let (iou, giou) = iou_giou_rows(g, pb, gb)?;
        let l1 = l1_rows(g, pb, gb)?;
        let iou_d = g.data(iou).to_vec();
        for (idx, &(j, q)) in assignment.pairs.iter().enumerate() {
            let e = q * k + gts[j].category;
            positive[e] = true;
            targets[e] = pair_targets[idx];
        }
        matched_iou = iou_d.iter().sum::<f64>() / m as f64;
        let one_minus = g.neg(giou);
        let one_minus = g.add_const(one_minus, 1.0);
        let lg = g.sum(one_minus);
        let lg = g.scale(lg, w.lambda_giou);
        let ll = g.sum(l1);
        let ll = g.scale(ll, w.lambda_l1);
        giou_term = g.item(lg);
        l1_term = g.item(ll);
        total = g.add(lg, ll)?;
    }
    let lc = classification_loss(g, pred.probs, &targets, &positive, kind, w.gamma)?;
    let lc = g.scale(lc, w.lambda_cls);
    let cls_term = g.item(lc);
    let total = g.add(total, lc)?;
    Ok(LossTerms {
        total,
        giou: giou_term,
        l1: l1_term,
        cls: cls_term,
        matched_iou,
    })
}
