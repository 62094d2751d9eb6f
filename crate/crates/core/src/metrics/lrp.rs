//! Optimal localisation-recall-precision error.

/// One detection of a category after matching at the localisation threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrpSample {
    pub score: f64,
    /// IoU with the matched ground truth; `None` for a false positive.
    pub iou: Option<f64>,
}

/// oLRP and its components at the optimal score threshold, all in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lrp {
    pub olrp: f64,
    pub loc: f64,
    pub fp: f64,
    pub fn_: f64,
    /// Lowest score kept at the optimum; `None` when keeping nothing is optimal.
    pub threshold: Option<f64>,
}

/// LRP of the detections kept at some threshold.
pub fn lrp_at(kept: &[LrpSample], n_gt: usize, tau: f64) -> f64 {
    let (tp, loc) = kept
        .iter()
        .filter_map(|s| s.iou)
        .fold((0usize, 0.0), |(n, l), iou| (n + 1, l + (1.0 - iou) / (1.0 - tau)));
    let fp = kept.len() - tp;
    let fn_ = n_gt - tp;
    let denom = tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (loc + fp as f64 + fn_ as f64) / denom as f64
    }
}

/// Sweeps every distinct score as a threshold (plus keeping nothing) over
/// samples whose matching was done greedily in score order, so that each
/// threshold's matching is a prefix of the full one. Ties in the minimum go to
/// the highest threshold. `None` when there are no ground truths.
pub fn olrp(samples: &[LrpSample], n_gt: usize, tau: f64) -> Option<Lrp> {
    if n_gt == 0 {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let components = |kept: &[LrpSample], threshold: Option<f64>| {
        let tps: Vec<f64> = kept.iter().filter_map(|s| s.iou).collect();
        let loc = if tps.is_empty() {
            1.0
        } else {
            tps.iter().map(|iou| (1.0 - iou) / (1.0 - tau)).sum::<f64>() / tps.len() as f64
        };
        let fp = if kept.is_empty() {
            0.0
        } else {
            (kept.len() - tps.len()) as f64 / kept.len() as f64
        };
        Lrp {
            olrp: lrp_at(kept, n_gt, tau),
            loc,
            fp,
            fn_: (n_gt - tps.len()) as f64 / n_gt as f64,
            threshold,
        }
    };
    let mut best = components(&[], None);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            i += 1;
        }
        let cand = lrp_at(&sorted[..i], n_gt, tau);
        if cand < best.olrp {
            best = components(&sorted[..i], Some(s));
        }
    }
    Some(best)
}
