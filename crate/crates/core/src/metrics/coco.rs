//! COCO-protocol matching, average precision and recall.

use crate::geometry::{iou, BBox};

/// `0.50, 0.55, ..., 0.95`
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub const RECALL_POINTS: usize = 101;

/// Outcome of one detection under greedy matching.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetMatch {
    /// Matched ground truth and the IoU with it.
    pub gt: Option<(usize, f64)>,
}

impl DetMatch {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }
}

/// Greedy matching of detections (already in descending score order, one
/// category, one scene): each takes the highest-IoU unmatched ground truth
/// with IoU at least `threshold`.
pub fn match_detections(dets: &[BBox], gts: &[BBox], threshold: f64) -> Vec<DetMatch> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(d, g);
                if o >= threshold && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            DetMatch { gt: best }
        })
        .collect()
}

/// Precision at the 101 recall points `0, 0.01, ..., 1` after taking the
/// monotone envelope; recall points beyond the curve get 0.
pub fn interpolated_precision(tp_flags: &[bool], n_gt: usize) -> Vec<f64> {
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &f) in tp_flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / 100.0;
            // first operating point reaching recall r
            let i = recall.partition_point(|&x| x < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .collect()
}

/// 101-point interpolated AP; `None` when there is nothing to recall.
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let p = interpolated_precision(tp_flags, n_gt);
    Some(p.iter().sum::<f64>() / RECALL_POINTS as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_examples() {
        let gt = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let det = BBox::from_corners(0.0, 0.0, 0.6, 1.0);
        assert!(match_detections(&[det], &[gt], 0.5)[0].is_tp());
        assert!(!match_detections(&[det], &[gt], 0.75)[0].is_tp());
        let m = match_detections(&[det, gt], &[gt], 0.5);
        assert!(m[0].is_tp() && !m[1].is_tp());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        // TP, FP, TP over two gts: precision 1 up to recall 0.5, then 2/3
        let ap = average_precision(&[true, false, true], 2).unwrap();
        let expect = (51.0 * 1.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((ap - expect).abs() < 1e-15, "{ap} vs {expect}");
        assert_eq!(iou_thresholds()[9], 0.95);
    }
}
