//! Detection metrics: COCO AP/AR, oLRP, and query-level diagnostics.

mod coco;
mod diagnostics;
mod lrp;

pub use coco::{average_precision, interpolated_precision, iou_thresholds, match_detections, DetMatch, RECALL_POINTS};
pub use diagnostics::{collect_diagnostics, empirical_cdf, LayerDiagnostics};
pub use lrp::{lrp_at, olrp, Lrp, LrpSample};

use std::fmt::Write as _;

use crate::geometry::BBox;
use crate::scene::GroundTruth;

/// Localisation threshold of oLRP.
pub const LRP_TAU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub scene_id: u64,
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

/// Ground truths of one evaluated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalScene {
    pub id: u64,
    pub objects: Vec<GroundTruth>,
}

/// Category-averaged precision at the 101 recall points of one IoU threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub iou: f64,
    pub precision: Vec<f64>,
}

/// Headline numbers in percent. oLRP fields are `None` without ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
    pub olrp: Option<f64>,
    pub olrp_loc: Option<f64>,
    pub olrp_fp: Option<f64>,
    pub olrp_fn: Option<f64>,
    pub pr_curves: Vec<PrCurve>,
}

pub const REPORT_HEADER: &str = "ap,ap50,ap75,ar1,ar10,ar100,olrp,olrp_loc,olrp_fp,olrp_fn";

impl MetricReport {
    /// CSV fields in [`REPORT_HEADER`] order; missing oLRP values are empty.
    pub fn csv_fields(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{},{},{},{}",
            self.ap,
            self.ap50,
            self.ap75,
            self.ar1,
            self.ar10,
            self.ar100,
            opt(self.olrp),
            opt(self.olrp_loc),
            opt(self.olrp_fp),
            opt(self.olrp_fn)
        )
    }

    pub fn pr_csv(&self) -> String {
        let mut out = String::from("iou_threshold,recall,precision\n");
        for c in &self.pr_curves {
            for (k, p) in c.precision.iter().enumerate() {
                let _ = writeln!(out, "{:.2},{:.2},{:.6}", c.iou, k as f64 / 100.0, p);
            }
        }
        out
    }
}

/// Per scene and category: detections in descending score order, best first.
fn per_scene_category(dets: &[Detection], scenes: &[EvalScene], k: usize) -> Vec<Vec<Vec<Detection>>> {
    let index: std::collections::HashMap<u64, usize> = scenes.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let mut out = vec![vec![Vec::new(); k]; scenes.len()];
    for d in dets {
        if let Some(&i) = index.get(&d.scene_id) {
            if d.category < k {
                out[i][d.category].push(*d);
            }
        }
    }
    for per in &mut out {
        for v in per.iter_mut() {
            v.sort_by(|a, b| b.score.total_cmp(&a.score));
        }
    }
    out
}

fn gts_of(scene: &EvalScene, category: usize) -> Vec<BBox> {
    scene.objects.iter().filter(|o| o.category == category).map(|o| o.bbox).collect()
}

/// Evaluates detections over the given scenes with `num_classes` categories.
pub fn evaluate(dets: &[Detection], scenes: &[EvalScene], num_classes: usize) -> MetricReport {
    let grouped = per_scene_category(dets, scenes, num_classes);
    let thresholds = iou_thresholds();
    // ap[t][c], recall at max_dets for AR
    let mut ap = vec![Vec::new(); thresholds.len()];
    let mut curves = vec![vec![0.0; RECALL_POINTS]; thresholds.len()];
    let mut curve_count = 0usize;
    let max_dets = [1usize, 10, 100];
    let mut recall = vec![vec![Vec::new(); thresholds.len()]; max_dets.len()];
    let mut lrps = Vec::new();

    for c in 0..num_classes {
        let n_gt: usize = scenes.iter().map(|s| gts_of(s, c).len()).sum();
        if n_gt == 0 {
            continue;
        }
        curve_count += 1;
        for (t, &thr) in thresholds.iter().enumerate() {
            // (score, scene order, rank within scene, tp) pooled over scenes
            let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
            let mut hits = vec![0usize; max_dets.len()];
            for (si, scene) in scenes.iter().enumerate() {
                let ds = &grouped[si][c];
                let boxes: Vec<BBox> = ds.iter().map(|d| d.bbox).collect();
                let m = match_detections(&boxes, &gts_of(scene, c), thr);
                for (r, (d, mm)) in ds.iter().zip(&m).enumerate() {
                    pooled.push((d.score, si, r, mm.is_tp()));
                }
                for (h, &md) in hits.iter_mut().zip(&max_dets) {
                    *h += m.iter().take(md).filter(|x| x.is_tp()).count();
                }
            }
            pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let flags: Vec<bool> = pooled.iter().map(|p| p.3).collect();
            ap[t].push(average_precision(&flags, n_gt).expect("n_gt > 0"));
            for (acc, p) in curves[t].iter_mut().zip(interpolated_precision(&flags, n_gt)) {
                *acc += p;
            }
            for (i, h) in hits.iter().enumerate() {
                recall[i][t].push(*h as f64 / n_gt as f64);
            }
        }
        // oLRP at tau
        let mut samples = Vec::new();
        for (si, scene) in scenes.iter().enumerate() {
            let ds = &grouped[si][c];
            let boxes: Vec<BBox> = ds.iter().map(|d| d.bbox).collect();
            let m = match_detections(&boxes, &gts_of(scene, c), LRP_TAU);
            samples.extend(ds.iter().zip(&m).map(|(d, mm)| LrpSample {
                score: d.score,
                iou: mm.gt.map(|g| g.1),
            }));
        }
        lrps.extend(olrp(&samples, n_gt, LRP_TAU));
    }

    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let per_t: Vec<f64> = ap.iter().map(|v| mean(v)).collect();
    let ar = |i: usize| 100.0 * mean(&recall[i].iter().map(|v| mean(v)).collect::<Vec<_>>());
    let lrp_mean = |f: fn(&Lrp) -> f64| {
        if lrps.is_empty() {
            None
        } else {
            Some(100.0 * lrps.iter().map(f).sum::<f64>() / lrps.len() as f64)
        }
    };
    MetricReport {
        ap: 100.0 * mean(&per_t),
        ap50: 100.0 * per_t[0],
        ap75: 100.0 * per_t[5],
        ar1: ar(0),
        ar10: ar(1),
        ar100: ar(2),
        olrp: lrp_mean(|l| l.olrp),
        olrp_loc: lrp_mean(|l| l.loc),
        olrp_fp: lrp_mean(|l| l.fp),
        olrp_fn: lrp_mean(|l| l.fn_),
        pr_curves: thresholds
            .iter()
            .zip(curves)
            .map(|(&iou, c)| PrCurve {
                iou,
                precision: c.iter().map(|p| p / curve_count.max(1) as f64).collect(),
            })
            .collect(),
    }
}
