//! Train/evaluate cells, ablation grids, sweeps and diagnostic tables.

use std::fmt::Write as _;

use crate::detector::{train, Model, StepLog};
use crate::error::{Error, Result};
use crate::losses::ClsLossKind;
use crate::matching::MatcherKind;
use crate::metrics::{
    collect_diagnostics, empirical_cdf, evaluate, Detection, EvalScene, LayerDiagnostics, MetricReport, PrCurve,
    REPORT_HEADER,
};
use crate::scene::Scene;

use super::ExperimentConfig;

pub struct RunResult {
    pub model: Model,
    pub log: Vec<StepLog>,
    pub report: MetricReport,
}

/// Final-layer detections of every scene, `k` per scene.
pub fn detections(model: &Model, scenes: &[Scene], k: usize) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend(model.infer(s, k)?.into_iter().map(|d| Detection {
            scene_id: s.id,
            bbox: d.bbox,
            category: d.category,
            score: d.score,
        }));
    }
    Ok(out)
}

pub fn evaluate_model(model: &Model, scenes: &[Scene], k: usize) -> Result<MetricReport> {
    let dets = detections(model, scenes, k)?;
    let gts: Vec<EvalScene> = scenes
        .iter()
        .map(|s| EvalScene {
            id: s.id,
            objects: s.objects.clone(),
        })
        .collect();
    Ok(evaluate(&dets, &gts, model.cfg.classes))
}

/// Trains a fresh model from `cfg` and evaluates it on `val`.
pub fn train_and_evaluate(cfg: &ExperimentConfig, train_set: &[Scene], val: &[Scene]) -> Result<RunResult> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone())?;
    let log = train(&mut model, train_set, &cfg.train)?;
    let report = evaluate_model(&model, val, cfg.eval_k())?;
    Ok(RunResult { model, log, report })
}

pub const LOG_HEADER: &str = "step,loss,matched_iou,matcher";

pub fn log_csv(log: &[StepLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for l in log {
        let _ = writeln!(out, "{},{:.6},{:.6},{}", l.step, l.loss, l.matched_iou, l.matcher.as_str());
    }
    out
}

pub fn report_csv(r: &MetricReport) -> String {
    format!("{REPORT_HEADER}\n{}\n", r.csv_fields())
}

/// The four mechanism switches of an ablation row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Toggles {
    /// Rank-adaptive classification head.
    pub rch: bool,
    /// Query rank layer.
    pub qrl: bool,
    /// GIoU-aware classification loss.
    pub gcl: bool,
    /// High-order matching cost.
    pub hmc: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        rch: true,
        qrl: true,
        gcl: true,
        hmc: true,
    };

    /// Baseline, then RCH, QRL, GCL and HMC added one at a time.
    pub fn cumulative() -> Vec<Toggles> {
        let mut rows = vec![Toggles::default()];
        for i in 0..4 {
            let mut t = *rows.last().expect("nonempty");
            match i {
                0 => t.rch = true,
                1 => t.qrl = true,
                2 => t.gcl = true,
                _ => t.hmc = true,
            }
            rows.push(t);
        }
        rows
    }

    /// All 16 on/off combinations.
    pub fn every() -> Vec<Toggles> {
        (0..16u8)
            .map(|b| Toggles {
                rch: b & 1 != 0,
                qrl: b & 2 != 0,
                gcl: b & 4 != 0,
                hmc: b & 8 != 0,
            })
            .collect()
    }

    /// GCL switches the loss to `giou_focal` or back to `focal`; the other
    /// loss and matcher settings are kept.
    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.model.rank_head = self.rch;
        c.model.query_rank = self.qrl;
        c.train.cls.kind = if self.gcl { ClsLossKind::GiouFocal } else { ClsLossKind::Focal };
        c.train.high_order = self.hmc;
        c
    }

    pub fn of(cfg: &ExperimentConfig) -> Toggles {
        Toggles {
            rch: cfg.model.rank_head,
            qrl: cfg.model.query_rank,
            gcl: cfg.train.cls.kind != ClsLossKind::Focal,
            hmc: cfg.train.high_order,
        }
    }

    /// `"RCH+QRL"` style label; `"baseline"` when everything is off.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [(self.rch, "RCH"), (self.qrl, "QRL"), (self.gcl, "GCL"), (self.hmc, "HMC")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            "baseline".into()
        } else {
            names.join("+")
        }
    }
}

/// Field-wise mean of reports; oLRP is absent if any report lacks it.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let avg_opt = |f: fn(&MetricReport) -> Option<f64>| {
        reports.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n)
    };
    Some(MetricReport {
        ap: avg(|r| r.ap),
        ap50: avg(|r| r.ap50),
        ap75: avg(|r| r.ap75),
        ar1: avg(|r| r.ar1),
        ar10: avg(|r| r.ar10),
        ar100: avg(|r| r.ar100),
        olrp: avg_opt(|r| r.olrp),
        olrp_loc: avg_opt(|r| r.olrp_loc),
        olrp_fp: avg_opt(|r| r.olrp_fp),
        olrp_fn: avg_opt(|r| r.olrp_fn),
        pr_curves: first
            .pr_curves
            .iter()
            .enumerate()
            .map(|(t, c)| PrCurve {
                iou: c.iou,
                precision: (0..c.precision.len())
                    .map(|k| reports.iter().map(|r| r.pr_curves[t].precision[k]).sum::<f64>() / n)
                    .collect(),
            })
            .collect(),
    })
}

/// One table row: the seed-mean report, or the first failure.
#[derive(Debug)]
pub struct Row {
    pub reports: Vec<MetricReport>,
    pub error: Option<Error>,
}

impl Row {
    pub fn mean(&self) -> Option<MetricReport> {
        if self.error.is_some() {
            None
        } else {
            mean_report(&self.reports)
        }
    }

    fn fields(&self) -> String {
        match self.mean() {
            Some(r) => format!("ok,{}", r.csv_fields()),
            None => format!("failed{}", ",".repeat(REPORT_HEADER.split(',').count())),
        }
    }
}

fn run_row(cfg: &ExperimentConfig, seeds: &[u64], train_set: &[Scene], val: &[Scene]) -> Row {
    let mut row = Row {
        reports: Vec::new(),
        error: None,
    };
    for &seed in seeds {
        match train_and_evaluate(&cfg.with_seed(seed), train_set, val) {
            Ok(r) => row.reports.push(r.report),
            Err(e) => {
                row.error = Some(e);
                break;
            }
        }
    }
    row
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    Ok(())
}

pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<(Toggles, Row)>,
}

pub const ABLATION_HEADER: &str = "rch,qrl,gcl,hmc,status";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER},{REPORT_HEADER}\n");
        for (t, row) in &self.rows {
            let b = |x: bool| x as u8;
            let _ = writeln!(out, "{},{},{},{},{}", b(t.rch), b(t.qrl), b(t.gcl), b(t.hmc), row.fields());
        }
        out
    }
}

/// Trains every toggle combination for every seed on the dataset of `cfg`.
/// A failing cell marks its row failed; the remaining rows still run.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    grid: &[Toggles],
    seeds: &[u64],
    train_set: &[Scene],
    val: &[Scene],
) -> Result<AblationTable> {
    check_seeds(seeds)?;
    cfg.validate()?;
    let rows = grid
        .iter()
        .map(|t| (*t, run_row(&t.apply(cfg), seeds, train_set, val)))
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SweepAxis {
    /// High-order matching exponent; turns the high-order cost on.
    Alpha,
    /// Power of the soft classification target; switches a plain focal loss
    /// to the GIoU-aware one.
    TargetPower,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::TargetPower => "target_power",
        }
    }

    pub fn apply(&self, cfg: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            SweepAxis::Alpha => {
                c.train.high_order = true;
                c.train.matcher.alpha = value;
            }
            SweepAxis::TargetPower => {
                if c.train.cls.kind == ClsLossKind::Focal {
                    c.train.cls.kind = ClsLossKind::GiouFocal;
                }
                c.train.cls.target.power = value;
            }
        }
        c
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "target_power" => Ok(Self::TargetPower),
            other => Err(format!("unknown sweep axis `{other}` (expected alpha|target_power)")),
        }
    }
}

pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<(f64, Row)>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("axis,value,status,{REPORT_HEADER}\n");
        for (v, row) in &self.rows {
            let _ = writeln!(out, "{},{v:?},{}", self.axis.as_str(), row.fields());
        }
        out
    }
}

pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    train_set: &[Scene],
    val: &[Scene],
) -> Result<SweepTable> {
    check_seeds(seeds)?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    for &v in values {
        axis.apply(cfg, v).validate()?;
    }
    let rows = values
        .iter()
        .map(|&v| (v, run_row(&axis.apply(cfg, v), seeds, train_set, val)))
        .collect();
    Ok(SweepTable { axis, rows })
}

/// Queries are labelled matched/unmatched by the linear cost for every model,
/// so models trained with different matchers are compared on the same rule.
pub const DIAGNOSTIC_MATCHER: MatcherKind = MatcherKind::Linear;

pub fn diagnose(model: &Model, cfg: &ExperimentConfig, scenes: &[Scene]) -> Result<Vec<LayerDiagnostics>> {
    collect_diagnostics(model, scenes, &cfg.train.weights, &cfg.train.matcher, DIAGNOSTIC_MATCHER)
}

pub const SCORE_CDF_HEADER: &str = "layer,group,score,cdf";
pub const IOU_CDF_HEADER: &str = "layer,iou,cdf";

/// Per-layer CDFs of matched and unmatched max-class scores.
pub fn score_cdf_csv(diags: &[LayerDiagnostics]) -> String {
    let mut out = format!("{SCORE_CDF_HEADER}\n");
    for d in diags {
        for (group, v) in [("matched", &d.matched_scores), ("unmatched", &d.unmatched_scores)] {
            for (x, p) in empirical_cdf(v) {
                let _ = writeln!(out, "{},{group},{x:.6},{p:.6}", d.layer);
            }
        }
    }
    out
}

/// Per-layer CDF of each unmatched query's largest IoU with any ground truth.
pub fn iou_cdf_csv(diags: &[LayerDiagnostics]) -> String {
    let mut out = format!("{IOU_CDF_HEADER}\n");
    for d in diags {
        for (x, p) in empirical_cdf(&d.unmatched_max_iou) {
            let _ = writeln!(out, "{},{x:.6},{p:.6}", d.layer);
        }
    }
    out
}

pub const DIAGNOSTIC_SUMMARY_HEADER: &str = "layer,matched,unmatched,matched_mean,unmatched_mean,unmatched_iou_mean";

pub fn diagnostic_summary_csv(diags: &[LayerDiagnostics]) -> String {
    let mut out = format!("{DIAGNOSTIC_SUMMARY_HEADER}\n");
    for d in diags {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6}",
            d.layer,
            d.matched_scores.len(),
            d.unmatched_scores.len(),
            LayerDiagnostics::mean(&d.matched_scores),
            LayerDiagnostics::mean(&d.unmatched_scores),
            LayerDiagnostics::mean(&d.unmatched_max_iou)
        );
    }
    out
}
