//! Experiment plumbing behind the command-line tool: configuration, dataset
//! cache, ablation and sweep tables, diagnostics and plots.

mod config;
mod data;
mod plot;
mod runs;

pub use config::ExperimentConfig;
pub use data::{build_dataset, load_dataset, read_jsonl, save_dataset, split, write_jsonl};
pub use plot::{parse_series, plot_csvs, render_svg, Chart, Series};
pub use runs::{
    detections, diagnose, diagnostic_summary_csv, evaluate_model, iou_cdf_csv, log_csv, mean_report, report_csv,
    run_ablation, run_sweep, score_cdf_csv, train_and_evaluate, AblationTable, Row, RunResult, SweepAxis, SweepTable,
    Toggles, ABLATION_HEADER, DIAGNOSTIC_MATCHER, DIAGNOSTIC_SUMMARY_HEADER, IOU_CDF_HEADER, LOG_HEADER,
    SCORE_CDF_HEADER,
};
