//! `rankdet`: generate data, train, evaluate, ablate, sweep, diagnose, plot.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use rankdet::autodiff::{load_checkpoint, save_checkpoint};
use rankdet::detector::Model;
use rankdet::harness::{
    build_dataset, diagnose, diagnostic_summary_csv, evaluate_model, iou_cdf_csv, load_dataset, log_csv, parse_series,
    render_svg, report_csv, run_ablation, run_sweep, save_dataset, score_cdf_csv, split, train_and_evaluate, Chart,
    ExperimentConfig, SweepAxis, Toggles,
};
use rankdet::scene::Scene;
use rankdet::Error;

#[derive(Parser)]
#[command(name = "rankdet", version, about = "Rank-oriented detection experiments on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scenes from a JSON-lines cache instead of regenerating them.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the dataset cache.
    GenData(Common),
    /// Train, save a checkpoint and evaluate on the val split.
    Train(Common),
    /// Evaluate a checkpoint on the val split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the run directory's `model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mechanism ablation table, mean over seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// `cumulative` (baseline then one mechanism added per row) or `all` (16 rows).
        #[arg(long, default_value = "cumulative")]
        grid: String,
    },
    /// One row per value of a configuration axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// `alpha` or `target_power`.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Score and unmatched-IoU distributions per decoder layer.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Trains from scratch when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render CSVs (overlaid) as one SVG line chart.
    Plot {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> rankdet::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg.with_seed(c.seed.unwrap_or(cfg.seed)))
}

fn scenes(c: &Common, cfg: &ExperimentConfig) -> anyhow::Result<(Vec<Scene>, Vec<Scene>)> {
    let all = match &c.data {
        Some(p) => load_dataset(p).with_context(|| format!("loading {}", p.display()))?,
        None => build_dataset(cfg),
    };
    let (tr, va) = split(&all);
    if tr.is_empty() || va.is_empty() {
        return Err(Error::Config("dataset needs both train and val scenes".into()).into());
    }
    Ok((tr, va))
}

fn write(dir: &Path, name: &str, body: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> anyhow::Result<Model> {
    let mut model = Model::new(cfg.model.clone())?;
    load_checkpoint(&mut model.store, path).map_err(Error::from)?;
    Ok(model)
}

fn seeds_label(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join("_")
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData(c) => {
            let cfg = load_config(&c)?;
            let dir = cfg.run_dir();
            write(&dir, "config.txt", &cfg.to_text())?;
            let path = dir.join("dataset.jsonl");
            save_dataset(&build_dataset(&cfg), &path)?;
            println!("{}", path.display());
        }
        Cmd::Train(c) => {
            let cfg = load_config(&c)?;
            let (tr, va) = scenes(&c, &cfg)?;
            let dir = cfg.run_dir();
            write(&dir, "config.txt", &cfg.to_text())?;
            let r = train_and_evaluate(&cfg, &tr, &va)?;
            write(&dir, "train_log.csv", &log_csv(&r.log))?;
            save_checkpoint(&r.model.store, dir.join("model.ckpt")).map_err(Error::from)?;
            write(&dir, "report.csv", &report_csv(&r.report))?;
            write(&dir, "pr_curves.csv", &r.report.pr_csv())?;
            print!("{}", report_csv(&r.report));
            eprintln!("run directory: {}", dir.display());
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let (_, va) = scenes(&common, &cfg)?;
            let dir = cfg.run_dir();
            let ckpt = checkpoint.unwrap_or_else(|| dir.join("model.ckpt"));
            let model = load_model(&cfg, &ckpt)?;
            let report = evaluate_model(&model, &va, cfg.eval_k())?;
            write(&dir, "eval_report.csv", &report_csv(&report))?;
            write(&dir, "pr_curves.csv", &report.pr_csv())?;
            print!("{}", report_csv(&report));
        }
        Cmd::Ablate { common, seeds, grid } => {
            let cfg = load_config(&common)?;
            let grid = match grid.as_str() {
                "cumulative" => Toggles::cumulative(),
                "all" => Toggles::every(),
                other => return Err(Error::Config(format!("unknown grid `{other}` (expected cumulative|all)")).into()),
            };
            let (tr, va) = scenes(&common, &cfg)?;
            let table = run_ablation(&cfg, &grid, &seeds, &tr, &va)?;
            let dir = cfg.out_dir.join(format!("{}-ablate-s{}", cfg.hash(), seeds_label(&seeds)));
            write(&dir, "config.txt", &cfg.to_text())?;
            let csv = table.to_csv();
            write(&dir, "ablation.csv", &csv)?;
            for (t, row) in &table.rows {
                if let Some(e) = &row.error {
                    eprintln!("row {} failed: {e}", t.label());
                }
            }
            print!("{csv}");
        }
        Cmd::Sweep {
            common,
            seeds,
            axis,
            values,
        } => {
            let cfg = load_config(&common)?;
            let axis: SweepAxis = axis.parse().map_err(Error::Config)?;
            let (tr, va) = scenes(&common, &cfg)?;
            let table = run_sweep(&cfg, axis, &values, &seeds, &tr, &va)?;
            let dir = cfg
                .out_dir
                .join(format!("{}-sweep-{}-s{}", cfg.hash(), axis.as_str(), seeds_label(&seeds)));
            write(&dir, "config.txt", &cfg.to_text())?;
            let csv = table.to_csv();
            write(&dir, "sweep.csv", &csv)?;
            print!("{csv}");
        }
        Cmd::Diagnose { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let (tr, va) = scenes(&common, &cfg)?;
            let dir = cfg.run_dir();
            let model = match checkpoint {
                Some(p) => load_model(&cfg, &p)?,
                None => train_and_evaluate(&cfg, &tr, &va)?.model,
            };
            let diags = diagnose(&model, &cfg, &va)?;
            write(&dir, "score_cdf.csv", &score_cdf_csv(&diags))?;
            write(&dir, "unmatched_iou_cdf.csv", &iou_cdf_csv(&diags))?;
            let summary = diagnostic_summary_csv(&diags);
            write(&dir, "diagnostics.csv", &summary)?;
            print!("{summary}");
        }
        Cmd::Plot { inputs, out } => {
            let mut chart = Chart {
                series: Vec::new(),
                x_label: "x".into(),
                y_label: "y".into(),
            };
            for (i, p) in inputs.iter().enumerate() {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                // series of overlaid files are told apart by file stem
                let prefix = match inputs.len() {
                    1 => String::new(),
                    _ => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                };
                let (series, xl, yl) = parse_series(&text, &prefix).with_context(|| format!("{}", p.display()))?;
                if i == 0 {
                    (chart.x_label, chart.y_label) = (xl, yl);
                }
                chart.series.extend(series);
            }
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, render_svg(&chart)).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Numerical { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
