//! Thin command-line front end over the experiment driver. All real logic
//! lives in the library; this binary only parses arguments, applies config
//! overrides, and reports artifact paths.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mdt3d::evalkit::EvalReport;
use mdt3d::experiment::{compare, run, ExpError, ExperimentConfig, ExperimentKind, RunRow};

#[derive(Parser)]
#[command(name = "mdt3d", about = "Multi-dataset 3D detection experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dotted-path config overrides, e.g. --set detector.lr=0.02
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets as JSONL frame files.
    Gen(RunArgs),
    /// Train jointly on the configured datasets, then evaluate.
    Train(RunArgs),
    /// Evaluate a saved checkpoint.
    Eval(RunArgs),
    /// Re-train with prompts enabled stage by stage and compare.
    AblateStages(RunArgs),
    /// Sweep the statistics-mixing coefficient alpha.
    SweepAlpha(RunArgs),
    /// Train on all datasets but one; evaluate the held-out one.
    Zeroshot(RunArgs),
    /// Diff two report.json files cell by cell.
    Compare {
        report_a: PathBuf,
        report_b: PathBuf,
    },
}

fn build_config(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig, ExpError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::new(kind, &args.out),
    };
    cfg.kind = kind;
    cfg.out_dir = args.out.clone();
    for s in &args.sets {
        cfg.apply_set(s)?;
    }
    Ok(cfg)
}

fn run_kind(kind: ExperimentKind, args: &RunArgs) -> Result<(), ExpError> {
    let cfg = build_config(kind, args)?;
    let summary = run(&cfg)?;
    for row in &summary.rows {
        let maps: Vec<String> = row
            .report
            .datasets
            .iter()
            .map(|d| format!("d{}={:.4}", d.dataset_id, d.map_bev.unwrap_or(f64::NAN)))
            .collect();
        println!("{:<18} mAP_BEV {}", row.label, maps.join(" "));
    }
    for path in &summary.artifacts {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_compare(a: &PathBuf, b: &PathBuf) -> Result<(), ExpError> {
    // report.json from `run` holds labelled rows; also accept a bare report.
    let load = |p: &PathBuf| -> Result<EvalReport, ExpError> {
        let text = std::fs::read_to_string(p)?;
        if let Ok(rows) = serde_json::from_str::<Vec<RunRow>>(&text) {
            if let Some(first) = rows.into_iter().next() {
                return Ok(first.report);
            }
        }
        Ok(serde_json::from_str(&text)?)
    };
    let table = compare(&load(a)?, &load(b)?)?;
    println!("dataset,class,metric,a,b,delta");
    for c in &table.cells {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        println!(
            "{},{},{},{},{},{}",
            c.dataset_id,
            c.class_id,
            c.metric,
            f(c.a),
            f(c.b),
            f(c.delta)
        );
    }
    for (ds, d) in &table.map_deltas {
        println!("dataset {ds} mAP_BEV delta: {}", d.map(|x| format!("{x:+.6}")).unwrap_or_default());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => run_kind(ExperimentKind::Gen, a),
        Command::Train(a) => run_kind(ExperimentKind::Train, a),
        Command::Eval(a) => run_kind(ExperimentKind::Eval, a),
        Command::AblateStages(a) => run_kind(ExperimentKind::AblateStages, a),
        Command::SweepAlpha(a) => run_kind(ExperimentKind::SweepAlpha, a),
        Command::Zeroshot(a) => run_kind(ExperimentKind::Zeroshot, a),
        Command::Compare { report_a, report_b } => run_compare(report_a, report_b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
