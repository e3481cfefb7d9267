use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccgl_core::eval::MetricsReport;
use ccgl_core::pipeline::{
    run_pipeline, stage_evaluate, stage_export, stage_ingest, stage_synth, stage_train_cgl, stage_train_dgc,
};
use ccgl_core::{Error, RunConfig};
use clap::{Parser, Subcommand};

/// Contrastive FC graph learning and population-graph classification.
#[derive(Parser)]
#[command(name = "ccgl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write the cohort snapshot.
    Synth,
    /// Build every view graph and write a summary.
    Ingest,
    /// Train the contrastive encoder per seed.
    TrainCgl,
    /// Train the population-graph classifier from saved encoders.
    TrainDgc,
    /// Recompute metrics from saved checkpoints.
    Evaluate,
    /// Write embeddings and the population graph.
    ExportGraph,
    /// All stages for every seed, then aggregated metrics.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(name: &str, r: &MetricsReport) {
    println!(
        "{name}: auc {:.4} ± {:.4}  acc {:.4}  sen {:.4}  spec {:.4}  ({} runs)",
        r.mean.auc,
        r.std.auc,
        r.mean.acc,
        r.mean.sen,
        r.mean.spec,
        r.runs.len()
    );
}

fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    match cmd {
        Command::Synth => {
            let dir = stage_synth(cfg, out)?;
            println!("cohort written to {}", dir.display());
        }
        Command::Ingest => {
            let s = stage_ingest(cfg, out)?;
            println!(
                "{} patients, {} ROIs, {} views each, {:.1} edges per view, classes {:?}",
                s.patients, s.rois, s.views_per_patient, s.mean_edges_per_view, s.class_counts
            );
        }
        Command::TrainCgl => {
            for (seed, a) in cfg.seeds.iter().zip(stage_train_cgl(cfg, out)?) {
                println!(
                    "seed {seed}: homo {:.3} ± {:.3}, heter {:.3} ± {:.3}",
                    a.homo.mean, a.homo.std, a.heter.mean, a.heter.std
                );
            }
        }
        Command::TrainDgc => {
            stage_train_dgc(cfg, out)?;
            println!("classifier checkpoints written under {}", out.display());
        }
        Command::Evaluate => {
            let (dgc, knn) = stage_evaluate(cfg, out)?;
            print_report("dgc", &dgc);
            print_report("knn", &knn);
        }
        Command::ExportGraph => {
            stage_export(cfg, out)?;
            println!("graphs written under {}", out.display());
        }
        Command::Pipeline => {
            let report = run_pipeline(cfg, out)?;
            print_report("dgc", &report.dgc);
            print_report("knn", &report.knn);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = load_config(&cli).and_then(|cfg| run(cli.command, &cfg, &cfg.output_dir));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
