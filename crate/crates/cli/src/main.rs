use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use rwnn_core::experiments::{
    run_experiment, scaling_table, write_scaling_csv, Captures, ExperimentConfig, ExperimentKind,
};
use rwnn_core::Ridge;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Prices European options with backward random-feature regression.
///
/// Experiments: bs-convergence, bs-calls, bs-basket, rb-call, rb-convergence,
/// plus `scaling`, which runs bs-calls for every entry of `--dims`.
#[derive(Debug, Parser)]
#[command(name = "rwnn-pde", version)]
struct Cli {
    experiment: String,
    /// Hidden nodes; a comma-separated list for sweeps.
    #[arg(long, value_delimiter = ',')]
    nodes: Option<Vec<usize>>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Absolute ridge λ; the default is 1e-8 relative to the mean Gram diagonal.
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    connectivity: Option<f64>,
    #[arg(long)]
    range: Option<f64>,
    /// Omit to report both variants where the experiment has both.
    #[arg(long)]
    absorption: Option<Switch>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Asset count for bs-calls, or a list for `scaling`.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    reference_paths: Option<usize>,
    #[arg(long)]
    reference_steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    dump_weights: Option<PathBuf>,
    #[arg(long)]
    dump_paths: Option<PathBuf>,
}

fn config_from(cli: &Cli, kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(kind);
    cfg.seed = cli.seed;
    if let Some(v) = &cli.nodes {
        cfg.nodes = v.clone();
    }
    if let Some(v) = cli.paths {
        cfg.n_paths = v;
    }
    if let Some(v) = cli.steps {
        cfg.steps = v;
    }
    if let Some(v) = cli.ridge {
        cfg.ridge = Ridge::Absolute(v);
    }
    if let Some(v) = cli.connectivity {
        cfg.connectivity = v;
    }
    if let Some(v) = cli.range {
        cfg.range = v;
    }
    if let Some(v) = cli.absorption {
        cfg.absorption = Some(v == Switch::On);
    }
    if let Some(v) = cli.repeats {
        cfg.repeats = v;
    }
    if let Some(d) = cli.dims.as_ref().and_then(|d| d.first()) {
        cfg.dims = *d;
    }
    if let Some(v) = cli.reference_paths {
        cfg.reference_paths = v;
    }
    if let Some(v) = cli.reference_steps {
        cfg.reference_steps = v;
    }
    cfg
}

fn emit(out: &Option<PathBuf>, bytes: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if cli.experiment == "scaling" {
        let dims = cli.dims.clone().unwrap_or_else(|| vec![5, 10, 25, 50, 100]);
        let base = config_from(cli, ExperimentKind::BsCalls);
        let rows = scaling_table(&dims, &base)?;
        let mut buf = Vec::new();
        match cli.format {
            Format::Csv => write_scaling_csv(&rows, &mut buf)?,
            Format::Json => {
                let doc = serde_json::json!({
                    "schema": rwnn_core::experiments::SCHEMA_VERSION,
                    "experiment": "scaling",
                    "settings": base,
                    "rows": rows,
                });
                serde_json::to_writer_pretty(&mut buf, &doc)?;
                buf.push(b'\n');
            }
        }
        return emit(&cli.out, &buf);
    }

    let kind: ExperimentKind = cli.experiment.parse()?;
    let cfg = config_from(cli, kind);
    let captures = Captures {
        weights: cli.dump_weights.is_some(),
        paths: cli.dump_paths.is_some(),
    };
    let output = run_experiment(&cfg, captures)?;
    let mut buf = Vec::new();
    match cli.format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut buf, &output.document)?;
            buf.push(b'\n');
        }
        Format::Csv => output.write_csv(&mut buf)?,
    }
    emit(&cli.out, &buf)?;
    if let (Some(p), Some(w)) = (&cli.dump_weights, &output.weights) {
        fs::write(p, serde_json::to_vec_pretty(w)?).with_context(|| format!("writing {}", p.display()))?;
    }
    if let (Some(p), Some(csv)) = (&cli.dump_paths, &output.paths_csv) {
        fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn error_document(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<rwnn_core::Error>())
        .map(|e| e.kind())
        .unwrap_or("io");
    serde_json::json!({
        "schema": rwnn_core::experiments::SCHEMA_VERSION,
        "error": { "kind": kind, "message": format!("{err:#}") },
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_document(&err));
            ExitCode::FAILURE
        }
    }
}
