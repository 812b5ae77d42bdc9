use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use famsim::config::ExperimentConfig;
use famsim::error::SimError;
use famsim::experiment::{self, parse_bytes, parse_switch, SweepAxis};
use famsim::famnode::SchedulerKind;
use famsim::metrics::ReportFormat;

/// Simulate compute nodes sharing a fabric-attached memory pool.
#[derive(Debug, Parser)]
#[command(name = "famsim", version)]
struct Cli {
    /// TOML config; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory for report files.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Sweep one axis: block_size, allocation_ratio, nodes, wfq_weight,
    /// cache_size or adaptation.
    #[arg(long, value_name = "AXIS", requires = "values")]
    sweep: Option<SweepAxis>,

    /// Comma-separated sweep values.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    values: Vec<String>,

    #[arg(long, value_name = "N")]
    nodes: Option<usize>,

    #[arg(long, value_name = "fifo|wfq")]
    scheduler: Option<SchedulerKind>,

    #[arg(long, value_name = "W")]
    wfq_weight: Option<u32>,

    #[arg(long, value_name = "on|off", value_parser = parse_switch)]
    adaptation: Option<bool>,

    #[arg(long, value_name = "BYTES", value_parser = parse_bytes)]
    block_size: Option<u64>,

    #[arg(long, value_name = "BYTES", value_parser = parse_bytes)]
    cache_size: Option<u64>,

    /// FAM:local page ratio; `inf` places everything in FAM.
    #[arg(long, value_name = "X")]
    allocation_ratio: Option<f64>,

    /// Replay a trace instead of the configured generator.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,

    /// Accesses per node.
    #[arg(long, value_name = "N")]
    duration_accesses: Option<u64>,

    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

impl Cli {
    fn config(&self) -> Result<ExperimentConfig, SimError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.nodes {
            c.nodes = v;
        }
        if let Some(v) = self.scheduler {
            c.scheduler = v;
        }
        if let Some(v) = self.wfq_weight {
            c.wfq_weight = v;
        }
        if let Some(v) = self.adaptation {
            c.adaptation = v;
        }
        if let Some(v) = self.block_size {
            c.block_size = v;
        }
        if let Some(v) = self.cache_size {
            c.cache_size = v;
        }
        if let Some(v) = self.allocation_ratio {
            c.allocation_ratio = v;
        }
        if let Some(v) = &self.trace {
            c.trace = Some(v.display().to_string());
        }
        if let Some(v) = self.duration_accesses {
            c.duration_accesses = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn write(path: &Path, text: &str) -> Result<(), SimError> {
    std::fs::write(path, text).map_err(|e| SimError::io(path, e))
}

fn run(cli: &Cli) -> Result<(), SimError> {
    let cfg = cli.config()?;
    if cli.print_config {
        print!("{}", cfg.canonical());
        return Ok(());
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| SimError::io(&cli.out, e))?;
    match cli.sweep {
        None => {
            let o = experiment::run_experiment(&cfg)?;
            o.report
                .write(ReportFormat::Json, &cli.out.join("report.json"))?;
            o.report
                .write(ReportFormat::Csv, &cli.out.join("report.csv"))?;
            write(&cli.out.join("config.toml"), &cfg.canonical())?;
            println!(
                "{} demand reads, mean latency {}, written to {}",
                o.run.stats.demand_latency.count() + o.run.stats.local_latency.count(),
                o.run
                    .stats
                    .mean_fam_latency_ns()
                    .map_or("NA".into(), |v| format!("{v:.1} ns")),
                cli.out.display()
            );
        }
        Some(axis) => {
            let s = experiment::sweep(&cfg, axis, &cli.values)?;
            for (v, o) in s.values.iter().zip(&s.outcomes) {
                let stem = format!("{axis}_{v}");
                o.report
                    .write(ReportFormat::Json, &cli.out.join(format!("{stem}.json")))?;
                o.report
                    .write(ReportFormat::Csv, &cli.out.join(format!("{stem}.csv")))?;
            }
            let path = cli.out.join(format!("sweep_{axis}.csv"));
            write(&path, &s.summary_csv())?;
            println!("{} runs, summary in {}", s.outcomes.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("famsim: {e}");
            ExitCode::FAILURE
        }
    }
}
