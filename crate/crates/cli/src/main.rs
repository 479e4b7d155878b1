use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ada_core::harness::{self, aggregate_rows, compare, diagnose_consistency, AggregateRow, ExperimentConfig};
use ada_core::{Error, RunOutcome, Strategy};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

/// Exit status for a run that tripped one of the loop's invariant checks.
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "ada", version, about = "Active domain adaptation experiments on synthetic shifted data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "ada-out")]
        out: PathBuf,
    },
    /// Run several strategies over seeds 0..N and write an aggregate CSV.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "diana,random,entropy")]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Base config; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ada-out")]
        out: PathBuf,
    },
    /// Consistency rate of low- vs high-loss target samples after source
    /// pretraining, for each top-k size.
    DiagnoseConsistency {
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        k_sweep: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
        quantiles: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ada-out")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    // Dataset files are relative to the config that names them.
    if let Some(file) = cfg.dataset_file.as_mut() {
        if file.is_relative() {
            if let Some(dir) = path.parent() {
                *file = dir.join(&*file);
            }
        }
    }
    cfg.loop_cfg.validate()?;
    cfg.dataset.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    harness::write_csv(rows, BufWriter::new(f))?;
    Ok(())
}

/// Per-round reports and mixture parameters for one run.
fn write_rounds(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for r in &outcome.rounds {
        write_json(&dir.join(format!("round_{:03}.json", r.round)), r)?;
        if let Some(gmm) = &r.gmm {
            write_json(&dir.join(format!("gmm_round_{:03}.json", r.round)), gmm)?;
        }
    }
    Ok(())
}

fn run(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(Some(config))?;
    let outcome = cfg.run()?;
    write_rounds(out, &outcome)?;
    let seed = cfg.dataset.seed;
    write_aggregate(&out.join("aggregate.csv"), &aggregate_rows(&outcome, seed))?;
    outcome
        .model
        .to_checkpoint(&cfg.loop_cfg.train)
        .save(out.join("model.json"))?;

    println!("strategy {}  initial accuracy {:.4}", outcome.strategy, outcome.initial_accuracy);
    for r in &outcome.rounds {
        let p = &r.partition;
        println!(
            "round {:>2}  labeled {:>5}  accuracy {:.4}  selected error {:.3}  CC {} UC {} UI {} CI {}",
            r.round, r.annotated_total, r.accuracy, r.selected_error_rate, p.cc, p.uc, p.ui_residual, p.ci
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run_compare(strategies: &[String], seeds: u64, config: Option<&Path>, out: &Path) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let strategies = strategies
        .iter()
        .map(|s| s.trim().parse::<Strategy>())
        .collect::<Result<Vec<_>, _>>()?;
    let base = load_config(config)?;
    let runs = compare(&base, &strategies, 0..seeds)?;

    let mut rows = Vec::new();
    for (seed, outcome) in &runs {
        write_rounds(&out.join(outcome.strategy.name()).join(format!("seed_{seed}")), outcome)?;
        rows.extend(aggregate_rows(outcome, *seed));
    }
    write_aggregate(&out.join("aggregate.csv"), &rows)?;

    println!("{:<18} {:>10} {:>10}", "strategy", "initial", "final");
    for s in &strategies {
        let mine: Vec<&RunOutcome> = runs.iter().filter(|(_, o)| o.strategy == *s).map(|(_, o)| o).collect();
        let n = mine.len() as f64;
        let initial = mine.iter().map(|o| o.initial_accuracy).sum::<f64>() / n;
        let last = mine.iter().map(|o| o.final_accuracy()).sum::<f64>() / n;
        println!("{:<18} {initial:>10.4} {last:>10.4}", s.name());
    }
    println!("wrote {}", out.join("aggregate.csv").display());
    Ok(())
}

fn run_diagnose(k_sweep: &[usize], seeds: u64, quantiles: &[f64], config: Option<&Path>, out: &Path) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    if let Some(q) = quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
        bail!("quantile {q} outside (0, 1)");
    }
    let base = load_config(config)?;
    let rows = diagnose_consistency(&base, k_sweep, 0..seeds, quantiles)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("consistency.csv");
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    harness::write_csv(&rows, BufWriter::new(f))?;

    let fmt = |r: Option<f64>| r.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    println!("{:>4} {:>4} {:>8} {:>12} {:>12}", "seed", "k", "quantile", "well-learnt", "underfitted");
    for r in &rows {
        println!(
            "{:>4} {:>4} {:>8.2} {:>12} {:>12}",
            r.seed,
            r.k,
            r.quantile,
            fmt(r.rate_well_learnt),
            fmt(r.rate_underfitted)
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, out } => run(config, out),
        Command::Compare {
            strategies,
            seeds,
            config,
            out,
        } => run_compare(strategies, *seeds, config.as_deref(), out),
        Command::DiagnoseConsistency {
            k_sweep,
            seeds,
            quantiles,
            config,
            out,
        } => run_diagnose(k_sweep, *seeds, quantiles, config.as_deref(), out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::InvariantViolation(_)) => ExitCode::from(EXIT_INVARIANT),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
