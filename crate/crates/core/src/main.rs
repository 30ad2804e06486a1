//! Command-line front end for the simulation harness.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use hybrid_borrow::harness::output::{RAW_FILE, SUMMARY_FILE};
use hybrid_borrow::harness::run::outcome_rows;
use hybrid_borrow::harness::{
    evaluate_cells, load_config, paper_methods, plan_cells, read_subjects, read_summary, render_table, run_scenario,
    write_raw, write_summary, Heterogeneity, ScenarioConfig,
};
use hybrid_borrow::trialdata::PRESET_NAMES;
use hybrid_borrow::{Error, GenCoefficients, Result};

#[derive(Parser)]
#[command(name = "hybrid-borrow", version, about = "Borrowing estimators for hybrid-controlled trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenarios of a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this scenario.
        #[arg(long)]
        scenario: Option<String>,
        /// Override the number of replicates.
        #[arg(long)]
        reps: Option<u64>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = default_threads())]
        threads: usize,
        /// Output directory for raw.csv and summary.csv.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Exit with status 3 when any cell fails on a larger share of replicates.
        #[arg(long, default_value_t = 0.05)]
        max_failure_rate: f64,
    },
    /// Inspect coefficient presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
    /// Render summary.csv from an output directory as text tables.
    Table {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Style::Paper)]
        style: Style,
    },
    /// Apply every method to one subject-level CSV
    /// (columns id,x1..x6,treated,trial,y).
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    Paper,
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, scenario, reps, seed, threads, out, max_failure_rate } => {
            run(&config, scenario.as_deref(), reps, seed, threads, &out, max_failure_rate)
        }
        Command::Presets { action: PresetAction::List } => {
            list_presets();
            Ok(ExitCode::SUCCESS)
        }
        Command::Table { input, style: Style::Paper } => {
            let rows = read_summary(File::open(input.join(SUMMARY_FILE))?)?;
            print!("{}", render_table(&rows));
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { data, alpha, seed } => analyze(&data, alpha, seed),
    }
}

fn run(
    path: &Path,
    only: Option<&str>,
    reps: Option<u64>,
    seed: Option<u64>,
    threads: usize,
    out: &Path,
    max_failure_rate: f64,
) -> Result<ExitCode> {
    if threads == 0 {
        return Err(Error::Config("--threads must be at least 1".to_string()));
    }
    if reps == Some(0) {
        return Err(Error::Config("--reps must be at least 1".to_string()));
    }
    let mut scenarios = load_config(path)?;
    if let Some(id) = only {
        scenarios.retain(|s| s.scenario_id == id);
        if scenarios.is_empty() {
            return Err(Error::Config(format!("no scenario `{id}` in {}", path.display())));
        }
    }
    std::fs::create_dir_all(out)?;
    let mut raw = BufWriter::new(File::create(out.join(RAW_FILE))?);
    let mut summary = BufWriter::new(File::create(out.join(SUMMARY_FILE))?);
    let mut worst: f64 = 0.0;
    let mut all_rows = Vec::new();
    for (i, mut cfg) in scenarios.into_iter().enumerate() {
        if let Some(r) = reps {
            cfg.replicates = r;
        }
        if let Some(s) = seed {
            cfg.master_seed = s;
        }
        let start = Instant::now();
        let result = run_scenario(&cfg, threads)?;
        eprintln!(
            "{}: {} replicates in {:.1}s",
            cfg.scenario_id,
            cfg.replicates,
            start.elapsed().as_secs_f64()
        );
        write_raw(&mut raw, &result.rows, i == 0)?;
        write_summary(&mut summary, &result.summary, i == 0)?;
        worst = worst.max(result.max_failure_rate());
        all_rows.extend(result.summary);
    }
    print!("{}", render_table(&all_rows));
    if worst > max_failure_rate {
        eprintln!("highest per-cell failure rate {worst:.3} exceeds {max_failure_rate}");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn list_presets() {
    for name in PRESET_NAMES {
        let c = GenCoefficients::preset(name).expect("listed presets exist");
        println!(
            "{name}: k_historical={} n_total={} theta_alt={} alpha0={} alpha={:?} membership={:?}",
            c.k_historical(),
            c.default_n_total(),
            c.theta_treat,
            c.alpha0,
            c.alpha,
            c.assignment
        );
    }
}

fn analyze(path: &Path, alpha: f64, seed: u64) -> Result<ExitCode> {
    let dataset = read_subjects(File::open(path)?)?;
    let k = dataset.k_historical();
    let mut cfg = ScenarioConfig::from_preset("data", if k == 1 { "single-severe" } else { "multi-severe" }, 0.0)?;
    cfg.methods = paper_methods(k, Heterogeneity::Severe);
    cfg.alpha = alpha;
    let cells = plan_cells(&cfg)?;
    let outcomes = evaluate_cells(&dataset, &cells, seed, alpha);
    let rows = outcome_rows("data", 0, &outcomes);
    println!(
        "{:<9} {:>6} {:<34} {:>9} {:>8} {:>19} {:>6} {:>8}",
        "method", "covset", "hyperparam", "estimate", "se", "interval", "reject", "ESSR(%)"
    );
    for (o, row) in outcomes.iter().zip(&rows) {
        let (method, covset) = (o.key.method.as_str(), o.key.covset_label());
        match &o.result {
            Ok(e) => println!(
                "{:<9} {:>6} {:<34} {:>9.4} {:>8.4} [{:>8.4},{:>8.4}] {:>6} {:>8.1}",
                method, covset, o.key.hyperparam, e.estimate, e.se, e.interval.0, e.interval.1, e.reject, row.essr_pct
            ),
            Err(reason) => println!("{:<9} {:>6} {:<34} failed: {reason}", method, covset, o.key.hyperparam),
        }
    }
    Ok(ExitCode::SUCCESS)
}
