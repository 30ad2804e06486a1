//! Monte Carlo harness: scenario configuration, seeded replication across
//! worker threads, and CSV/table output.
//!
//! Every replicate draws its data from a stream derived from the master seed,
//! the scenario id and the replicate index, and all method cells are
//! evaluated on that one dataset, so results are paired across methods and
//! independent of the number of workers.

pub mod config;
pub mod output;
pub mod run;
pub mod seeds;

pub use config::{load_config, paper_methods, parse_config, Heterogeneity, MethodSpec, ScenarioConfig};
pub use output::{read_subjects, read_summary, render_table, write_raw, write_summary};
pub use run::{evaluate_cells, plan_cells, run_replicate, run_scenario, Cell, CellOutcome, ScenarioOutput};
