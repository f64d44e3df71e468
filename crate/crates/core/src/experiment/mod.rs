//! Config-driven depth and homophily sweeps with CSV and table reports.

mod config;
mod report;
mod sweep;

use std::path::{Path, PathBuf};

pub use config::{DatasetSpec, ExperimentConfig, SweepConfig, MAX_DEPTH};
pub use report::{
    accuracy_per_gflop, best_rows, emit_report, fmt_float, mean_std, mu_trace_csv, read_mu_trace, read_results,
    results_csv, summarize, table, CellSummary, ReportFormat, ResultsRecord, RESULTS_HEADER,
};
pub use sweep::{cells, run_cell, run_depth_sweep, run_homophily_sweep, run_sweep, Cell, CellOutput, RunOptions, SweepOutcome};

use crate::error::{Error, Result};
use crate::graph::{generate_synthetic, write_planetoid, SyntheticSpec};

/// Generates the graph of `spec` and writes it as `graph.content` and
/// `graph.cites` in `dir`, with the spec next to it.
pub fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    spec.validate()?;
    let g = generate_synthetic(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let content = dir.join("graph.content");
    let cites = dir.join("graph.cites");
    write_planetoid(&g, &content, &cites)?;
    let spec_path = dir.join("spec.toml");
    let text = toml::to_string(spec).map_err(|e| Error::Format(format!("synthetic spec: {e}")))?;
    std::fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;
    Ok((content, cites))
}
