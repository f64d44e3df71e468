use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One completed sweep cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsRecord {
    pub cell: String,
    pub model: String,
    pub dataset: String,
    pub depth: usize,
    pub homophily: Option<f64>,
    pub seed: u64,
    pub test_acc: f64,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    /// `μ(X)` at the last hidden layer (the input for depth 1).
    pub mu_last_hidden: f64,
    pub gflops: f64,
    /// Mean surviving non-self-loop edges per layer, pruned models only.
    pub edges_alive: Option<f64>,
    /// `μ(X)` of the input and of every layer output.
    pub mu_trace: Vec<f64>,
}

pub const RESULTS_HEADER: &str =
    "cell,model,dataset,depth,homophily,seed,test_acc,best_val_acc,best_epoch,mu_last_hidden,gflops,edges_alive";

/// Fixed 12-significant-digit float formatting for byte-stable output.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.11e}")
}

impl ResultsRecord {
    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.cell,
            self.model,
            self.dataset,
            self.depth,
            opt(self.homophily),
            self.seed,
            fmt_float(self.test_acc),
            fmt_float(self.best_val_acc),
            self.best_epoch,
            fmt_float(self.mu_last_hidden),
            fmt_float(self.gflops),
            opt(self.edges_alive),
        )
    }

    /// Parses a row written by [`Self::to_csv_row`]; `mu_trace` is left
    /// empty.
    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 12 {
            return Err(Error::Format(format!("results row has {} fields, expected 12: `{line}`", f.len())));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number `{s}` in results row"))) };
        let int = |s: &str| -> Result<u64> { s.parse().map_err(|_| Error::Format(format!("bad integer `{s}` in results row"))) };
        let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        Ok(Self {
            cell: f[0].to_string(),
            model: f[1].to_string(),
            dataset: f[2].to_string(),
            depth: int(f[3])? as usize,
            homophily: opt(f[4])?,
            seed: int(f[5])?,
            test_acc: num(f[6])?,
            best_val_acc: num(f[7])?,
            best_epoch: int(f[8])? as usize,
            mu_last_hidden: num(f[9])?,
            gflops: num(f[10])?,
            edges_alive: opt(f[11])?,
            mu_trace: Vec::new(),
        })
    }
}

pub fn results_csv(records: &[ResultsRecord]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn read_results(path: &Path) -> Result<Vec<ResultsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULTS_HEADER => {}
        _ => return Err(Error::Format(format!("{} does not start with the results header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(ResultsRecord::from_csv_row).collect()
}

pub fn mu_trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("layer,mu\n");
    for (l, m) in trace.iter().enumerate() {
        writeln!(out, "{l},{}", fmt_float(*m)).unwrap();
    }
    out
}

pub fn read_mu_trace(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad mu trace row `{l}` in {}", path.display())))
        })
        .collect()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Accuracy in percent per giga-FLOP.
pub fn accuracy_per_gflop(acc: f64, gflops: f64) -> f64 {
    100.0 * acc / gflops
}

/// Seed-aggregated record of one (dataset, model, homophily, depth) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub dataset: String,
    pub model: String,
    pub homophily: Option<f64>,
    pub depth: usize,
    pub seeds: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_gflops: f64,
    pub mean_mu: f64,
}

impl CellSummary {
    pub fn ratio(&self) -> f64 {
        accuracy_per_gflop(self.mean_acc, self.mean_gflops)
    }
}

type GroupKey = (String, String, Option<u64>);

fn group_key(r: &ResultsRecord) -> GroupKey {
    (r.dataset.clone(), r.model.clone(), r.homophily.map(f64::to_bits))
}

pub fn summarize(records: &[ResultsRecord]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(GroupKey, usize), Vec<&ResultsRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((group_key(r), r.depth)).or_default().push(r);
    }
    let mut out: Vec<CellSummary> = groups
        .into_iter()
        .map(|((_, depth), rs)| {
            let accs: Vec<f64> = rs.iter().map(|r| r.test_acc).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            let n = rs.len() as f64;
            CellSummary {
                dataset: rs[0].dataset.clone(),
                model: rs[0].model.clone(),
                homophily: rs[0].homophily,
                depth,
                seeds: rs.len(),
                mean_acc,
                std_acc,
                mean_gflops: rs.iter().map(|r| r.gflops).sum::<f64>() / n,
                mean_mu: rs.iter().map(|r| r.mu_last_hidden).sum::<f64>() / n,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (&a.dataset, &a.model, a.homophily.map(f64::to_bits), a.depth).cmp(&(
            &b.dataset,
            &b.model,
            b.homophily.map(f64::to_bits),
            b.depth,
        ))
    });
    out
}

/// Best-accuracy depth per (dataset, model, homophily); ties go to the
/// shallower stack.
pub fn best_rows(summaries: &[CellSummary]) -> Vec<CellSummary> {
    let mut best: BTreeMap<GroupKey, CellSummary> = BTreeMap::new();
    for s in summaries {
        let key = (s.dataset.clone(), s.model.clone(), s.homophily.map(f64::to_bits));
        match best.get(&key) {
            Some(b) if b.mean_acc > s.mean_acc || (b.mean_acc == s.mean_acc && b.depth <= s.depth) => {}
            _ => {
                best.insert(key, s.clone());
            }
        }
    }
    best.into_values().collect()
}

/// Fixed-width table of the best depth per model.
pub fn table(records: &[ResultsRecord]) -> String {
    let rows = best_rows(&summarize(records));
    let mut out = String::new();
    writeln!(
        out,
        "{:<12} {:<12} {:>6} {:>16} {:>8} {:>12} {:>16}",
        "Model", "Dataset", "h", "Best Accuracy", "#Layers", "GFLOPs", "Accuracy/GFLOPs"
    )
    .unwrap();
    for r in rows {
        let h = r.homophily.map(|h| format!("{h:.2}")).unwrap_or_else(|| "-".into());
        let acc = format!("{:.2} ± {:.2}", 100.0 * r.mean_acc, 100.0 * r.std_acc);
        writeln!(
            out,
            "{:<12} {:<12} {:>6} {:>16} {:>8} {:>12.6} {:>16.2}",
            r.model,
            r.dataset,
            h,
            acc,
            r.depth,
            r.mean_gflops,
            r.ratio()
        )
        .unwrap();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Table,
}

/// Writes `results.csv` and/or `table1.txt` into `dir`.
pub fn emit_report(records: &[ResultsRecord], dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::invalid("no records to report"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for f in formats {
        let (name, body) = match f {
            ReportFormat::Csv => ("results.csv", results_csv(records)),
            ReportFormat::Table => ("table1.txt", table(records)),
        };
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
