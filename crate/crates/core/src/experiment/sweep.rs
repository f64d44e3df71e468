use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use super::config::ExperimentConfig;
use super::report::{mu_trace_csv, read_mu_trace, read_results, results_csv, ResultsRecord, RESULTS_HEADER};
use crate::dynamics::analyze_model;
use crate::error::{Error, Result};
use crate::graph::{generate_synthetic, split_masks, Graph};
use crate::nn::{count_flops_topology, save_masks, save_model, train, LayerMask, Model, Topology, TrainHook};
use crate::prune::{write_prune_log, DynamoHook, PruneLogRow};

/// One point of a sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub depth: usize,
    pub homophily: Option<f64>,
    pub seed: u64,
}

impl Cell {
    /// File-name-safe identifier, unique within a sweep.
    pub fn id(&self) -> String {
        match self.homophily {
            Some(h) => format!("d{:03}_h{:.3}_s{}", self.depth, h, self.seed),
            None => format!("d{:03}_s{}", self.depth, self.seed),
        }
    }
}

/// Grid of a config in canonical order: homophily, then depth, then seed.
pub fn cells(cfg: &ExperimentConfig, seed_offset: u64) -> Vec<Cell> {
    let hs: Vec<Option<f64>> = if cfg.sweep.homophily.is_empty() {
        vec![None]
    } else {
        cfg.sweep.homophily.iter().map(|&h| Some(h)).collect()
    };
    let mut out = Vec::new();
    for h in hs {
        for &depth in &cfg.sweep.depths {
            for &s in &cfg.sweep.seeds {
                out.push(Cell {
                    depth,
                    homophily: h,
                    seed: s.wrapping_add(seed_offset),
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub workers: usize,
    pub seed_offset: u64,
    /// Directory relative dataset paths resolve against.
    pub base_dir: PathBuf,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            seed_offset: 0,
            base_dir: PathBuf::from("."),
        }
    }
}

pub struct CellOutput {
    pub record: ResultsRecord,
    pub prune_log: Option<Vec<PruneLogRow>>,
    pub model: Model,
    /// Final pruning masks, pruned models only.
    pub masks: Option<Vec<LayerMask>>,
    pub wall_seconds: f64,
}

/// Graph of a cell: homophily cells draw their own graph, seeded by the
/// spec seed plus the cell seed.
fn cell_graph(cfg: &ExperimentConfig, shared: Option<&Graph>, cell: &Cell) -> Result<Option<Graph>> {
    match (cell.homophily, cfg.dataset.synthetic()) {
        (Some(h), Some(spec)) => {
            let mut spec = spec.clone();
            spec.target_homophily = h;
            spec.seed = spec.seed.wrapping_add(cell.seed);
            Ok(Some(generate_synthetic(&spec)?))
        }
        (Some(_), None) => Err(Error::InvalidConfig("a homophily sweep needs a synthetic dataset".into())),
        (None, _) if shared.is_some() => Ok(None),
        (None, _) => Err(Error::invalid("no graph available for the cell")),
    }
}

/// Trains and evaluates one cell.
pub fn run_cell(cfg: &ExperimentConfig, shared: Option<&Graph>, cell: &Cell) -> Result<CellOutput> {
    let start = Instant::now();
    let owned = cell_graph(cfg, shared, cell)?;
    let g = owned.as_ref().or(shared).expect("graph resolved above");
    let masks = split_masks(g, cfg.split, cell.seed)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.depth = cell.depth;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cell.seed;

    let mut hook = match &cfg.prune {
        Some(p) => {
            let mut p = p.clone();
            p.seed = p.seed.wrapping_add(cell.seed);
            Some(DynamoHook::new(p)?)
        }
        None => None,
    };
    let (report, model) = train(g, &masks, &model_cfg, &train_cfg, hook.as_mut().map(|h| h as &mut dyn TrainHook))?;
    let topo = Topology::new(g);
    let layer_masks = hook.as_ref().and_then(|h| h.masks());
    let dynamics = analyze_model(&model, &topo, g.features(), layer_masks, None)?;
    let flops = count_flops_topology(&model_cfg, &topo, g.feature_dim(), g.n_classes(), layer_masks);
    let mu_last_hidden = dynamics.mu_trace[cell.depth - 1];
    let edges_alive = hook.as_ref().filter(|h| h.state.is_initialized()).map(|h| {
        let layers = &h.state.layers;
        layers.iter().map(|l| l.edges_alive() as f64).sum::<f64>() / layers.len() as f64
    });
    let record = ResultsRecord {
        cell: cell.id(),
        model: cfg.model.kind.label().to_string(),
        dataset: cfg.dataset.name().to_string(),
        depth: cell.depth,
        homophily: cell.homophily,
        seed: cell.seed,
        test_acc: report.test_acc,
        best_val_acc: report.best_val_acc,
        best_epoch: report.best_epoch,
        mu_last_hidden,
        gflops: flops.gflops(),
        edges_alive,
        mu_trace: dynamics.mu_trace,
    };
    let masks = layer_masks.map(<[LayerMask]>::to_vec);
    Ok(CellOutput {
        record,
        prune_log: hook.map(|h| h.state.log),
        model,
        masks,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    /// All completed cells in canonical order, including resumed ones.
    pub records: Vec<ResultsRecord>,
    pub failures: Vec<(String, String)>,
    pub skipped: usize,
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_timings(path: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(path)
        .map(|t| {
            t.lines()
                .skip(1)
                .filter_map(|l| l.split_once(',').map(|(c, s)| (c.to_string(), s.to_string())))
                .collect()
        })
        .unwrap_or_default()
}

/// Runs every cell of `cfg` not already present in the output directory.
///
/// Cells run on a bounded worker pool; one writer appends each finished
/// row, then rewrites `results.csv` in canonical order.
pub fn run_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SweepOutcome> {
    cfg.validate()?;
    let out_dir = if cfg.output_dir.is_absolute() {
        cfg.output_dir.clone()
    } else {
        opts.base_dir.join(&cfg.output_dir)
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let results_path = out_dir.join("results.csv");
    let timings_path = out_dir.join("timings.csv");

    let grid = cells(cfg, opts.seed_offset);
    let wanted: HashSet<String> = grid.iter().map(Cell::id).collect();
    let mut done: BTreeMap<String, ResultsRecord> = BTreeMap::new();
    if results_path.exists() {
        for mut r in read_results(&results_path)? {
            if wanted.contains(&r.cell) {
                r.mu_trace = read_mu_trace(&out_dir.join(format!("mu_trace_{}.csv", r.cell))).unwrap_or_default();
                done.insert(r.cell.clone(), r);
            }
        }
    }
    let mut timings = read_timings(&timings_path);
    let pending: Vec<Cell> = grid.iter().filter(|c| !done.contains_key(&c.id())).cloned().collect();
    let skipped = grid.len() - pending.len();
    if skipped > 0 {
        log::info!("{}: resuming, {skipped} of {} cells already done", cfg.name, grid.len());
    }

    let shared = if cfg.sweep.homophily.is_empty() && !pending.is_empty() {
        Some(cfg.dataset.load(&opts.base_dir)?)
    } else {
        None
    };

    // Rows of finished cells go to the file as they arrive so that an
    // interrupted sweep keeps its progress.
    if !results_path.exists() {
        write_file(&results_path, &format!("{RESULTS_HEADER}\n"))?;
    }
    let mut failures = Vec::new();
    let next = AtomicUsize::new(0);
    let workers = opts.workers.max(1).min(pending.len().max(1));
    let (tx, rx) = mpsc::channel::<(Cell, Result<CellOutput>)>();
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (pending, next, shared) = (&pending, &next, shared.as_ref());
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = pending.get(i) else { break };
                let out = run_cell(cfg, shared, cell);
                if tx.send((cell.clone(), out)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut append = std::fs::OpenOptions::new()
            .append(true)
            .open(&results_path)
            .map_err(|e| Error::io(&results_path, e))?;
        for (cell, out) in rx {
            let id = cell.id();
            match out {
                Ok(o) => {
                    log::info!(
                        "{} {id}: test acc {:.4}, mu {:.3e}, {:.1}s",
                        cfg.name,
                        o.record.test_acc,
                        o.record.mu_last_hidden,
                        o.wall_seconds
                    );
                    writeln!(append, "{}", o.record.to_csv_row()).map_err(|e| Error::io(&results_path, e))?;
                    write_file(&out_dir.join(format!("mu_trace_{id}.csv")), &mu_trace_csv(&o.record.mu_trace))?;
                    save_model(&o.model, &out_dir.join(format!("model_{id}.bin")))?;
                    if let Some(m) = &o.masks {
                        save_masks(m, &out_dir.join(format!("masks_{id}.bin")))?;
                    }
                    if let Some(log) = &o.prune_log {
                        write_prune_log(&out_dir.join(format!("prune_log_{id}.csv")), log)?;
                    }
                    timings.insert(id.clone(), format!("{:.3}", o.wall_seconds));
                    done.insert(id, o.record);
                }
                Err(e) => {
                    log::error!("{} {id} failed: {e}", cfg.name);
                    failures.push((id, e.to_string()));
                }
            }
        }
        Ok(())
    })?;

    let records: Vec<ResultsRecord> = grid.iter().filter_map(|c| done.get(&c.id()).cloned()).collect();
    write_file(&results_path, &results_csv(&records))?;
    let mut t = String::from("cell,wall_seconds\n");
    for c in &grid {
        if let Some(s) = timings.get(&c.id()) {
            t.push_str(&format!("{},{s}\n", c.id()));
        }
    }
    write_file(&timings_path, &t)?;
    Ok(SweepOutcome {
        records,
        failures,
        skipped,
    })
}

/// Depth sweep over a fixed dataset.
pub fn run_depth_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SweepOutcome> {
    if !cfg.sweep.homophily.is_empty() {
        return Err(Error::InvalidConfig("a depth sweep takes no homophily list".into()));
    }
    run_sweep(cfg, opts)
}

/// Homophily sweep over freshly generated synthetic graphs.
pub fn run_homophily_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SweepOutcome> {
    if cfg.sweep.homophily.is_empty() || cfg.dataset.synthetic().is_none() {
        return Err(Error::InvalidConfig("a homophily sweep needs a synthetic dataset and a homophily list".into()));
    }
    run_sweep(cfg, opts)
}
