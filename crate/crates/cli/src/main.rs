use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dynamo_core::dynamics::{analyze_model, SpectralOptions};
use dynamo_core::experiment::{
    emit_report, run_sweep, write_synthetic, DatasetSpec, ExperimentConfig, ReportFormat, RunOptions,
};
use dynamo_core::graph::SyntheticSpec;
use dynamo_core::lemmas::run_lemma_suite;
use dynamo_core::nn::{load_masks, load_model, Topology};
use dynamo_core::prune::AggregationMode;

#[derive(Parser)]
#[command(name = "dynamo", version, about = "Depth and homophily sweeps, model dynamics and property batteries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep of one or more experiment configs.
    Run(RunArgs),
    /// Print the dynamics report of a saved model on a dataset.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic graph and write it in planetoid format.
    Synth {
        /// TOML file holding a synthetic graph spec.
        spec: PathBuf,
        out_dir: PathBuf,
    },
    /// Run the property batteries; exits 0 iff every check passes.
    LemmaSuite {
        seed: u64,
        /// Attention aggregation used by the pruned models.
        #[arg(long, value_parser = parse_aggregation)]
        aggregation: Option<AggregationMode>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config files.
    configs: Vec<PathBuf>,
    /// Experiment config file, same as a positional one.
    #[arg(long = "config")]
    config: Vec<PathBuf>,
    /// Output directory overriding the config's.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Permit stacks deeper than 64 layers.
    #[arg(long)]
    allow_deep: bool,
    /// Added to every seed of the sweep.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Model file written by `run`.
    model: PathBuf,
    /// Dataset: a directory written by `synth`, a dataset TOML or an
    /// experiment config.
    dataset: PathBuf,
    /// Pruning masks; defaults to the `masks_<cell>.bin` next to a
    /// `model_<cell>.bin`.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_aggregation(s: &str) -> std::result::Result<AggregationMode, String> {
    match s {
        "recalibrated" => Ok(AggregationMode::Recalibrated),
        "decayed" => Ok(AggregationMode::Decayed),
        "edge-decayed" => Ok(AggregationMode::EdgeDecayed),
        _ => Err(format!("unknown aggregation `{s}`, expected `recalibrated`, `decayed` or `edge-decayed`")),
    }
}

fn run(args: RunArgs) -> Result<bool> {
    let paths: Vec<&PathBuf> = args.configs.iter().chain(&args.config).collect();
    if paths.is_empty() {
        bail!("no experiment config given");
    }
    let mut all_ok = true;
    for path in paths {
        let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Some(out) = &args.out {
            cfg.output_dir = out.clone();
        }
        cfg.allow_deep |= args.allow_deep;
        let opts = RunOptions {
            workers: args.workers.or(cfg.workers).unwrap_or(1),
            seed_offset: args.seed_offset,
            base_dir: base.clone(),
        };
        let outcome = run_sweep(&cfg, &opts).with_context(|| format!("running {}", path.display()))?;
        let out_dir = if cfg.output_dir.is_absolute() { cfg.output_dir.clone() } else { base.join(&cfg.output_dir) };
        if !outcome.records.is_empty() {
            emit_report(&outcome.records, &out_dir, &[ReportFormat::Table])?;
        }
        println!(
            "{}: {} cells done ({} resumed), {} failed, results in {}",
            cfg.name,
            outcome.records.len(),
            outcome.skipped,
            outcome.failures.len(),
            out_dir.display()
        );
        for (cell, err) in &outcome.failures {
            eprintln!("  {cell}: {err}");
        }
        all_ok &= outcome.failures.is_empty();
    }
    Ok(all_ok)
}

fn load_dataset(path: &Path) -> Result<dynamo_core::graph::Graph> {
    if path.is_dir() {
        let spec = DatasetSpec::Planetoid {
            name: "graph".into(),
            content: path.join("graph.content"),
            cites: path.join("graph.cites"),
        };
        return Ok(spec.load(Path::new("."))?);
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let Ok(cfg) = ExperimentConfig::from_toml(&text) {
        return Ok(cfg.dataset.load(base)?);
    }
    let spec: DatasetSpec = toml::from_str(&text).with_context(|| format!("{} is not a dataset spec", path.display()))?;
    Ok(spec.load(base)?)
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let model = load_model(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let masks_path = args.masks.clone().or_else(|| {
        let name = args.model.file_name()?.to_str()?;
        let sibling = args.model.with_file_name(format!("masks_{}", name.strip_prefix("model_")?));
        sibling.exists().then_some(sibling)
    });
    let masks = match &masks_path {
        Some(p) => Some(load_masks(p).with_context(|| format!("loading masks {}", p.display()))?),
        None => None,
    };
    let g = load_dataset(&args.dataset)?;
    let topo = Topology::new(&g);
    let report = analyze_model(&model, &topo, g.features(), masks.as_deref(), Some(SpectralOptions::default()))?;
    let csv = report.to_csv();
    match &args.out {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn synth(spec: &Path, out_dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec: SyntheticSpec = toml::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
    let (content, cites) = write_synthetic(&spec, out_dir)?;
    println!("wrote {} and {}", content.display(), cites.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Analyze(args) => analyze(args).map(|_| true),
        Command::Synth { spec, out_dir } => synth(&spec, &out_dir).map(|_| true),
        Command::LemmaSuite { seed, aggregation } => run_lemma_suite(seed, aggregation).map_err(Into::into).map(|checks| {
            for c in &checks {
                println!("{c}");
            }
            let passed = checks.iter().filter(|c| c.passed).count();
            println!("{passed}/{} checks passed", checks.len());
            passed == checks.len()
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
