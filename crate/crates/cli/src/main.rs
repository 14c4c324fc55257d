//! `distree`: cost tables, policy benchmarks, measure curves and threshold
//! sweeps for multi-branch early-exit students on a simulated edge cluster.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use distree_core::bench::{
    measure_curves, run_bench, threshold_sweep, BenchOptions, FlopsTable, RunConfig,
};
use distree_core::data::{load_cifar10, LabeledImage, Split};
use distree_core::model::{count_params, BranchNetSpec};
use distree_core::policy::PolicyConfig;
use distree_core::sim::{ClusterConfig, ExitMode};
use distree_core::weights::WeightMetadata;
use distree_core::WeightStore;

#[derive(Parser)]
#[command(
    name = "distree",
    version,
    about = "Distributed early-exit inference runtime and cluster simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-branch FLOPs and parameter table with reference deviations
    Flops(ModelArgs),
    /// Benchmark exit policies over a stratified CIFAR-10 sample
    Bench(BenchArgs),
    /// Per-exit neighbor-similarity and feature-difference statistics
    Curves(RunArgs),
    /// Accuracy/FLOPs trade-off for uniformly shifted thresholds
    Sweep(SweepArgs),
    /// Summarize a weight file and check it against an architecture
    InspectWeights(InspectArgs),
    /// Write randomly initialised weights for an architecture
    InitWeights(InitArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture, `wrn16-<width>`
    #[arg(long)]
    arch: Option<String>,
    /// Exit positions, comma separated
    #[arg(long, value_delimiter = ',')]
    exits: Option<Vec<usize>>,
    /// Output directory for CSV and JSON reports
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Weight file
    #[arg(long)]
    weights: PathBuf,
    /// Directory with the CIFAR-10 binary batches
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    seed: Option<u64>,
    /// Repeats per policy; each reseeds the random draws
    #[arg(long)]
    repeats: Option<usize>,
    /// Images sampled per class
    #[arg(long)]
    per_class: Option<usize>,
    /// Exit coordination across students
    #[arg(long, value_enum)]
    exit_mode: Option<ExitModeArg>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Policy names, comma separated
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Threshold policy to sweep
    #[arg(long, default_value = "feature_diff")]
    policy: String,
    /// Offsets added to every threshold; `inf` and `-inf` are accepted
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    offsets: Option<Vec<f64>>,
    /// Use inclusive comparisons
    #[arg(long)]
    non_strict: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long, value_delimiter = ',')]
    exits: Option<Vec<usize>>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 2)]
    students: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination weight file
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExitModeArg {
    Independent,
    Synchronized,
}

const DEFAULT_POLICIES: [&str; 4] = ["last_exit", "feature_diff", "random", "neighbor_similarity"];
const DEFAULT_OFFSETS: [f64; 7] = [
    f64::NEG_INFINITY,
    -0.1,
    -0.05,
    0.0,
    0.05,
    0.1,
    f64::INFINITY,
];

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn build_spec(
    config: &mut RunConfig,
    arch: Option<&String>,
    exits: Option<&Vec<usize>>,
) -> Result<BranchNetSpec> {
    if let Some(a) = arch {
        config.model.arch = a.clone();
    }
    if let Some(e) = exits {
        config.model.exits = e.clone();
    }
    Ok(config.model.build()?)
}

/// Writes every report only after all of them were produced.
fn write_outputs(out: Option<&Path>, files: &[(&str, String)]) -> Result<()> {
    let Some(dir) = out else {
        return Ok(());
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, contents) in files {
        let path = dir.join(name);
        let tmp = dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

struct Loaded {
    config: RunConfig,
    spec: BranchNetSpec,
    weights: WeightStore,
    dataset: Vec<LabeledImage>,
    cluster: ClusterConfig,
    opts: BenchOptions,
}

fn load_run(args: &RunArgs) -> Result<Loaded> {
    let mut config = load_config(args.model.config.as_deref())?;
    let spec = build_spec(
        &mut config,
        args.model.arch.as_ref(),
        args.model.exits.as_ref(),
    )?;
    let weights = WeightStore::load(&args.weights)
        .with_context(|| format!("loading {}", args.weights.display()))?;
    let students = weights.student_count(&spec)?;
    weights.validate(&spec, students).with_context(|| {
        format!(
            "{} does not match {}",
            args.weights.display(),
            config.model.arch
        )
    })?;
    let norm = weights
        .metadata()
        .map(|m| m.normalization)
        .unwrap_or_default();
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let dataset = load_cifar10(&args.data, split, &norm)
        .with_context(|| format!("loading CIFAR-10 from {}", args.data.display()))?;
    let mut cluster = config
        .cluster
        .clone()
        .unwrap_or_else(|| ClusterConfig::reference(students));
    if let Some(mode) = args.exit_mode {
        cluster.exit_mode = match mode {
            ExitModeArg::Independent => ExitMode::Independent,
            ExitModeArg::Synchronized => ExitMode::Synchronized,
        };
    }
    let defaults = BenchOptions::default();
    let opts = BenchOptions {
        per_class: args
            .per_class
            .or(config.per_class)
            .unwrap_or(defaults.per_class),
        seed: args.seed.or(config.seed).unwrap_or(defaults.seed),
        repeats: args.repeats.or(config.repeats).unwrap_or(defaults.repeats),
    };
    Ok(Loaded {
        config,
        spec,
        weights,
        dataset,
        cluster,
        opts,
    })
}

fn cmd_flops(args: &ModelArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    let spec = build_spec(&mut config, args.arch.as_ref(), args.exits.as_ref())?;
    let table = FlopsTable::build(&spec)?;
    let csv = table.to_csv()?;
    let json = serde_json::to_string_pretty(&table)?;
    write_outputs(
        args.out.as_deref(),
        &[("flops.csv", csv), ("flops.json", json)],
    )?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let run = load_run(&args.run)?;
    let exits = run.spec.exit_count();
    let policies: Vec<PolicyConfig> = match (&args.policies, &run.config.policies) {
        (Some(names), _) => names
            .iter()
            .filter(|n| !n.trim().is_empty())
            .map(|n| PolicyConfig::named(n.trim(), exits, run.opts.seed))
            .collect::<distree_core::Result<_>>()?,
        (None, Some(p)) => p.clone(),
        (None, None) => DEFAULT_POLICIES
            .iter()
            .map(|n| PolicyConfig::named(n, exits, run.opts.seed))
            .collect::<distree_core::Result<_>>()?,
    };
    let report = run_bench(
        &run.spec,
        &run.weights,
        &run.dataset,
        &policies,
        &run.cluster,
        &run.opts,
    )?;
    let csv = report.to_csv()?;
    let json = report.to_json()?;
    write_outputs(
        args.run.model.out.as_deref(),
        &[("bench.csv", csv.clone()), ("bench.json", json)],
    )?;
    print!("{csv}");
    Ok(())
}

fn cmd_curves(args: &RunArgs) -> Result<()> {
    let run = load_run(args)?;
    let report = measure_curves(&run.spec, &run.weights, &run.dataset, &run.opts)?;
    let csv = report.to_csv()?;
    let json = serde_json::to_string_pretty(&report)?;
    write_outputs(
        args.model.out.as_deref(),
        &[("curves.csv", csv.clone()), ("curves.json", json)],
    )?;
    print!("{csv}");
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let run = load_run(&args.run)?;
    let (base, offsets) = match (&run.config.sweep, &args.offsets) {
        (Some(s), offsets) => (
            s.base.clone(),
            offsets.clone().unwrap_or_else(|| s.offsets.clone()),
        ),
        (None, offsets) => {
            let mut base = PolicyConfig::named(&args.policy, run.spec.exit_count(), run.opts.seed)?;
            base.strict = !args.non_strict;
            (
                base,
                offsets.clone().unwrap_or_else(|| DEFAULT_OFFSETS.to_vec()),
            )
        }
    };
    let report = threshold_sweep(
        &run.spec,
        &run.weights,
        &run.dataset,
        &base,
        &offsets,
        &run.cluster,
        &run.opts,
    )?;
    let csv = report.to_csv()?;
    let json = serde_json::to_string_pretty(&report)?;
    write_outputs(
        args.run.model.out.as_deref(),
        &[("sweep.csv", csv.clone()), ("sweep.json", json)],
    )?;
    print!("{csv}");
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let weights = WeightStore::load(&args.weights)
        .with_context(|| format!("loading {}", args.weights.display()))?;
    let total: usize = weights.iter().map(|(_, t)| t.len()).sum();
    println!("file: {}", args.weights.display());
    println!("sha256: {}", weights.fingerprint());
    println!("tensors: {}", weights.len());
    println!("values: {total}");
    println!("metadata: {}", weights.metadata_json());
    let mut config = load_config(args.config.as_deref())?;
    let spec = build_spec(&mut config, args.arch.as_ref(), args.exits.as_ref())?;
    let students = weights.student_count(&spec)?;
    weights.validate(&spec, students).with_context(|| {
        format!(
            "weights do not match {} with exits {:?}",
            config.model.arch, config.model.exits
        )
    })?;
    let params = count_params(&spec);
    println!(
        "architecture: {} exits {:?}, {students} students, {} params per student with exits",
        config.model.arch,
        spec.exit_positions,
        params.total_with_exits()
    );
    if let Ok(WeightMetadata {
        spec_fingerprint: Some(fp),
        ..
    }) = weights.metadata()
    {
        if fp != spec.fingerprint() {
            println!("note: weights were exported for a different spec fingerprint");
        }
    }
    println!("valid: yes");
    Ok(())
}

fn cmd_init(args: &InitArgs) -> Result<()> {
    if args.students == 0 {
        bail!("--students must be positive");
    }
    let mut config = load_config(args.model.config.as_deref())?;
    let spec = build_spec(
        &mut config,
        args.model.arch.as_ref(),
        args.model.exits.as_ref(),
    )?;
    let store = WeightStore::random(&spec, args.students, args.seed);
    store
        .save(&args.weights)
        .with_context(|| format!("writing {}", args.weights.display()))?;
    println!(
        "wrote {} tensors to {}",
        store.len(),
        args.weights.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Flops(a) => cmd_flops(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Curves(a) => cmd_curves(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::InspectWeights(a) => cmd_inspect(a),
        Command::InitWeights(a) => cmd_init(a),
    }
}
