use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use homlab_harness::{emit_plot_data, parse_config, run, Experiment, RunRecord};

#[derive(Parser)]
#[command(name = "homlab", version, about = "Run homlab experiments from a TOML configuration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides `seeds.base`.
    #[arg(long)]
    seed_base: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    SpdeMoments(RunArgs),
    Decorrelation(RunArgs),
    Attractor(RunArgs),
    Corrector(RunArgs),
    EffectiveLaw(RunArgs),
    Homogenize(RunArgs),
    FsLattice(RunArgs),
    FsContinuous(RunArgs),
    VerifyAll(RunArgs),
    /// Writes plot CSVs and a manifest for an existing run record.
    Plot {
        /// `record.json` of a previous run.
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(experiment: Experiment, args: RunArgs) -> Result<bool> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let text = match args.seed_base {
        Some(k) => override_seed_base(&text, k)?,
        None => text,
    };
    let cfg = parse_config(&text, Some(experiment))?;
    let out = args
        .out
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .context("no output directory: pass --out or set `output`")?;
    if let Some(n) = args.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let record = run(&cfg, &out)?;
    for t in &record.tasks {
        let status = if t.pass { "pass" } else { "FAIL" };
        match &t.error {
            Some(e) => println!("{status} {} ({:.1}s): {e}", t.name, t.wall_clock_s),
            None => println!("{status} {} ({:.1}s)", t.name, t.wall_clock_s),
        }
    }
    println!("record: {}", out.join("record.json").display());
    Ok(record.pass)
}

/// Sets `seeds.base` in the raw configuration before validation, so the
/// override is part of the resolved, hashed configuration.
fn override_seed_base(text: &str, k: u64) -> Result<String> {
    let mut root: toml::Table = toml::from_str(text).context("parsing configuration")?;
    let seeds = root
        .entry("seeds")
        .or_insert_with(|| toml::Value::Table(Default::default()));
    if let Some(t) = seeds.as_table_mut() {
        t.insert("base".into(), toml::Value::Integer(i64::try_from(k).context("--seed-base is too large")?));
    }
    Ok(toml::to_string(&root)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plot { record, out } => (|| {
            let text = std::fs::read_to_string(&record).with_context(|| format!("reading {}", record.display()))?;
            let rec = RunRecord::restore(&text)?;
            let m = emit_plot_data(&rec, &out)?;
            println!("{} plot file(s) in {}", m.entries.len(), out.display());
            Ok(true)
        })(),
        Command::SpdeMoments(a) => execute(Experiment::SpdeMoments, a),
        Command::Decorrelation(a) => execute(Experiment::Decorrelation, a),
        Command::Attractor(a) => execute(Experiment::Attractor, a),
        Command::Corrector(a) => execute(Experiment::Corrector, a),
        Command::EffectiveLaw(a) => execute(Experiment::EffectiveLaw, a),
        Command::Homogenize(a) => execute(Experiment::Homogenize, a),
        Command::FsLattice(a) => execute(Experiment::FsLattice, a),
        Command::FsContinuous(a) => execute(Experiment::FsContinuous, a),
        Command::VerifyAll(a) => execute(Experiment::VerifyAll, a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
