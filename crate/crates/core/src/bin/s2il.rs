use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use s2il::config::{DataSource, ExperimentConfig};
use s2il::data::{generate_synthetic, SyntheticConfig};
use s2il::engine::DistillMode;
use s2il::runner::{render_report, run_experiment, write_outputs, write_summary_csv, Manifest, SUMMARY_FILE};
use s2il::{Error, Result};

#[derive(Parser)]
#[command(name = "s2il", version, about = "Class-incremental learning with structural feature distillation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Write a synthetic dataset file.
    GenData(GenData),
    /// Train every sweep point for every seed and write the reports.
    Run(RunArgs),
    /// Print the seed summary of a finished run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenData {
    /// Take the synthetic settings from a config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data.s2il")]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this single mode instead of the configured sweep.
    #[arg(long)]
    mode: Option<DistillMode>,
    /// Also train the oracle.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding a manifest.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut synth = match load_config(a.config.as_ref())?.data {
        DataSource::Synthetic(s) => s,
        DataSource::File(_) => SyntheticConfig::default(),
    };
    synth.seed = a.seed.unwrap_or(synth.seed);
    synth.classes = a.classes.unwrap_or(synth.classes);
    synth.per_class = a.per_class.unwrap_or(synth.per_class);
    synth.size = a.size.unwrap_or(synth.size);
    synth.noise = a.noise.unwrap_or(synth.noise);
    let ds = generate_synthetic(&synth)?;
    ds.save(&a.out)?;
    println!("wrote {} samples ({} classes) to {}", ds.len(), ds.classes, a.out.display());
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(seed) = a.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(mode) = a.mode {
        cfg.train.mode = mode;
        cfg.sweep.modes.clear();
    }
    if let Some(out) = a.out {
        cfg.output = out;
    }
    cfg.oracle |= a.oracle;
    cfg.validate()?;
    let (manifest, err) = run_experiment(&cfg);
    write_outputs(&cfg.output, &manifest)?;
    print!("{}", render_report(&manifest));
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn report(a: ReportArgs) -> Result<()> {
    let manifest = Manifest::load(&a.out)?;
    let path = a.out.join(SUMMARY_FILE);
    let file = std::fs::File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    write_summary_csv(file, &manifest)?;
    print!("{}", render_report(&manifest));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.verb {
        Verb::GenData(a) => gen_data(a),
        Verb::Run(a) => run(a),
        Verb::Report(a) => report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
