use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kcascade::experiment::{self, ExperimentConfig, OutputFormat};
use kcascade::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "kcascade", version, about = "Online kernel adaptive filtering with cascade connections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as CSV.
    Generate(Common),
    /// Train, run the online test span and write per-depth metrics.
    Run(Common),
    /// Run every point of the config's [sweep] grid in parallel.
    Sweep(Common),
    /// Run the built-in acceptance suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Also write verify.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Tsv,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Tsv => OutputFormat::Tsv,
        }
    }
}

struct Resolved {
    config: ExperimentConfig,
    out: PathBuf,
    format: OutputFormat,
}

fn resolve(args: &Common) -> Result<Resolved> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let format = args.format.map(OutputFormat::from).unwrap_or(config.output.format);
    config.output.format = format;
    let out = args
        .out
        .clone()
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Resolved { config, out, format })
}

fn run(args: &Common) -> Result<()> {
    let r = resolve(args)?;
    let report = experiment::run_experiment(&r.config)?;
    experiment::write_outputs(&report, &r.out, r.format, r.config.output.traces)?;
    println!("depth\tMAE\tMSE");
    for m in &report.metrics {
        println!("{}\t{:.6}\t{:.6}", m.depth, m.mae, m.mse);
    }
    println!(
        "best depth {} | first-group stages {:?} | {:.2}s | wrote {}",
        report.best_depth,
        report.train.stage_sizes,
        report.wall_time.as_secs_f64(),
        r.out.display()
    );
    if let Some(p) = &report.train.precision {
        println!(
            "precision search: loss {:.6} -> {:.6} in {} evaluations",
            p.initial_loss, p.final_loss, p.evaluations
        );
    }
    Ok(())
}

fn sweep(args: &Common) -> Result<()> {
    let r = resolve(args)?;
    let runs = experiment::run_sweep(&r.config, &r.out, r.format)?;
    let failed = runs.iter().filter(|x| x.outcome.is_err()).count();
    println!(
        "{} runs, {failed} failed; summary in {}",
        runs.len(),
        r.out.join(format!("sweep.{}", r.format.extension())).display()
    );
    Ok(())
}

fn generate(args: &Common) -> Result<()> {
    let r = resolve(args)?;
    let path = experiment::generate(&r.config, &r.out, r.format)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_verify(args: &VerifyArgs) -> Result<bool> {
    let results = verify::run_all();
    for r in &results {
        println!("{r}");
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} criteria passed", results.len());
    if let Some(dir) = &args.out {
        write_verify(dir, args.format.map(OutputFormat::from).unwrap_or_default(), &results)?;
    }
    Ok(passed == results.len())
}

fn write_verify(dir: &Path, format: OutputFormat, results: &[verify::CriterionResult]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::WriterBuilder::new()
        .delimiter(format.delimiter())
        .from_path(dir.join(format!("verify.{}", format.extension())))?;
    w.write_record(["id", "name", "passed", "detail"])?;
    for r in results {
        w.write_record([r.id.to_string(), r.name.to_string(), r.passed.to_string(), r.detail.clone()])?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Run(a) => run(a).map(|_| true),
        Command::Sweep(a) => sweep(a).map(|_| true),
        Command::Verify(a) => run_verify(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("kcascade: {e}");
            match e {
                Error::Usage(_) | Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
