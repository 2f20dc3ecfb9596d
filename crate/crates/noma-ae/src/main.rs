//! Command-line experiment runner.
//!
//! `noma-ae <recipe> [--config <path>] [--quick] [--seed-list s1,s2,...]
//! [--out <dir>]` executes one experiment recipe;
//! `noma-ae compare <a.csv> <b.csv>` reports per-SNR deltas between two BER
//! curves and exits zero exactly when the first lies at or below the second
//! within Monte-Carlo slack.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
//! 4 comparison failure, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use noma_ae::compare::{compare_curves, render_report};
use noma_ae::config::{Experiment, ExperimentConfig};
use noma_ae::error::Error;
use noma_ae::recipes::run_experiment;
use noma_ae::results::BerCurve;

#[derive(Parser)]
#[command(
    name = "noma-ae",
    about = "Train and evaluate a learned two-user downlink NOMA system, \
             with analytical and Monte-Carlo baselines",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (key = value sections); defaults apply when
    /// omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reduced-scale profile: at most 2000 epochs, 1e5 test symbols, 3 seeds.
    #[arg(long)]
    quick: bool,
    /// Override the config's seed list.
    #[arg(long, value_name = "s1,s2,...", value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Override the config's output directory.
    #[arg(long, value_name = "dir")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// BER-curve CSV whose values should be at or below the reference.
    curve_a: PathBuf,
    /// Reference BER-curve CSV.
    curve_b: PathBuf,
    /// Standard-error multiple granted as statistical slack per point.
    #[arg(long, default_value_t = 3.0)]
    slack_multiplier: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Train one system per seed; emit checkpoints, loss traces, BER curve.
    Train(RunArgs),
    /// Re-evaluate previously trained checkpoints on the configured grid.
    Eval(RunArgs),
    /// Conventional superposition/SIC Monte-Carlo plus analytical curves.
    Baseline(RunArgs),
    /// Design codebooks and tabulate their quantization error.
    Quantizer(RunArgs),
    /// Train once and dump the learned constellations at fixed channels.
    Constellation(RunArgs),
    /// Learned system vs analytical NOMA and single-user references.
    Figure3(RunArgs),
    /// Mixed bit loads vs the matching conventional schemes.
    Figure4(RunArgs),
    /// Quantized-CSI variants vs the unquantized system.
    Figure5(RunArgs),
    /// Multi-SNR training objective vs fixed-SNR training.
    Figure6(RunArgs),
    /// Per-SNR delta report between two BER-curve CSVs.
    Compare(CompareArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run(Experiment::Train, a),
        Command::Eval(a) => run(Experiment::Eval, a),
        Command::Baseline(a) => run(Experiment::Baseline, a),
        Command::Quantizer(a) => run(Experiment::Quantizer, a),
        Command::Constellation(a) => run(Experiment::Constellation, a),
        Command::Figure3(a) => run(Experiment::Figure3, a),
        Command::Figure4(a) => run(Experiment::Figure4, a),
        Command::Figure5(a) => run(Experiment::Figure5, a),
        Command::Figure6(a) => run(Experiment::Figure6, a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The documented error → exit-code mapping.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Comparison(_) => 4,
        _ => 1,
    }
}

fn run(recipe: Experiment, args: RunArgs) -> noma_ae::Result<()> {
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::parse_file(path)?,
        None => ExperimentConfig::default(),
    };
    let cfg = cfg.resolve_cli(recipe, args.seed_list, args.out, args.quick)?;
    let summary = run_experiment(&cfg)?;
    println!("fingerprint: {}", summary.fingerprint);
    for name in &summary.artifacts {
        println!("wrote {}", cfg.out_dir.join(name).display());
    }
    println!("done in {:.1} s", summary.wall_seconds);
    Ok(())
}

fn compare(args: CompareArgs) -> noma_ae::Result<()> {
    let a = BerCurve::read_csv(&args.curve_a)?;
    let b = BerCurve::read_csv(&args.curve_b)?;
    let cmp = compare_curves(&a, &b, args.slack_multiplier)?;
    print!("{}", render_report(&cmp));
    if cmp.a_le_b {
        Ok(())
    } else {
        Err(Error::Comparison(format!(
            "{} exceeds {} beyond {}x standard-error slack at {} of {} points",
            cmp.scheme_a,
            cmp.scheme_b,
            args.slack_multiplier,
            cmp.rows.iter().filter(|r| r.delta > r.slack).count(),
            cmp.rows.len()
        )))
    }
}
