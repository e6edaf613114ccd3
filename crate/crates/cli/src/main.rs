//! `attrib`: validate models, compute feature attributions, plot them and
//! check the engine against its reference implementations.

mod attribute;
mod check;
mod plot;
mod svg;
mod validate;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "attrib",
    version,
    about = "Feature attribution for small neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file and list its diagnostics.
    Validate(validate::Args),
    /// Compute relevances and write them as records.
    Attribute(Box<attribute::Args>),
    /// Render exported records as SVG.
    Plot(plot::Args),
    /// Compare the engine with the reference implementations on a grid of
    /// random models.
    Check(check::Args),
}

/// Caps the global thread pool at `ATTRIB_THREADS` when it is set.
fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ATTRIB_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("ATTRIB_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            anyhow::bail!("ATTRIB_THREADS must be a positive integer, got `{v}`");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let outcome = match cli.command {
        Command::Validate(args) => return validate::run(&args),
        Command::Attribute(args) => attribute::run(&args),
        Command::Plot(args) => plot::run(&args),
        Command::Check(args) => return check::run(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
