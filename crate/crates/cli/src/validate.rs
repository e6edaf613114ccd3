use attrib_core::model::{validate_model, ModelDocument, Severity};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(clap::Args)]
pub struct Args {
    /// Model file (JSON).
    pub model: PathBuf,
}

/// Exit 0 when the model has no errors, 1 when it has, 2 when it cannot be
/// read.
pub fn run(args: &Args) -> ExitCode {
    let text = match std::fs::read_to_string(&args.model) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read `{}`: {e}", args.model.display());
            return ExitCode::from(2);
        }
    };
    let graph = match ModelDocument::from_json(&text).and_then(|d| d.assemble()) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let diagnostics = validate_model(&graph);
    for d in &diagnostics {
        eprintln!("{d}");
    }
    let errors = diagnostics
        .iter()
        .filter(|d| d.severity == Severity::Error)
        .count();
    eprintln!(
        "{}: {} layers, {errors} error(s), {} warning(s)",
        args.model.display(),
        graph.len(),
        diagnostics.len() - errors
    );
    if errors == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
