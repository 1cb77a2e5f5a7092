use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use fibrewise::commands::{run_text, Command};
use fibrewise::report::{RunReport, EXIT_PRECONDITION};
use fibrewise::zoo::CAT_OVER_ROTATION;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    /// Check cone invariance on a grid
    Certify,
    /// Extract the matrix induced on fibre homology
    Homology,
    /// Build the conjugacy to the affine model and verify it
    Conjugate,
    /// Compute stable and unstable leaves and their intersections
    Leaves,
    /// Repeat `conjugate` over rescaled perturbations
    Sweep,
    /// Certify, homology, conjugate and leaves in one run
    Demo,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Certify => Command::Certify,
            Cmd::Homology => Command::Homology,
            Cmd::Conjugate => Command::Conjugate,
            Cmd::Leaves => Command::Leaves,
            Cmd::Sweep => Command::Sweep,
            Cmd::Demo => Command::Demo,
        }
    }
}

/// Hyperbolicity certificates, conjugacies and invariant leaves for
/// fibrewise Anosov maps on torus bundles.
///
/// Exit status: 0 when every verdict passes, 2 on configuration or
/// precondition errors, 3 when a verdict fails.
#[derive(Debug, Parser)]
#[command(name = "fibrewise", version)]
struct Args {
    command: Cmd,
    /// Configuration file; `demo` falls back to the bundled cat_over_rotation.cfg
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for report.json, timing.json and CSV tables
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print report.json to stdout instead of the summary
    #[arg(long)]
    json: bool,
}

fn write_outputs(report: &RunReport, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let write = |name: &str, content: &str| {
        let path = dir.join(name);
        fs::write(&path, content).with_context(|| format!("writing {}", path.display()))
    };
    write("report.json", &report.to_json())?;
    write("timing.json", &report.timing_json())?;
    for t in &report.tables {
        write(&t.file_name, &t.content)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let command = Command::from(args.command);
    let text = match (&args.config, command) {
        (Some(path), _) => match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return ExitCode::from(EXIT_PRECONDITION as u8);
            }
        },
        (None, Command::Demo) => CAT_OVER_ROTATION.to_string(),
        (None, _) => {
            eprintln!("error: `{}` needs --config <path>", command.name());
            return ExitCode::from(EXIT_PRECONDITION as u8);
        }
    };
    let report = run_text(command, &text, args.seed);
    if args.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.summary());
    }
    if let Some(dir) = &args.out {
        if let Err(e) = write_outputs(&report, dir) {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_PRECONDITION as u8);
        }
    }
    ExitCode::from(report.exit_code() as u8)
}
