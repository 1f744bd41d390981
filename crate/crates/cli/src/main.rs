//! `leafsolve`: batch driver for the chart-level geometry engine. Reads a
//! JSON manifest, dispatches to the engine and emits machine-readable
//! reports (pretty JSON) plus CSV grids.
//!
//! Exit codes: 0 = all checks passed, 1 = some check failed, 2 = input
//! error (unreadable manifest, schema violation, expression parse error).

mod commands;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use manifest::ManifestFile;
use report::Report;

/// Built-in flat fixture used by `selftest`.
const SELFTEST_MANIFEST: &str = include_str!("../fixtures/selftest_flat.json");

#[derive(Parser)]
#[command(
    name = "leafsolve",
    version,
    about = "Chart-level engine for Levi forms, single-leaf solving, connections, metric recovery and local affine maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Problem manifest (JSON). `selftest` uses a built-in fixture.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// Override the integrator step.
    #[arg(long, global = true)]
    step: Option<f64>,

    /// Override the grid point count per axis (odd).
    #[arg(long, global = true)]
    grid: Option<usize>,

    /// Override the derivative/bracket order cap.
    #[arg(long, global = true)]
    order: Option<usize>,

    /// Override the pass/fail tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,

    /// Directory for CSV grids and the report copy.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Report format on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Levi forms of distributions at their evaluation points.
    Levi,
    /// Iterated-bracket integrability defects at distribution base points.
    Integrability,
    /// Solve total differential equations on grids (single-leaf solver).
    SolveTde,
    /// Curvature operators and their antisymmetry at base points.
    Curvature,
    /// Parallel transport along manifest curves, with round-trip checks.
    Transport,
    /// Dense spray solutions from initial data.
    Geodesic,
    /// Exponential-map endpoints with the flow-rescaling identity.
    Exp,
    /// Log-map vectors with exp round-trip residuals.
    Log,
    /// Recover metrics from symmetric connections by radial transport.
    RecoverMetric,
    /// Recover and verify the Levi-Civita property on the grid.
    VerifyMetric,
    /// Build Cartan-Ambrose-Hicks candidate maps on grids.
    CahMap,
    /// Higher-order relatedness of torsion/curvature at the anchors.
    CahCheck,
    /// Affine-symmetry criterion and the constructed involution.
    AffineSymmetry,
    /// Full invariant battery on the built-in flat fixture.
    Selftest,
    /// Schema, dimension and expression validation without computation.
    Validate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Levi => "levi",
            Command::Integrability => "integrability",
            Command::SolveTde => "solve-tde",
            Command::Curvature => "curvature",
            Command::Transport => "transport",
            Command::Geodesic => "geodesic",
            Command::Exp => "exp",
            Command::Log => "log",
            Command::RecoverMetric => "recover-metric",
            Command::VerifyMetric => "verify-metric",
            Command::CahMap => "cah-map",
            Command::CahCheck => "cah-check",
            Command::AffineSymmetry => "affine-symmetry",
            Command::Selftest => "selftest",
            Command::Validate => "validate",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Ok(threads) = std::env::var("LEAFSOLVE_THREADS") {
        if let Ok(count) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(count)
                .build_global();
        }
    }

    let started = Instant::now();
    let code = run(&cli);
    eprintln!("elapsed: {:?}", started.elapsed());
    code
}

fn run(cli: &Cli) -> ExitCode {
    // load manifest text
    let (manifest_name, text) = if matches!(cli.command, Command::Selftest) {
        ("builtin:flat".to_string(), SELFTEST_MANIFEST.to_string())
    } else {
        let Some(path) = &cli.manifest else {
            eprintln!("error: --manifest is required for this command");
            return ExitCode::from(2);
        };
        match std::fs::read_to_string(path) {
            Ok(text) => (path.display().to_string(), text),
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return ExitCode::from(2);
            }
        }
    };

    let mut file = match ManifestFile::from_str(&text) {
        Ok(f) => f,
        Err(diag) => {
            let payload = json!({
                "command": cli.command.name(),
                "manifest": manifest_name,
                "diagnostics": [diag],
            });
            println!("{}", serde_json::to_string_pretty(&payload).unwrap());
            return ExitCode::from(2);
        }
    };

    // flag overrides
    if let Some(step) = cli.step {
        file.settings.step = step;
    }
    if let Some(points) = cli.grid {
        file.settings.grid_points = points;
    }
    if let Some(order) = cli.order {
        file.settings.order = order;
    }
    if let Some(tol) = cli.tol {
        file.settings.tol = tol;
    }

    let built = file.build();

    if matches!(cli.command, Command::Validate) {
        let diagnostics = match &built {
            Ok(_) => Vec::new(),
            Err(d) => d.clone(),
        };
        let payload = json!({
            "command": "validate",
            "manifest": manifest_name,
            "inputs_digest": report::digest(text.as_bytes(), &file.settings),
            "diagnostics": diagnostics,
        });
        println!("{}", serde_json::to_string_pretty(&payload).unwrap());
        return if diagnostics_empty(&built) {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(2)
        };
    }

    let manifest = match built {
        Ok(m) => m,
        Err(diagnostics) => {
            let payload = json!({
                "command": cli.command.name(),
                "manifest": manifest_name,
                "diagnostics": diagnostics,
            });
            println!("{}", serde_json::to_string_pretty(&payload).unwrap());
            return ExitCode::from(2);
        }
    };

    if let Some(dir) = &cli.out {
        if let Err(e) = std::fs::create_dir_all(dir) {
            eprintln!("error: cannot create {}: {e}", dir.display());
            return ExitCode::from(2);
        }
    }

    let mut report = Report::new(
        cli.command.name(),
        &manifest_name,
        text.as_bytes(),
        &manifest.settings,
    );
    if let Err(e) = commands::run_command(
        cli.command.name(),
        &manifest,
        &mut report,
        cli.out.as_deref(),
    ) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }

    let rendered = match cli.format {
        Format::Json => report.to_json(),
        Format::Csv => report.to_csv(),
    };
    println!("{rendered}");
    if let Some(dir) = &cli.out {
        let path = dir.join("report.json");
        if let Err(e) = std::fs::write(&path, report.to_json()) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return ExitCode::from(2);
        }
    }

    if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn diagnostics_empty(built: &Result<manifest::Manifest, Vec<manifest::Diagnostic>>) -> bool {
    built.is_ok()
}
