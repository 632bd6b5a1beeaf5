//! Command-line front end for the bound calculators and the simulation harness.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 a validity
//! precondition does not hold, 3 an empirical value exceeds its bound (or the
//! negative-association screen flags a pair).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nabound::bounds::{self, BoundReport, BoundsError};
use nabound::harness::{
    emit_csv, fit_rate, render_csv, run_experiment, run_verify_na, ExperimentConfig, HarnessError, RateColumn,
};
use nabound::lattice;

const EXIT_CONFIG: u8 = 1;
const EXIT_PRECONDITION: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser)]
#[command(name = "nabound", version, about = "Normal approximation bounds for negatively associated sums and fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a bound from its inputs.
    Bound {
        #[command(subcommand)]
        which: BoundKind,
    },
    /// Print the sub-block partition of a side-n block.
    Decompose {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        l: usize,
        #[arg(long, default_value_t = 1)]
        d: usize,
    },
    /// Run the experiment described by a JSON config and emit CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Screen the configured distribution for negative association.
    VerifyNa {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the configured n-grid and fit log-log slopes.
    Rate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum BoundKind {
    /// min(2, 5B - 5.2 sum_{i != j} Cov(X_i, X_j)) for a normalized NA sum.
    Univariate {
        /// Almost-sure bound on |X_i|.
        #[arg(long = "B")]
        b: f64,
        /// Sum of the off-diagonal covariances (nonpositive).
        #[arg(long = "cov-sum", allow_negative_numbers = true)]
        cov_sum: f64,
    },
    /// kappa1 n^{-d/(2d+2)} for a stationary NA field.
    Field {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        kappa0: f64,
        #[arg(long = "K")]
        k: f64,
        #[arg(long = "An")]
        a_n: f64,
        #[arg(long)]
        n: usize,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match e {
            HarnessError::Config(_) | HarnessError::WrongMode(_) => EXIT_CONFIG,
            _ => EXIT_PRECONDITION,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<BoundsError> for Failure {
    fn from(e: BoundsError) -> Self {
        Failure { code: EXIT_PRECONDITION, message: e.to_string() }
    }
}

fn print_report(report: &BoundReport) {
    println!("bound = {}", report.value);
    for (name, value) in &report.terms {
        println!("  {name} = {value}");
    }
    println!("valid = {}", report.valid);
    if !report.validity_condition.is_empty() {
        println!("condition: {}", report.validity_condition);
    }
}

fn bound(which: BoundKind) -> Result<u8, Failure> {
    match which {
        BoundKind::Univariate { b, cov_sum } => {
            let report = bounds::univariate_na_bound(b, cov_sum)?;
            print_report(&report);
            Ok(if report.valid { 0 } else { EXIT_PRECONDITION })
        }
        BoundKind::Field { d, lambda, kappa0, k, a_n, n } => {
            let fb = bounds::field_bound_univariate(d, k, lambda, kappa0, a_n, n)?;
            print_report(&fb.report);
            println!("kappa1 = {}", fb.kappa1);
            println!("C = {}", fb.c_const);
            println!("block_length = {}", fb.block_length);
            println!("two_term = {}", fb.two_term.value);
            Ok(if fb.report.valid { 0 } else { EXIT_PRECONDITION })
        }
    }
}

fn decompose(n: usize, l: usize, d: usize) -> Result<u8, Failure> {
    let part = lattice::decompose_block(n, l, d).map_err(|e| Failure { code: EXIT_CONFIG, message: e.to_string() })?;
    println!("n = {}, l = {}, m = {}, r = {}, d = {}, cells = {}", part.n, part.l, part.m, part.r, part.dim, part.cells.len());
    for c in &part.cells {
        println!(
            "{:?} corner {:?} sides {:?} {}",
            c.index,
            c.cell.corner,
            c.cell.sides,
            if c.main { "main" } else { "remainder" }
        );
    }
    Ok(0)
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::from_path(path).map_err(|e| Failure { code: EXIT_CONFIG, message: e.to_string() })
}

fn simulate(path: &PathBuf) -> Result<u8, Failure> {
    let cfg = load(path)?;
    let rows = run_experiment(&cfg)?;
    match &cfg.output {
        Some(out) => {
            emit_csv(&rows, out).map_err(|e| Failure { code: EXIT_CONFIG, message: format!("{}: {e}", out.display()) })?
        }
        None => print!("{}", render_csv(&rows)),
    }
    let violated: Vec<usize> = rows.iter().filter(|r| !r.passes()).map(|r| r.n).collect();
    if violated.is_empty() {
        Ok(0)
    } else {
        eprintln!("empirical value exceeds bound + 3 stderr at n = {violated:?}");
        Ok(EXIT_VIOLATION)
    }
}

fn verify_na(path: &PathBuf) -> Result<u8, Failure> {
    let cfg = load(path)?;
    let screens = run_verify_na(&cfg)?;
    let mut ok = true;
    for s in &screens {
        for r in &s.report.results {
            println!(
                "{} n={} f={} g={} cov={:.6e} stderr={:.6e} {}",
                s.source,
                s.n,
                r.f,
                r.g,
                r.cov,
                r.stderr,
                if r.pass { "ok" } else { "FLAGGED" }
            );
        }
        ok &= s.report.all_pass();
    }
    Ok(if ok { 0 } else { EXIT_VIOLATION })
}

fn rate(path: &PathBuf) -> Result<u8, Failure> {
    let cfg = load(path)?;
    let rows = run_experiment(&cfg)?;
    if let Some(out) = &cfg.output {
        emit_csv(&rows, out).map_err(|e| Failure { code: EXIT_CONFIG, message: format!("{}: {e}", out.display()) })?;
    }
    let d = cfg.field.d;
    println!("expected bound slope = {}", -bounds::univariate_field_rate(d));
    let fit = fit_rate(&rows, RateColumn::Bound)?;
    println!("bound slope = {} (intercept {}, {} rows)", fit.slope, fit.intercept, fit.rows_used);
    match fit_rate(&rows, RateColumn::Empirical) {
        Ok(f) => println!("empirical slope = {} (intercept {}, {} rows)", f.slope, f.intercept, f.rows_used),
        Err(e) => println!("empirical slope unavailable: {e}"),
    }
    Ok(if rows.iter().all(|r| r.passes()) { 0 } else { EXIT_VIOLATION })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bound { which } => bound(which),
        Command::Decompose { n, l, d } => decompose(n, l, d),
        Command::Simulate { config } => simulate(&config),
        Command::VerifyNa { config } => verify_na(&config),
        Command::Rate { config } => rate(&config),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
