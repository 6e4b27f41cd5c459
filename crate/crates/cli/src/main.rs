//! `ncp`: simulate non-colliding particle systems and measure strong
//! convergence rates of the semi-implicit schemes.
//!
//! Exit codes: 0 success, 1 validation-suite failure, 2 configuration error,
//! 3 runtime or experiment failure.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;
use ncp_core::config::{Override, RunConfig};
use ncp_core::convergence::{fit_rate, run_mse_experiment, write_plot_data};
use ncp_core::selfcheck::{run_self_checks, SelfCheckOptions};
use ncp_core::{split, simulate_path, Error, IncrementGrid};

const QUICK_PATHS: usize = 200;

#[derive(Parser)]
#[command(name = "ncp", version, about = "Non-colliding particle SDE simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write trajectory CSVs for every configured scheme and path.
    Simulate(RunArgs),
    /// Run the coupled-refinement mse experiment and fit convergence rates.
    Converge(RunArgs),
    /// Run the built-in verification suite.
    Validate(ValidateArgs),
    /// Print the effective configuration as TOML.
    ConfigDump(SourceArgs),
}

#[derive(Args)]
struct SourceArgs {
    /// Configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Bundled configuration (case1, case2, case3).
    #[arg(long)]
    preset: Option<String>,
    /// Replace the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value` overrides.
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Output directory (replaces `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    workers: Option<usize>,
    /// Reduced Monte Carlo size.
    #[arg(long)]
    quick: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    quick: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Solver overrides such as `solver.tol=1e-2`.
    overrides: Vec<String>,
}

enum Failure {
    Suite,
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Suite => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn config_err(e: Error) -> Failure {
    Failure::Config(e.to_string())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn parse_overrides(raw: &[String]) -> Result<Vec<Override>, Failure> {
    raw.iter().map(|s| s.parse().map_err(config_err)).collect()
}

fn load(source: &SourceArgs) -> Result<RunConfig, Failure> {
    let mut overrides = parse_overrides(&source.overrides)?;
    if let Some(seed) = source.seed {
        overrides.push(format!("experiment.seed={seed}").parse().map_err(config_err)?);
    }
    let cfg = match (&source.config, &source.preset) {
        (Some(path), _) => RunConfig::from_file(path, &overrides),
        (None, Some(name)) => RunConfig::from_preset(name, &overrides),
        (None, None) => return Err(Failure::Config("one of --config or --preset is required".into())),
    }
    .map_err(config_err)?;
    for w in cfg.build_system().map_err(config_err)?.validate().warnings {
        warn!("{w}");
    }
    Ok(cfg)
}

fn create_csv(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>), Failure> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| io_err(&path, e))?;
    Ok((path, BufWriter::new(file)))
}

fn output_dir(cfg: &RunConfig, out: &Option<PathBuf>) -> Result<PathBuf, Failure> {
    let dir = out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn simulate(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load(&args.source)?;
    let sys = cfg.build_system().map_err(config_err)?;
    let opts = cfg.solver_options();
    let dir = output_dir(&cfg, &args.out)?;
    let level = cfg.simulate.level;
    println!("scheme,path,file,min_gap,newton_iterations,max_residual");
    for &kind in &cfg.experiment.schemes {
        for path in 0..cfg.simulate.paths {
            let grid = IncrementGrid::generate(split(cfg.experiment.seed, path as u64), sys.dim(), level, sys.horizon());
            let traj = simulate_path(&sys, kind, &grid, &opts)
                .map_err(|e| Failure::Runtime(format!("{kind} path {path}: {e}")))?;
            let name = format!("trajectory_{}_{path}.csv", kind.label().to_ascii_lowercase());
            let (file, w) = create_csv(&dir, &name)?;
            traj.write_csv(w).map_err(|e| io_err(&file, e))?;
            let gap = traj.min_gap().map_or_else(|| "NA".to_string(), |g| format!("{g:e}"));
            println!(
                "{kind},{path},{},{gap},{},{:e}",
                file.display(),
                traj.newton_iterations,
                traj.max_residual
            );
        }
    }
    Ok(())
}

fn converge(args: &RunArgs) -> Result<(), Failure> {
    let mut cfg = load(&args.source)?;
    if args.quick {
        cfg.experiment.paths = cfg.experiment.paths.min(QUICK_PATHS);
    }
    let exp = cfg.experiment(args.workers).map_err(config_err)?;
    let dir = output_dir(&cfg, &args.out)?;
    let table = run_mse_experiment(&exp).map_err(|e| match e {
        Error::DiscardBudgetExceeded { .. } | Error::PathAborted { .. } | Error::NonConvergence { .. } => {
            Failure::Runtime(e.to_string())
        }
        other => config_err(other),
    })?;
    let report = fit_rate(&table);

    let (p, w) = create_csv(&dir, "mse.csv")?;
    table.write_csv(w).map_err(|e| io_err(&p, e))?;
    let (p, w) = create_csv(&dir, "rates.csv")?;
    report.write_csv(w).map_err(|e| io_err(&p, e))?;
    let (p, w) = create_csv(&dir, "plotdata.csv")?;
    write_plot_data(&table, &report, w).map_err(|e| io_err(&p, e))?;

    println!("M = {}, k = {}..{}", exp.paths, exp.k_min, exp.k_max);
    for row in &table.rows {
        println!(
            "{:>4} k={} mse={:.4e} stderr={:.2e} discards={}",
            row.scheme.label(),
            row.k,
            row.mse,
            row.stderr,
            row.discards
        );
    }
    for (scheme, fit) in &report.fits {
        match fit {
            Ok(f) => println!("{:>4} beta={:.3} intercept={:.3} r2={:.4}", scheme.label(), f.beta, f.intercept, f.r2),
            Err(e) => println!("{:>4} {e}", scheme.label()),
        }
    }
    if table.audit.paths_checked > 0 {
        println!(
            "coupling audit: {} paths, {} mismatches",
            table.audit.paths_checked, table.audit.mismatches
        );
        if table.audit.mismatches > 0 {
            return Err(Failure::Runtime("coupling audit failed".into()));
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn validate(args: &ValidateArgs) -> Result<(), Failure> {
    let overrides = parse_overrides(&args.overrides)?;
    let cfg = RunConfig::from_preset("case2", &overrides).map_err(config_err)?;
    let mut opts = SelfCheckOptions {
        quick: args.quick,
        solver: cfg.solver_options(),
        workers: args.workers,
        ..SelfCheckOptions::default()
    };
    if let Some(seed) = args.seed {
        opts.seed = seed;
    }
    let results = run_self_checks(&opts);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!(
            "{} {:width$}  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Suite)
    }
}

fn config_dump(args: &SourceArgs) -> Result<(), Failure> {
    let cfg = load(args)?;
    print!("{}", cfg.to_toml_string().map_err(config_err)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Converge(a) => converge(a),
        Command::Validate(a) => validate(a),
        Command::ConfigDump(a) => config_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Suite => eprintln!("validation suite failed"),
                Failure::Config(m) => eprintln!("configuration error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
