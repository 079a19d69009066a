// SPDX-License-Identifier: Apache-2.0

//! `prlsim` command line.
//!
//! Exit codes: 0 on success, 1 for invalid flags or values, 2 when an input
//! cannot be read or an output cannot be written. Outputs go to `-o` when
//! given, otherwise into `$PRLSIM_OUT_DIR` when set, otherwise to stdout.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::report;
use crate::scenario::{self, ScenarioError};
use crate::sim::{self, Comparison, SimError};
use crate::trace::{self, Pattern, TraceError, WorkloadSpec, DEFAULT_INTER_ACCESS_GAP_NS};

pub const OUT_DIR_ENV: &str = "PRLSIM_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "prlsim", version, about = "Page access logging and WSS estimation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic trace.
    Gen(GenArgs),
    /// Run one scenario and write its report.
    Run(RunArgs),
    /// Compare PRL, PML, VMware sampling and the oracle on the same trace.
    Compare(CompareArgs),
    /// Emit the dist[i] series of a scenario.
    Dist(DistArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, value_parser = parse_pattern)]
    pattern: Pattern,
    #[arg(long)]
    pages: u64,
    /// Pages touched by the main loop; defaults to all pages.
    #[arg(long)]
    hot_pages: Option<u64>,
    #[arg(long, default_value_t = 1)]
    iters: u64,
    #[arg(long, default_value_t = 50)]
    wi: u32,
    #[arg(long)]
    cold_prefix: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_INTER_ACCESS_GAP_NS)]
    gap_ns: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    scenario: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write the report as JSON instead of CSV.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(required = true)]
    scenarios: Vec<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Run the scenarios on separate threads.
    #[arg(long)]
    parallel: bool,
}

#[derive(Debug, Args)]
struct DistArgs {
    scenario: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_pattern(s: &str) -> Result<Pattern, String> {
    s.parse()
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io { .. } => CliError::Io(e.to_string()),
            ScenarioError::Parse { .. } => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

/// Where a command's main output goes.
enum Sink {
    File(PathBuf),
    Stdout,
}

impl Sink {
    fn resolve(explicit: Option<PathBuf>, default_name: &str) -> Sink {
        if let Some(p) = explicit {
            return Sink::File(p);
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Sink::File(Path::new(&dir).join(default_name)),
            _ => Sink::Stdout,
        }
    }

    fn write(&self, content: &[u8]) -> Result<(), CliError> {
        match self {
            Sink::Stdout => {
                let mut out = std::io::stdout().lock();
                out.write_all(content).and_then(|_| out.flush()).map_err(|e| CliError::Io(format!("stdout: {e}")))
            }
            Sink::File(path) => {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)
                        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", parent.display())))?;
                }
                std::fs::write(path, content).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
            }
        }
    }

    fn is_file(&self) -> bool {
        matches!(self, Sink::File(_))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into())
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let spec = WorkloadSpec {
        n_pages: args.pages,
        d_iters: args.iters,
        wi: args.wi,
        hot_pages: args.hot_pages.unwrap_or(args.pages),
        pattern: args.pattern,
        cold_prefix: args.cold_prefix,
        seed: args.seed,
        inter_access_gap: args.gap_ns,
    };
    let trace = trace::generate(&spec)?;
    let name = format!("{}-{}-{}.csv", spec.pattern.name(), spec.n_pages, spec.seed);
    match Sink::resolve(args.output, &name) {
        Sink::File(path) => {
            let file = File::create(&path).map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
            trace::write_trace(&trace, BufWriter::new(file))?;
        }
        Sink::Stdout => trace::write_trace(&trace, BufWriter::new(std::io::stdout().lock()))?,
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let scenario = scenario::load(&args.scenario)?;
    let report = sim::run(&scenario)?;
    let ext = if args.json { "json" } else { "csv" };
    let sink = Sink::resolve(args.output, &format!("{}.report.{ext}", stem(&args.scenario)));
    let body = if args.json {
        let mut s = serde_json::to_string_pretty(&report).map_err(|e| CliError::Invalid(e.to_string()))?;
        s.push('\n');
        s
    } else {
        report::report_csv(&report)
    };
    sink.write(body.as_bytes())?;
    if sink.is_file() {
        print!("{}", report::summary(&report));
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let compare_one = |path: &PathBuf| -> Result<(String, Comparison), CliError> {
        let scenario = scenario::load(path)?;
        Ok((stem(path), sim::run_paired(&scenario)?))
    };
    let results: Vec<Result<(String, Comparison), CliError>> = if args.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = args.scenarios.iter().map(|p| scope.spawn(move || compare_one(p))).collect();
            handles.into_iter().map(|h| h.join().expect("comparison worker panicked")).collect()
        })
    } else {
        args.scenarios.iter().map(compare_one).collect()
    };
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let name = if results.len() == 1 { format!("{}.compare.csv", results[0].0) } else { "compare.csv".into() };
    Sink::resolve(args.output, &name).write(report::comparison_csv(&results).as_bytes())
}

fn cmd_dist(args: DistArgs) -> Result<(), CliError> {
    let scenario = scenario::load(&args.scenario)?;
    let window = scenario.estimator.window();
    let report = sim::run(&scenario)?;
    let run = report
        .loop_run()
        .ok_or_else(|| CliError::Invalid("dist needs mode=pml or mode=paml with its estimator enabled".into()))?;
    Sink::resolve(args.output, &format!("{}.dist.csv", stem(&args.scenario))).write(report::dist_csv(run, window).as_bytes())
}

/// Runs the CLI on `args` (including the program name).
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Dist(a) => cmd_dist(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("prlsim: {e}");
            ExitCode::from(e.code())
        }
    }
}
