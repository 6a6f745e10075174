//! `soisim`: validate group specifications, evaluate node contexts, and run
//! bus-monitoring scenarios and parameter sweeps.
//!
//! Exit codes: 0 success, 1 other failure, 2 spec or config error, 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sois::context::{ContextError, Evaluator, NodeContext};
use sois::scenarios::{self, rows_to_csv, ConfigError, MetricsReport, ScenarioConfig, SweepAxis, SweepRow};
use sois::spec::{effective_criteria, parse_spec, GroupSpec, ParseError};

#[derive(Parser)]
#[command(name = "soisim", version, about = "Self-organizing interaction space simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a group specification and print its summary.
    Validate {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Evaluate a node context against a specification.
    Eval {
        #[arg(long)]
        spec: PathBuf,
        /// TOML context snapshot.
        #[arg(long)]
        context: PathBuf,
    },
    /// Run one scenario in the configured mode and write its CSV row.
    Run(RunArgs),
    /// Run both modes over a list of values for one parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// node_count, battery, internet_type, gps or delta.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Run one scenario and print its event trace.
    Trace(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Group specification; defaults to the bundled bus-monitoring specification.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, env = "SOISIM_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` override with dotted keys, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Also write the event trace.
    #[arg(long)]
    trace: bool,
}

#[derive(Debug)]
enum Failure {
    Parse(PathBuf, ParseError),
    Config(ConfigError),
    Context(PathBuf, ContextError),
    Io(PathBuf, std::io::Error),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Parse(..) | Failure::Config(_) | Failure::Context(..) => 2,
            Failure::Io(..) => 3,
            Failure::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Parse(path, e) => write!(f, "{}:{}:{}: {}", path.display(), e.line, e.column, e.kind),
            Failure::Config(e) => write!(f, "config error: {e}"),
            Failure::Context(path, e) => write!(f, "{}: {e}", path.display()),
            Failure::Io(path, e) => write!(f, "{}: {e}", path.display()),
            Failure::Other(msg) => f.write_str(msg),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(path.to_path_buf(), e))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(dir.to_path_buf(), e))?;
    }
    fs::write(path, text).map_err(|e| Failure::Io(path.to_path_buf(), e))
}

fn load_spec(path: &Path) -> Result<GroupSpec, Failure> {
    parse_spec(&read(path)?).map_err(|e| Failure::Parse(path.to_path_buf(), e))
}

fn load_config(args: &RunArgs) -> Result<ScenarioConfig, Failure> {
    let mut cfg = ScenarioConfig::from_toml(&read(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg.with_overrides(&args.overrides)?)
}

fn validate(spec: &Path) -> Result<(), Failure> {
    let spec = load_spec(spec)?;
    print!("{}", spec.summary());
    for p in spec.unbound_parameters() {
        println!("  parameter {p} needs a binding before simulation");
    }
    Ok(())
}

fn eval(spec: &Path, context: &Path) -> Result<(), Failure> {
    let spec = load_spec(spec)?;
    let ctx = NodeContext::from_toml(&read(context)?).map_err(|e| Failure::Context(context.to_path_buf(), e))?;
    let ev = Evaluator::default();
    println!("group {} for {}", spec.name, ctx.node_id);
    for role in &spec.roles {
        let eff = effective_criteria(&spec, &role.name).map_err(|e| Failure::Other(e.to_string()))?;
        let ok = ev.rrc(&ctx, &eff);
        if ok {
            println!("  {}: eligible, fitness {:.4}", role.name, ev.fitness(&ctx, &eff).value);
        } else {
            println!("  {}: not eligible", role.name);
        }
    }
    println!("  member: {}", ev.group_membership(&ctx, &spec));
    Ok(())
}

fn report(cfg: &ScenarioConfig, spec: Option<&Path>, trace: bool) -> Result<MetricsReport, Failure> {
    let spec = spec.map(load_spec).transpose()?;
    Ok(scenarios::run(cfg, spec.as_ref(), trace)?)
}

fn file_stem(cfg: &ScenarioConfig) -> String {
    let mode = match cfg.mode {
        sois::world::Mode::ClientServer => "client-server",
        sois::world::Mode::Sois => "sois",
    };
    format!("{}-{mode}-{}", cfg.name, cfg.seed)
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let rep = report(&cfg, args.spec.as_deref(), args.trace)?;
    let csv = rows_to_csv(&[SweepRow::from_report("none", "-", &rep)]);
    match &args.out {
        Some(dir) => {
            let stem = file_stem(&cfg);
            write(&dir.join(format!("{stem}.csv")), &csv)?;
            if let Some(trace) = &rep.trace {
                write(&dir.join(format!("{stem}.trace")), trace)?;
            }
            eprintln!("m1={} m2={} elections {}", rep.m1_requests, rep.m2_failed, rep.elections_string());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn sweep(args: &RunArgs, axis: SweepAxis, values: &[String], seeds: &[u64]) -> Result<(), Failure> {
    if args.spec.is_some() {
        return Err(Failure::Other("sweeps always use the bundled bus-monitoring specification".into()));
    }
    let cfg = load_config(args)?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let rows = scenarios::sweep(&cfg, axis, values, &seeds)?;
    let csv = rows_to_csv(&rows);
    match &args.out {
        Some(dir) => write(&dir.join(format!("{}-sweep-{axis}.csv", cfg.name)), &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn trace(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let rep = report(&cfg, args.spec.as_deref(), true)?;
    let text = rep.trace.unwrap_or_default();
    match &args.out {
        Some(dir) => write(&dir.join(format!("{}.trace", file_stem(&cfg))), &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate { spec } => validate(spec),
        Command::Eval { spec, context } => eval(spec, context),
        Command::Run(args) => run(args),
        Command::Sweep { run, axis, values, seeds } => sweep(run, *axis, values, seeds),
        Command::Trace(args) => trace(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("soisim: {e}");
            ExitCode::from(e.code())
        }
    }
}
