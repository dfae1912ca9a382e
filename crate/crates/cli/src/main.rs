use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use etrace::dynamic::{InterpConfig, IssConfig};
use etrace::energy::{load_params, params_to_json};
use etrace::ir::{parse_eir, EirProgram, ThreadDecl};
use etrace::lower::LowerOptions;
use etrace::mapping::{isa_block_energies, MappingDump};
use etrace::report::{
    compare_corpus, explore, load_explore_file, sra_report, ProfileReport, RunConfig, SimReport,
};
use etrace::sra::{parse_constraints, threads_per_core};
use etrace::toolkit::{compile, load_benchmark, load_corpus, place_threads, read_file};
use etrace::{BigRational, CompileOptions, Direction, ExactParams, Level, Scalar, ToolError};

#[derive(Parser)]
#[command(name = "etrace", version, about = "Energy estimation at IR and ISA level")]
struct Cli {
    /// Energy model parameters (JSON); defaults are used when absent.
    #[arg(long, global = true, env = "ETRACE_PARAMS")]
    params: Option<PathBuf>,
    /// Write the report here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lower a program and print the tagged ISA.
    Compile {
        input: PathBuf,
        /// Also write the mapping and its energy attribution as JSON.
        #[arg(long)]
        emit: Option<PathBuf>,
        /// Give fully untagged blocks the tag of a branch into them.
        #[arg(long)]
        adjacent_default: bool,
        /// Keep the debug locations written in the input.
        #[arg(long)]
        keep_dbg: bool,
    },
    /// Static energy bounds.
    Sra {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = LevelArg::Isa)]
        level: LevelArg,
        /// Bound direction; repeat for both.
        #[arg(long = "bound", value_enum)]
        bounds: Vec<BoundArg>,
        /// Linear constraints over block counts, one per line.
        #[arg(long)]
        constraints: Option<PathBuf>,
        /// Idle time in seconds charged on top of the bound.
        #[arg(long, default_value_t = 0.0)]
        idle: f64,
        #[command(flatten)]
        placement: Placement,
    },
    /// Block-count profiling estimate for one input vector.
    Profile {
        input: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        args: Vec<i32>,
        /// Also write the block counts as JSON.
        #[arg(long)]
        counts: Option<PathBuf>,
        #[command(flatten)]
        placement: Placement,
    },
    /// Cycle-accurate simulation of the lowered program.
    Simulate {
        input: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        args: Vec<i32>,
        /// Write one JSON line per issue slot.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        placement: Placement,
    },
    /// Simulation, profiling and bounds over benchmark directories.
    Compare {
        /// Corpus root or individual benchmark directories.
        #[arg(default_value = "benchmarks")]
        paths: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Predicted energy and time over a set of configurations.
    Explore {
        /// Program used by configurations that name none.
        input: Option<PathBuf>,
        #[arg(long)]
        configs: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Print the energy model parameters in effect.
    Params,
}

#[derive(Args)]
struct Placement {
    /// Run the entry function as this many identical threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Core of each thread, comma separated.
    #[arg(long, value_delimiter = ',')]
    cores: Vec<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Isa,
    Ir,
    Both,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum BoundArg {
    Max,
    Min,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Md,
}

enum Failure {
    User(String),
    Internal(String),
}

impl From<ToolError> for Failure {
    fn from(e: ToolError) -> Self {
        if e.is_internal() {
            Failure::Internal(e.to_string())
        } else {
            Failure::User(e.to_string())
        }
    }
}

fn user<E: std::fmt::Display>(e: E) -> Failure {
    Failure::User(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(3)
        }
    }
}

fn emit(cli: &Cli, text: &str) -> Result<(), Failure> {
    match &cli.out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::User(format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn load_program(path: &Path) -> Result<EirProgram, Failure> {
    parse_eir(&read_file(path)?).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn program_name(path: &Path) -> String {
    path.display().to_string()
}

fn place(p: EirProgram, pl: &Placement) -> Result<EirProgram, Failure> {
    let mut p = p;
    if let Some(n) = pl.threads {
        let current = p.effective_threads();
        if !p.threads.is_empty() && n != current.len() {
            return Err(user(format!("program declares {} threads, --threads {n} given", current.len())));
        }
        if p.threads.is_empty() {
            if n == 0 {
                return Err(user("--threads must be at least 1"));
            }
            let t: ThreadDecl = current[0].clone();
            p.threads = vec![t; n];
        }
    }
    if !pl.cores.is_empty() {
        p = place_threads(&p, &pl.cores)?;
    }
    Ok(p)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let params: ExactParams = match &cli.params {
        Some(p) => load_params(p).map_err(user)?,
        None => ExactParams::default(),
    };
    let opts = CompileOptions::default();
    match &cli.cmd {
        Cmd::Compile { input, emit: map_out, adjacent_default, keep_dbg } => {
            let p = load_program(input)?;
            let opts = CompileOptions {
                lower: LowerOptions { attach_untagged_blocks: *adjacent_default, ..LowerOptions::default() },
                keep_dbg: *keep_dbg,
            };
            let c = compile(&p, &opts)?;
            for d in &c.diagnostics {
                eprintln!("note: {d}");
            }
            if let Some(path) = map_out {
                let nt = threads_per_core(&c.ir.effective_threads()).into_iter().max().unwrap_or(1);
                let energy = c.ir_energy(nt, &params, true)?;
                let isa = isa_block_energies(&c.isa, nt, &params).map_err(ToolError::from)?;
                write_file(path, &json(&MappingDump::new(&c.isa, &c.map, &energy, &isa, nt)))?;
            }
            emit(cli, &c.isa.to_string())
        }
        Cmd::Sra { input, level, bounds, constraints, idle, placement } => {
            let p = place(load_program(input)?, placement)?;
            let c = compile(&p, &opts)?;
            let levels = match level {
                LevelArg::Isa => vec![Level::Isa],
                LevelArg::Ir => vec![Level::Ir],
                LevelArg::Both => vec![Level::Isa, Level::Ir],
            };
            let mut dirs = Vec::new();
            for b in if bounds.is_empty() { &[BoundArg::Max][..] } else { bounds } {
                let d = match b {
                    BoundArg::Max => Direction::Max,
                    BoundArg::Min => Direction::Min,
                };
                if !dirs.contains(&d) {
                    dirs.push(d);
                }
            }
            let user_rows = match constraints {
                Some(path) => parse_constraints(&read_file(path)?)
                    .map_err(|e| user(format!("{}: {e}", path.display())))?,
                None => Vec::new(),
            };
            if !idle.is_finite() || *idle < 0.0 {
                return Err(user("--idle must be a non-negative number of seconds"));
            }
            let idle = BigRational::from_f64_value(*idle);
            let r = sra_report(&program_name(input), &c, &levels, &dirs, &params, &user_rows, &idle)?;
            emit(cli, &json(&r))
        }
        Cmd::Profile { input, args, counts: counts_out, placement } => {
            let p = place(load_program(input)?, placement)?;
            let c = compile(&p, &opts)?;
            let (counts, est) = c.profile(args, &params, &InterpConfig::default())?;
            if let Some(path) = counts_out {
                write_file(path, &json(&counts))?;
            }
            let r = ProfileReport::new(&program_name(input), RunConfig::of(&c.ir, &params), args, &counts, &est);
            emit(cli, &json(&r))
        }
        Cmd::Simulate { input, args, trace, placement } => {
            let p = place(load_program(input)?, placement)?;
            let c = compile(&p, &opts)?;
            let cfg = IssConfig { trace: trace.is_some(), ..IssConfig::default() };
            let (t, _) = c.simulate(args, &params, &cfg)?;
            if let Some(path) = trace {
                write_file(path, &t.slots_jsonl())?;
            }
            let r = SimReport::new(&program_name(input), RunConfig::of(&c.ir, &params), args, &t, &params)?;
            emit(cli, &json(&r))
        }
        Cmd::Compare { paths, format } => {
            let mut corpus = Vec::new();
            for path in paths {
                if path.join("prog.eir").is_file() {
                    corpus.push(load_benchmark(path)?);
                } else {
                    corpus.extend(load_corpus(path)?);
                }
            }
            if corpus.is_empty() {
                return Err(user("no benchmarks found"));
            }
            let r = compare_corpus(&corpus, &params, &opts)?;
            match format {
                Format::Json => emit(cli, &json(&r)),
                Format::Md => emit(cli, &r.to_markdown()),
            }
        }
        Cmd::Explore { input, configs, format } => {
            let file = load_explore_file(configs)?;
            let base = configs.parent().unwrap_or(Path::new("."));
            let default = match input {
                Some(path) => Some((program_name(path), load_program(path)?)),
                None => None,
            };
            let r = explore(default.as_ref().map(|(n, p)| (n.as_str(), p)), &file, base, &params, &opts)?;
            match format {
                Format::Json => emit(cli, &json(&r)),
                Format::Md => emit(cli, &r.to_markdown()),
            }
        }
        Cmd::Params => {
            let mut s = params_to_json(&params);
            s.push('\n');
            emit(cli, &s)
        }
    }
}
