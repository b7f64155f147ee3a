mod approx;
mod artifacts;
mod config;
mod graphs;
mod latency;
mod plan;
mod plot;
mod report;
mod search;
mod teacher;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polyboot::levelplan::Policy;
use polyboot::{Error, Result};

#[derive(Parser)]
#[command(name = "polyboot", version, about = "Polynomial activation search under a bootstrap budget")]
struct Cli {
    /// Output root; each command writes to its own subdirectory.
    #[arg(long, global = true, env = "POLYBOOT_OUT", default_value = "polyboot-out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the ReLU teacher and save it with its dataset.
    TrainTeacher(TeacherArgs),
    /// Fit one composite activation and write its certificate.
    Approx(ApproxArgs),
    /// Place bootstraps on a network graph.
    Plan(PlanArgs),
    /// Run the multi-objective activation search.
    Search(SearchArgs),
    /// Summarise a search archive.
    Report(ReportArgs),
    /// Re-check the artifacts of a command directory.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to the available cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TeacherArgs {
    #[command(flatten)]
    common: Common,
    /// desk-resnet, desk-chain or mlp.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train on `x,y,label` rows instead of the generated images.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ApproxArgs {
    #[command(flatten)]
    common: Common,
    /// Stage degrees, e.g. 15,15,27.
    #[arg(long, value_delimiter = ',')]
    degrees: Option<Vec<u32>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    /// Fail when the certified Linf error is above this.
    #[arg(long)]
    max_linf: Option<f64>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: Common,
    /// resnet20, resnet32, resnet44, vgg11, a tinynet arch, or a graph JSON file.
    #[arg(long)]
    graph: Option<String>,
    /// Per-activation depths, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "uniform_depth")]
    depths: Option<Vec<u32>>,
    /// Same depth for every activation.
    #[arg(long)]
    uniform_depth: Option<u32>,
    /// Fixed placement policy (mpcnn or aespa) instead of greedy.
    #[arg(long, value_parser = parse_policy)]
    policy: Option<Policy>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by train-teacher (defaults to <out>/teacher).
    #[arg(long)]
    teacher_dir: Option<PathBuf>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Archive to summarise (defaults to <out>/search/archive.jsonl).
    #[arg(long)]
    archive: Option<PathBuf>,
    /// Graph for the linear-op count of the latency estimate.
    #[arg(long)]
    graph: Option<String>,
    /// Add modelled latency estimates.
    #[arg(long)]
    latency: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Command output directories to check.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
}

fn parse_policy(s: &str) -> std::result::Result<Policy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::Shape(_) | Error::FoldTarget { .. } => 2,
        Error::Infeasible { .. } | Error::NoPlacement(_) => 3,
        Error::Integrity(_) => 4,
        Error::FitFailure { .. } | Error::Diverged(_) | Error::Io(_) => 1,
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == Some(0) {
        return Err(Error::InvalidInput("threads must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out;
    match cli.command {
        Command::TrainTeacher(a) => {
            let mut cfg: config::TeacherConfig = config::load(a.common.config.as_deref())?;
            set(&mut cfg.arch, a.arch);
            set(&mut cfg.epochs, a.epochs);
            set(&mut cfg.seed, a.seed);
            if let Some(path) = a.csv {
                cfg.dataset = config::DatasetSource::Csv { path };
            }
            cfg.threads = a.common.threads.or(cfg.threads);
            with_threads(cfg.threads, || teacher::run(&cfg, &out))
        }
        Command::Approx(a) => {
            let mut cfg: config::ApproxConfig = config::load(a.common.config.as_deref())?;
            set(&mut cfg.degrees, a.degrees);
            set(&mut cfg.rccde.seed, a.seed);
            set(&mut cfg.rccde.generations, a.generations);
            set(&mut cfg.rccde.seeds, a.seeds);
            cfg.max_linf = a.max_linf.or(cfg.max_linf);
            cfg.threads = a.common.threads.or(cfg.threads);
            with_threads(cfg.threads, || approx::run(&cfg, &out))
        }
        Command::Plan(a) => {
            let mut cfg: config::PlanConfig = config::load(a.common.config.as_deref())?;
            set(&mut cfg.graph, a.graph);
            if a.depths.is_some() || a.uniform_depth.is_some() {
                cfg.depths = a.depths;
                cfg.uniform_depth = a.uniform_depth;
            }
            cfg.policy = a.policy.or(cfg.policy);
            with_threads(a.common.threads, || plan::run(&cfg, &out))
        }
        Command::Search(a) => {
            let mut cfg: config::SearchConfig = config::load(a.common.config.as_deref())?;
            set(&mut cfg.teacher_dir, a.teacher_dir);
            set(&mut cfg.mos.population, a.population);
            set(&mut cfg.mos.generations, a.generations);
            set(&mut cfg.mos.seed, a.seed);
            cfg.threads = a.common.threads.or(cfg.threads);
            with_threads(cfg.threads, || search::run(cfg.clone(), &out, a.resume))
        }
        Command::Report(a) => {
            let mut cfg: config::ReportConfig = config::load(a.config.as_deref())?;
            set(&mut cfg.archive, a.archive);
            set(&mut cfg.graph, a.graph);
            cfg.latency |= a.latency;
            report::run(&cfg, &out)
        }
        Command::Verify(a) => a.dirs.iter().try_for_each(|d| verify::run(d)),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
