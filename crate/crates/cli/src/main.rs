use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use forkstart::bench::{
    emit_csv, run_benchmark, BenchConfig, DelayKind, DelayModel, ForkPlacement, TopologyKind,
    TopologySpec,
};
use forkstart::boot::{load_release, run_release, BootError, BootMode, BootOptions, LoadError};
use forkstart::condsrv::DEFAULT_DEADLOCK_TIMEOUT;
use forkstart::depgraph::{parse_release_graph, Diagnostic};
use forkstart::suptree::{check_trace, parse_tree};
use forkstart::trace::{format_trace, parse_trace};
use forkstart::ClockKind;

#[derive(Parser)]
#[command(
    name = "forkstart",
    version,
    about = "Concurrent supervision-tree startup driven by a dependency graph"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dependency graph file for errors and cycles.
    Validate { graph: PathBuf },
    /// Boot a release and report its startup time.
    Run(RunArgs),
    /// Check a recorded trace against a graph and the started trees.
    Check {
        trace: PathBuf,
        graph: PathBuf,
        #[arg(required = true)]
        trees: Vec<PathBuf>,
        /// Mode the traced run was booted in.
        #[arg(long, value_enum, default_value = "conc")]
        mode: Mode,
    },
    /// Time the startup of a generated tree.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Seq,
    Conc,
}

impl From<Mode> for BootMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Seq => BootMode::Sequential,
            Mode::Conc => BootMode::AsSpecified,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    release: PathBuf,
    #[arg(long, value_enum, default_value = "conc")]
    mode: Mode,
    /// Write the event trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Milliseconds a wait may block without progress.
    #[arg(long)]
    deadlock_timeout: Option<u64>,
    #[arg(long)]
    virtual_clock: bool,
    /// Boot even if the graph has a cycle.
    #[arg(long)]
    allow_cycles: bool,
}

#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchArgs {
    /// TOML file with any of these options; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// deep, wide or random
    #[arg(long)]
    topology: Option<String>,
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-node delay (default 50 for sleep, 20 for busy).
    #[arg(long)]
    delay_ms: Option<u64>,
    /// sleep or busy
    #[arg(long)]
    delay_kind: Option<String>,
    /// Start every child at this depth concurrently.
    #[arg(long, conflicts_with = "fork_count")]
    fork_depth: Option<usize>,
    /// Start the first N children in breadth-first order concurrently.
    #[arg(long)]
    fork_count: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    repeat: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    virtual_clock: bool,
    #[arg(long)]
    deadlock_timeout: Option<u64>,
    /// Write one CSV row per repetition.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append to the CSV file instead of replacing it.
    #[arg(long)]
    #[serde(default)]
    append: bool,
}

#[derive(Debug)]
enum Failure {
    /// Exit 1: the input was read but the answer is no.
    Semantic(String),
    /// Exit 2: bad usage or unreadable input.
    Usage(String),
}

impl Failure {
    fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Semantic(_) => ExitCode::from(1),
            Failure::Usage(_) => ExitCode::from(2),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { graph } => validate(&graph),
        Command::Run(args) => run(args),
        Command::Check {
            trace,
            graph,
            trees,
            mode,
        } => check(&trace, &graph, &trees, mode),
        Command::Bench(args) => bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Semantic(msg) | Failure::Usage(msg)) = &f;
            eprintln!("error: {msg}");
            f.exit_code()
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn print_diagnostics(path: &Path, diags: &[Diagnostic]) {
    for d in diags {
        eprintln!("{}: {d}", path.display());
    }
}

fn validate(path: &Path) -> Result<(), Failure> {
    let src = read(path)?;
    let graph = match parse_release_graph(&src) {
        Ok(g) => g,
        Err(diags) => {
            print_diagnostics(path, &diags);
            return Err(Failure::Semantic(format!(
                "{} is not a valid graph",
                path.display()
            )));
        }
    };
    print_diagnostics(path, &graph.validate());
    if let Err(cycle) = graph.cycle_check() {
        let names: Vec<String> = cycle.iter().map(ToString::to_string).collect();
        return Err(Failure::Semantic(format!(
            "wait cycle: {}",
            names.join(" -> ")
        )));
    }
    println!(
        "ok: {} condition(s), {} group(s), {} precondition declaration(s)",
        graph.conditions.len(),
        graph.groups.len(),
        graph.preconditions.len()
    );
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let release = load_release(&args.release).map_err(|e| match e {
        LoadError::Io { .. } => Failure::Usage(e.to_string()),
        LoadError::Invalid {
            ref path,
            ref diagnostics,
        } => {
            print_diagnostics(path, diagnostics);
            Failure::Semantic(e.to_string())
        }
    })?;
    let options = BootOptions {
        mode: args.mode.into(),
        deadlock_timeout: args
            .deadlock_timeout
            .map_or(DEFAULT_DEADLOCK_TIMEOUT, Duration::from_millis),
        allow_cycles: args.allow_cycles,
        ..BootOptions::default()
    };
    let clock = if args.virtual_clock {
        ClockKind::Virtual
    } else {
        ClockKind::Wall
    };
    let result = run_release(&release, &options, clock);
    let trace = match &result {
        Ok(out) => Some(out.trace.as_slice()),
        Err(e) => e.trace(),
    };
    if let (Some(path), Some(events)) = (&args.trace, trace) {
        fs::write(path, format_trace(events))
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    match result {
        Ok(out) => {
            for (app, d) in &out.report.applications {
                println!("app {app}: acked after {:.3} ms", ms(*d));
            }
            let s = &out.report.startup;
            println!(
                "release {}: quiescent after {:.3} ms, {} node(s), {} wrapper(s)",
                release.name,
                ms(s.duration),
                s.node_count,
                s.wrapper_count
            );
            Ok(())
        }
        Err(BootError::Runtime(e)) => Err(Failure::Usage(e.to_string())),
        Err(e) => {
            if let BootError::Quiescence {
                error: forkstart::suptree::QuiescenceError::Deadlock(report),
                ..
            } = &e
            {
                eprintln!("{report}");
            }
            Err(Failure::Semantic(e.to_string()))
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

fn check(trace: &Path, graph: &Path, trees: &[PathBuf], mode: Mode) -> Result<(), Failure> {
    let events = parse_trace(&read(trace)?)
        .map_err(|e| Failure::Usage(format!("{}: {e}", trace.display())))?;
    let graph_src = read(graph)?;
    let graph_value = parse_release_graph(&graph_src).map_err(|diags| {
        print_diagnostics(graph, &diags);
        Failure::Usage(format!("{} is not a valid graph", graph.display()))
    })?;
    let mut roots = Vec::new();
    for t in trees {
        let parsed =
            parse_tree(&read(t)?).map_err(|e| Failure::Usage(format!("{}: {e}", t.display())))?;
        roots.extend(parsed.into_iter().map(|r| match mode {
            Mode::Seq => r.all_sequential(),
            Mode::Conc => r,
        }));
    }
    let violations = check_trace(&events, &graph_value, &roots);
    if violations.is_empty() {
        println!("ok: {} event(s), no violations", events.len());
        return Ok(());
    }
    for v in &violations {
        println!("{}: {} (events {:?})", v.rule, v.message, v.events);
    }
    Err(Failure::Semantic(format!(
        "{} violation(s)",
        violations.len()
    )))
}

fn bench(flags: BenchArgs) -> Result<(), Failure> {
    let file = match &flags.config {
        Some(path) => toml::from_str::<BenchArgs>(&read(path)?)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
        None => BenchArgs::default(),
    };
    let a = BenchArgs {
        config: None,
        topology: flags.topology.or(file.topology),
        branching: flags.branching.or(file.branching),
        depth: flags.depth.or(file.depth),
        seed: flags.seed.or(file.seed),
        delay_ms: flags.delay_ms.or(file.delay_ms),
        delay_kind: flags.delay_kind.or(file.delay_kind),
        fork_depth: flags.fork_depth.or(file.fork_depth),
        fork_count: flags.fork_count.or(file.fork_count),
        mode: flags.mode.or(file.mode),
        repeat: flags.repeat.or(file.repeat),
        virtual_clock: flags.virtual_clock || file.virtual_clock,
        deadlock_timeout: flags.deadlock_timeout.or(file.deadlock_timeout),
        out: flags.out.or(file.out),
        append: flags.append || file.append,
    };
    let config = bench_config(&a)?;
    // invalid combinations (bad placement, zero branching) are usage errors
    let report = run_benchmark(&config).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(out) = &a.out {
        emit_csv(&report, out, a.append).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    println!("{}", report.summary());
    for r in report.repetitions.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "repetition {} failed: {}",
            r.index,
            r.error.as_deref().unwrap_or_default()
        );
    }
    if report.failures() > 0 {
        return Err(Failure::Semantic(format!(
            "{} repetition(s) failed",
            report.failures()
        )));
    }
    Ok(())
}

fn bench_config(a: &BenchArgs) -> Result<BenchConfig, Failure> {
    if a.fork_depth.is_some() && a.fork_count.is_some() {
        return Err(Failure::Usage(
            "--fork-depth and --fork-count are mutually exclusive".into(),
        ));
    }
    let kind: TopologyKind = a
        .topology
        .as_deref()
        .unwrap_or("deep")
        .parse()
        .map_err(Failure::Usage)?;
    let mut topology = TopologySpec::default_for(kind);
    if let Some(b) = a.branching {
        topology.branching = b;
    }
    if let Some(d) = a.depth {
        topology.depth = d;
    }
    if let Some(s) = a.seed {
        topology.seed = s;
    }
    let delay_kind: DelayKind = a
        .delay_kind
        .as_deref()
        .unwrap_or("sleep")
        .parse()
        .map_err(Failure::Usage)?;
    let delays = match delay_kind {
        DelayKind::Sleep => DelayModel::sleep_ms(a.delay_ms.unwrap_or(50)),
        DelayKind::Busy => DelayModel::busy_ms(a.delay_ms.unwrap_or(20)),
    };
    let placement = match (a.fork_depth, a.fork_count) {
        (Some(d), _) => ForkPlacement::AllAtDepth(d),
        (_, Some(n)) => ForkPlacement::FirstNBreadthFirst(n),
        _ => ForkPlacement::None,
    };
    Ok(BenchConfig {
        topology,
        delays,
        placement,
        mode: a.mode.unwrap_or(Mode::Conc).into(),
        repetitions: a.repeat.unwrap_or(5),
        clock: if a.virtual_clock {
            ClockKind::Virtual
        } else {
            ClockKind::Wall
        },
        deadlock_timeout: a
            .deadlock_timeout
            .map_or(DEFAULT_DEADLOCK_TIMEOUT, Duration::from_millis),
    })
}
