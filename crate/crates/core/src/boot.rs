//! Release files and the boot driver.
//!
//! ```text
//! release demo
//! graph   demo.rgraph
//! app     app1 app1.tree
//! app     app2 app2.tree
//! ```
//!
//! Paths are relative to the release file. Applications start in file order,
//! each after the previous root supervisor acked, once the condition server
//! is up.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::clock::{build_runtime, Clock, ClockKind};
use crate::condsrv::{ConditionStore, DEFAULT_DEADLOCK_TIMEOUT};
use crate::depgraph::{
    parse_release_graph, strip_comment, DependencyGraph, Diagnostic, Location, ModuleKey,
};
use crate::suptree::{
    parse_tree, ChildSpec, QuiescenceError, Runtime, StartFailure, StartupReport, TreeNode,
};
use crate::trace::{EventKind, NodePath, TraceEvent, TraceSink};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AppEntry {
    pub name: String,
    pub tree_path: PathBuf,
    pub line: usize,
}

/// The release file as written, before any referenced file is read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReleaseManifest {
    pub name: String,
    pub graph_path: PathBuf,
    pub apps: Vec<AppEntry>,
}

pub fn parse_release(source: &str) -> Result<ReleaseManifest, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    let mut name = None;
    let mut graph = None;
    let mut apps: Vec<AppEntry> = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in source.lines().enumerate() {
        let loc = Some(Location {
            line: i + 1,
            column: 1,
        });
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["release", n] => {
                if name.replace(n.to_string()).is_some() {
                    diags.push(Diagnostic::error("duplicate-release", "`release` given twice", loc));
                }
            }
            ["graph", p] => {
                if graph.replace(PathBuf::from(p)).is_some() {
                    diags.push(Diagnostic::error("duplicate-graph", "`graph` given twice", loc));
                }
            }
            ["app", n, p] => {
                if !seen.insert(n.to_string()) {
                    diags.push(Diagnostic::error("duplicate-app", format!("application `{n}` listed twice"), loc));
                }
                apps.push(AppEntry {
                    name: n.to_string(),
                    tree_path: PathBuf::from(p),
                    line: i + 1,
                });
            }
            _ => diags.push(Diagnostic::error(
                "syntax",
                format!("expected `release <name>`, `graph <path>` or `app <name> <tree>`, found `{line}`"),
                loc,
            )),
        }
    }
    if graph.is_none() {
        diags.push(Diagnostic::error(
            "missing-graph",
            "release has no `graph` line",
            None,
        ));
    }
    if name.is_none() {
        diags.push(Diagnostic::error(
            "missing-release-name",
            "release has no `release` line",
            None,
        ));
    }
    if diags.is_empty() {
        Ok(ReleaseManifest {
            name: name.unwrap(),
            graph_path: graph.unwrap(),
            apps,
        })
    } else {
        Err(diags)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Application {
    pub name: String,
    pub root: ChildSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Release {
    pub name: String,
    pub graph: DependencyGraph,
    pub applications: Vec<Application>,
}

impl Release {
    /// Checks what boot relies on: unique application names and root ids,
    /// and a valid graph.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags: Vec<Diagnostic> = self
            .graph
            .validate()
            .into_iter()
            .filter(Diagnostic::is_error)
            .collect();
        let mut names = HashSet::new();
        let mut roots = HashSet::new();
        for app in &self.applications {
            if !names.insert(app.name.as_str()) {
                diags.push(Diagnostic::error(
                    "duplicate-app",
                    format!("application `{}` listed twice", app.name),
                    None,
                ));
            }
            if !roots.insert(app.root.id.as_str()) {
                diags.push(Diagnostic::error(
                    "duplicate-root",
                    format!(
                        "root id `{}` is used by more than one application",
                        app.root.id
                    ),
                    None,
                ));
            }
            if let Err(m) = app.root.validate() {
                diags.push(Diagnostic::error(
                    "invalid-tree",
                    format!("{}: {m}", app.name),
                    None,
                ));
            }
        }
        diags
    }

    pub fn roots(&self) -> Vec<ChildSpec> {
        self.applications.iter().map(|a| a.root.clone()).collect()
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {} problem(s)", path.display(), diagnostics.len())]
    Invalid {
        path: PathBuf,
        diagnostics: Vec<Diagnostic>,
    },
}

fn read(path: &Path) -> Result<String, LoadError> {
    fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a release file and every graph and tree file it references.
pub fn load_release(path: &Path) -> Result<Release, LoadError> {
    let invalid = |path: &Path, diagnostics| LoadError::Invalid {
        path: path.to_path_buf(),
        diagnostics,
    };
    let manifest = parse_release(&read(path)?).map_err(|d| invalid(path, d))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let graph_path = base.join(&manifest.graph_path);
    let graph = parse_release_graph(&read(&graph_path)?).map_err(|d| invalid(&graph_path, d))?;
    let mut applications = Vec::new();
    for app in &manifest.apps {
        let loc = Some(Location {
            line: app.line,
            column: 1,
        });
        let tree_path = base.join(&app.tree_path);
        let source = fs::read_to_string(&tree_path).map_err(|e| {
            invalid(
                path,
                vec![Diagnostic::error(
                    "unknown-tree-file",
                    format!(
                        "application `{}`: cannot read {}: {e}",
                        app.name,
                        tree_path.display()
                    ),
                    loc,
                )],
            )
        })?;
        let mut roots = parse_tree(&source).map_err(|e| {
            invalid(
                &tree_path,
                vec![Diagnostic::error(
                    "invalid-tree",
                    e.message,
                    Some(Location {
                        line: e.line,
                        column: 1,
                    }),
                )],
            )
        })?;
        if roots.len() != 1 {
            return Err(invalid(
                &tree_path,
                vec![Diagnostic::error(
                    "invalid-tree",
                    format!(
                        "an application tree needs exactly one root, found {}",
                        roots.len()
                    ),
                    None,
                )],
            ));
        }
        applications.push(Application {
            name: app.name.clone(),
            root: roots.remove(0),
        });
    }
    let release = Release {
        name: manifest.name,
        graph,
        applications,
    };
    let diags = release.validate();
    if diags.is_empty() {
        Ok(release)
    } else {
        Err(invalid(path, diags))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BootStep {
    StartConditionServer,
    StartApplication(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootPlan {
    pub steps: Vec<BootStep>,
}

pub fn make_boot_plan(release: &Release) -> BootPlan {
    let mut steps = vec![BootStep::StartConditionServer];
    steps.extend(
        release
            .applications
            .iter()
            .map(|a| BootStep::StartApplication(a.name.clone())),
    );
    BootPlan { steps }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BootMode {
    /// Every child is started sequentially, whatever its spec says.
    Sequential,
    #[default]
    AsSpecified,
}

#[derive(Clone, Debug)]
pub struct BootOptions {
    pub mode: BootMode,
    pub deadlock_timeout: Duration,
    /// Boot even if the graph has a cycle (for deadlock demonstrations).
    pub allow_cycles: bool,
    /// Bound on waiting for concurrent attaches after the last root acked.
    pub quiescence_timeout: Duration,
}

impl Default for BootOptions {
    fn default() -> Self {
        BootOptions {
            mode: BootMode::AsSpecified,
            deadlock_timeout: DEFAULT_DEADLOCK_TIMEOUT,
            allow_cycles: false,
            quiescence_timeout: Duration::from_secs(3600),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootReport {
    /// Time from each application's start to its root's ack.
    pub applications: Vec<(String, Duration)>,
    pub startup: StartupReport,
}

#[derive(Debug, Error)]
pub enum BootError {
    #[error("dependency graph is invalid")]
    InvalidGraph(Vec<Diagnostic>),
    #[error("dependency graph has a cycle through {}", fmt_keys(.0))]
    Cycle(Vec<ModuleKey>),
    #[error("application `{app}` failed to start: {failure}")]
    Application {
        app: String,
        failure: StartFailure,
        /// Applications that acked before the failure.
        started: Vec<(String, Duration)>,
        trace: Vec<TraceEvent>,
    },
    #[error("startup did not complete: {error}")]
    Quiescence {
        error: QuiescenceError,
        started: Vec<(String, Duration)>,
        trace: Vec<TraceEvent>,
    },
    #[error("cannot build runtime: {0}")]
    Runtime(#[from] io::Error),
}

impl BootError {
    /// Trace recorded up to the failure, if the system got that far.
    pub fn trace(&self) -> Option<&[TraceEvent]> {
        match self {
            BootError::Application { trace, .. } | BootError::Quiescence { trace, .. } => {
                Some(trace)
            }
            _ => None,
        }
    }
}

fn fmt_keys(keys: &[ModuleKey]) -> String {
    keys.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" -> ")
}

/// A booted system.
#[derive(Debug)]
pub struct System {
    pub runtime: Runtime,
    pub report: BootReport,
    /// The roots as started (after the boot mode was applied).
    pub roots: Vec<ChildSpec>,
}

/// Roots as `mode` would start them.
pub fn effective_roots(release: &Release, mode: BootMode) -> Vec<ChildSpec> {
    release
        .applications
        .iter()
        .map(|a| match mode {
            BootMode::Sequential => a.root.all_sequential(),
            BootMode::AsSpecified => a.root.clone(),
        })
        .collect()
}

/// Boots `release` inside the current tokio runtime.
pub async fn boot(
    release: &Release,
    options: &BootOptions,
    clock: Clock,
) -> Result<System, BootError> {
    let graph = release
        .graph
        .clone()
        .freeze()
        .map_err(BootError::InvalidGraph)?;
    if !options.allow_cycles {
        graph.cycle_check().map_err(BootError::Cycle)?;
    }
    let trace = TraceSink::new(clock);
    let roots = effective_roots(release, options.mode);

    let mut started = Vec::new();
    let mut runtime = None;
    for step in make_boot_plan(release).steps {
        match step {
            BootStep::StartConditionServer => {
                let store =
                    ConditionStore::from_valid(graph.clone(), options.deadlock_timeout, clock)
                        .with_trace(trace.clone());
                trace.emit(
                    EventKind::ServerStart,
                    &NodePath::condition_server(),
                    [("release", release.name.clone())],
                );
                runtime = Some(Runtime::new(Arc::new(store), trace.clone()));
            }
            BootStep::StartApplication(name) => {
                let rt = runtime.as_ref().expect("condition server starts first");
                let i = release
                    .applications
                    .iter()
                    .position(|a| a.name == name)
                    .expect("planned app");
                let t0 = clock.now();
                if let Err(failure) = rt.start_root(roots[i].clone()).await {
                    return Err(BootError::Application {
                        app: name,
                        failure,
                        started,
                        trace: trace.snapshot(),
                    });
                }
                started.push((name, clock.now() - t0));
            }
        }
    }
    let runtime = runtime.expect("plan has a server step");
    let startup = match runtime.await_quiescence(options.quiescence_timeout).await {
        Ok(s) => s,
        Err(error) => {
            return Err(BootError::Quiescence {
                error,
                started,
                trace: trace.snapshot(),
            })
        }
    };
    Ok(System {
        runtime,
        report: BootReport {
            applications: started,
            startup,
        },
        roots,
    })
}

/// Everything a finished boot leaves behind, after shutdown.
#[derive(Clone, Debug)]
pub struct BootOutcome {
    pub report: BootReport,
    pub trace: Vec<TraceEvent>,
    pub tree: Vec<TreeNode>,
    pub roots: Vec<ChildSpec>,
}

/// Builds a runtime for `clock`, boots, records the result and shuts down.
pub fn run_release(
    release: &Release,
    options: &BootOptions,
    clock: ClockKind,
) -> Result<BootOutcome, BootError> {
    let rt = build_runtime(clock)?;
    rt.block_on(async {
        let system = boot(release, options, Clock::start(clock)).await?;
        let outcome = BootOutcome {
            report: system.report.clone(),
            trace: system.runtime.trace().snapshot(),
            tree: system.runtime.tree(),
            roots: system.roots.clone(),
        };
        system.runtime.shutdown().await;
        Ok(outcome)
    })
}
