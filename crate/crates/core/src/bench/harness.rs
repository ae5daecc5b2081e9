use std::fs::OpenOptions;
use std::path::Path;
use std::time::Duration;

use thiserror::Error;

use super::critical::critical_path;
use super::topology::{
    apply_delays, gen_topology, place_forks, DelayKind, DelayModel, ForkPlacement, PlacementError,
    TopologyError, TopologySpec,
};
use crate::boot::{effective_roots, run_release, Application, BootMode, BootOptions, Release};
use crate::clock::ClockKind;
use crate::condsrv::DEFAULT_DEADLOCK_TIMEOUT;
use crate::depgraph::DependencyGraph;
use crate::suptree::{ChildSpec, StartMode};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub topology: TopologySpec,
    pub delays: DelayModel,
    pub placement: ForkPlacement,
    pub mode: BootMode,
    pub repetitions: usize,
    pub clock: ClockKind,
    pub deadlock_timeout: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            topology: TopologySpec::deep(),
            delays: DelayModel::sleep_ms(50),
            placement: ForkPlacement::None,
            mode: BootMode::AsSpecified,
            repetitions: 5,
            clock: ClockKind::Wall,
            deadlock_timeout: DEFAULT_DEADLOCK_TIMEOUT,
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Repetition {
    pub index: usize,
    /// `None` when the repetition failed.
    pub duration: Option<Duration>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub repetitions: Vec<Repetition>,
    pub mean: Option<Duration>,
    pub min: Option<Duration>,
    pub max: Option<Duration>,
    pub node_count: usize,
    pub wrapper_count: usize,
    /// Concurrent children in the tree as started (0 in sequential mode).
    pub tagged_count: usize,
    /// Smallest depth of a concurrent child.
    pub fork_depth: Option<usize>,
    /// Only for sleep delays.
    pub critical_path_prediction: Option<Duration>,
}

impl BenchReport {
    pub fn durations(&self) -> Vec<Duration> {
        self.repetitions.iter().filter_map(|r| r.duration).collect()
    }

    pub fn failures(&self) -> usize {
        self.repetitions
            .iter()
            .filter(|r| r.duration.is_none())
            .count()
    }

    pub fn mode_label(&self) -> &'static str {
        match self.config.mode {
            BootMode::Sequential => "seq",
            BootMode::AsSpecified => "conc",
        }
    }

    pub fn summary(&self) -> String {
        let ms = |d: Option<Duration>| d.map_or("-".to_string(), |d| format_ms(d));
        format!(
            "{} {} placement={} tagged={} wrappers={} reps={} failed={} mean={} min={} max={} prediction={} (ms)",
            self.config.topology.kind,
            self.mode_label(),
            self.config.placement,
            self.tagged_count,
            self.wrapper_count,
            self.repetitions.len(),
            self.failures(),
            ms(self.mean),
            ms(self.min),
            ms(self.max),
            ms(self.critical_path_prediction),
        )
    }
}

fn format_ms(d: Duration) -> String {
    let us = d.as_micros();
    format!("{}.{:03}", us / 1000, us % 1000)
}

/// Generates the configured tree and times its startup.
pub fn run_benchmark(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.delays.validate().map_err(BenchError::Config)?;
    let mut tree = gen_topology(&config.topology)?;
    apply_delays(&mut tree, &config.delays);
    place_forks(&mut tree, &config.placement)?;
    run_tree(config, tree, &DependencyGraph::new())
}

/// Times the startup of an arbitrary tree. Topology and placement in
/// `config` are only echoed; mode, repetitions, clock and timeout apply.
pub fn run_tree(
    config: &BenchConfig,
    tree: ChildSpec,
    graph: &DependencyGraph,
) -> Result<BenchReport, BenchError> {
    if config.repetitions == 0 {
        return Err(BenchError::Config("repetitions must be at least 1".into()));
    }
    let release = Release {
        name: "bench".into(),
        graph: graph.clone(),
        applications: vec![Application {
            name: "bench".into(),
            root: tree,
        }],
    };
    let started = effective_roots(&release, config.mode).remove(0);
    let mut fork_depth = None;
    started.walk(&mut |n, d| {
        if n.start_mode == StartMode::Concurrent && d > 0 {
            fork_depth = Some(fork_depth.map_or(d, |f: usize| f.min(d)));
        }
    });
    let critical_path_prediction = match config.delays.kind {
        DelayKind::Sleep => critical_path(std::slice::from_ref(&started), graph).ok(),
        DelayKind::Busy => None,
    };
    let options = BootOptions {
        mode: config.mode,
        deadlock_timeout: config.deadlock_timeout,
        ..BootOptions::default()
    };

    let mut repetitions = Vec::new();
    let mut wrapper_count = 0;
    for index in 0..config.repetitions {
        match run_release(&release, &options, config.clock) {
            Ok(out) => {
                wrapper_count = out.report.startup.wrapper_count;
                repetitions.push(Repetition {
                    index,
                    duration: Some(out.report.startup.duration),
                    error: None,
                });
            }
            Err(e) => repetitions.push(Repetition {
                index,
                duration: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let ok: Vec<Duration> = repetitions.iter().filter_map(|r| r.duration).collect();
    let mean = (!ok.is_empty()).then(|| ok.iter().sum::<Duration>() / ok.len() as u32);
    Ok(BenchReport {
        config: config.clone(),
        mean,
        min: ok.iter().min().copied(),
        max: ok.iter().max().copied(),
        repetitions,
        node_count: started.node_count(),
        wrapper_count,
        tagged_count: started.concurrent_count(),
        fork_depth,
        critical_path_prediction,
    })
}

pub const CSV_COLUMNS: [&str; 8] = [
    "topology",
    "mode",
    "placement",
    "tagged_count",
    "fork_depth",
    "repetition",
    "duration_ms",
    "prediction_ms",
];

/// Writes one row per repetition. With `append`, rows go to the end of an
/// existing file and the header is written only if the file is empty.
pub fn emit_csv(report: &BenchReport, path: &Path, append: bool) -> Result<(), BenchError> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let fresh = file.metadata()?.len() == 0;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(CSV_COLUMNS)?;
    }
    let topology = report.config.topology.kind.to_string();
    let placement = report.config.placement.to_string();
    let tagged = report.tagged_count.to_string();
    let depth = report.fork_depth.map(|d| d.to_string()).unwrap_or_default();
    let prediction = report
        .critical_path_prediction
        .map(format_ms)
        .unwrap_or_default();
    for r in &report.repetitions {
        w.write_record([
            topology.as_str(),
            report.mode_label(),
            placement.as_str(),
            tagged.as_str(),
            depth.as_str(),
            &r.index.to_string(),
            &r.duration.map(format_ms).unwrap_or_default(),
            prediction.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
