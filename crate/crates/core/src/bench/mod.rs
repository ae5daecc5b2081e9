//! Startup benchmarks: topologies, delays, fork placement, the critical-path
//! model and the timing harness.
//!
//! Durations are measured in-process from boot to quiescence, so absolute
//! numbers say nothing about a full VM start; ratios between placements and
//! modes do.

mod critical;
mod harness;
mod random;
mod topology;

pub use critical::{critical_path, CriticalPathError, PrecedenceDag};
pub use harness::{
    emit_csv, run_benchmark, run_tree, BenchConfig, BenchError, BenchReport, Repetition,
    CSV_COLUMNS,
};
pub use random::{lane_tree, random_sequential_system, random_system, RandomSystem};
pub use topology::{
    apply_delays, forks_at_depth, gen_topology, place_forks, DelayDist, DelayKind, DelayModel,
    ForkPlacement, PlacementError, TopologyError, TopologyKind, TopologySpec,
};
