//! Supervision-tree runtime with dependency-driven concurrent startup.
//!
//! - [`depgraph`]: release-level conditions, groups and preconditions.
//! - [`condsrv`]: the condition store workers wait on before `init`.
//! - [`suptree`]: supervisors, workers and wrapper nodes for concurrent starts.
//! - [`boot`]: turns a release into a running system.
//! - [`bench`]: topology generators, critical-path model and timing harness.

pub mod bench;
pub mod boot;
pub mod clock;
pub mod condsrv;
pub mod depgraph;
pub mod suptree;
pub mod trace;

pub use clock::{Clock, ClockKind};
