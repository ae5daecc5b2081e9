//! Supervision trees with sequential and concurrent child starts.

mod check;
mod runtime;
mod spec;
mod treefile;

pub use check::{check_trace, Violation};
pub use runtime::{
    expected_tree, start_supervisor, Action, CrashOutcome, CrashReport, Handling, NodeKind,
    NodeRef, NodeState, QuiescenceError, Runtime, StartFailure, StartupReport, TreeNode,
};
pub use spec::*;
pub use treefile::{format_duration, parse_duration, parse_tree, TreeFile, TreeParseError};
