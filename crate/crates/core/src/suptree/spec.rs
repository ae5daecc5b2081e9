use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use crate::depgraph::{Args, ModuleKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Restart {
    Permanent,
    Temporary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shutdown {
    Brutal,
    Timeout(Duration),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StartMode {
    #[default]
    Sequential,
    Concurrent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Strategy {
    #[default]
    OneForOne,
}

/// Restart intensity: at most `max_restarts` restarts within `max_seconds`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SupervisorFlags {
    pub strategy: Strategy,
    pub max_restarts: u32,
    pub max_seconds: Duration,
}

impl SupervisorFlags {
    pub fn new(max_restarts: u32, max_seconds: Duration) -> Self {
        SupervisorFlags {
            strategy: Strategy::OneForOne,
            max_restarts,
            max_seconds,
        }
    }

    /// Flags of the wrapper inserted for a concurrent child: no restarts.
    pub fn wrapper() -> Self {
        Self::new(0, Duration::from_secs(1))
    }
}

impl Default for SupervisorFlags {
    fn default() -> Self {
        Self::new(3, Duration::from_secs(5))
    }
}

/// User init callable. Receives the start arguments and the zero-based
/// attempt number of this node.
pub type InitFn = Arc<dyn Fn(&Args, u32) -> Result<(), String> + Send + Sync>;

#[derive(Clone, Default)]
pub enum InitCost {
    #[default]
    None,
    /// Non-CPU-bound delay.
    Sleep(Duration),
    /// CPU spin for the given wall time.
    Busy(Duration),
    Call(InitFn),
}

impl InitCost {
    pub fn is_zero(&self) -> bool {
        match self {
            InitCost::None => true,
            InitCost::Sleep(d) | InitCost::Busy(d) => d.is_zero(),
            InitCost::Call(_) => false,
        }
    }

    /// Simulated duration, when known statically.
    pub fn duration(&self) -> Option<Duration> {
        match self {
            InitCost::None => Some(Duration::ZERO),
            InitCost::Sleep(d) | InitCost::Busy(d) => Some(*d),
            InitCost::Call(_) => None,
        }
    }
}

impl fmt::Debug for InitCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitCost::None => write!(f, "None"),
            InitCost::Sleep(d) => write!(f, "Sleep({d:?})"),
            InitCost::Busy(d) => write!(f, "Busy({d:?})"),
            InitCost::Call(_) => write!(f, "Call(..)"),
        }
    }
}

impl PartialEq for InitCost {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (InitCost::None, InitCost::None) => true,
            (InitCost::Sleep(a), InitCost::Sleep(b)) | (InitCost::Busy(a), InitCost::Busy(b)) => {
                a == b
            }
            (InitCost::Call(a), InitCost::Call(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

/// What the node's init does. The first `fail_attempts` start attempts fail
/// after paying the cost.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkerBehaviour {
    pub cost: InitCost,
    pub fail_attempts: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ChildKind {
    Worker,
    Supervisor {
        flags: SupervisorFlags,
        children: Vec<ChildSpec>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChildSpec {
    pub id: String,
    pub module: String,
    pub args: Args,
    pub restart: Restart,
    pub shutdown: Shutdown,
    pub kind: ChildKind,
    pub modules: Vec<String>,
    pub start_mode: StartMode,
    pub behaviour: WorkerBehaviour,
}

impl ChildSpec {
    pub fn worker(id: &str, module: &str, args: &str) -> Self {
        ChildSpec {
            id: id.to_string(),
            module: module.to_string(),
            args: Args::new(args),
            restart: Restart::Permanent,
            shutdown: Shutdown::Timeout(Duration::from_millis(5000)),
            kind: ChildKind::Worker,
            modules: vec![module.to_string()],
            start_mode: StartMode::Sequential,
            behaviour: WorkerBehaviour::default(),
        }
    }

    pub fn supervisor(
        id: &str,
        module: &str,
        args: &str,
        flags: SupervisorFlags,
        children: Vec<ChildSpec>,
    ) -> Self {
        ChildSpec {
            kind: ChildKind::Supervisor { flags, children },
            shutdown: Shutdown::Brutal,
            ..Self::worker(id, module, args)
        }
    }

    pub fn concurrent(mut self) -> Self {
        self.start_mode = StartMode::Concurrent;
        self
    }

    pub fn temporary(mut self) -> Self {
        self.restart = Restart::Temporary;
        self
    }

    pub fn cost(mut self, cost: InitCost) -> Self {
        self.behaviour.cost = cost;
        self
    }

    pub fn sleep_ms(self, ms: u64) -> Self {
        self.cost(InitCost::Sleep(Duration::from_millis(ms)))
    }

    pub fn failing(mut self, attempts: u32) -> Self {
        self.behaviour.fail_attempts = attempts;
        self
    }

    pub fn key(&self) -> ModuleKey {
        ModuleKey {
            module: self.module.clone(),
            args: Some(self.args.clone()),
        }
    }

    pub fn is_supervisor(&self) -> bool {
        matches!(self.kind, ChildKind::Supervisor { .. })
    }

    pub fn children(&self) -> &[ChildSpec] {
        match &self.kind {
            ChildKind::Supervisor { children, .. } => children,
            ChildKind::Worker => &[],
        }
    }

    pub fn children_mut(&mut self) -> Option<&mut Vec<ChildSpec>> {
        match &mut self.kind {
            ChildKind::Supervisor { children, .. } => Some(children),
            ChildKind::Worker => None,
        }
    }

    /// Number of nodes in this subtree, including itself.
    pub fn node_count(&self) -> usize {
        1 + self
            .children()
            .iter()
            .map(ChildSpec::node_count)
            .sum::<usize>()
    }

    /// Number of concurrent-tagged nodes strictly below this one.
    pub fn concurrent_count(&self) -> usize {
        self.children()
            .iter()
            .map(|c| usize::from(c.start_mode == StartMode::Concurrent) + c.concurrent_count())
            .sum()
    }

    /// Pre-order walk with depth (this node is depth 0).
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a ChildSpec, usize)) {
        fn go<'a>(n: &'a ChildSpec, d: usize, f: &mut impl FnMut(&'a ChildSpec, usize)) {
            f(n, d);
            for c in n.children() {
                go(c, d + 1, f);
            }
        }
        go(self, 0, f)
    }

    /// Copy of the tree with every start mode forced to sequential.
    pub fn all_sequential(&self) -> ChildSpec {
        let mut out = self.clone();
        fn go(n: &mut ChildSpec) {
            n.start_mode = StartMode::Sequential;
            if let Some(ch) = n.children_mut() {
                ch.iter_mut().for_each(go);
            }
        }
        go(&mut out);
        out
    }

    /// Sibling ids must be unique and identifiers well formed.
    pub fn validate(&self) -> Result<(), String> {
        let mut err = None;
        self.walk(&mut |n, _| {
            if err.is_some() {
                return;
            }
            if !crate::depgraph::is_identifier(&n.id) {
                err = Some(format!("invalid child id `{}`", n.id));
            } else if !crate::depgraph::is_identifier(&n.module) {
                err = Some(format!("invalid module `{}` in `{}`", n.module, n.id));
            } else if !crate::depgraph::is_args_token(n.args.as_str()) {
                err = Some(format!("invalid args `{}` in `{}`", n.args.as_str(), n.id));
            } else if let ChildKind::Supervisor { flags, children } = &n.kind {
                if flags.max_seconds.is_zero() {
                    err = Some(format!("supervisor `{}` has max_seconds = 0", n.id));
                }
                let mut ids = std::collections::HashSet::new();
                for c in children {
                    if !ids.insert(c.id.as_str()) {
                        err = Some(format!("duplicate child id `{}` under `{}`", c.id, n.id));
                    }
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}
