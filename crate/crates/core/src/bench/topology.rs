use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::suptree::{ChildSpec, InitCost, StartMode, SupervisorFlags};
use crate::trace::NodePath;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TopologyKind {
    Deep,
    Wide,
    Random,
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopologyKind::Deep => "deep",
            TopologyKind::Wide => "wide",
            TopologyKind::Random => "random",
        })
    }
}

impl FromStr for TopologyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "deep" => Ok(TopologyKind::Deep),
            "wide" => Ok(TopologyKind::Wide),
            "random" => Ok(TopologyKind::Random),
            _ => Err(format!("unknown topology `{s}` (deep, wide, random)")),
        }
    }
}

/// Regular trees use `branching` children per internal node. The random
/// tree draws each node's child count uniformly from `1..=branching`; nodes
/// at `depth` are leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    pub branching: usize,
    pub depth: usize,
    pub seed: u64,
}

impl TopologySpec {
    pub fn deep() -> Self {
        TopologySpec {
            kind: TopologyKind::Deep,
            branching: 3,
            depth: 6,
            seed: 0,
        }
    }

    pub fn wide() -> Self {
        TopologySpec {
            kind: TopologyKind::Wide,
            branching: 10,
            depth: 2,
            seed: 0,
        }
    }

    pub fn random(seed: u64) -> Self {
        TopologySpec {
            kind: TopologyKind::Random,
            branching: 5,
            depth: 5,
            seed,
        }
    }

    pub fn default_for(kind: TopologyKind) -> Self {
        match kind {
            TopologyKind::Deep => Self::deep(),
            TopologyKind::Wide => Self::wide(),
            TopologyKind::Random => Self::random(0),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("branching must be at least 1")]
    ZeroBranching,
    #[error("tree would have more than {limit} nodes")]
    TooLarge { limit: usize },
}

const NODE_LIMIT: usize = 200_000;

/// Builds the tree. Node ids encode their position (`n`, `n_0`, `n_0_2`,
/// ...); internal nodes are supervisors of module `sup`, leaves workers of
/// module `srv`, and every node's args are its id.
pub fn gen_topology(spec: &TopologySpec) -> Result<ChildSpec, TopologyError> {
    if spec.branching == 0 {
        return Err(TopologyError::ZeroBranching);
    }
    if spec.kind != TopologyKind::Random {
        let mut total: usize = 1;
        let mut level: usize = 1;
        for _ in 0..spec.depth {
            level = level.saturating_mul(spec.branching);
            total = total.saturating_add(level);
        }
        if total > NODE_LIMIT {
            return Err(TopologyError::TooLarge { limit: NODE_LIMIT });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut count = 0;
    let tree = build(spec, "n".to_string(), 0, &mut rng, &mut count);
    if count > NODE_LIMIT {
        return Err(TopologyError::TooLarge { limit: NODE_LIMIT });
    }
    Ok(tree)
}

fn build(
    spec: &TopologySpec,
    id: String,
    depth: usize,
    rng: &mut ChaCha8Rng,
    count: &mut usize,
) -> ChildSpec {
    *count += 1;
    let n = if depth >= spec.depth || *count > NODE_LIMIT {
        0
    } else {
        match spec.kind {
            TopologyKind::Random => rng.gen_range(1..=spec.branching),
            _ => spec.branching,
        }
    };
    if n == 0 {
        return ChildSpec::worker(&id, "srv", &id);
    }
    let children = (0..n)
        .map(|i| build(spec, format!("{id}_{i}"), depth + 1, rng, count))
        .collect();
    ChildSpec::supervisor(&id, "sup", &id, SupervisorFlags::default(), children)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DelayKind {
    /// Non-CPU-bound wait.
    Sleep,
    /// CPU spin.
    Busy,
}

impl fmt::Display for DelayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DelayKind::Sleep => "sleep",
            DelayKind::Busy => "busy",
        })
    }
}

impl FromStr for DelayKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sleep" => Ok(DelayKind::Sleep),
            "busy" => Ok(DelayKind::Busy),
            _ => Err(format!("unknown delay kind `{s}` (sleep, busy)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DelayDist {
    Constant(Duration),
    /// Whole milliseconds drawn uniformly from `lo..=hi`.
    UniformMs {
        lo: u64,
        hi: u64,
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DelayModel {
    pub kind: DelayKind,
    pub dist: DelayDist,
}

impl DelayModel {
    pub fn sleep_ms(ms: u64) -> Self {
        DelayModel {
            kind: DelayKind::Sleep,
            dist: DelayDist::Constant(Duration::from_millis(ms)),
        }
    }

    pub fn busy_ms(ms: u64) -> Self {
        DelayModel {
            kind: DelayKind::Busy,
            dist: DelayDist::Constant(Duration::from_millis(ms)),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.dist {
            DelayDist::Constant(d) if d.is_zero() => Err("delay must be positive".into()),
            DelayDist::UniformMs { lo, hi, .. } if lo == 0 || lo > hi => Err(format!(
                "delay range {lo}..={hi} ms must be positive and non-empty"
            )),
            _ => Ok(()),
        }
    }

    fn cost(&self, d: Duration) -> InitCost {
        match self.kind {
            DelayKind::Sleep => InitCost::Sleep(d),
            DelayKind::Busy => InitCost::Busy(d),
        }
    }
}

/// Gives every node in the tree, supervisors included, an init cost drawn
/// from the model (pre-order, so seeded draws are reproducible).
pub fn apply_delays(tree: &mut ChildSpec, model: &DelayModel) {
    let mut rng = match model.dist {
        DelayDist::UniformMs { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        DelayDist::Constant(_) => None,
    };
    fn go(n: &mut ChildSpec, model: &DelayModel, rng: &mut Option<ChaCha8Rng>) {
        let d = match (model.dist, rng.as_mut()) {
            (DelayDist::UniformMs { lo, hi, .. }, Some(r)) => {
                Duration::from_millis(r.gen_range(lo..=hi))
            }
            (DelayDist::Constant(d), _) => d,
            (DelayDist::UniformMs { lo, .. }, None) => Duration::from_millis(lo),
        };
        n.behaviour.cost = model.cost(d);
        if let Some(ch) = n.children_mut() {
            for c in ch {
                go(c, model, rng);
            }
        }
    }
    go(tree, model, &mut rng);
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ForkPlacement {
    None,
    /// Every node at this depth (the root is depth 0).
    AllAtDepth(usize),
    /// The first `n` non-root nodes in breadth-first order.
    FirstNBreadthFirst(usize),
    /// Nodes by path from the root, e.g. `/n/n_1`.
    Explicit(Vec<NodePath>),
}

impl fmt::Display for ForkPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForkPlacement::None => write!(f, "none"),
            ForkPlacement::AllAtDepth(d) => write!(f, "depth:{d}"),
            ForkPlacement::FirstNBreadthFirst(n) => write!(f, "first:{n}"),
            ForkPlacement::Explicit(p) => write!(f, "explicit:{}", p.len()),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlacementError {
    #[error("the root cannot be a fork point")]
    Root,
    #[error("tree has no nodes at depth {0}")]
    DepthOutOfRange(usize),
    #[error("tree has only {available} non-root nodes, {requested} requested")]
    CountOutOfRange { requested: usize, available: usize },
    #[error("no node at {0}")]
    UnknownPath(NodePath),
}

/// Tags exactly the selected nodes concurrent and all others sequential.
/// Returns the number of tagged nodes.
pub fn place_forks(
    tree: &mut ChildSpec,
    placement: &ForkPlacement,
) -> Result<usize, PlacementError> {
    // (path, depth) in BFS order, excluding nothing
    let order = bfs_paths(tree);
    let selected: Vec<NodePath> = match placement {
        ForkPlacement::None => Vec::new(),
        ForkPlacement::AllAtDepth(0) => return Err(PlacementError::Root),
        ForkPlacement::AllAtDepth(d) => {
            let v: Vec<NodePath> = order
                .iter()
                .filter(|(_, depth)| depth == d)
                .map(|(p, _)| p.clone())
                .collect();
            if v.is_empty() {
                return Err(PlacementError::DepthOutOfRange(*d));
            }
            v
        }
        ForkPlacement::FirstNBreadthFirst(n) => {
            let available = order.len() - 1;
            if *n > available {
                return Err(PlacementError::CountOutOfRange {
                    requested: *n,
                    available,
                });
            }
            order
                .iter()
                .skip(1)
                .take(*n)
                .map(|(p, _)| p.clone())
                .collect()
        }
        ForkPlacement::Explicit(paths) => {
            for p in paths {
                if p.depth() == 0 && order[0].0 == *p {
                    return Err(PlacementError::Root);
                }
                if !order.iter().any(|(q, _)| q == p) {
                    return Err(PlacementError::UnknownPath(p.clone()));
                }
            }
            paths.clone()
        }
    };
    let root_path = NodePath::root(&tree.id);
    fn go(n: &mut ChildSpec, path: &NodePath, selected: &[NodePath], count: &mut usize) {
        n.start_mode = if selected.contains(path) {
            *count += 1;
            StartMode::Concurrent
        } else {
            StartMode::Sequential
        };
        if let Some(ch) = n.children_mut() {
            for c in ch {
                let p = path.child(&c.id);
                go(c, &p, selected, count);
            }
        }
    }
    let mut count = 0;
    go(tree, &root_path, &selected, &mut count);
    // the root's own mode is irrelevant to startup
    tree.start_mode = StartMode::Sequential;
    Ok(count)
}

/// The first `n` nodes at depth `d` in breadth-first order.
pub fn forks_at_depth(tree: &ChildSpec, d: usize, n: usize) -> ForkPlacement {
    ForkPlacement::Explicit(
        bfs_paths(tree)
            .into_iter()
            .filter(|(_, depth)| *depth == d)
            .take(n)
            .map(|(p, _)| p)
            .collect(),
    )
}

fn bfs_paths(tree: &ChildSpec) -> Vec<(NodePath, usize)> {
    let mut out = Vec::new();
    let mut queue = VecDeque::from([(tree, NodePath::root(&tree.id), 0usize)]);
    while let Some((n, p, d)) = queue.pop_front() {
        for c in n.children() {
            queue.push_back((c, p.child(&c.id), d + 1));
        }
        out.push((p, d));
    }
    out
}
