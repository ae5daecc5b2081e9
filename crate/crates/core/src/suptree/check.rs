//! Offline verification of a startup trace against the dependency graph and
//! the declared trees.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use super::spec::{ChildSpec, StartMode};
use crate::depgraph::{ConditionName, DependencyGraph};
use crate::trace::{EventKind, NodePath, TraceEvent};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub rule: &'static str,
    pub message: String,
    /// Sequence numbers of the offending events.
    pub events: Vec<u64>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.rule, self.message)?;
        if !self.events.is_empty() {
            let seqs: Vec<String> = self.events.iter().map(u64::to_string).collect();
            write!(f, " (events {})", seqs.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Phase {
    Idle,
    Requested,
    Waiting,
    Waited,
    Init,
    InitDone,
    Set,
    Acked,
    Down,
}

struct NodeInfo<'a> {
    /// `None` for wrappers.
    spec: Option<&'a ChildSpec>,
    phase: Phase,
    last_ts: Option<(std::time::Duration, u64)>,
    first_start: Option<u64>,
    first_ack: Option<u64>,
    first_init_end: Option<u64>,
    acked: bool,
    attached: bool,
}

impl<'a> NodeInfo<'a> {
    fn new(spec: Option<&'a ChildSpec>) -> Self {
        NodeInfo {
            spec,
            phase: Phase::Idle,
            last_ts: None,
            first_start: None,
            first_ack: None,
            first_init_end: None,
            acked: false,
            attached: false,
        }
    }
}

/// Sibling-order obligation: `first` must ack before `second` is requested.
struct Pair {
    first: NodePath,
    second: NodePath,
}

struct Index<'a> {
    nodes: BTreeMap<NodePath, NodeInfo<'a>>,
    pairs: Vec<Pair>,
    /// (wrapper, real child) for concurrent children with nonzero cost.
    concurrent: Vec<(NodePath, NodePath)>,
}

fn index(roots: &[ChildSpec]) -> Index<'_> {
    let mut ix = Index {
        nodes: BTreeMap::new(),
        pairs: Vec::new(),
        concurrent: Vec::new(),
    };
    fn add<'a>(ix: &mut Index<'a>, path: NodePath, spec: &'a ChildSpec) {
        ix.nodes.insert(path.clone(), NodeInfo::new(Some(spec)));
        let mut prev: Option<NodePath> = None;
        for c in spec.children() {
            let slot = match c.start_mode {
                StartMode::Sequential => {
                    let p = path.child(&c.id);
                    add(ix, p.clone(), c);
                    p
                }
                StartMode::Concurrent => {
                    let w = path.wrapper_for(&c.id);
                    let real = w.child(&c.id);
                    ix.nodes.insert(w.clone(), NodeInfo::new(None));
                    if !c.behaviour.cost.is_zero() {
                        ix.concurrent.push((w.clone(), real.clone()));
                    }
                    add(ix, real, c);
                    w
                }
            };
            if let Some(p) = prev.replace(slot.clone()) {
                ix.pairs.push(Pair {
                    first: p,
                    second: slot,
                });
            }
        }
    }
    for r in roots {
        add(&mut ix, NodePath::root(&r.id), r);
    }
    ix
}

/// Checks every trace invariant; an empty result means the trace is valid.
pub fn check_trace(
    trace: &[TraceEvent],
    graph: &DependencyGraph,
    roots: &[ChildSpec],
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut v = |rule: &'static str, message: String, events: Vec<u64>| {
        out.push(Violation {
            rule,
            message,
            events,
        })
    };

    let mut ix = index(roots);
    let server = NodePath::condition_server();
    let mut set_by: HashMap<ConditionName, u64> = HashMap::new();
    let mut server_start: Option<u64> = None;
    let mut first_request: Option<u64> = None;
    let mut deadlocked = false;
    let mut prev_seq: Option<u64> = None;

    for e in trace {
        if let Some(p) = prev_seq {
            if e.seq <= p {
                v(
                    "timestamp-order",
                    format!("sequence number {} does not increase", e.seq),
                    vec![p, e.seq],
                );
            }
        }
        prev_seq = Some(e.seq);

        if e.node == server {
            match e.kind {
                EventKind::ServerStart => {
                    if let Some(s) = server_start {
                        v(
                            "server-order",
                            "condition server started twice".into(),
                            vec![s, e.seq],
                        );
                    }
                    if let Some(r) = first_request {
                        v(
                            "server-order",
                            "an application started before the condition server".into(),
                            vec![r, e.seq],
                        );
                    }
                    server_start.get_or_insert(e.seq);
                }
                EventKind::Deadlock => deadlocked = true,
                k => v(
                    "unknown-node",
                    format!("`{k}` event on the condition server"),
                    vec![e.seq],
                ),
            }
            continue;
        }

        let Some(info) = ix.nodes.get_mut(&e.node) else {
            v(
                "unknown-node",
                format!("{} is not part of the declared trees", e.node),
                vec![e.seq],
            );
            continue;
        };
        if let Some((ts, s)) = info.last_ts {
            if e.ts < ts {
                v(
                    "timestamp-order",
                    format!("time goes backwards on {}", e.node),
                    vec![s, e.seq],
                );
            }
        }
        info.last_ts = Some((e.ts, e.seq));

        let is_wrapper = info.spec.is_none();
        let phase = info.phase;
        let mut expect = |want: &[Phase], rule: &'static str| {
            if !want.contains(&phase) {
                v(
                    rule,
                    format!("`{}` on {} in state {phase:?}", e.kind, e.node),
                    vec![e.seq],
                );
            }
        };
        match e.kind {
            EventKind::StartRequest => {
                expect(&[Phase::Idle, Phase::Down], "unexpected-start-request");
                first_request.get_or_insert(e.seq);
                info.first_start.get_or_insert(e.seq);
                info.phase = Phase::Requested;
                info.attached = false;
            }
            EventKind::WaitBegin => {
                expect(&[Phase::Requested], "missing-start-request");
                info.phase = Phase::Waiting;
            }
            EventKind::WaitEnd => {
                expect(&[Phase::Waiting], "wait-end-before-begin");
                info.phase = Phase::Waited;
            }
            EventKind::InitBegin => {
                expect(&[Phase::Waited], "wait-before-init");
                info.phase = Phase::Init;
                if let Some(spec) = info.spec {
                    let missing: Vec<String> = graph
                        .expand_preconditions(&spec.key())
                        .into_iter()
                        .filter(|c| !set_by.contains_key(c))
                        .map(|c| c.as_str().to_string())
                        .collect();
                    if !missing.is_empty() {
                        v(
                            "precondition-safety",
                            format!(
                                "{} began init before {} were set",
                                e.node,
                                missing.join(",")
                            ),
                            vec![e.seq],
                        );
                    }
                }
            }
            EventKind::InitEnd => {
                expect(&[Phase::Init], "init-end-before-begin");
                info.phase = Phase::InitDone;
                info.first_init_end.get_or_insert(e.seq);
            }
            EventKind::ConditionSet => {
                expect(&[Phase::InitDone], "set-after-init");
                info.phase = Phase::Set;
                if let Some(spec) = info.spec {
                    let allowed = graph.conditions_set_by(&spec.module, &spec.args);
                    for c in e.list("conds") {
                        let name = ConditionName::from(c);
                        if !allowed.contains(&name) {
                            v(
                                "foreign-condition",
                                format!("{} set `{c}`, which its key does not declare", e.node),
                                vec![e.seq],
                            );
                        }
                        if let Some(&first) = set_by.get(&name) {
                            v(
                                "duplicate-flip",
                                format!("`{c}` flipped twice"),
                                vec![first, e.seq],
                            );
                        } else {
                            set_by.insert(name, e.seq);
                        }
                    }
                }
            }
            EventKind::Ack => {
                if is_wrapper {
                    expect(&[Phase::Requested], "ack-before-set");
                } else {
                    expect(&[Phase::Set], "ack-before-set");
                }
                info.phase = Phase::Acked;
                info.acked = true;
                info.first_ack.get_or_insert(e.seq);
            }
            EventKind::Attach => {
                if !is_wrapper {
                    v(
                        "unknown-node",
                        format!("attach on non-wrapper {}", e.node),
                        vec![e.seq],
                    );
                    continue;
                }
                expect(&[Phase::Acked], "attach-before-ack");
                info.attached = true;
                let child = e.get("child").map(|id| e.node.child(id));
                let child_acked = child
                    .as_ref()
                    .and_then(|c| ix.nodes.get(c))
                    .is_some_and(|c| c.phase == Phase::Acked);
                if !child_acked {
                    v(
                        "attach-before-ack",
                        format!("{} attached a child that has not acked", e.node),
                        vec![e.seq],
                    );
                }
            }
            EventKind::Crash | EventKind::Escalate | EventKind::Terminate => {
                info.phase = Phase::Down
            }
            EventKind::Restart => {}
            EventKind::ServerStart | EventKind::Deadlock => {
                v(
                    "unknown-node",
                    format!("`{}` must be emitted by the condition server", e.kind),
                    vec![e.seq],
                );
            }
        }
    }

    for p in &ix.pairs {
        let ack = ix.nodes[&p.first].first_ack;
        let req = ix.nodes[&p.second].first_start;
        match (ack, req) {
            (Some(a), Some(r)) if a > r => v(
                "sequential-order",
                format!("{} was requested before {} acked", p.second, p.first),
                vec![a, r],
            ),
            (None, Some(r)) => v(
                "sequential-order",
                format!("{} was requested but {} never acked", p.second, p.first),
                vec![r],
            ),
            _ => {}
        }
    }

    for (w, c) in &ix.concurrent {
        if let (Some(a), Some(ie)) = (ix.nodes[w].first_ack, ix.nodes[c].first_init_end) {
            if a > ie {
                v(
                    "concurrent-blocking",
                    format!("{w} acked only after {c} finished init"),
                    vec![a, ie],
                );
            }
        }
    }

    if !deadlocked {
        let missing: BTreeSet<String> = ix
            .nodes
            .iter()
            .filter(|(_, n)| {
                !n.acked || (n.spec.is_none() && !n.attached && n.phase == Phase::Acked)
            })
            .map(|(p, _)| p.to_string())
            .collect();
        if !missing.is_empty() {
            let shown: Vec<String> = missing.iter().take(5).cloned().collect();
            v(
                "missing-events",
                format!(
                    "{} node(s) never completed startup: {}{}",
                    missing.len(),
                    shown.join(" "),
                    if missing.len() > 5 { " ..." } else { "" }
                ),
                Vec::new(),
            );
        }
    }
    out
}
