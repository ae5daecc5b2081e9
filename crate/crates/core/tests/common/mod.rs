//! Reference models used as oracles by the integration and acceptance tests.
//! Both are written independently of the library's runtime and DAG code.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::time::Duration;

use forkstart::depgraph::DependencyGraph;
use forkstart::suptree::{ChildSpec, StartMode};
use forkstart::trace::TraceEvent;

/// An event reduced to what must match across runs: kind, node and the
/// condition lists. Timestamps and wait durations are dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    pub kind: String,
    pub node: String,
    pub detail: Vec<(String, String)>,
}

impl Step {
    fn new(kind: &str, node: &str, detail: Vec<(&str, String)>) -> Self {
        Step {
            kind: kind.to_string(),
            node: node.to_string(),
            detail: detail
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

const KEPT: [&str; 5] = ["module", "args", "waited_on", "conds", "release"];

pub fn steps(trace: &[TraceEvent]) -> Vec<Step> {
    trace
        .iter()
        .map(|e| Step {
            kind: e.kind.as_str().to_string(),
            node: e.node.to_string(),
            detail: e
                .detail
                .iter()
                .filter(|(k, _)| KEPT.contains(&k.as_str()))
                .cloned()
                .collect(),
        })
        .collect()
}

/// Single-threaded interpreter of a fully sequential startup. Returns `None`
/// if some node would wait for a condition that is still false, since a
/// sequential run can then never proceed.
pub fn reference_run(
    release: &str,
    roots: &[ChildSpec],
    graph: &DependencyGraph,
) -> Option<Vec<Step>> {
    let mut out = vec![Step::new(
        "server_start",
        "/@condition_server",
        vec![("release", release.to_string())],
    )];
    let mut truth: BTreeSet<String> = BTreeSet::new();
    for r in roots {
        start(r, &format!("/{}", r.id), graph, &mut truth, &mut out)?;
    }
    Some(out)
}

fn start(
    n: &ChildSpec,
    path: &str,
    g: &DependencyGraph,
    truth: &mut BTreeSet<String>,
    out: &mut Vec<Step>,
) -> Option<()> {
    out.push(Step::new(
        "start_request",
        path,
        vec![
            ("module", n.module.clone()),
            ("args", format!("[{}]", n.args.as_str())),
        ],
    ));
    out.push(Step::new("wait_begin", path, vec![]));
    let unmet: Vec<String> = g
        .expand_preconditions(&n.key())
        .into_iter()
        .map(|c| c.as_str().to_string())
        .filter(|c| !truth.contains(c))
        .collect();
    if !unmet.is_empty() {
        return None;
    }
    out.push(Step::new(
        "wait_end",
        path,
        vec![("waited_on", String::new())],
    ));
    out.push(Step::new("init_begin", path, vec![]));
    for c in n.children() {
        start(c, &format!("{path}/{}", c.id), g, truth, out)?;
    }
    out.push(Step::new("init_end", path, vec![]));
    let mut flipped: Vec<String> = g
        .conditions_set_by(&n.module, &n.args)
        .into_iter()
        .map(|c| c.as_str().to_string())
        .filter(|c| truth.insert(c.clone()))
        .collect();
    flipped.sort();
    out.push(Step::new(
        "condition_set",
        path,
        vec![("conds", flipped.join(","))],
    ));
    out.push(Step::new("ack", path, vec![]));
    Some(())
}

/// Startup time from the recursive definitions, evaluated with memoisation:
///
/// - S(first root) = 0, S(next root) = F(previous root)
/// - S(first child of p) = W(p) + cost(p); S(next child) = F(prev) if prev is
///   sequential, else S(prev)
/// - W(n) = max(S(n), earliest F among the setters of each precondition)
/// - F(leaf) = W + cost; F(supervisor) = F(last) or S(last) as above
///
/// Returns `None` for cyclic or unsatisfiable systems.
pub fn oracle_critical_path(roots: &[ChildSpec], graph: &DependencyGraph) -> Option<Duration> {
    let roots = roots.to_vec();
    let graph = graph.clone();
    std::thread::Builder::new()
        .stack_size(256 << 20)
        .spawn(move || Oracle::new(&roots, &graph).total())
        .unwrap()
        .join()
        .unwrap()
}

struct Info<'a> {
    spec: &'a ChildSpec,
    parent: Option<usize>,
    prev: Option<usize>,
    children: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Q {
    S(usize),
    W(usize),
    F(usize),
}

struct Oracle<'a> {
    nodes: Vec<Info<'a>>,
    root_ids: Vec<usize>,
    graph: &'a DependencyGraph,
    setters: HashMap<String, Vec<usize>>,
    memo: HashMap<Q, Option<Duration>>,
    active: BTreeSet<(u8, usize)>,
}

impl<'a> Oracle<'a> {
    fn new(roots: &'a [ChildSpec], graph: &'a DependencyGraph) -> Self {
        let mut o = Oracle {
            nodes: Vec::new(),
            root_ids: Vec::new(),
            graph,
            setters: HashMap::new(),
            memo: HashMap::new(),
            active: BTreeSet::new(),
        };
        for r in roots {
            let id = o.add(r, None, None);
            o.root_ids.push(id);
        }
        for i in 0..o.nodes.len() {
            let s = o.nodes[i].spec;
            for c in graph.conditions_set_by(&s.module, &s.args) {
                o.setters.entry(c.as_str().to_string()).or_default().push(i);
            }
        }
        o
    }

    fn add(&mut self, spec: &'a ChildSpec, parent: Option<usize>, prev: Option<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Info {
            spec,
            parent,
            prev,
            children: Vec::new(),
        });
        let mut last = None;
        for c in spec.children() {
            let cid = self.add(c, Some(id), last);
            self.nodes[id].children.push(cid);
            last = Some(cid);
        }
        id
    }

    fn cost(&self, n: usize) -> Duration {
        self.nodes[n]
            .spec
            .behaviour
            .cost
            .duration()
            .expect("fixed cost")
    }

    fn concurrent(&self, n: usize) -> bool {
        self.nodes[n].parent.is_some() && self.nodes[n].spec.start_mode == StartMode::Concurrent
    }

    fn total(&mut self) -> Option<Duration> {
        let mut best = Duration::ZERO;
        for n in 0..self.nodes.len() {
            best = best.max(self.eval(Q::F(n))?);
        }
        Some(best)
    }

    fn eval(&mut self, q: Q) -> Option<Duration> {
        if let Some(v) = self.memo.get(&q) {
            return *v;
        }
        let key = match q {
            Q::S(n) => (0, n),
            Q::W(n) => (1, n),
            Q::F(n) => (2, n),
        };
        if !self.active.insert(key) {
            return None; // cycle
        }
        let v = self.compute(q);
        self.active.remove(&key);
        self.memo.insert(q, v);
        v
    }

    fn after(&mut self, n: usize) -> Option<Duration> {
        if self.concurrent(n) {
            self.eval(Q::S(n))
        } else {
            self.eval(Q::F(n))
        }
    }

    fn compute(&mut self, q: Q) -> Option<Duration> {
        match q {
            Q::S(n) => match (self.nodes[n].parent, self.nodes[n].prev) {
                (_, Some(prev)) => self.after(prev),
                (Some(p), None) => Some(self.eval(Q::W(p))? + self.cost(p)),
                (None, None) => {
                    let i = self.root_ids.iter().position(|&r| r == n).unwrap();
                    if i == 0 {
                        Some(Duration::ZERO)
                    } else {
                        self.eval(Q::F(self.root_ids[i - 1]))
                    }
                }
            },
            Q::W(n) => {
                let mut t = self.eval(Q::S(n))?;
                let spec = self.nodes[n].spec;
                for c in self.graph.expand_preconditions(&spec.key()) {
                    let setters = self.setters.get(c.as_str()).cloned().unwrap_or_default();
                    let mut earliest: Option<Duration> = None;
                    for s in setters {
                        if let Some(f) = self.eval(Q::F(s)) {
                            earliest = Some(earliest.map_or(f, |e| e.min(f)));
                        }
                    }
                    t = t.max(earliest?);
                }
                Some(t)
            }
            Q::F(n) => match self.nodes[n].children.last().copied() {
                None => Some(self.eval(Q::W(n))? + self.cost(n)),
                Some(last) => self.after(last),
            },
        }
    }
}
