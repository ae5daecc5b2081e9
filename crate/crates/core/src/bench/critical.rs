//! Predicted startup duration under sleep delays and unlimited parallelism.
//!
//! Three events per node: start request `S`, wait end `W`, finish `F`
//! (condition set and ack). One event per condition, reached by the first of
//! its setters to finish. Edges carry the time between their endpoints:
//!
//! - `S(n) -> W(n)` and `C(c) -> W(n)` for each precondition `c`, delay 0
//! - worker or childless supervisor: `W(n) -> F(n)`, its cost
//! - supervisor: `W(p) -> S(first child)`, its cost; `F(c_i) -> S(c_i+1)`
//!   for a sequential `c_i`, `S(c_i) -> S(c_i+1)` for a concurrent one; `F(p)`
//!   follows the last child the same way
//! - `F(root_i) -> S(root_i+1)`; `F(n) -> C(c)` for every condition `n` sets
//!
//! Every event happens at the latest of its predecessors, except conditions,
//! which happen at the earliest.

use std::collections::{HashMap, VecDeque};
use std::time::Duration;

use thiserror::Error;

use crate::depgraph::{ConditionName, DependencyGraph};
use crate::suptree::{ChildSpec, StartMode};
use crate::trace::NodePath;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CriticalPathError {
    #[error("precedence graph has a cycle through {}", .0.join(", "))]
    Cycle(Vec<String>),
    #[error("{node} waits for `{condition}`, which no node sets")]
    Unsatisfiable { node: NodePath, condition: String },
    #[error("{0} has an init cost with no fixed duration")]
    UnknownCost(NodePath),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Join {
    /// Latest predecessor.
    All,
    /// Earliest predecessor.
    Any,
}

/// The combined precedence graph of a set of roots and a dependency graph.
#[derive(Clone, Debug)]
pub struct PrecedenceDag {
    labels: Vec<String>,
    join: Vec<Join>,
    preds: Vec<Vec<(usize, Duration)>>,
    finishes: Vec<usize>,
}

impl PrecedenceDag {
    pub fn build(roots: &[ChildSpec], graph: &DependencyGraph) -> Result<Self, CriticalPathError> {
        let mut dag = PrecedenceDag {
            labels: Vec::new(),
            join: Vec::new(),
            preds: Vec::new(),
            finishes: Vec::new(),
        };
        let mut conds: HashMap<ConditionName, usize> = HashMap::new();
        let mut waits: Vec<(usize, NodePath, ConditionName)> = Vec::new();
        let mut sets: Vec<(usize, ConditionName)> = Vec::new();

        let mut prev_root_f: Option<usize> = None;
        for r in roots {
            let s = dag.vertex(format!("S{}", NodePath::root(&r.id)), Join::All);
            if let Some(f) = prev_root_f {
                dag.edge(f, s, Duration::ZERO);
            }
            let f = dag.node(r, NodePath::root(&r.id), s, graph, &mut waits, &mut sets)?;
            prev_root_f = Some(f);
        }
        let mut first_waiter: HashMap<ConditionName, NodePath> = HashMap::new();
        for (w, path, c) in waits {
            let cv = *conds
                .entry(c.clone())
                .or_insert_with(|| dag.vertex(format!("C{}", c.as_str()), Join::Any));
            first_waiter.entry(c).or_insert(path);
            dag.edge(cv, w, Duration::ZERO);
        }
        for (f, c) in sets {
            if let Some(&cv) = conds.get(&c) {
                dag.edge(f, cv, Duration::ZERO);
            }
        }
        // A condition nobody sets can never be waited out.
        let mut unset: Vec<(&ConditionName, usize)> = conds.iter().map(|(c, &v)| (c, v)).collect();
        unset.sort();
        if let Some((c, _)) = unset.into_iter().find(|(_, v)| dag.preds[*v].is_empty()) {
            return Err(CriticalPathError::Unsatisfiable {
                node: first_waiter[c].clone(),
                condition: c.as_str().to_string(),
            });
        }
        Ok(dag)
    }

    fn vertex(&mut self, label: String, join: Join) -> usize {
        self.labels.push(label);
        self.join.push(join);
        self.preds.push(Vec::new());
        self.labels.len() - 1
    }

    fn edge(&mut self, from: usize, to: usize, d: Duration) {
        self.preds[to].push((from, d));
    }

    /// Adds the events of `n` (whose `S` vertex exists) and returns its `F`.
    fn node(
        &mut self,
        n: &ChildSpec,
        path: NodePath,
        s: usize,
        graph: &DependencyGraph,
        waits: &mut Vec<(usize, NodePath, ConditionName)>,
        sets: &mut Vec<(usize, ConditionName)>,
    ) -> Result<usize, CriticalPathError> {
        let cost = n
            .behaviour
            .cost
            .duration()
            .ok_or_else(|| CriticalPathError::UnknownCost(path.clone()))?;
        let w = self.vertex(format!("W{path}"), Join::All);
        self.edge(s, w, Duration::ZERO);
        for c in graph.expand_preconditions(&n.key()) {
            waits.push((w, path.clone(), c));
        }
        let f = self.vertex(format!("F{path}"), Join::All);
        self.finishes.push(f);
        for c in graph.conditions_set_by(&n.module, &n.args) {
            sets.push((f, c));
        }

        let children = n.children();
        if children.is_empty() {
            self.edge(w, f, cost);
            return Ok(f);
        }
        // (vertex, delay) the next child's start follows
        let mut gate = (w, cost);
        for c in children {
            let cp = path.child(&c.id);
            let cs = self.vertex(format!("S{cp}"), Join::All);
            self.edge(gate.0, cs, gate.1);
            let cf = self.node(c, cp, cs, graph, waits, sets)?;
            gate = match c.start_mode {
                StartMode::Sequential => (cf, Duration::ZERO),
                StartMode::Concurrent => (cs, Duration::ZERO),
            };
        }
        self.edge(gate.0, f, gate.1);
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Time of every event, in vertex order.
    fn schedule(&self) -> Result<Vec<Duration>, CriticalPathError> {
        let n = self.len();
        let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut indeg = vec![0usize; n];
        for (v, ps) in self.preds.iter().enumerate() {
            for (p, _) in ps {
                succs[*p].push(v);
                indeg[v] += 1;
            }
        }
        let mut time = vec![Duration::ZERO; n];
        let mut queue: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut done = 0;
        while let Some(v) = queue.pop_front() {
            done += 1;
            let arrivals = self.preds[v].iter().map(|(p, d)| time[*p] + *d);
            time[v] = match self.join[v] {
                Join::All => arrivals.max().unwrap_or(Duration::ZERO),
                Join::Any => arrivals.min().unwrap_or(Duration::ZERO),
            };
            for &s in &succs[v] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    queue.push_back(s);
                }
            }
        }
        if done < n {
            let mut stuck: Vec<String> = (0..n)
                .filter(|&v| indeg[v] > 0)
                .map(|v| self.labels[v].clone())
                .collect();
            stuck.truncate(8);
            return Err(CriticalPathError::Cycle(stuck));
        }
        Ok(time)
    }

    /// Time at which the last node finishes.
    pub fn longest_path(&self) -> Result<Duration, CriticalPathError> {
        let time = self.schedule()?;
        Ok(self
            .finishes
            .iter()
            .map(|&f| time[f])
            .max()
            .unwrap_or(Duration::ZERO))
    }
}

/// Predicted time from the first root's start request to quiescence.
pub fn critical_path(
    roots: &[ChildSpec],
    graph: &DependencyGraph,
) -> Result<Duration, CriticalPathError> {
    PrecedenceDag::build(roots, graph)?.longest_path()
}
