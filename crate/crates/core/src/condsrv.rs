//! The condition server: truth values for every condition, blocking waits
//! for preconditions, and a watchdog for waits that can never finish.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::clock::Clock;
use crate::depgraph::{
    Args, ConditionName, ConditionSet, DependencyGraph, Diagnostic, ModuleKey, ValidGraph,
};
use crate::trace::{join_conditions, EventKind, NodePath, TraceSink};

pub const DEFAULT_DEADLOCK_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WaitReport {
    pub key: ModuleKey,
    pub waited: Duration,
    /// Conditions that were still false when the wait was registered.
    pub conditions_waited_on: ConditionSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeadlockReport {
    pub blocked: Vec<(ModuleKey, ConditionSet)>,
    pub unset_conditions: ConditionSet,
    /// How long the oldest blocked waiter had been waiting.
    pub elapsed: Duration,
}

impl fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "deadlock after {} ms: {} blocked waiter(s)",
            self.elapsed.as_millis(),
            self.blocked.len()
        )?;
        for (key, unmet) in &self.blocked {
            writeln!(f, "  {key} waits on {{{}}}", join_conditions(unmet))?;
        }
        write!(
            f,
            "  unset: {{{}}}",
            join_conditions(&self.unset_conditions)
        )
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("wait aborted by the deadlock watchdog")]
pub struct DeadlockError(pub DeadlockReport);

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dependency graph has {} validation error(s)", .0.iter().filter(|d| d.is_error()).count())]
    InvalidGraph(Vec<Diagnostic>),
}

struct Waiter {
    key: ModuleKey,
    unmet: BTreeSet<usize>,
    since: Duration,
    tx: oneshot::Sender<Result<(), DeadlockReport>>,
}

struct State {
    truth: Vec<bool>,
    waiters: BTreeMap<u64, Waiter>,
    next_seq: u64,
    last_flip: Duration,
    firings: Vec<DeadlockReport>,
}

pub struct ConditionStore {
    graph: ValidGraph,
    index: HashMap<ConditionName, usize>,
    deadlock_timeout: Duration,
    clock: Clock,
    trace: Option<TraceSink>,
    state: Mutex<State>,
}

impl fmt::Debug for ConditionStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConditionStore")
            .field("conditions", &self.graph.conditions.len())
            .field("deadlock_timeout", &self.deadlock_timeout)
            .finish_non_exhaustive()
    }
}

/// Unregisters a waiter whose wait is abandoned before it is answered.
struct WaiterGuard<'a> {
    store: &'a ConditionStore,
    seq: u64,
}

impl Drop for WaiterGuard<'_> {
    fn drop(&mut self) {
        self.store.state.lock().waiters.remove(&self.seq);
    }
}

impl ConditionStore {
    /// All conditions start out false.
    pub fn new(
        graph: DependencyGraph,
        deadlock_timeout: Duration,
        clock: Clock,
    ) -> Result<Self, StoreError> {
        let graph = graph.freeze().map_err(StoreError::InvalidGraph)?;
        Ok(Self::from_valid(graph, deadlock_timeout, clock))
    }

    pub fn from_valid(graph: ValidGraph, deadlock_timeout: Duration, clock: Clock) -> Self {
        let index = graph
            .conditions
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.clone(), i))
            .collect();
        let n = graph.conditions.len();
        ConditionStore {
            graph,
            index,
            deadlock_timeout,
            clock,
            trace: None,
            state: Mutex::new(State {
                truth: vec![false; n],
                waiters: BTreeMap::new(),
                next_seq: 0,
                last_flip: clock.now(),
                firings: Vec::new(),
            }),
        }
    }

    /// Watchdog firings are recorded in this sink as `deadlock` events.
    pub fn with_trace(mut self, trace: TraceSink) -> Self {
        self.trace = Some(trace);
        self
    }

    pub fn graph(&self) -> &ValidGraph {
        &self.graph
    }

    pub fn deadlock_timeout(&self) -> Duration {
        self.deadlock_timeout
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    fn names(&self, idx: impl IntoIterator<Item = usize>) -> ConditionSet {
        idx.into_iter()
            .map(|i| self.graph.conditions[i].name.clone())
            .collect()
    }

    /// Marks every condition declared for `(module, args)` true and releases
    /// waiters whose unmet set became empty. Returns the conditions that
    /// changed from false to true.
    pub fn set_condition(&self, module: &str, args: &Args) -> ConditionSet {
        self.set_condition_with(module, args, |_| {})
    }

    /// Like [`set_condition`](Self::set_condition), but runs `before_release`
    /// with the flipped set while still holding the store lock, before any
    /// waiter is woken. Observers that record the flip this way always see it
    /// ordered ahead of anything the released waiters do.
    pub fn set_condition_with(
        &self,
        module: &str,
        args: &Args,
        before_release: impl FnOnce(&ConditionSet),
    ) -> ConditionSet {
        let mut st = self.state.lock();
        let mut flipped = Vec::new();
        for (i, c) in self.graph.conditions.iter().enumerate() {
            if c.key.covers(module, args) && !st.truth[i] {
                st.truth[i] = true;
                flipped.push(i);
            }
        }
        let set = self.names(flipped.iter().copied());
        before_release(&set);
        if flipped.is_empty() {
            return set;
        }
        st.last_flip = self.clock.now();

        let mut released = Vec::new();
        for (&seq, w) in st.waiters.iter_mut() {
            for i in &flipped {
                w.unmet.remove(i);
            }
            if w.unmet.is_empty() {
                released.push(seq);
            }
        }
        // BTreeMap iteration gives registration order.
        for seq in released {
            if let Some(w) = st.waiters.remove(&seq) {
                let _ = w.tx.send(Ok(()));
            }
        }
        set
    }

    fn unmet_for(&self, st: &State, key: &ModuleKey) -> BTreeSet<usize> {
        self.graph
            .expand_preconditions(key)
            .iter()
            .filter_map(|n| self.index.get(n).copied())
            .filter(|&i| !st.truth[i])
            .collect()
    }

    /// Blocks the calling task until every precondition of `(module, args)`
    /// holds. Returns at once when there are none or all are already true.
    pub async fn wait_for_conditions(
        &self,
        module: &str,
        args: &Args,
    ) -> Result<WaitReport, DeadlockError> {
        let key = ModuleKey {
            module: module.to_string(),
            args: Some(args.clone()),
        };
        let start = self.clock.now();
        let (rx, waited_on, seq) = {
            let mut st = self.state.lock();
            let unmet = self.unmet_for(&st, &key);
            if unmet.is_empty() {
                return Ok(WaitReport {
                    key,
                    waited: Duration::ZERO,
                    conditions_waited_on: ConditionSet::new(),
                });
            }
            let waited_on = self.names(unmet.iter().copied());
            let (tx, rx) = oneshot::channel();
            let seq = st.next_seq;
            st.next_seq += 1;
            st.waiters.insert(
                seq,
                Waiter {
                    key: key.clone(),
                    unmet,
                    since: start,
                    tx,
                },
            );
            (rx, waited_on, seq)
        };
        let _guard = WaiterGuard { store: self, seq };
        match rx.await {
            Ok(Ok(())) => Ok(WaitReport {
                key,
                waited: self.clock.now().saturating_sub(start),
                conditions_waited_on: waited_on,
            }),
            Ok(Err(report)) => Err(DeadlockError(report)),
            // The store never drops a live waiter without answering, unless
            // the store itself is gone.
            Err(_) => Err(DeadlockError(DeadlockReport {
                blocked: vec![(key, waited_on.clone())],
                unset_conditions: waited_on,
                elapsed: self.clock.now().saturating_sub(start),
            })),
        }
    }

    pub fn snapshot(&self) -> BTreeMap<ConditionName, bool> {
        let st = self.state.lock();
        self.graph
            .conditions
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.clone(), st.truth[i]))
            .collect()
    }

    pub fn is_set(&self, name: &str) -> bool {
        let st = self.state.lock();
        self.index.get(name).is_some_and(|&i| st.truth[i])
    }

    pub fn waiter_count(&self) -> usize {
        self.state.lock().waiters.len()
    }

    /// Fires when some waiter has been blocked for at least the deadlock
    /// timeout and no condition flipped during that time. Every blocked
    /// waiter is aborted with the report.
    pub fn watchdog_scan(&self) -> Option<DeadlockReport> {
        let mut st = self.state.lock();
        let now = self.clock.now();
        let oldest = st.waiters.values().map(|w| w.since).min()?;
        let blocked_for = now.saturating_sub(oldest);
        if blocked_for < self.deadlock_timeout
            || now.saturating_sub(st.last_flip) < self.deadlock_timeout
        {
            return None;
        }
        let waiters = std::mem::take(&mut st.waiters);
        let mut blocked = Vec::new();
        let mut unset = BTreeSet::new();
        for w in waiters.values() {
            unset.extend(w.unmet.iter().copied());
            blocked.push((w.key.clone(), self.names(w.unmet.iter().copied())));
        }
        let report = DeadlockReport {
            blocked,
            unset_conditions: self.names(unset),
            elapsed: blocked_for,
        };
        if let Some(trace) = &self.trace {
            let keys = report
                .blocked
                .iter()
                .map(|(k, _)| match &k.args {
                    Some(a) => format!("{}{}", k.module, a),
                    None => k.module.clone(),
                })
                .collect::<Vec<_>>()
                .join(",");
            trace.emit(
                EventKind::Deadlock,
                &NodePath::condition_server(),
                [
                    ("blocked", keys),
                    ("unset", join_conditions(&report.unset_conditions)),
                ],
            );
        }
        st.firings.push(report.clone());
        for (_, w) in waiters {
            let _ = w.tx.send(Err(report.clone()));
        }
        Some(report)
    }

    /// Reports produced by the watchdog so far.
    pub fn firings(&self) -> Vec<DeadlockReport> {
        self.state.lock().firings.clone()
    }

    /// Runs [`watchdog_scan`](Self::watchdog_scan) every `period` until the
    /// returned task is aborted.
    pub fn spawn_watchdog(self: &Arc<Self>, period: Duration) -> JoinHandle<()> {
        let store = Arc::clone(self);
        tokio::spawn(async move {
            loop {
                store.clock.sleep(period).await;
                store.watchdog_scan();
            }
        })
    }
}

/// Scan interval used by the runtime for a given timeout.
pub fn watchdog_period(timeout: Duration) -> Duration {
    (timeout / 10).clamp(Duration::from_millis(1), Duration::from_millis(100))
}
