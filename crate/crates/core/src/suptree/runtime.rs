//! Task-per-node supervision runtime.
//!
//! Every worker, supervisor and wrapper is a tokio task. A parent starts a
//! child by spawning it and waiting for its ack. A concurrent child is
//! started through a wrapper supervisor with a zero restart budget: the
//! wrapper acks at once, and a one-shot starter task brings the real child
//! up and attaches it to the wrapper afterwards.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use super::spec::*;
use crate::clock::{Clock, ClockKind};
use crate::condsrv::{watchdog_period, ConditionStore, DeadlockError, DeadlockReport};
use crate::trace::{join_conditions, EventKind, NodePath, TraceSink};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Worker,
    Supervisor,
    Wrapper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeState {
    Starting,
    Running,
    Terminated,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub path: NodePath,
    pub kind: NodeKind,
    pub state: NodeState,
}

/// Shape of a running tree, as seen by the registry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub id: String,
    pub kind: NodeKind,
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn count(&self, kind: NodeKind) -> usize {
        usize::from(self.kind == kind) + self.children.iter().map(|c| c.count(kind)).sum::<usize>()
    }
}

/// The tree a successful startup of `spec` must produce: the declared shape
/// with one wrapper above every concurrent child.
pub fn expected_tree(spec: &ChildSpec) -> TreeNode {
    fn node(spec: &ChildSpec) -> TreeNode {
        TreeNode {
            id: spec.id.clone(),
            kind: if spec.is_supervisor() {
                NodeKind::Supervisor
            } else {
                NodeKind::Worker
            },
            children: spec
                .children()
                .iter()
                .map(|c| match c.start_mode {
                    StartMode::Sequential => node(c),
                    StartMode::Concurrent => TreeNode {
                        id: format!("{}{}", c.id, crate::trace::WRAPPER_SUFFIX),
                        kind: NodeKind::Wrapper,
                        children: vec![node(c)],
                    },
                })
                .collect(),
        }
    }
    node(spec)
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum StartFailure {
    #[error("init of {path} failed: {reason}")]
    InitFailed { path: NodePath, reason: String },
    #[error("{path} exhausted its restart budget")]
    Escalated { path: NodePath },
    #[error("startup deadlocked")]
    Deadlock(DeadlockReport),
    /// The node was shut down before it acked.
    #[error("start of {path} was cancelled")]
    Cancelled { path: NodePath },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Restarted,
    Escalated,
    /// A temporary child is not restarted.
    Removed,
    ApplicationStopped,
}

/// One supervisor's reaction to a child exit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Handling {
    /// `None` for the application master above a root supervisor.
    pub supervisor: Option<NodePath>,
    pub child: NodePath,
    pub action: Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrashOutcome {
    Restarted,
    Escalated,
    Removed,
    NotRunning,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrashReport {
    /// What the crashed node's own supervisor did.
    pub outcome: CrashOutcome,
    /// Every supervisor involved, bottom up, ending with the one that
    /// restarted (or the application master).
    pub chain: Vec<Handling>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StartupReport {
    pub duration: Duration,
    pub node_count: usize,
    pub wrapper_count: usize,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum QuiescenceError {
    #[error("startup did not settle within {timeout:?}: {pending} attach(es) outstanding, {running} node(s) up")]
    Timeout {
        timeout: Duration,
        pending: usize,
        running: usize,
    },
    #[error("startup deadlocked")]
    Deadlock(DeadlockReport),
    #[error("application stopped during startup")]
    ApplicationStopped,
}

// ---------------------------------------------------------------------------
// shared state

struct Entry {
    kind: NodeKind,
    state: NodeState,
    slot: usize,
    attempts: u32,
    ctl: Option<mpsc::UnboundedSender<Ctl>>,
}

#[derive(Default)]
struct Registry {
    map: Mutex<BTreeMap<NodePath, Entry>>,
}

impl Registry {
    /// Returns the zero-based start attempt for `path`.
    fn register(
        &self,
        path: &NodePath,
        kind: NodeKind,
        slot: usize,
        ctl: mpsc::UnboundedSender<Ctl>,
    ) -> u32 {
        let mut map = self.map.lock();
        match map.get_mut(path) {
            Some(e) => {
                e.attempts += 1;
                e.state = NodeState::Starting;
                e.ctl = Some(ctl);
                e.slot = slot;
                e.attempts - 1
            }
            None => {
                map.insert(
                    path.clone(),
                    Entry {
                        kind,
                        state: NodeState::Starting,
                        slot,
                        attempts: 1,
                        ctl: Some(ctl),
                    },
                );
                0
            }
        }
    }

    fn set_state(&self, path: &NodePath, state: NodeState) {
        if let Some(e) = self.map.lock().get_mut(path) {
            e.state = state;
            if state == NodeState::Terminated {
                e.ctl = None;
            }
        }
    }

    fn get(&self, path: &NodePath) -> Option<NodeRef> {
        self.map.lock().get(path).map(|e| NodeRef {
            path: path.clone(),
            kind: e.kind,
            state: e.state,
        })
    }

    fn ctl(&self, path: &NodePath) -> Option<mpsc::UnboundedSender<Ctl>> {
        let map = self.map.lock();
        map.get(path)
            .filter(|e| e.state == NodeState::Running)
            .and_then(|e| e.ctl.clone())
    }

    fn running(&self) -> Vec<(NodePath, NodeKind, usize)> {
        self.map
            .lock()
            .iter()
            .filter(|(_, e)| e.state == NodeState::Running)
            .map(|(p, e)| (p.clone(), e.kind, e.slot))
            .collect()
    }
}

/// Counts outstanding concurrent attaches. A token is held by whoever is
/// responsible for the attach; dropping it without completing still counts
/// it down.
struct Quiescence {
    tx: watch::Sender<QState>,
}

#[derive(Clone, Default)]
struct QState {
    pending: usize,
    last_event: Duration,
    fatal: Option<QuiescenceError>,
}

struct PendingAttach {
    shared: Arc<Shared>,
    done: bool,
}

impl PendingAttach {
    fn new(shared: &Arc<Shared>) -> Self {
        shared.quiescence.tx.send_modify(|s| s.pending += 1);
        PendingAttach {
            shared: Arc::clone(shared),
            done: false,
        }
    }

    fn complete(mut self) {
        let now = self.shared.clock.now();
        self.shared.quiescence.tx.send_modify(|s| {
            s.pending -= 1;
            s.last_event = s.last_event.max(now);
        });
        self.done = true;
    }
}

impl Drop for PendingAttach {
    fn drop(&mut self) {
        if !self.done {
            self.shared.quiescence.tx.send_modify(|s| s.pending -= 1);
        }
    }
}

impl Quiescence {
    fn note(&self, now: Duration) {
        self.tx
            .send_modify(|s| s.last_event = s.last_event.max(now));
    }

    fn fatal(&self, e: QuiescenceError) {
        self.tx.send_modify(|s| {
            if s.fatal.is_none() {
                s.fatal = Some(e)
            }
        });
    }
}

struct Shared {
    store: Arc<ConditionStore>,
    trace: TraceSink,
    clock: Clock,
    registry: Registry,
    quiescence: Quiescence,
    incarnations: AtomicU64,
}

impl Shared {
    fn next_incarnation(&self) -> u64 {
        self.incarnations.fetch_add(1, Ordering::Relaxed)
    }

    fn emit<const N: usize>(&self, kind: EventKind, node: &NodePath, detail: [(&str, String); N]) {
        self.trace.emit(kind, node, detail);
    }
}

// ---------------------------------------------------------------------------
// messages

struct CrashTicket {
    chain: Vec<Handling>,
    reply: oneshot::Sender<Vec<Handling>>,
}

impl CrashTicket {
    fn finish(mut self, h: Handling) {
        self.chain.push(h);
        let _ = self.reply.send(self.chain);
    }
}

enum Ctl {
    Crash(CrashTicket),
    Terminate(oneshot::Sender<()>),
}

/// A child's exit, reported to its supervisor.
struct SupMsg {
    slot: usize,
    incarnation: u64,
    ticket: Option<CrashTicket>,
    pending: Option<PendingAttach>,
}

#[derive(Clone)]
struct Parent {
    path: Option<NodePath>,
    tx: mpsc::UnboundedSender<SupMsg>,
}

impl Parent {
    fn child_path(&self, id: &str) -> NodePath {
        match &self.path {
            Some(p) => p.child(id),
            None => NodePath::root(id),
        }
    }

    fn wrapper_path(&self, id: &str) -> NodePath {
        match &self.path {
            Some(p) => p.wrapper_for(id),
            None => NodePath::root(&format!("{id}{}", crate::trace::WRAPPER_SUFFIX)),
        }
    }
}

/// Where a node reports its exit.
#[derive(Clone)]
struct Link {
    parent: Parent,
    slot: usize,
    incarnation: u64,
}

impl Link {
    fn exit(&self, ticket: Option<CrashTicket>, pending: Option<PendingAttach>) {
        let _ = self.parent.tx.send(SupMsg {
            slot: self.slot,
            incarnation: self.incarnation,
            ticket,
            pending,
        });
    }
}

struct ChildHandle {
    path: NodePath,
    incarnation: u64,
    ctl: mpsc::UnboundedSender<Ctl>,
}

impl ChildHandle {
    async fn terminate(self) {
        let (tx, rx) = oneshot::channel();
        if self.ctl.send(Ctl::Terminate(tx)).is_ok() {
            let _ = rx.await;
        }
    }
}

type StartResult = Result<ChildHandle, StartFailure>;
type BoxFut<T> = Pin<Box<dyn Future<Output = T> + Send>>;

/// Cancellation of an in-progress start. Never fires once the sender is
/// gone without having fired.
#[derive(Clone)]
struct Cancel(watch::Receiver<bool>);

impl Cancel {
    fn new() -> (watch::Sender<bool>, Cancel) {
        let (tx, rx) = watch::channel(false);
        (tx, Cancel(rx))
    }

    fn never() -> Cancel {
        Cancel::new().1
    }

    fn is_set(&self) -> bool {
        *self.0.borrow()
    }

    async fn fired(&mut self) {
        loop {
            if *self.0.borrow_and_update() {
                return;
            }
            if self.0.changed().await.is_err() {
                std::future::pending::<()>().await;
            }
        }
    }
}

/// What the wrapper's starter hands back: the attached child, or the
/// failure together with the attach token.
type StarterResult = Result<ChildHandle, (StartFailure, PendingAttach)>;

struct StarterTask {
    cancel: watch::Sender<bool>,
    task: JoinHandle<StarterResult>,
}

// ---------------------------------------------------------------------------
// starting

/// Starts `spec` under `parent`, honouring its start mode, and returns once
/// the parent may proceed (the child's ack, or the wrapper's ack).
fn start_child(
    shared: Arc<Shared>,
    parent: Parent,
    spec: ChildSpec,
    slot: usize,
    cancel: Cancel,
) -> BoxFut<StartResult> {
    Box::pin(async move {
        match spec.start_mode {
            StartMode::Sequential => start_node(shared, parent, spec, slot, cancel).await,
            StartMode::Concurrent => Ok(start_wrapper(shared, parent, spec, slot)),
        }
    })
}

/// Starts a worker or supervisor and waits for its ack. On cancellation the
/// node is shut down, and this returns only once it is gone.
fn start_node(
    shared: Arc<Shared>,
    parent: Parent,
    spec: ChildSpec,
    slot: usize,
    mut cancel: Cancel,
) -> BoxFut<StartResult> {
    Box::pin(async move {
        let path = parent.child_path(&spec.id);
        shared.emit(
            EventKind::StartRequest,
            &path,
            [
                ("module", spec.module.clone()),
                ("args", spec.args.to_string()),
            ],
        );
        let (ctl_tx, ctl_rx) = mpsc::unbounded_channel();
        let kind = if spec.is_supervisor() {
            NodeKind::Supervisor
        } else {
            NodeKind::Worker
        };
        let attempt = shared.registry.register(&path, kind, slot, ctl_tx.clone());
        let (ack_tx, ack_rx) = oneshot::channel();
        let incarnation = shared.next_incarnation();
        let link = Link {
            parent,
            slot,
            incarnation,
        };
        tokio::spawn(node_main(
            Arc::clone(&shared),
            link,
            path.clone(),
            spec,
            attempt,
            ack_tx,
            ctl_rx,
        ));
        let acked = tokio::select! {
            biased;
            r = ack_rx => r,
            _ = cancel.fired() => {
                let (tx, rx) = oneshot::channel();
                if ctl_tx.send(Ctl::Terminate(tx)).is_ok() {
                    let _ = rx.await;
                }
                return Err(StartFailure::Cancelled { path });
            }
        };
        match acked {
            Ok(Ok(())) => Ok(ChildHandle {
                path,
                incarnation,
                ctl: ctl_tx,
            }),
            Ok(Err(f)) => Err(f),
            Err(_) => Err(StartFailure::InitFailed {
                path,
                reason: "node task vanished".into(),
            }),
        }
    })
}

/// Creates the wrapper for a concurrent child. Acks immediately.
fn start_wrapper(shared: Arc<Shared>, parent: Parent, spec: ChildSpec, slot: usize) -> ChildHandle {
    let wpath = parent.wrapper_path(&spec.id);
    shared.emit(
        EventKind::StartRequest,
        &wpath,
        [("child", spec.id.clone())],
    );
    let (ctl_tx, ctl_rx) = mpsc::unbounded_channel();
    shared
        .registry
        .register(&wpath, NodeKind::Wrapper, slot, ctl_tx.clone());
    let (tx, rx) = mpsc::unbounded_channel();
    let incarnation = shared.next_incarnation();
    let link = Link {
        parent,
        slot,
        incarnation,
    };
    let pending = PendingAttach::new(&shared);
    shared.registry.set_state(&wpath, NodeState::Running);
    shared.emit(EventKind::Ack, &wpath, []);

    let wparent = Parent {
        path: Some(wpath.clone()),
        tx: tx.clone(),
    };
    let (cancel_tx, cancel) = Cancel::new();
    let task = tokio::spawn(starter(
        Arc::clone(&shared),
        wparent,
        spec.clone(),
        pending,
        cancel,
    ));
    let sup = Supervisor {
        shared: Arc::clone(&shared),
        path: wpath.clone(),
        flags: SupervisorFlags::wrapper(),
        slots: vec![Slot {
            spec,
            handle: None,
            incarnation: u64::MAX,
        }],
        restarts: VecDeque::new(),
        tx,
        starter: Some(StarterTask {
            cancel: cancel_tx,
            task,
        }),
    };
    tokio::spawn(sup.run(ctl_rx, rx, link));
    ChildHandle {
        path: wpath,
        incarnation,
        ctl: ctl_tx,
    }
}

/// The wrapper's temporary one-shot child: start the real child, attach it.
async fn starter(
    shared: Arc<Shared>,
    wrapper: Parent,
    spec: ChildSpec,
    pending: PendingAttach,
    cancel: Cancel,
) -> StarterResult {
    let wpath = wrapper.path.clone().expect("wrapper has a path");
    match start_node(
        Arc::clone(&shared),
        wrapper,
        spec.clone(),
        0,
        cancel.clone(),
    )
    .await
    {
        Ok(handle) if cancel.is_set() => {
            let path = handle.path.clone();
            handle.terminate().await;
            Err((StartFailure::Cancelled { path }, pending))
        }
        Ok(handle) => {
            shared.emit(EventKind::Attach, &wpath, [("child", spec.id.clone())]);
            pending.complete();
            Ok(handle)
        }
        Err(failure) => {
            if let StartFailure::Deadlock(r) = &failure {
                shared
                    .quiescence
                    .fatal(QuiescenceError::Deadlock(r.clone()));
            }
            Err((failure, pending))
        }
    }
}

async fn run_cost(shared: &Shared, spec: &ChildSpec, attempt: u32) -> Result<(), String> {
    match &spec.behaviour.cost {
        InitCost::None => {}
        InitCost::Sleep(d) => shared.clock.sleep(*d).await,
        InitCost::Busy(d) => match shared.clock.kind() {
            // Virtual time has no CPU; the cost is charged as elapsed time.
            ClockKind::Virtual => shared.clock.sleep(*d).await,
            ClockKind::Wall => {
                let d = *d;
                let _ = tokio::task::spawn_blocking(move || spin(d)).await;
            }
        },
        InitCost::Call(f) => f(&spec.args, attempt)?,
    }
    if attempt < spec.behaviour.fail_attempts {
        return Err(format!("injected failure on attempt {attempt}"));
    }
    Ok(())
}

const SPIN_BLOCK: u64 = 1000;

fn spin_blocks(n: u64) {
    let mut x: u64 = 0x9e37_79b9_7f4a_7c15;
    for _ in 0..n {
        for _ in 0..SPIN_BLOCK {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
        }
        x = std::hint::black_box(x);
    }
}

/// Spin blocks per second on an otherwise idle thread, measured once.
fn spin_rate() -> f64 {
    static RATE: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    *RATE.get_or_init(|| {
        let mut n = 64;
        loop {
            let t = std::time::Instant::now();
            spin_blocks(n);
            let e = t.elapsed();
            if e >= Duration::from_millis(20) {
                return n as f64 / e.as_secs_f64();
            }
            n *= 2;
        }
    })
}

/// Burns a fixed amount of CPU work, about `d` of one core. Threads that
/// share a core take proportionally longer.
fn spin(d: Duration) {
    spin_blocks((spin_rate() * d.as_secs_f64()).round() as u64);
}

/// Lifecycle of one worker or supervisor: wait for preconditions, run init,
/// set conditions, ack, then serve until crashed or terminated.
async fn node_main(
    shared: Arc<Shared>,
    link: Link,
    path: NodePath,
    spec: ChildSpec,
    attempt: u32,
    ack: oneshot::Sender<Result<(), StartFailure>>,
    mut ctl_rx: mpsc::UnboundedReceiver<Ctl>,
) {
    let (cancel_tx, cancel) = Cancel::new();
    let started = {
        let startup = startup(&shared, &path, &spec, attempt, cancel);
        tokio::pin!(startup);
        tokio::select! {
            biased;
            r = &mut startup => r,
            ctl = ctl_rx.recv() => {
                // Shut down before the ack: unwind the startup, including any
                // child still being started, then report.
                let _ = cancel_tx.send(true);
                if let Ok(Some((mut s, _))) = (&mut startup).await {
                    s.terminate_children().await;
                }
                shared.emit(EventKind::Terminate, &path, [("reason", "shutdown".to_string())]);
                shared.registry.set_state(&path, NodeState::Terminated);
                let _ = ack.send(Err(StartFailure::Cancelled { path: path.clone() }));
                if let Some(Ctl::Terminate(done)) = ctl {
                    let _ = done.send(());
                }
                return;
            }
        }
    };
    let sup = match started {
        Ok(sup) => sup,
        Err(f) => {
            shared.registry.set_state(&path, NodeState::Terminated);
            let _ = ack.send(Err(f));
            return;
        }
    };

    shared.emit(EventKind::InitEnd, &path, []);
    shared
        .store
        .set_condition_with(&spec.module, &spec.args, |flipped| {
            shared.trace.emit(
                EventKind::ConditionSet,
                &path,
                [("conds", join_conditions(flipped))],
            );
        });
    shared.registry.set_state(&path, NodeState::Running);
    shared.emit(EventKind::Ack, &path, []);
    let _ = ack.send(Ok(()));

    match sup {
        Some((s, rx)) => s.run(ctl_rx, rx, link).await,
        None => worker_loop(shared, link, path, ctl_rx).await,
    }
}

type Started = Option<(Supervisor, mpsc::UnboundedReceiver<SupMsg>)>;

/// Everything before init_end: the wait, the init cost and, for a
/// supervisor, starting the children.
async fn startup(
    shared: &Arc<Shared>,
    path: &NodePath,
    spec: &ChildSpec,
    attempt: u32,
    cancel: Cancel,
) -> Result<Started, StartFailure> {
    let cancelled = || StartFailure::Cancelled { path: path.clone() };
    let mut c = cancel.clone();

    shared.emit(EventKind::WaitBegin, path, []);
    let waited = tokio::select! {
        r = shared.store.wait_for_conditions(&spec.module, &spec.args) => r,
        _ = c.fired() => return Err(cancelled()),
    };
    match waited {
        Ok(report) => shared.emit(
            EventKind::WaitEnd,
            path,
            [
                ("waited_on", join_conditions(&report.conditions_waited_on)),
                ("waited_us", report.waited.as_micros().to_string()),
            ],
        ),
        Err(DeadlockError(report)) => return Err(StartFailure::Deadlock(report)),
    }

    shared.emit(EventKind::InitBegin, path, []);
    let cost = tokio::select! {
        r = run_cost(shared, spec, attempt) => r,
        _ = c.fired() => return Err(cancelled()),
    };
    if let Err(reason) = cost {
        shared.emit(
            EventKind::Crash,
            path,
            [("reason", "init_failed".to_string())],
        );
        return Err(StartFailure::InitFailed {
            path: path.clone(),
            reason,
        });
    }

    let ChildKind::Supervisor { flags, children } = &spec.kind else {
        return Ok(None);
    };
    let (tx, rx) = mpsc::unbounded_channel();
    let mut s = Supervisor {
        shared: Arc::clone(shared),
        path: path.clone(),
        flags: *flags,
        slots: children
            .iter()
            .map(|c| Slot {
                spec: c.clone(),
                handle: None,
                incarnation: 0,
            })
            .collect(),
        restarts: VecDeque::new(),
        tx,
        starter: None,
    };
    for i in 0..s.slots.len() {
        if let Err(f) = s.start_slot(i, &cancel).await {
            if !matches!(
                f,
                StartFailure::Deadlock(_) | StartFailure::Cancelled { .. }
            ) {
                let child = s.slot_path(i);
                shared.emit(EventKind::Escalate, path, [("child", child.to_string())]);
            }
            s.terminate_children().await;
            return Err(match f {
                StartFailure::Deadlock(r) => StartFailure::Deadlock(r),
                StartFailure::Cancelled { .. } => cancelled(),
                _ => StartFailure::Escalated { path: path.clone() },
            });
        }
    }
    Ok(Some((s, rx)))
}

async fn worker_loop(
    shared: Arc<Shared>,
    link: Link,
    path: NodePath,
    mut ctl_rx: mpsc::UnboundedReceiver<Ctl>,
) {
    match ctl_rx.recv().await {
        Some(Ctl::Crash(ticket)) => {
            shared.emit(
                EventKind::Crash,
                &path,
                [("reason", "injected".to_string())],
            );
            shared.registry.set_state(&path, NodeState::Terminated);
            link.exit(Some(ticket), None);
        }
        Some(Ctl::Terminate(done)) => {
            shared.emit(
                EventKind::Terminate,
                &path,
                [("reason", "shutdown".to_string())],
            );
            shared.registry.set_state(&path, NodeState::Terminated);
            let _ = done.send(());
        }
        None => shared.registry.set_state(&path, NodeState::Terminated),
    }
}

// ---------------------------------------------------------------------------
// supervision

struct Slot {
    spec: ChildSpec,
    handle: Option<ChildHandle>,
    incarnation: u64,
}

struct Supervisor {
    shared: Arc<Shared>,
    path: NodePath,
    flags: SupervisorFlags,
    slots: Vec<Slot>,
    restarts: VecDeque<Duration>,
    tx: mpsc::UnboundedSender<SupMsg>,
    /// Set for a wrapper until its child is attached or has failed.
    starter: Option<StarterTask>,
}

enum Flow {
    Continue,
    Stop,
}

impl Supervisor {
    fn as_parent(&self) -> Parent {
        Parent {
            path: Some(self.path.clone()),
            tx: self.tx.clone(),
        }
    }

    fn is_wrapper(&self) -> bool {
        self.path.is_wrapper()
    }

    /// Path of the node occupying slot `i` (the wrapper for concurrent
    /// children of ordinary supervisors).
    fn slot_path(&self, i: usize) -> NodePath {
        let spec = &self.slots[i].spec;
        if spec.start_mode == StartMode::Concurrent && !self.is_wrapper() {
            self.path.wrapper_for(&spec.id)
        } else {
            self.path.child(&spec.id)
        }
    }

    /// Restart intensity check; records the restart when allowed.
    fn allow_restart(&mut self) -> bool {
        let now = self.shared.clock.now();
        while let Some(&t) = self.restarts.front() {
            if now.saturating_sub(t) >= self.flags.max_seconds {
                self.restarts.pop_front();
            } else {
                break;
            }
        }
        if (self.restarts.len() as u32) < self.flags.max_restarts {
            self.restarts.push_back(now);
            true
        } else {
            false
        }
    }

    fn emit_restart(&self, i: usize) {
        self.shared.emit(
            EventKind::Restart,
            &self.slot_path(i),
            [("by", self.path.to_string())],
        );
    }

    /// Starts slot `i`, retrying failed starts while the budget allows.
    async fn start_slot(&mut self, i: usize, cancel: &Cancel) -> Result<(), StartFailure> {
        loop {
            if cancel.is_set() {
                return Err(StartFailure::Cancelled {
                    path: self.slot_path(i),
                });
            }
            let spec = self.slots[i].spec.clone();
            let temporary = spec.restart == Restart::Temporary;
            match start_child(
                Arc::clone(&self.shared),
                self.as_parent(),
                spec,
                i,
                cancel.clone(),
            )
            .await
            {
                Ok(h) => {
                    self.slots[i].incarnation = h.incarnation;
                    self.slots[i].handle = Some(h);
                    return Ok(());
                }
                Err(f @ (StartFailure::Deadlock(_) | StartFailure::Cancelled { .. })) => {
                    return Err(f)
                }
                Err(_) if temporary => return Ok(()),
                Err(f) => {
                    if self.allow_restart() {
                        self.emit_restart(i);
                    } else {
                        return Err(f);
                    }
                }
            }
        }
    }

    async fn terminate_children(&mut self) {
        if let Some(st) = self.starter.take() {
            let _ = st.cancel.send(true);
            if let Ok(Ok(handle)) = st.task.await {
                handle.terminate().await;
            }
        }
        for slot in self.slots.iter_mut().rev() {
            if let Some(h) = slot.handle.take() {
                h.terminate().await;
            }
        }
    }

    async fn run(
        mut self,
        mut ctl_rx: mpsc::UnboundedReceiver<Ctl>,
        mut rx: mpsc::UnboundedReceiver<SupMsg>,
        link: Link,
    ) {
        loop {
            tokio::select! {
                biased;
                ctl = ctl_rx.recv() => match ctl {
                    Some(Ctl::Crash(ticket)) => {
                        self.shared.emit(EventKind::Crash, &self.path, [("reason", "injected".to_string())]);
                        self.terminate_children().await;
                        self.shared.registry.set_state(&self.path, NodeState::Terminated);
                        link.exit(Some(ticket), None);
                        return;
                    }
                    Some(Ctl::Terminate(done)) => {
                        self.terminate_children().await;
                        self.shared.emit(EventKind::Terminate, &self.path, [("reason", "shutdown".to_string())]);
                        self.shared.registry.set_state(&self.path, NodeState::Terminated);
                        let _ = done.send(());
                        return;
                    }
                    None => {
                        self.terminate_children().await;
                        self.shared.registry.set_state(&self.path, NodeState::Terminated);
                        return;
                    }
                },
                done = async { (&mut self.starter.as_mut().expect("guarded").task).await }, if self.starter.is_some() => {
                    self.starter = None;
                    let flow = match done {
                        Ok(Ok(handle)) => {
                            self.slots[0].incarnation = handle.incarnation;
                            self.slots[0].handle = Some(handle);
                            Flow::Continue
                        }
                        Ok(Err((StartFailure::Deadlock(_), _))) | Err(_) => Flow::Continue,
                        Ok(Err((_, pending))) => self.handle_exit(0, None, Some(pending), &link).await,
                    };
                    if let Flow::Stop = flow {
                        return;
                    }
                }
                Some(SupMsg { slot, incarnation, ticket, pending }) = rx.recv() => {
                    let flow = if self.slot_matches(slot, incarnation) {
                        self.slots[slot].handle = None;
                        self.handle_exit(slot, ticket, pending, &link).await
                    } else {
                        Flow::Continue
                    };
                    if let Flow::Stop = flow {
                        return;
                    }
                }
            }
        }
    }

    fn slot_matches(&self, slot: usize, incarnation: u64) -> bool {
        self.slots
            .get(slot)
            .is_some_and(|s| s.incarnation == incarnation)
    }

    async fn handle_exit(
        &mut self,
        i: usize,
        ticket: Option<CrashTicket>,
        pending: Option<PendingAttach>,
        link: &Link,
    ) -> Flow {
        let child = self.slot_path(i);
        if self.slots[i].spec.restart == Restart::Temporary && !self.is_wrapper() {
            if let Some(t) = ticket {
                t.finish(Handling {
                    supervisor: Some(self.path.clone()),
                    child,
                    action: Action::Removed,
                });
            }
            return Flow::Continue;
        }
        if !self.is_wrapper() && self.allow_restart() {
            self.emit_restart(i);
            let restarted = self.start_slot(i, &Cancel::never()).await;
            // The old attach token is released only once its replacement
            // exists, so quiescence is never observed in between.
            drop(pending);
            match restarted {
                Ok(()) => {
                    if let Some(t) = ticket {
                        t.finish(Handling {
                            supervisor: Some(self.path.clone()),
                            child,
                            action: Action::Restarted,
                        });
                    }
                    Flow::Continue
                }
                Err(_) => self.escalate(child, ticket, None, link).await,
            }
        } else {
            self.escalate(child, ticket, pending, link).await
        }
    }

    async fn escalate(
        &mut self,
        child: NodePath,
        ticket: Option<CrashTicket>,
        pending: Option<PendingAttach>,
        link: &Link,
    ) -> Flow {
        self.shared.emit(
            EventKind::Escalate,
            &self.path,
            [("child", child.to_string())],
        );
        let ticket = ticket.map(|mut t| {
            t.chain.push(Handling {
                supervisor: Some(self.path.clone()),
                child,
                action: Action::Escalated,
            });
            t
        });
        self.terminate_children().await;
        self.shared
            .registry
            .set_state(&self.path, NodeState::Terminated);
        if self.is_wrapper() {
            // Nothing remains to attach under this wrapper incarnation.
            self.slots[0].incarnation = u64::MAX;
        }
        link.exit(ticket, pending);
        Flow::Stop
    }
}

// ---------------------------------------------------------------------------
// public handle

/// A running system: application master, registry, trace, watchdog.
pub struct Runtime {
    shared: Arc<Shared>,
    master_tx: mpsc::UnboundedSender<SupMsg>,
    roots: Arc<Mutex<Vec<(NodePath, Option<ChildHandle>)>>>,
    start: Duration,
    watchdog: JoinHandle<()>,
    master: JoinHandle<()>,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("start", &self.start)
            .finish_non_exhaustive()
    }
}

impl Runtime {
    /// Must be called inside a tokio runtime matching the store's clock.
    pub fn new(store: Arc<ConditionStore>, trace: TraceSink) -> Self {
        let clock = store.clock();
        let (qtx, _) = watch::channel(QState::default());
        let shared = Arc::new(Shared {
            store: Arc::clone(&store),
            trace,
            clock,
            registry: Registry::default(),
            quiescence: Quiescence { tx: qtx },
            incarnations: AtomicU64::new(1),
        });
        let watchdog = store.spawn_watchdog(watchdog_period(store.deadlock_timeout()));
        let (master_tx, master_rx) = mpsc::unbounded_channel();
        let roots: Arc<Mutex<Vec<(NodePath, Option<ChildHandle>)>>> = Arc::default();
        let master = tokio::spawn(application_master(
            Arc::clone(&shared),
            master_rx,
            Arc::clone(&roots),
        ));
        Runtime {
            start: clock.now(),
            shared,
            master_tx,
            roots,
            watchdog,
            master,
        }
    }

    pub fn store(&self) -> &Arc<ConditionStore> {
        &self.shared.store
    }

    pub fn trace(&self) -> &TraceSink {
        &self.shared.trace
    }

    pub fn clock(&self) -> Clock {
        self.shared.clock
    }

    /// Starts a root supervisor (or worker) and waits for its ack. The
    /// root's own start mode is ignored: roots always start sequentially.
    pub async fn start_root(&self, mut spec: ChildSpec) -> Result<NodeRef, StartFailure> {
        spec.start_mode = StartMode::Sequential;
        let slot = {
            let mut roots = self.roots.lock();
            roots.push((NodePath::root(&spec.id), None));
            roots.len() - 1
        };
        let parent = Parent {
            path: None,
            tx: self.master_tx.clone(),
        };
        let handle = start_node(
            Arc::clone(&self.shared),
            parent,
            spec,
            slot,
            Cancel::never(),
        )
        .await?;
        self.shared.quiescence.note(self.shared.clock.now());
        let path = handle.path.clone();
        self.roots.lock()[slot].1 = Some(handle);
        Ok(self.shared.registry.get(&path).expect("registered"))
    }

    /// Waits until every started node acked and every concurrent child is
    /// attached to its wrapper.
    pub async fn await_quiescence(
        &self,
        timeout: Duration,
    ) -> Result<StartupReport, QuiescenceError> {
        let mut rx = self.shared.quiescence.tx.subscribe();
        let waited = tokio::time::timeout(
            timeout,
            rx.wait_for(|s| s.pending == 0 || s.fatal.is_some()),
        )
        .await;
        let state = match waited {
            Ok(Ok(s)) => s.clone(),
            Ok(Err(_)) => unreachable!("sender lives in shared state"),
            Err(_) => {
                let s = self.shared.quiescence.tx.borrow().clone();
                return Err(QuiescenceError::Timeout {
                    timeout,
                    pending: s.pending,
                    running: self.shared.registry.running().len(),
                });
            }
        };
        if let Some(e) = state.fatal {
            return Err(e);
        }
        let running = self.shared.registry.running();
        let wrapper_count = running
            .iter()
            .filter(|(_, k, _)| *k == NodeKind::Wrapper)
            .count();
        Ok(StartupReport {
            duration: state.last_event.saturating_sub(self.start),
            node_count: running.len() - wrapper_count,
            wrapper_count,
        })
    }

    /// Crashes a running node and waits until the supervision chain has
    /// reacted (restart, removal, or application stop).
    pub async fn inject_crash(&self, path: &NodePath) -> CrashReport {
        let not_running = CrashReport {
            outcome: CrashOutcome::NotRunning,
            chain: Vec::new(),
        };
        let Some(ctl) = self.shared.registry.ctl(path) else {
            return not_running;
        };
        let (tx, rx) = oneshot::channel();
        let ticket = CrashTicket {
            chain: Vec::new(),
            reply: tx,
        };
        if ctl.send(Ctl::Crash(ticket)).is_err() {
            return not_running;
        }
        match rx.await {
            Ok(chain) => {
                let outcome = match chain.first().map(|h| h.action) {
                    Some(Action::Restarted) => CrashOutcome::Restarted,
                    Some(Action::Removed) => CrashOutcome::Removed,
                    Some(_) => CrashOutcome::Escalated,
                    None => CrashOutcome::NotRunning,
                };
                CrashReport { outcome, chain }
            }
            Err(_) => not_running,
        }
    }

    pub fn node(&self, path: &NodePath) -> Option<NodeRef> {
        self.shared.registry.get(path)
    }

    /// Live tree shapes, one per root, in start order.
    pub fn tree(&self) -> Vec<TreeNode> {
        let running = self.shared.registry.running();
        let mut by_parent: BTreeMap<Option<NodePath>, Vec<(usize, NodePath, NodeKind)>> =
            BTreeMap::new();
        for (p, k, slot) in running {
            by_parent.entry(p.parent()).or_default().push((slot, p, k));
        }
        for v in by_parent.values_mut() {
            v.sort_by_key(|(slot, _, _)| *slot);
        }
        fn build(
            p: &NodePath,
            k: NodeKind,
            by_parent: &BTreeMap<Option<NodePath>, Vec<(usize, NodePath, NodeKind)>>,
        ) -> TreeNode {
            TreeNode {
                id: p.last().to_string(),
                kind: k,
                children: by_parent
                    .get(&Some(p.clone()))
                    .map(|v| {
                        v.iter()
                            .map(|(_, cp, ck)| build(cp, *ck, by_parent))
                            .collect()
                    })
                    .unwrap_or_default(),
            }
        }
        by_parent
            .get(&None)
            .map(|v| v.iter().map(|(_, p, k)| build(p, *k, &by_parent)).collect())
            .unwrap_or_default()
    }

    /// Terminates every root, last started first.
    pub async fn shutdown(self) {
        let handles: Vec<_> = self
            .roots
            .lock()
            .iter_mut()
            .rev()
            .filter_map(|(_, h)| h.take())
            .collect();
        for h in handles {
            h.terminate().await;
        }
        self.watchdog.abort();
        self.master.abort();
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.watchdog.abort();
    }
}

async fn application_master(
    shared: Arc<Shared>,
    mut rx: mpsc::UnboundedReceiver<SupMsg>,
    roots: Arc<Mutex<Vec<(NodePath, Option<ChildHandle>)>>>,
) {
    while let Some(msg) = rx.recv().await {
        let SupMsg {
            slot,
            ticket,
            pending,
            ..
        } = msg;
        let path = {
            let mut roots = roots.lock();
            roots[slot].1 = None;
            roots[slot].0.clone()
        };
        shared.emit(
            EventKind::Terminate,
            &path,
            [("reason", "application_stopped".to_string())],
        );
        if pending.is_some() {
            shared.quiescence.fatal(QuiescenceError::ApplicationStopped);
        }
        drop(pending);
        if let Some(t) = ticket {
            t.finish(Handling {
                supervisor: None,
                child: path,
                action: Action::ApplicationStopped,
            });
        }
    }
}

/// Starts a supervisor named `root` over `children` and waits for its ack.
pub async fn start_supervisor(
    flags: SupervisorFlags,
    children: Vec<ChildSpec>,
    store: Arc<ConditionStore>,
    trace: TraceSink,
) -> Result<(Runtime, NodeRef), StartFailure> {
    let rt = Runtime::new(store, trace);
    let node = rt
        .start_root(ChildSpec::supervisor(
            "root", "root_sup", "root", flags, children,
        ))
        .await?;
    Ok((rt, node))
}
