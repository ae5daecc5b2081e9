//! Startup trace events and the line-delimited trace format.
//!
//! One event per line: `seq ts_us kind node key=value...`. `seq` is a global
//! emission counter, `ts_us` the clock reading in microseconds. Values never
//! contain whitespace.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use crate::clock::Clock;
use crate::depgraph::ConditionSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    ServerStart,
    StartRequest,
    WaitBegin,
    WaitEnd,
    InitBegin,
    InitEnd,
    ConditionSet,
    Ack,
    Attach,
    Crash,
    Restart,
    Escalate,
    Terminate,
    Deadlock,
}

impl EventKind {
    pub const ALL: [EventKind; 14] = [
        EventKind::ServerStart,
        EventKind::StartRequest,
        EventKind::WaitBegin,
        EventKind::WaitEnd,
        EventKind::InitBegin,
        EventKind::InitEnd,
        EventKind::ConditionSet,
        EventKind::Ack,
        EventKind::Attach,
        EventKind::Crash,
        EventKind::Restart,
        EventKind::Escalate,
        EventKind::Terminate,
        EventKind::Deadlock,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::ServerStart => "server_start",
            EventKind::StartRequest => "start_request",
            EventKind::WaitBegin => "wait_begin",
            EventKind::WaitEnd => "wait_end",
            EventKind::InitBegin => "init_begin",
            EventKind::InitEnd => "init_end",
            EventKind::ConditionSet => "condition_set",
            EventKind::Ack => "ack",
            EventKind::Attach => "attach",
            EventKind::Crash => "crash",
            EventKind::Restart => "restart",
            EventKind::Escalate => "escalate",
            EventKind::Terminate => "terminate",
            EventKind::Deadlock => "deadlock",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or(())
    }
}

/// Path of child ids from a root supervisor. Wrapper nodes use the segment
/// `<child id>@wrapper`; the condition server is `/@condition_server`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodePath(Vec<String>);

pub const WRAPPER_SUFFIX: &str = "@wrapper";

impl NodePath {
    pub fn root(id: &str) -> Self {
        NodePath(vec![id.to_string()])
    }

    pub fn condition_server() -> Self {
        NodePath(vec!["@condition_server".to_string()])
    }

    pub fn child(&self, id: &str) -> Self {
        let mut v = self.0.clone();
        v.push(id.to_string());
        NodePath(v)
    }

    pub fn wrapper_for(&self, child_id: &str) -> Self {
        self.child(&format!("{child_id}{WRAPPER_SUFFIX}"))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn parent(&self) -> Option<NodePath> {
        if self.0.len() <= 1 {
            None
        } else {
            Some(NodePath(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    pub fn last(&self) -> &str {
        self.0.last().map(String::as_str).unwrap_or("")
    }

    pub fn is_wrapper(&self) -> bool {
        self.last().ends_with(WRAPPER_SUFFIX)
    }

    pub fn depth(&self) -> usize {
        self.0.len().saturating_sub(1)
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.0 {
            write!(f, "/{s}")?;
        }
        Ok(())
    }
}

impl FromStr for NodePath {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let rest = s
            .strip_prefix('/')
            .ok_or_else(|| format!("node path `{s}` must start with `/`"))?;
        let segs: Vec<String> = rest.split('/').map(str::to_string).collect();
        if segs.iter().any(String::is_empty) {
            return Err(format!("node path `{s}` has an empty segment"));
        }
        Ok(NodePath(segs))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub ts: Duration,
    pub kind: EventKind,
    pub node: NodePath,
    pub detail: Vec<(String, String)>,
}

impl TraceEvent {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.detail
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Comma-separated list value; empty when absent.
    pub fn list(&self, key: &str) -> Vec<&str> {
        match self.get(key) {
            Some("") | None => Vec::new(),
            Some(v) => v.split(',').collect(),
        }
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.seq,
            self.ts.as_micros(),
            self.kind,
            self.node
        )?;
        for (k, v) in &self.detail {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

pub fn join_conditions(set: &ConditionSet) -> String {
    set.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("trace line {line}: {message}")]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

pub fn parse_trace(source: &str) -> Result<Vec<TraceEvent>, TraceParseError> {
    let mut out = Vec::new();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| TraceParseError {
            line: i + 1,
            message,
        };
        let mut fields = line.split_whitespace();
        let mut next = |what: &str| fields.next().ok_or_else(|| err(format!("missing {what}")));
        let seq = next("seq")?
            .parse::<u64>()
            .map_err(|e| err(format!("bad seq: {e}")))?;
        let ts = next("ts")?
            .parse::<u64>()
            .map_err(|e| err(format!("bad ts: {e}")))?;
        let kind_s = next("kind")?;
        let kind = kind_s
            .parse::<EventKind>()
            .map_err(|_| err(format!("unknown kind `{kind_s}`")))?;
        let node = next("node")?.parse::<NodePath>().map_err(err)?;
        let mut detail = Vec::new();
        for kv in fields {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| err(format!("detail `{kv}` is not key=value")))?;
            detail.push((k.to_string(), v.to_string()));
        }
        out.push(TraceEvent {
            seq,
            ts: Duration::from_micros(ts),
            kind,
            node,
            detail,
        });
    }
    Ok(out)
}

pub fn format_trace(events: &[TraceEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&e.to_string());
        s.push('\n');
    }
    s
}

/// Shared append-only event sink. Sequence numbers and timestamps are taken
/// under one lock, so `ts` is non-decreasing in `seq` order.
#[derive(Clone)]
pub struct TraceSink {
    clock: Clock,
    events: Arc<Mutex<Vec<TraceEvent>>>,
}

impl TraceSink {
    pub fn new(clock: Clock) -> Self {
        TraceSink {
            clock,
            events: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn emit<K, V, I>(&self, kind: EventKind, node: &NodePath, detail: I)
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let detail = detail
            .into_iter()
            .map(|(k, v)| (k.into(), v.into()))
            .collect();
        let mut events = self.events.lock();
        let seq = events.len() as u64;
        events.push(TraceEvent {
            seq,
            ts: self.clock.now(),
            kind,
            node: node.clone(),
            detail,
        });
    }

    pub fn snapshot(&self) -> Vec<TraceEvent> {
        self.events.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.events.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format_round_trip() {
        let e = TraceEvent {
            seq: 7,
            ts: Duration::from_micros(150_000),
            kind: EventKind::ConditionSet,
            node: NodePath::root("app1_rootsup").wrapper_for("s1").child("s1"),
            detail: vec![
                ("conds".into(), "a,b".into()),
                ("module".into(), "m".into()),
            ],
        };
        let line = e.to_string();
        assert_eq!(
            line,
            "7 150000 condition_set /app1_rootsup/s1@wrapper/s1 conds=a,b module=m"
        );
        let parsed = parse_trace(&line).unwrap();
        assert_eq!(parsed, vec![e.clone()]);
        assert_eq!(parsed[0].list("conds"), vec!["a", "b"]);
        assert!(parsed[0].node.parent().unwrap().is_wrapper());
    }

    #[test]
    fn malformed_lines() {
        assert!(parse_trace("x 0 ack /a").is_err());
        assert!(parse_trace("0 0 bogus /a").is_err());
        assert!(parse_trace("0 0 ack a").is_err());
        assert!(parse_trace("0 0 ack /a nokv").is_err());
        assert_eq!(parse_trace("# header\n\n").unwrap(), vec![]);
    }
}
