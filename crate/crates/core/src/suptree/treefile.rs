//! Text format for supervision trees.
//!
//! ```text
//! # kind  id            module          args            options...
//! supervisor app1_rootsup app1_rootsup [app1] max_restarts=3 max_seconds=5s {
//!   worker app1_server1 generic_server [app1_server1] restart=permanent shutdown=10 mode=concurrent init=sleep:50ms
//!   worker app1_server2 generic_server [app1_server2]
//! }
//! ```
//!
//! Options: `restart=permanent|temporary`, `shutdown=brutal|<duration>`,
//! `mode=sequential|concurrent`, `modules=a,b`, `init=none|sleep:<d>|busy:<d>`,
//! `fail=<n>` (first n init attempts fail), and for supervisors
//! `strategy=one_for_one`, `max_restarts=<n>`, `max_seconds=<d>`. Durations
//! take `us`, `ms` or `s` suffixes; a bare number is milliseconds. A file may
//! hold several root specs.

use std::fmt;
use std::time::Duration;

use thiserror::Error;

use super::spec::*;
use crate::depgraph::{is_args_token, is_identifier, strip_comment, Args};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct TreeParseError {
    pub line: usize,
    pub message: String,
}

pub fn parse_duration(s: &str) -> Result<Duration, String> {
    let (num, unit) = if let Some(n) = s.strip_suffix("us") {
        (n, 1u64)
    } else if let Some(n) = s.strip_suffix("ms") {
        (n, 1_000)
    } else if let Some(n) = s.strip_suffix('s') {
        (n, 1_000_000)
    } else {
        (s, 1_000)
    };
    let v: u64 = num.parse().map_err(|_| format!("bad duration `{s}`"))?;
    Ok(Duration::from_micros(v * unit))
}

pub fn format_duration(d: Duration) -> String {
    let us = d.as_micros();
    if us % 1_000_000 == 0 {
        format!("{}s", us / 1_000_000)
    } else if us % 1_000 == 0 {
        format!("{}ms", us / 1_000)
    } else {
        format!("{us}us")
    }
}

struct Frame {
    spec: ChildSpec,
    line: usize,
}

pub fn parse_tree(source: &str) -> Result<Vec<ChildSpec>, TreeParseError> {
    let mut roots = Vec::new();
    let mut stack: Vec<Frame> = Vec::new();

    for (i, raw) in source.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| TreeParseError {
            line: line_no,
            message,
        };
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if line == "}" {
            let frame = stack.pop().ok_or_else(|| err("unmatched `}`".into()))?;
            match stack.last_mut() {
                Some(parent) => parent
                    .spec
                    .children_mut()
                    .expect("frames are supervisors")
                    .push(frame.spec),
                None => roots.push(frame.spec),
            }
            continue;
        }
        let (body, opens) = match line.strip_suffix('{') {
            Some(b) => (b.trim_end(), true),
            None => (line, false),
        };
        let mut toks = body.split_whitespace();
        let kind = toks.next().unwrap();
        let is_sup = match kind {
            "worker" => false,
            "supervisor" => true,
            other => {
                return Err(err(format!(
                    "expected `worker` or `supervisor`, found `{other}`"
                )))
            }
        };
        if opens && !is_sup {
            return Err(err("only supervisors take a `{` block".into()));
        }
        let id = toks.next().ok_or_else(|| err("missing child id".into()))?;
        let module = toks.next().ok_or_else(|| err("missing module".into()))?;
        let args = toks.next().ok_or_else(|| err("missing `[args]`".into()))?;
        if !is_identifier(id) {
            return Err(err(format!("invalid child id `{id}`")));
        }
        if !is_identifier(module) {
            return Err(err(format!("invalid module `{module}`")));
        }
        let args = args
            .strip_prefix('[')
            .and_then(|a| a.strip_suffix(']'))
            .filter(|a| is_args_token(a))
            .ok_or_else(|| err(format!("args must be a bracketed token, found `{args}`")))?;

        let mut spec = if is_sup {
            ChildSpec::supervisor(id, module, args, SupervisorFlags::default(), Vec::new())
        } else {
            ChildSpec::worker(id, module, args)
        };
        for opt in toks {
            let (k, v) = opt
                .split_once('=')
                .ok_or_else(|| err(format!("option `{opt}` is not key=value")))?;
            apply_option(&mut spec, k, v).map_err(err)?;
        }
        if opens {
            stack.push(Frame {
                spec,
                line: line_no,
            });
        } else {
            match stack.last_mut() {
                Some(parent) => parent
                    .spec
                    .children_mut()
                    .expect("frames are supervisors")
                    .push(spec),
                None => roots.push(spec),
            }
        }
    }
    if let Some(open) = stack.last() {
        return Err(TreeParseError {
            line: open.line,
            message: format!("block of `{}` is never closed", open.spec.id),
        });
    }
    for r in &roots {
        r.validate()
            .map_err(|message| TreeParseError { line: 0, message })?;
    }
    Ok(roots)
}

fn apply_option(spec: &mut ChildSpec, key: &str, value: &str) -> Result<(), String> {
    let sup_only = |spec: &ChildSpec| {
        if spec.is_supervisor() {
            Ok(())
        } else {
            Err(format!("`{key}` applies to supervisors only"))
        }
    };
    match key {
        "restart" => {
            spec.restart = match value {
                "permanent" => Restart::Permanent,
                "temporary" => Restart::Temporary,
                _ => return Err(format!("bad restart `{value}`")),
            }
        }
        "shutdown" => {
            spec.shutdown = match value {
                "brutal" | "brutal_kill" => Shutdown::Brutal,
                d => Shutdown::Timeout(parse_duration(d)?),
            }
        }
        "mode" => {
            spec.start_mode = match value {
                "sequential" => StartMode::Sequential,
                "concurrent" => StartMode::Concurrent,
                _ => return Err(format!("bad mode `{value}`")),
            }
        }
        "modules" => {
            spec.modules = value
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
        }
        "init" => {
            spec.behaviour.cost = match value.split_once(':') {
                None if value == "none" => InitCost::None,
                Some(("sleep", d)) => InitCost::Sleep(parse_duration(d)?),
                Some(("busy", d)) => InitCost::Busy(parse_duration(d)?),
                _ => return Err(format!("bad init `{value}`")),
            }
        }
        "fail" => {
            spec.behaviour.fail_attempts = value
                .parse()
                .map_err(|_| format!("bad fail count `{value}`"))?
        }
        "strategy" => {
            sup_only(spec)?;
            if value != "one_for_one" {
                return Err(format!("unsupported strategy `{value}`"));
            }
        }
        "max_restarts" | "max_seconds" => {
            sup_only(spec)?;
            if let ChildKind::Supervisor { flags, .. } = &mut spec.kind {
                if key == "max_restarts" {
                    flags.max_restarts = value
                        .parse()
                        .map_err(|_| format!("bad max_restarts `{value}`"))?;
                } else {
                    flags.max_seconds = parse_duration(value)?;
                }
            }
        }
        _ => return Err(format!("unknown option `{key}`")),
    }
    Ok(())
}

/// Writes specs in the tree file format. `InitCost::Call` has no textual
/// form and is written as `init=none`.
pub struct TreeFile<'a>(pub &'a [ChildSpec]);

impl fmt::Display for TreeFile<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in self.0 {
            write_spec(f, r, 0)?;
        }
        Ok(())
    }
}

fn write_spec(f: &mut fmt::Formatter<'_>, s: &ChildSpec, indent: usize) -> fmt::Result {
    let pad = "  ".repeat(indent);
    let kind = if s.is_supervisor() {
        "supervisor"
    } else {
        "worker"
    };
    write!(
        f,
        "{pad}{kind} {} {} {}",
        s.id,
        s.module,
        Args::to_string(&s.args)
    )?;
    if s.restart == Restart::Temporary {
        write!(f, " restart=temporary")?;
    }
    let default_shutdown = if s.is_supervisor() {
        Shutdown::Brutal
    } else {
        Shutdown::Timeout(Duration::from_millis(5000))
    };
    if s.shutdown != default_shutdown {
        match s.shutdown {
            Shutdown::Brutal => write!(f, " shutdown=brutal")?,
            Shutdown::Timeout(d) => write!(f, " shutdown={}", format_duration(d))?,
        }
    }
    if s.start_mode == StartMode::Concurrent {
        write!(f, " mode=concurrent")?;
    }
    if s.modules != [s.module.clone()] {
        write!(f, " modules={}", s.modules.join(","))?;
    }
    match &s.behaviour.cost {
        InitCost::Sleep(d) => write!(f, " init=sleep:{}", format_duration(*d))?,
        InitCost::Busy(d) => write!(f, " init=busy:{}", format_duration(*d))?,
        InitCost::None | InitCost::Call(_) => {}
    }
    if s.behaviour.fail_attempts > 0 {
        write!(f, " fail={}", s.behaviour.fail_attempts)?;
    }
    match &s.kind {
        ChildKind::Worker => writeln!(f),
        ChildKind::Supervisor { flags, children } => {
            let d = SupervisorFlags::default();
            if flags.max_restarts != d.max_restarts {
                write!(f, " max_restarts={}", flags.max_restarts)?;
            }
            if flags.max_seconds != d.max_seconds {
                write!(f, " max_seconds={}", format_duration(flags.max_seconds))?;
            }
            writeln!(f, " {{")?;
            for c in children {
                write_spec(f, c, indent + 1)?;
            }
            writeln!(f, "{pad}}}")
        }
    }
}
