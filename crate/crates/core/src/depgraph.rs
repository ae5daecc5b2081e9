//! Startup dependency graph: conditions (vertices), condition groups, and
//! preconditions (edges), plus the `.rgraph` text format.
//!
//! A condition names the completed startup of one module instance. A module
//! instance is identified by a [`ModuleKey`]; a key without arguments is a
//! wildcard that stands for the module started with any arguments.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

/// Opaque argument term. Compared by exact string equality only.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Args(String);

impl Args {
    pub fn new(token: impl Into<String>) -> Self {
        Args(token.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Args {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.0)
    }
}

/// A module name plus optional arguments. `args == None` is the wildcard.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModuleKey {
    pub module: String,
    pub args: Option<Args>,
}

impl ModuleKey {
    pub fn exact(module: impl Into<String>, args: impl Into<String>) -> Self {
        ModuleKey {
            module: module.into(),
            args: Some(Args::new(args)),
        }
    }

    pub fn wildcard(module: impl Into<String>) -> Self {
        ModuleKey {
            module: module.into(),
            args: None,
        }
    }

    pub fn is_wildcard(&self) -> bool {
        self.args.is_none()
    }

    /// True when both keys may denote the same running instance: same module,
    /// and either side is a wildcard or the arguments are equal.
    pub fn overlaps(&self, other: &ModuleKey) -> bool {
        self.module == other.module
            && match (&self.args, &other.args) {
                (Some(a), Some(b)) => a == b,
                _ => true,
            }
    }

    /// True when this declared key applies to the instance `(module, args)`.
    pub fn covers(&self, module: &str, args: &Args) -> bool {
        self.module == module && self.args.as_ref().is_none_or(|a| a == args)
    }
}

impl fmt::Display for ModuleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.args {
            Some(a) => write!(f, "{} {}", self.module, a),
            None => write!(f, "{} *", self.module),
        }
    }
}

/// Name of a condition or of a condition group. Both share one namespace.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConditionName(String);

impl ConditionName {
    pub fn new(name: impl Into<String>) -> Self {
        ConditionName(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConditionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ConditionName {
    fn from(s: &str) -> Self {
        ConditionName(s.to_string())
    }
}

impl std::borrow::Borrow<str> for ConditionName {
    fn borrow(&self) -> &str {
        &self.0
    }
}

pub type ConditionSet = BTreeSet<ConditionName>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Location {
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: &'static str,
    pub message: String,
    pub location: Option<Location>,
}

impl Diagnostic {
    pub fn error(
        code: &'static str,
        message: impl Into<String>,
        location: Option<Location>,
    ) -> Self {
        Diagnostic {
            severity: Severity::Error,
            code,
            message: message.into(),
            location,
        }
    }

    pub fn warning(
        code: &'static str,
        message: impl Into<String>,
        location: Option<Location>,
    ) -> Self {
        Diagnostic {
            severity: Severity::Warning,
            code,
            message: message.into(),
            location,
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        match self.location {
            Some(loc) => write!(f, "{loc}: {sev}[{}]: {}", self.code, self.message),
            None => write!(f, "{sev}[{}]: {}", self.code, self.message),
        }
    }
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(Diagnostic::is_error)
}

#[derive(Clone, Debug)]
pub struct ConditionDecl {
    pub key: ModuleKey,
    pub name: ConditionName,
    pub location: Option<Location>,
}

#[derive(Clone, Debug)]
pub struct ConditionGroup {
    pub name: ConditionName,
    pub members: Vec<ConditionName>,
    pub location: Option<Location>,
}

#[derive(Clone, Debug)]
pub struct PreconditionDecl {
    pub key: ModuleKey,
    pub names: Vec<ConditionName>,
    pub location: Option<Location>,
}

// Source locations do not take part in equality.
impl PartialEq for ConditionDecl {
    fn eq(&self, o: &Self) -> bool {
        self.key == o.key && self.name == o.name
    }
}
impl PartialEq for ConditionGroup {
    fn eq(&self, o: &Self) -> bool {
        self.name == o.name && self.members == o.members
    }
}
impl PartialEq for PreconditionDecl {
    fn eq(&self, o: &Self) -> bool {
        self.key == o.key && self.names == o.names
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DependencyGraph {
    pub conditions: Vec<ConditionDecl>,
    pub groups: Vec<ConditionGroup>,
    pub preconditions: Vec<PreconditionDecl>,
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

pub(crate) fn is_args_token(s: &str) -> bool {
    let mut depth = 0i32;
    for c in s.chars() {
        if c.is_whitespace() || c == '#' {
            return false;
        }
        match c {
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

impl DependencyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn condition(mut self, key: ModuleKey, name: &str) -> Self {
        self.conditions.push(ConditionDecl {
            key,
            name: name.into(),
            location: None,
        });
        self
    }

    pub fn group(mut self, name: &str, members: &[&str]) -> Self {
        self.groups.push(ConditionGroup {
            name: name.into(),
            members: members.iter().map(|m| ConditionName::from(*m)).collect(),
            location: None,
        });
        self
    }

    pub fn precondition(mut self, key: ModuleKey, names: &[&str]) -> Self {
        self.preconditions.push(PreconditionDecl {
            key,
            names: names.iter().map(|m| ConditionName::from(*m)).collect(),
            location: None,
        });
        self
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty() && self.groups.is_empty() && self.preconditions.is_empty()
    }

    /// Every problem that makes the graph unusable, plus warnings.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();

        let check_key = |key: &ModuleKey, loc: Option<Location>, out: &mut Vec<Diagnostic>| {
            if !is_identifier(&key.module) {
                out.push(Diagnostic::error(
                    "malformed-key",
                    format!("invalid module name `{}`", key.module),
                    loc,
                ));
            }
            if let Some(a) = &key.args {
                if !is_args_token(a.as_str()) {
                    out.push(Diagnostic::error(
                        "malformed-key",
                        format!("invalid argument token `{}`", a.as_str()),
                        loc,
                    ));
                }
            }
        };

        let mut cond_names: HashMap<&str, Option<Location>> = HashMap::new();
        let mut cond_keys: HashSet<&ModuleKey> = HashSet::new();
        for c in &self.conditions {
            check_key(&c.key, c.location, &mut out);
            if !is_identifier(c.name.as_str()) {
                out.push(Diagnostic::error(
                    "malformed-name",
                    format!("invalid condition name `{}`", c.name),
                    c.location,
                ));
            }
            if cond_names.insert(c.name.as_str(), c.location).is_some() {
                out.push(Diagnostic::error(
                    "duplicate-condition",
                    format!("condition `{}` declared more than once", c.name),
                    c.location,
                ));
            }
            if !cond_keys.insert(&c.key) {
                out.push(Diagnostic::error(
                    "duplicate-module-key",
                    format!("module key `{}` declares more than one condition", c.key),
                    c.location,
                ));
            }
        }

        let mut group_names: HashSet<&str> = HashSet::new();
        for g in &self.groups {
            if !is_identifier(g.name.as_str()) {
                out.push(Diagnostic::error(
                    "malformed-name",
                    format!("invalid group name `{}`", g.name),
                    g.location,
                ));
            }
            if cond_names.contains_key(g.name.as_str()) {
                out.push(Diagnostic::error(
                    "name-collision",
                    format!("`{}` is both a condition and a group", g.name),
                    g.location,
                ));
            }
            if !group_names.insert(g.name.as_str()) {
                out.push(Diagnostic::error(
                    "duplicate-group",
                    format!("group `{}` declared more than once", g.name),
                    g.location,
                ));
            }
            if g.members.is_empty() {
                out.push(Diagnostic::error(
                    "empty-group",
                    format!("group `{}` has no members", g.name),
                    g.location,
                ));
            }
            let mut seen = HashSet::new();
            for m in &g.members {
                if !seen.insert(m) {
                    out.push(Diagnostic::warning(
                        "duplicate-member",
                        format!("`{m}` listed twice in group `{}`", g.name),
                        g.location,
                    ));
                }
            }
        }
        // Group membership is checked after all group names are known so that
        // nesting is reported as such regardless of declaration order.
        for g in &self.groups {
            for m in &g.members {
                if cond_names.contains_key(m.as_str()) {
                    continue;
                }
                if group_names.contains(m.as_str()) {
                    out.push(Diagnostic::error(
                        "nested-group",
                        format!("group `{}` contains group `{m}`; groups are flat", g.name),
                        g.location,
                    ));
                } else {
                    out.push(Diagnostic::error(
                        "unknown-name",
                        format!("group `{}` refers to undeclared condition `{m}`", g.name),
                        g.location,
                    ));
                }
            }
        }

        let mut pre_keys: HashSet<&ModuleKey> = HashSet::new();
        for p in &self.preconditions {
            check_key(&p.key, p.location, &mut out);
            if p.names.is_empty() {
                out.push(Diagnostic::error(
                    "empty-precondition-list",
                    format!("precondition entry for `{}` lists no names", p.key),
                    p.location,
                ));
            }
            if !pre_keys.insert(&p.key) {
                out.push(Diagnostic::warning(
                    "duplicate-precondition-key",
                    format!(
                        "`{}` has more than one precondition entry; lists are merged",
                        p.key
                    ),
                    p.location,
                ));
            }
            let mut seen = HashSet::new();
            for n in &p.names {
                if !cond_names.contains_key(n.as_str()) && !group_names.contains(n.as_str()) {
                    out.push(Diagnostic::error(
                        "unknown-name",
                        format!(
                            "precondition of `{}` refers to undeclared name `{n}`",
                            p.key
                        ),
                        p.location,
                    ));
                }
                if !seen.insert(n) {
                    out.push(Diagnostic::warning(
                        "duplicate-member",
                        format!("`{n}` listed twice in precondition of `{}`", p.key),
                        p.location,
                    ));
                }
            }
        }
        out
    }

    /// Validate and freeze.
    pub fn freeze(self) -> Result<ValidGraph, Vec<Diagnostic>> {
        let diags = self.validate();
        if has_errors(&diags) {
            return Err(diags);
        }
        Ok(ValidGraph(Arc::new(self)))
    }

    fn find_group(&self, name: &str) -> Option<&ConditionGroup> {
        self.groups.iter().find(|g| g.name.as_str() == name)
    }

    fn expand_into(&self, names: &[ConditionName], out: &mut ConditionSet) {
        for n in names {
            match self.find_group(n.as_str()) {
                Some(g) => out.extend(g.members.iter().cloned()),
                None => {
                    out.insert(n.clone());
                }
            }
        }
    }

    /// Conditions the instance `key` must observe as true before its init
    /// runs. Exact and wildcard entries are unioned; groups are expanded.
    pub fn expand_preconditions(&self, key: &ModuleKey) -> ConditionSet {
        let mut out = ConditionSet::new();
        for p in &self.preconditions {
            let applies = p.key == *key || (p.key.module == key.module && p.key.is_wildcard());
            if applies {
                self.expand_into(&p.names, &mut out);
            }
        }
        out
    }

    /// Conditions satisfied by a completed init of `(module, args)`.
    pub fn conditions_set_by(&self, module: &str, args: &Args) -> ConditionSet {
        self.conditions
            .iter()
            .filter(|c| c.key.covers(module, args))
            .map(|c| c.name.clone())
            .collect()
    }

    /// Module keys in first-appearance order (conditions first).
    pub fn module_keys(&self) -> Vec<ModuleKey> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let all = self
            .conditions
            .iter()
            .map(|c| &c.key)
            .chain(self.preconditions.iter().map(|p| &p.key));
        for k in all {
            if seen.insert(k.clone()) {
                out.push(k.clone());
            }
        }
        out
    }

    /// Checks the module-level wait graph for cycles. An edge `Y -> X` exists
    /// when `X` waits on a condition declared by `Y`; wildcard keys stand for
    /// every overlapping key of the same module on both ends.
    pub fn cycle_check(&self) -> Result<(), Vec<ModuleKey>> {
        let vertices = self.module_keys();
        let n = vertices.len();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        let overlapping =
            |k: &ModuleKey| -> Vec<usize> { (0..n).filter(|&i| vertices[i].overlaps(k)).collect() };
        for p in &self.preconditions {
            let mut expanded = ConditionSet::new();
            self.expand_into(&p.names, &mut expanded);
            let waiters = overlapping(&p.key);
            for c in &self.conditions {
                if !expanded.contains(&c.name) {
                    continue;
                }
                for u in overlapping(&c.key) {
                    for &v in &waiters {
                        if !adj[u].contains(&v) {
                            adj[u].push(v);
                        }
                    }
                }
            }
        }

        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        let mut mark = vec![Mark::New; n];
        for start in 0..n {
            if mark[start] != Mark::New {
                continue;
            }
            // Iterative DFS; `stack` holds (vertex, next edge index).
            let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
            mark[start] = Mark::Active;
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                if *next < adj[v].len() {
                    let w = adj[v][*next];
                    *next += 1;
                    match mark[w] {
                        Mark::New => {
                            mark[w] = Mark::Active;
                            stack.push((w, 0));
                        }
                        Mark::Active => {
                            let pos = stack.iter().position(|&(x, _)| x == w).unwrap();
                            return Err(stack[pos..]
                                .iter()
                                .map(|&(x, _)| vertices[x].clone())
                                .collect());
                        }
                        Mark::Done => {}
                    }
                } else {
                    mark[v] = Mark::Done;
                    stack.pop();
                }
            }
        }
        Ok(())
    }
}

/// A validated, read-only dependency graph. Cheap to clone and share.
#[derive(Clone, Debug)]
pub struct ValidGraph(Arc<DependencyGraph>);

impl Deref for ValidGraph {
    type Target = DependencyGraph;
    fn deref(&self) -> &DependencyGraph {
        &self.0
    }
}

impl ValidGraph {
    pub fn empty() -> Self {
        ValidGraph(Arc::new(DependencyGraph::default()))
    }
}

impl fmt::Display for DependencyGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |names: &[ConditionName]| {
            names
                .iter()
                .map(|n| n.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        };
        if !self.conditions.is_empty() {
            writeln!(f, "[conditions]")?;
            for c in &self.conditions {
                writeln!(f, "{} -> {}", c.key, c.name)?;
            }
        }
        if !self.groups.is_empty() {
            writeln!(f, "[groups]")?;
            for g in &self.groups {
                writeln!(f, "{} = {}", g.name, join(&g.members))?;
            }
        }
        if !self.preconditions.is_empty() {
            writeln!(f, "[preconditions]")?;
            for p in &self.preconditions {
                writeln!(f, "{} <- {}", p.key, join(&p.names))?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// .rgraph parser

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Section {
    Conditions,
    Groups,
    Preconditions,
}

#[derive(Debug, PartialEq)]
enum Tok<'a> {
    Ident(&'a str),
    Args(&'a str),
    Star,
    Arrow,
    BackArrow,
    Eq,
    Comma,
    Bad(char),
}

struct Lexed<'a> {
    toks: Vec<(Tok<'a>, usize)>,
    unterminated: Option<usize>,
}

/// Splits one line (comment already stripped) into tokens with 1-based columns.
fn lex(line: &str) -> Lexed<'_> {
    let bytes = line.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    let mut unterminated = None;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let col = line[..i].chars().count() + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c == '[' {
            let mut depth = 0;
            let mut j = i;
            while j < bytes.len() {
                match bytes[j] {
                    b'[' => depth += 1,
                    b']' => {
                        depth -= 1;
                        if depth == 0 {
                            break;
                        }
                    }
                    _ => {}
                }
                j += 1;
            }
            if j >= bytes.len() {
                unterminated = Some(col);
                break;
            }
            toks.push((Tok::Args(&line[i + 1..j]), col));
            i = j + 1;
        } else if c == '*' {
            toks.push((Tok::Star, col));
            i += 1;
        } else if c == '=' {
            toks.push((Tok::Eq, col));
            i += 1;
        } else if c == ',' {
            toks.push((Tok::Comma, col));
            i += 1;
        } else if line[i..].starts_with("->") {
            toks.push((Tok::Arrow, col));
            i += 2;
        } else if line[i..].starts_with("<-") {
            toks.push((Tok::BackArrow, col));
            i += 2;
        } else if c.is_ascii_alphanumeric() || c == '_' {
            let start = i;
            while i < bytes.len() {
                let d = bytes[i] as char;
                if d.is_ascii_alphanumeric() || d == '_' || d == '.' {
                    i += 1;
                } else {
                    break;
                }
            }
            toks.push((Tok::Ident(&line[start..i]), col));
        } else {
            let ch = line[i..].chars().next().unwrap();
            toks.push((Tok::Bad(ch), col));
            i += ch.len_utf8();
        }
    }
    Lexed { toks, unterminated }
}

/// Removes a `#` comment that is not inside an argument token.
pub(crate) fn strip_comment(line: &str) -> &str {
    let mut depth = 0i32;
    for (i, c) in line.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            '#' if depth <= 0 => return &line[..i],
            _ => {}
        }
    }
    line
}

struct LineParser<'a> {
    toks: Vec<(Tok<'a>, usize)>,
    pos: usize,
    line: usize,
    end_col: usize,
}

impl<'a> LineParser<'a> {
    fn loc(&self) -> Location {
        let column = self.toks.get(self.pos).map(|t| t.1).unwrap_or(self.end_col);
        Location {
            line: self.line,
            column,
        }
    }

    fn peek(&self) -> Option<&Tok<'a>> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn next(&mut self) -> Option<&Tok<'a>> {
        let t = self.toks.get(self.pos).map(|t| &t.0);
        self.pos += 1;
        t
    }

    fn err(&self, code: &'static str, msg: impl Into<String>) -> Diagnostic {
        Diagnostic::error(code, msg, Some(self.loc()))
    }

    fn ident(&mut self, what: &str) -> Result<&'a str, Diagnostic> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = *s;
                if !is_identifier(s) {
                    return Err(self.err("syntax", format!("`{s}` is not a valid {what}")));
                }
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.err("syntax", format!("expected {what}"))),
        }
    }

    fn key(&mut self) -> Result<ModuleKey, Diagnostic> {
        let module = match self.peek() {
            Some(Tok::Ident(s)) if is_identifier(s) => *s,
            _ => return Err(self.err("malformed-key", "expected module name")),
        };
        self.pos += 1;
        match self.peek() {
            Some(Tok::Star) => {
                self.pos += 1;
                Ok(ModuleKey::wildcard(module))
            }
            Some(Tok::Args(a)) => {
                let a = *a;
                self.pos += 1;
                Ok(ModuleKey::exact(module, a.trim()))
            }
            _ => Err(self.err(
                "malformed-key",
                "expected `[args]` or `*` after module name",
            )),
        }
    }

    fn expect(&mut self, want: Tok<'static>, text: &str) -> Result<(), Diagnostic> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err("syntax", format!("expected `{text}`")))
        }
    }

    fn name_list(&mut self, empty_code: &'static str) -> Result<Vec<ConditionName>, Diagnostic> {
        let mut names = Vec::new();
        if self.peek().is_none() {
            return Err(self.err(empty_code, "empty name list"));
        }
        loop {
            names.push(ConditionName::new(self.ident("name")?));
            match self.next() {
                None => break,
                Some(Tok::Comma) => continue,
                Some(_) => {
                    self.pos -= 1;
                    return Err(self.err("syntax", "expected `,` or end of line"));
                }
            }
        }
        Ok(names)
    }

    fn finish(&self) -> Result<(), Diagnostic> {
        if self.pos < self.toks.len() {
            Err(self.err("syntax", "unexpected trailing input"))
        } else {
            Ok(())
        }
    }
}

/// Parses the file grammar without semantic validation.
pub fn parse_unvalidated(source: &str) -> Result<DependencyGraph, Vec<Diagnostic>> {
    let mut graph = DependencyGraph::default();
    let mut diags = Vec::new();
    let mut section: Option<Section> = None;
    let mut seen_sections: Vec<Section> = Vec::new();

    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw);
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let lead = line.len() - line.trim_start().len();
        let col0 = line[..lead].chars().count() + 1;

        if trimmed.starts_with('[') && trimmed.ends_with(']') {
            let inner = trimmed[1..trimmed.len() - 1].trim();
            let loc = Some(Location {
                line: line_no,
                column: col0,
            });
            let sec = match inner {
                "conditions" => Section::Conditions,
                "groups" => Section::Groups,
                "preconditions" => Section::Preconditions,
                other => {
                    diags.push(Diagnostic::error(
                        "unknown-section",
                        format!("unknown section `[{other}]`"),
                        loc,
                    ));
                    section = None;
                    continue;
                }
            };
            if seen_sections.contains(&sec) {
                diags.push(Diagnostic::error(
                    "duplicate-section",
                    format!("section `[{inner}]` appears more than once"),
                    loc,
                ));
            }
            seen_sections.push(sec);
            section = Some(sec);
            continue;
        }

        let lexed = lex(line);
        if let Some(col) = lexed.unterminated {
            diags.push(Diagnostic::error(
                "malformed-key",
                "unterminated `[` argument token",
                Some(Location {
                    line: line_no,
                    column: col,
                }),
            ));
            continue;
        }
        if let Some((Tok::Bad(c), col)) = lexed.toks.iter().find(|t| matches!(t.0, Tok::Bad(_))) {
            diags.push(Diagnostic::error(
                "syntax",
                format!("unexpected character `{c}`"),
                Some(Location {
                    line: line_no,
                    column: *col,
                }),
            ));
            continue;
        }
        let mut p = LineParser {
            toks: lexed.toks,
            pos: 0,
            line: line_no,
            end_col: line.chars().count() + 1,
        };
        let loc = Some(Location {
            line: line_no,
            column: col0,
        });
        let result = match section {
            None => Err(Diagnostic::error(
                "entry-outside-section",
                "entry before any section header",
                loc,
            )),
            Some(Section::Conditions) => (|| {
                let key = p.key()?;
                p.expect(Tok::Arrow, "->")?;
                let name = ConditionName::new(p.ident("condition name")?);
                p.finish()?;
                graph.conditions.push(ConditionDecl {
                    key,
                    name,
                    location: loc,
                });
                Ok(())
            })(),
            Some(Section::Groups) => (|| {
                let name = ConditionName::new(p.ident("group name")?);
                p.expect(Tok::Eq, "=")?;
                let members = p.name_list("empty-group")?;
                graph.groups.push(ConditionGroup {
                    name,
                    members,
                    location: loc,
                });
                Ok(())
            })(),
            Some(Section::Preconditions) => (|| {
                let key = p.key()?;
                p.expect(Tok::BackArrow, "<-")?;
                let names = p.name_list("empty-precondition-list")?;
                graph.preconditions.push(PreconditionDecl {
                    key,
                    names,
                    location: loc,
                });
                Ok(())
            })(),
        };
        if let Err(d) = result {
            diags.push(d);
        }
    }

    if diags.is_empty() {
        Ok(graph)
    } else {
        Err(diags)
    }
}

/// Parses and validates a release graph. Warnings are not returned on
/// success; call [`DependencyGraph::validate`] to see them.
pub fn parse_release_graph(source: &str) -> Result<DependencyGraph, Vec<Diagnostic>> {
    let graph = parse_unvalidated(source)?;
    let diags = graph.validate();
    if has_errors(&diags) {
        Err(diags)
    } else {
        Ok(graph)
    }
}
