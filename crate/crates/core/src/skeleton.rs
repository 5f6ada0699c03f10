//! Processes, local states, guarded commands and synchronization skeletons.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Process identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pid(pub String);

impl Pid {
    pub fn new(s: impl Into<String>) -> Self {
        Pid(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Pid {
    fn from(s: &str) -> Self {
        Pid(s.to_string())
    }
}

/// An atomic proposition owned by one process.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PropRef {
    pub owner: Pid,
    pub name: String,
}

impl PropRef {
    pub fn new(owner: impl Into<Pid>, name: impl Into<String>) -> Self {
        PropRef { owner: owner.into(), name: name.into() }
    }
}

impl From<String> for Pid {
    fn from(s: String) -> Self {
        Pid(s)
    }
}

impl fmt::Display for PropRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.owner, self.name)
    }
}

/// Values of shared variables, keyed by variable name.
pub type Valuation = BTreeMap<String, String>;

/// A local state: a total assignment over the owner's propositions.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LocalState {
    pub owner: Pid,
    pub assignment: BTreeMap<String, bool>,
}

impl LocalState {
    /// Builds the state over `props` in which exactly `true_props` hold.
    pub fn from_true(owner: impl Into<Pid>, props: &[String], true_props: &[&str]) -> Self {
        let assignment = props
            .iter()
            .map(|p| (p.clone(), true_props.contains(&p.as_str())))
            .collect();
        LocalState { owner: owner.into(), assignment }
    }

    pub fn holds(&self, prop: &str) -> Option<bool> {
        self.assignment.get(prop).copied()
    }

    pub fn true_props(&self) -> Vec<&str> {
        self.assignment.iter().filter(|(_, v)| **v).map(|(k, _)| k.as_str()).collect()
    }

    /// Short rendering such as `[dn st]`, used in reports and DOT output.
    pub fn label(&self) -> String {
        let t = self.true_props();
        if t.len() == 1 {
            t[0].to_string()
        } else {
            format!("[{}]", t.join(" "))
        }
    }
}

impl fmt::Display for LocalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.owner, self.label())
    }
}

/// A variable shared by exactly one pair of processes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedVar {
    pub name: String,
    pub pair: (Pid, Pid),
    pub domain: Vec<String>,
    pub initial: String,
}

impl SharedVar {
    pub fn belongs_to(&self, a: &Pid, b: &Pid) -> bool {
        (&self.pair.0 == a && &self.pair.1 == b) || (&self.pair.0 == b && &self.pair.1 == a)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GuardExpr {
    True,
    False,
    Prop(PropRef),
    VarEq { var: String, value: String },
    Not(Box<GuardExpr>),
    And(Vec<GuardExpr>),
    Or(Vec<GuardExpr>),
}

impl GuardExpr {
    pub fn prop(owner: &str, name: &str) -> Self {
        GuardExpr::Prop(PropRef::new(owner, name))
    }

    pub fn not(g: GuardExpr) -> Self {
        GuardExpr::Not(Box::new(g))
    }

    pub fn and(gs: Vec<GuardExpr>) -> Self {
        GuardExpr::And(gs)
    }

    pub fn or(gs: Vec<GuardExpr>) -> Self {
        GuardExpr::Or(gs)
    }

    pub fn eq(var: &str, value: &str) -> Self {
        GuardExpr::VarEq { var: var.to_string(), value: value.to_string() }
    }

    /// Propositions referenced by the guard.
    pub fn props(&self) -> BTreeSet<PropRef> {
        let mut out = BTreeSet::new();
        self.walk(&mut |g| {
            if let GuardExpr::Prop(p) = g {
                out.insert(p.clone());
            }
        });
        out
    }

    /// Shared variables referenced by the guard, with the values compared against.
    pub fn vars(&self) -> BTreeSet<(String, String)> {
        let mut out = BTreeSet::new();
        self.walk(&mut |g| {
            if let GuardExpr::VarEq { var, value } = g {
                out.insert((var.clone(), value.clone()));
            }
        });
        out
    }

    fn walk(&self, f: &mut impl FnMut(&GuardExpr)) {
        f(self);
        match self {
            GuardExpr::Not(g) => g.walk(f),
            GuardExpr::And(gs) | GuardExpr::Or(gs) => gs.iter().for_each(|g| g.walk(f)),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SkeletonError {
    #[error("unresolved symbol `{0}`")]
    UnresolvedSymbol(String),
}

/// Evaluates `g` against the peer's local state and the pair's shared variables.
pub fn eval_guard(g: &GuardExpr, peer: &LocalState, shared: &Valuation) -> Result<bool, SkeletonError> {
    Ok(match g {
        GuardExpr::True => true,
        GuardExpr::False => false,
        GuardExpr::Prop(p) => {
            if p.owner != peer.owner {
                return Err(SkeletonError::UnresolvedSymbol(p.to_string()));
            }
            peer.holds(&p.name).ok_or_else(|| SkeletonError::UnresolvedSymbol(p.to_string()))?
        }
        GuardExpr::VarEq { var, value } => {
            shared.get(var).ok_or_else(|| SkeletonError::UnresolvedSymbol(var.clone()))? == value
        }
        GuardExpr::Not(h) => !eval_guard(h, peer, shared)?,
        GuardExpr::And(gs) => {
            let mut all = true;
            for h in gs {
                all &= eval_guard(h, peer, shared)?;
            }
            all
        }
        GuardExpr::Or(gs) => {
            let mut any = false;
            for h in gs {
                any |= eval_guard(h, peer, shared)?;
            }
            any
        }
    })
}

/// Parallel assignment of constants to shared variables.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Body(pub BTreeMap<String, String>);

impl Body {
    pub fn empty() -> Self {
        Body::default()
    }

    pub fn set(pairs: &[(&str, &str)]) -> Self {
        Body(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn apply_body(a: &Body, shared: &Valuation) -> Valuation {
    let mut out = shared.clone();
    for (k, v) in &a.0 {
        out.insert(k.clone(), v.clone());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Branch {
    pub guard: GuardExpr,
    pub body: Body,
}

/// A disjunction of guarded commands, kept in canonical branch order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GuardedCommand {
    branches: Vec<Branch>,
}

impl GuardedCommand {
    pub fn new(branches: Vec<Branch>) -> Self {
        let mut keyed: Vec<(String, Branch)> =
            branches.into_iter().map(|b| (crate::sexpr::branch_to_string(&b), b)).collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0));
        keyed.dedup_by(|a, b| a.0 == b.0);
        GuardedCommand { branches: keyed.into_iter().map(|(_, b)| b).collect() }
    }

    /// A single branch with an empty body.
    pub fn guard(g: GuardExpr) -> Self {
        GuardedCommand::new(vec![Branch { guard: g, body: Body::empty() }])
    }

    pub fn always() -> Self {
        GuardedCommand::guard(GuardExpr::True)
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// The disjunction of all branch guards (the `guard_j` conjunct).
    pub fn disjunction(&self) -> GuardExpr {
        GuardExpr::Or(self.branches.iter().map(|b| b.guard.clone()).collect())
    }

    /// The ⊕ of two commands.
    pub fn plus(&self, other: &GuardedCommand) -> GuardedCommand {
        let mut b = self.branches.clone();
        b.extend(other.branches.iter().cloned());
        GuardedCommand::new(b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonArc {
    pub from: usize,
    pub to: usize,
    pub label: GuardedCommand,
}

/// The skeleton of process `owner` in its pair-program with `peer`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncSkeleton {
    pub owner: Pid,
    pub peer: Pid,
    pub props: Vec<String>,
    pub states: Vec<LocalState>,
    pub names: Vec<String>,
    pub initials: Vec<usize>,
    pub arcs: Vec<SkeletonArc>,
}

impl SyncSkeleton {
    pub fn new(owner: impl Into<Pid>, peer: impl Into<Pid>, props: &[&str]) -> Self {
        SyncSkeleton {
            owner: owner.into(),
            peer: peer.into(),
            props: props.iter().map(|s| s.to_string()).collect(),
            states: Vec::new(),
            names: Vec::new(),
            initials: Vec::new(),
            arcs: Vec::new(),
        }
    }

    /// Adds a named state in which exactly `true_props` hold; returns its index.
    pub fn add_state(&mut self, name: &str, true_props: &[&str]) -> usize {
        let st = LocalState::from_true(self.owner.clone(), &self.props, true_props);
        self.states.push(st);
        self.names.push(name.to_string());
        self.states.len() - 1
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn index_of(&self, s: &LocalState) -> Option<usize> {
        self.states.iter().position(|t| t == s)
    }

    pub fn name_of(&self, s: &LocalState) -> String {
        self.index_of(s).map(|i| self.names[i].clone()).unwrap_or_else(|| s.label())
    }

    pub fn set_initial(&mut self, name: &str) {
        let i = self.state_index(name).expect("unknown state");
        if !self.initials.contains(&i) {
            self.initials.push(i);
        }
    }

    pub fn add_arc(&mut self, from: &str, to: &str, label: GuardedCommand) {
        let f = self.state_index(from).expect("unknown state");
        let t = self.state_index(to).expect("unknown state");
        self.arcs.push(SkeletonArc { from: f, to: t, label });
    }

    pub fn arcs_from(&self, s: &LocalState) -> impl Iterator<Item = &SkeletonArc> + '_ {
        let idx = self.index_of(s);
        self.arcs.iter().filter(move |a| Some(a.from) == idx)
    }

    /// Returns a copy with every guard replaced by `true` and every body emptied.
    pub fn with_labels_cleared(&self) -> SyncSkeleton {
        let mut out = self.clone();
        for a in &mut out.arcs {
            a.label = GuardedCommand::always();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    DeadEnd { state: String },
    DuplicateArc { from: String, to: String },
    DanglingArc { index: usize },
    DuplicateState { state: String },
    NonTotalState { state: String },
    WrongOwner { state: String },
    NoInitialState,
    BadInitial { index: usize },
    EmptyCommand { from: String, to: String },
    ForeignProp { from: String, to: String, prop: String },
    ForeignVar { from: String, to: String, var: String },
    BadValue { from: String, to: String, var: String, value: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DeadEnd { state } => write!(f, "dead end at state {state}"),
            Violation::DuplicateArc { from, to } => write!(f, "duplicate arc {from} -> {to}"),
            Violation::DanglingArc { index } => write!(f, "arc #{index} references a missing state"),
            Violation::DuplicateState { state } => write!(f, "state {state} listed twice"),
            Violation::NonTotalState { state } => write!(f, "state {state} is not a total assignment"),
            Violation::WrongOwner { state } => write!(f, "state {state} belongs to another process"),
            Violation::NoInitialState => write!(f, "no initial state"),
            Violation::BadInitial { index } => write!(f, "initial index {index} out of range"),
            Violation::EmptyCommand { from, to } => write!(f, "arc {from} -> {to} has no branches"),
            Violation::ForeignProp { from, to, prop } => {
                write!(f, "arc {from} -> {to} reads {prop}, which is not a peer proposition")
            }
            Violation::ForeignVar { from, to, var } => {
                write!(f, "arc {from} -> {to} uses {var}, which is not shared by the pair")
            }
            Violation::BadValue { from, to, var, value } => {
                write!(f, "arc {from} -> {to} uses value {value} outside the domain of {var}")
            }
        }
    }
}

/// Checks the skeleton invariants. `shared` is the pair's shared variable set;
/// `peer_props`, when given, is the peer's proposition list.
pub fn validate_skeleton(sk: &SyncSkeleton, shared: &[SharedVar], peer_props: Option<&[String]>) -> Vec<Violation> {
    let mut out = Vec::new();
    let name = |i: usize| sk.names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
    let props: BTreeSet<&String> = sk.props.iter().collect();
    for (i, s) in sk.states.iter().enumerate() {
        if s.owner != sk.owner {
            out.push(Violation::WrongOwner { state: name(i) });
        }
        let keys: BTreeSet<&String> = s.assignment.keys().collect();
        if keys != props {
            out.push(Violation::NonTotalState { state: name(i) });
        }
        if sk.states[..i].contains(s) {
            out.push(Violation::DuplicateState { state: name(i) });
        }
    }
    if sk.initials.is_empty() {
        out.push(Violation::NoInitialState);
    }
    for &i in &sk.initials {
        if i >= sk.states.len() {
            out.push(Violation::BadInitial { index: i });
        }
    }
    let mut seen = BTreeSet::new();
    let mut has_out = vec![false; sk.states.len()];
    for (k, a) in sk.arcs.iter().enumerate() {
        if a.from >= sk.states.len() || a.to >= sk.states.len() {
            out.push(Violation::DanglingArc { index: k });
            continue;
        }
        has_out[a.from] = true;
        let (f, t) = (name(a.from), name(a.to));
        if !seen.insert((a.from, a.to)) {
            out.push(Violation::DuplicateArc { from: f.clone(), to: t.clone() });
        }
        if a.label.branches().is_empty() {
            out.push(Violation::EmptyCommand { from: f.clone(), to: t.clone() });
        }
        for b in a.label.branches() {
            for p in b.guard.props() {
                let known = peer_props.is_none_or(|pp| pp.contains(&p.name));
                if p.owner != sk.peer || !known {
                    out.push(Violation::ForeignProp { from: f.clone(), to: t.clone(), prop: p.to_string() });
                }
            }
            let mut used: Vec<(String, Option<String>)> =
                b.guard.vars().into_iter().map(|(v, x)| (v, Some(x))).collect();
            used.extend(b.body.0.iter().map(|(v, x)| (v.clone(), Some(x.clone()))));
            for (var, value) in used {
                match shared.iter().find(|sv| sv.name == var && sv.belongs_to(&sk.owner, &sk.peer)) {
                    None => out.push(Violation::ForeignVar { from: f.clone(), to: t.clone(), var }),
                    Some(sv) => {
                        if let Some(v) = value {
                            if !sv.domain.contains(&v) {
                                out.push(Violation::BadValue { from: f.clone(), to: t.clone(), var, value: v });
                            }
                        }
                    }
                }
            }
        }
    }
    for (i, o) in has_out.iter().enumerate() {
        if !o {
            out.push(Violation::DeadEnd { state: name(i) });
        }
    }
    out
}

/// A skeleton with its labels removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnlabeledGraph {
    pub nodes: BTreeSet<LocalState>,
    pub edges: BTreeSet<(LocalState, LocalState)>,
}

pub fn strip_labels(sk: &SyncSkeleton) -> UnlabeledGraph {
    UnlabeledGraph {
        nodes: sk.states.iter().cloned().collect(),
        edges: sk
            .arcs
            .iter()
            .filter(|a| a.from < sk.states.len() && a.to < sk.states.len())
            .map(|a| (sk.states[a.from].clone(), sk.states[a.to].clone()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peer() -> LocalState {
        let props = vec!["st".to_string(), "sb".to_string(), "ab".to_string()];
        LocalState::from_true("p1", &props, &["sb"])
    }

    #[test]
    fn guard_examples() {
        let v = Valuation::new();
        assert!(eval_guard(&GuardExpr::True, &peer(), &v).unwrap());
        let g = GuardExpr::and(vec![GuardExpr::prop("p1", "sb"), GuardExpr::not(GuardExpr::prop("p1", "ab"))]);
        assert!(eval_guard(&g, &peer(), &v).unwrap());
        let mut x = Valuation::new();
        x.insert("x".into(), "0".into());
        assert!(!eval_guard(&GuardExpr::eq("x", "1"), &peer(), &x).unwrap());
        assert!(matches!(
            eval_guard(&GuardExpr::prop("p1", "zz"), &peer(), &v),
            Err(SkeletonError::UnresolvedSymbol(_))
        ));
        assert!(eval_guard(&GuardExpr::eq("y", "1"), &peer(), &x).is_err());
    }

    #[test]
    fn body_examples() {
        let v: Valuation = [("x", "0"), ("y", "2")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        assert_eq!(apply_body(&Body::empty(), &v), v);
        let r = apply_body(&Body::set(&[("x", "1")]), &v);
        assert_eq!(r["x"], "1");
        assert_eq!(r["y"], "2");
        let r = apply_body(&Body::set(&[("x", "1"), ("y", "0")]), &v);
        assert_eq!((r["x"].as_str(), r["y"].as_str()), ("1", "0"));
    }

    #[test]
    fn dead_end_and_duplicate_arcs() {
        let mut sk = SyncSkeleton::new("a", "b", &["s", "t"]);
        sk.add_state("s", &["s"]);
        sk.add_state("t", &["t"]);
        sk.set_initial("s");
        sk.add_arc("s", "t", GuardedCommand::always());
        assert_eq!(validate_skeleton(&sk, &[], None), vec![Violation::DeadEnd { state: "t".into() }]);
        sk.add_arc("t", "t", GuardedCommand::always());
        sk.add_arc("s", "t", GuardedCommand::guard(GuardExpr::prop("b", "q")));
        assert_eq!(
            validate_skeleton(&sk, &[], None),
            vec![Violation::DuplicateArc { from: "s".into(), to: "t".into() }]
        );
    }

    #[test]
    fn foreign_symbols_are_reported() {
        let mut sk = SyncSkeleton::new("a", "b", &["s"]);
        sk.add_state("s", &["s"]);
        sk.set_initial("s");
        sk.add_arc("s", "s", GuardedCommand::guard(GuardExpr::and(vec![GuardExpr::prop("c", "q"), GuardExpr::eq("x", "1")])));
        let v = validate_skeleton(&sk, &[], None);
        assert!(v.iter().any(|x| matches!(x, Violation::ForeignProp { .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::ForeignVar { .. })));
        let sv = SharedVar { name: "x".into(), pair: ("b".into(), "a".into()), domain: vec!["0".into()], initial: "0".into() };
        let v = validate_skeleton(&sk, &[sv], None);
        assert!(v.iter().any(|x| matches!(x, Violation::BadValue { .. })));
    }

    #[test]
    fn stripping() {
        let mut sk = SyncSkeleton::new("a", "b", &["s"]);
        sk.add_state("s", &["s"]);
        sk.set_initial("s");
        sk.add_arc("s", "s", GuardedCommand::guard(GuardExpr::prop("b", "q")));
        let g = strip_labels(&sk);
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(strip_labels(&sk.with_labels_cleared()), g);
    }

    #[test]
    fn command_order_is_canonical() {
        let b1 = Branch { guard: GuardExpr::prop("b", "p"), body: Body::empty() };
        let b2 = Branch { guard: GuardExpr::True, body: Body::set(&[("x", "1")]) };
        let c1 = GuardedCommand::new(vec![b1.clone(), b2.clone()]);
        let c2 = GuardedCommand::new(vec![b2, b1]);
        assert_eq!(c1, c2);
    }
}
