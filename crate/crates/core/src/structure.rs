//! Pair-programs, static programs, their global-state transition diagrams,
//! and the projection operators.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mc::{Formula, Label, Structure};
use crate::overlay::{all_enabled_choices, overlay, ComposedProcess, OverlayError};
use crate::skeleton::{apply_body, eval_guard, validate_skeleton, LocalState, Pid, SharedVar, SyncSkeleton, Valuation, Violation};

/// An unordered pair of processes, stored sorted.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey(pub Pid, pub Pid);

impl PairKey {
    pub fn new(a: &Pid, b: &Pid) -> Self {
        if a <= b {
            PairKey(a.clone(), b.clone())
        } else {
            PairKey(b.clone(), a.clone())
        }
    }

    pub fn contains(&self, p: &Pid) -> bool {
        &self.0 == p || &self.1 == p
    }

    pub fn other(&self, p: &Pid) -> Option<&Pid> {
        if &self.0 == p {
            Some(&self.1)
        } else if &self.1 == p {
            Some(&self.0)
        } else {
            None
        }
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.0, self.1)
    }
}

/// A global state restricted to some set of processes and shared variables.
/// Pair-states are J-states over two processes.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JState {
    pub locals: BTreeMap<Pid, LocalState>,
    pub shared: Valuation,
}

pub type PairState = JState;

impl JState {
    pub fn local(&self, p: &Pid) -> Option<&LocalState> {
        self.locals.get(p)
    }
}

impl fmt::Display for JState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.locals.iter().map(|(p, l)| format!("{p}:{}", l.label())).collect();
        write!(f, "{}", parts.join(" "))?;
        if !self.shared.is_empty() {
            let vs: Vec<String> = self.shared.iter().map(|(k, v)| format!("{k}={v}")).collect();
            write!(f, " | {}", vs.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StructureError {
    #[error("invalid skeleton for {owner}: {violations:?}")]
    InvalidSkeleton { owner: Pid, violations: Vec<Violation> },
    #[error("state budget exceeded ({0} states)")]
    BudgetExceeded(usize),
    #[error("projection onto {0} is undefined for this state")]
    UndefinedProjection(String),
    #[error("invalid program: {0}")]
    InvalidProgram(String),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
}

/// P_i^j ∥ P_j^i with its shared variables and initial pair-states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairProgram {
    pub name: String,
    pub i: Pid,
    pub j: Pid,
    pub skel_i: SyncSkeleton,
    pub skel_j: SyncSkeleton,
    pub shared: Vec<SharedVar>,
    pub initials: Vec<PairState>,
}

impl PairProgram {
    /// Initial states are all combinations of the skeletons' initial states
    /// with the variables' initial values.
    pub fn new(name: impl Into<String>, skel_i: SyncSkeleton, skel_j: SyncSkeleton, shared: Vec<SharedVar>) -> Self {
        let mut initials = Vec::new();
        let sv: Valuation = shared.iter().map(|v| (v.name.clone(), v.initial.clone())).collect();
        for &a in &skel_i.initials {
            for &b in &skel_j.initials {
                let mut locals = BTreeMap::new();
                locals.insert(skel_i.owner.clone(), skel_i.states[a].clone());
                locals.insert(skel_j.owner.clone(), skel_j.states[b].clone());
                initials.push(JState { locals, shared: sv.clone() });
            }
        }
        PairProgram { name: name.into(), i: skel_i.owner.clone(), j: skel_j.owner.clone(), skel_i, skel_j, shared, initials }
    }

    pub fn key(&self) -> PairKey {
        PairKey::new(&self.i, &self.j)
    }

    /// (own skeleton, peer skeleton) for process `p`.
    pub fn skeletons_for(&self, p: &Pid) -> Option<(&SyncSkeleton, &SyncSkeleton)> {
        if p == &self.i {
            Some((&self.skel_i, &self.skel_j))
        } else if p == &self.j {
            Some((&self.skel_j, &self.skel_i))
        } else {
            None
        }
    }

    pub fn skeleton_of(&self, p: &Pid) -> Option<&SyncSkeleton> {
        self.skeletons_for(p).map(|(s, _)| s)
    }

    pub fn var_names(&self) -> BTreeSet<String> {
        self.shared.iter().map(|v| v.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), StructureError> {
        for (sk, peer) in [(&self.skel_i, &self.skel_j), (&self.skel_j, &self.skel_i)] {
            let v = validate_skeleton(sk, &self.shared, Some(&peer.props));
            if !v.is_empty() {
                return Err(StructureError::InvalidSkeleton { owner: sk.owner.clone(), violations: v });
            }
        }
        if self.initials.is_empty() {
            return Err(StructureError::InvalidProgram(format!("pair {} has no initial state", self.name)));
        }
        for v in &self.shared {
            if !v.domain.contains(&v.initial) {
                return Err(StructureError::InvalidProgram(format!("initial value of {} outside its domain", v.name)));
            }
        }
        Ok(())
    }
}

/// Successors of a pair-state by process `h`, straight from the skeleton arcs.
pub fn pair_successors(pp: &PairProgram, s: &PairState, h: &Pid) -> Vec<PairState> {
    let (own, peer) = match pp.skeletons_for(h) {
        Some(x) => x,
        None => return Vec::new(),
    };
    let (si, sj) = match (s.locals.get(h), s.locals.get(&peer.owner)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Vec::new(),
    };
    let mut out = Vec::new();
    for arc in own.arcs_from(si) {
        for b in arc.label.branches() {
            if eval_guard(&b.guard, sj, &s.shared).unwrap_or(false) {
                let mut t = s.clone();
                t.locals.insert(h.clone(), own.states[arc.to].clone());
                t.shared = apply_body(&b.body, &s.shared);
                if !out.contains(&t) {
                    out.push(t);
                }
            }
        }
    }
    out
}

/// M_ij over the states reachable from S⁰_ij.
pub fn build_pair_structure(pp: &PairProgram) -> Result<Structure, StructureError> {
    build_pair_structure_with(pp, false)
}

/// With `full`, every combination of local states and variable values is a state.
pub fn build_pair_structure_with(pp: &PairProgram, full: bool) -> Result<Structure, StructureError> {
    pp.validate()?;
    let procs = vec![pp.i.clone(), pp.j.clone()];
    let mut m = Structure::new(procs.clone());
    let mut q = VecDeque::new();
    for s in &pp.initials {
        let (idx, new) = m.intern(s.clone());
        m.add_initial(idx);
        if new {
            q.push_back(idx);
        }
    }
    if full {
        for a in &pp.skel_i.states {
            for b in &pp.skel_j.states {
                for sh in valuations(&pp.shared) {
                    let mut locals = BTreeMap::new();
                    locals.insert(pp.i.clone(), a.clone());
                    locals.insert(pp.j.clone(), b.clone());
                    let (idx, new) = m.intern(JState { locals, shared: sh });
                    if new {
                        q.push_back(idx);
                    }
                }
            }
        }
    }
    while let Some(s) = q.pop_front() {
        let st = m.states[s].clone();
        for h in &procs {
            for t in pair_successors(pp, &st, h) {
                let (ti, new) = m.intern(t);
                m.add_edge(s, Label::Proc(h.clone()), ti);
                if new {
                    q.push_back(ti);
                }
            }
        }
    }
    Ok(m)
}

fn valuations(vars: &[SharedVar]) -> Vec<Valuation> {
    let mut out = vec![Valuation::new()];
    for v in vars {
        let mut next = Vec::new();
        for base in &out {
            for d in &v.domain {
                let mut x = base.clone();
                x.insert(v.name.clone(), d.clone());
                next.push(x);
            }
        }
        out = next;
    }
    out
}

/// One member (i, j, f_ij) of the interconnection relation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticEntry {
    pub i: Pid,
    pub j: Pid,
    pub spec: Formula,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StaticProgram {
    pub entries: Vec<StaticEntry>,
    pub pairs: BTreeMap<PairKey, PairProgram>,
}

impl StaticProgram {
    pub fn processes(&self) -> BTreeSet<Pid> {
        self.pairs.keys().flat_map(|k| [k.0.clone(), k.1.clone()]).collect()
    }

    /// I(i), sorted.
    pub fn neighbors(&self, i: &Pid) -> Vec<Pid> {
        self.pairs.keys().filter_map(|k| k.other(i).cloned()).collect()
    }

    pub fn pair(&self, a: &Pid, b: &Pid) -> Option<&PairProgram> {
        self.pairs.get(&PairKey::new(a, b))
    }

    pub fn keys(&self) -> Vec<PairKey> {
        self.pairs.keys().cloned().collect()
    }

    pub fn shared_vars(&self) -> Vec<SharedVar> {
        self.pairs.values().flat_map(|p| p.shared.iter().cloned()).collect()
    }

    pub fn spec_of(&self, key: &PairKey) -> Option<&Formula> {
        self.entries.iter().find(|e| &PairKey::new(&e.i, &e.j) == key).map(|e| &e.spec)
    }

    /// Checks the interconnection invariants and per-pair validity.
    pub fn validate(&self) -> Result<(), StructureError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if e.i == e.j {
                return Err(StructureError::InvalidProgram(format!("reflexive entry for {}", e.i)));
            }
            let k = PairKey::new(&e.i, &e.j);
            if !seen.insert(k.clone()) {
                return Err(StructureError::InvalidProgram(format!("two entries for pair {k}")));
            }
            if !self.pairs.contains_key(&k) {
                return Err(StructureError::InvalidProgram(format!("no pair-program for {k}")));
            }
        }
        for (k, pp) in &self.pairs {
            if !seen.contains(k) {
                return Err(StructureError::InvalidProgram(format!("pair-program {k} has no entry")));
            }
            if pp.key() != *k {
                return Err(StructureError::InvalidProgram(format!("pair-program stored under {k} is {}", pp.key())));
            }
            pp.validate()?;
        }
        let mut names = BTreeSet::new();
        for v in self.shared_vars() {
            if !names.insert(v.name.clone()) {
                return Err(StructureError::InvalidProgram(format!("variable {} shared by two pairs", v.name)));
            }
        }
        Ok(())
    }

    /// The sub-program over a subset J of the pairs.
    pub fn restrict(&self, j: &[PairKey]) -> StaticProgram {
        let keep: BTreeSet<&PairKey> = j.iter().collect();
        StaticProgram {
            entries: self
                .entries
                .iter()
                .filter(|e| keep.contains(&PairKey::new(&e.i, &e.j)))
                .cloned()
                .collect(),
            pairs: self.pairs.iter().filter(|(k, _)| keep.contains(k)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// Composed processes over this program's pairs.
    pub fn composed(&self) -> Result<BTreeMap<Pid, ComposedProcess>, StructureError> {
        let mut out = BTreeMap::new();
        for p in self.processes() {
            let skels: Vec<&SyncSkeleton> = self
                .pairs
                .values()
                .filter_map(|pp| pp.skeleton_of(&p))
                .collect();
            out.insert(p, overlay(&skels)?);
        }
        Ok(out)
    }
}

/// S⁰_J: J-states whose every pair projection is an initial pair-state.
pub fn join_initials(pairs: &[&PairProgram], work: &mut usize) -> Vec<JState> {
    let mut out = Vec::new();
    fn go(pairs: &[&PairProgram], k: usize, acc: JState, out: &mut Vec<JState>, work: &mut usize) {
        if k == pairs.len() {
            out.push(acc);
            return;
        }
        for s in &pairs[k].initials {
            *work += 1;
            let consistent = s.locals.iter().all(|(p, l)| acc.locals.get(p).is_none_or(|x| x == l));
            if consistent {
                let mut next = acc.clone();
                for (p, l) in &s.locals {
                    next.locals.insert(p.clone(), l.clone());
                }
                for (k2, v) in &s.shared {
                    next.shared.insert(k2.clone(), v.clone());
                }
                go(pairs, k + 1, next, out, work);
            }
        }
    }
    go(pairs, 0, JState::default(), &mut out, work);
    out
}

/// M_J for J ⊆ I, built by stepping the composed processes of the restricted
/// program. Refuses with `BudgetExceeded` past `budget` states.
pub fn build_product_structure(sp: &StaticProgram, j: &[PairKey], budget: usize) -> Result<Structure, StructureError> {
    let sub = sp.restrict(j);
    if sub.pairs.len() != j.len() {
        return Err(StructureError::InvalidProgram("J is not a subset of I".into()));
    }
    let procs = sub.composed()?;
    let pairs: Vec<&PairProgram> = sub.pairs.values().collect();
    let mut m = Structure::new(procs.keys().cloned().collect());
    let mut q = VecDeque::new();
    let mut work = 0;
    for s in join_initials(&pairs, &mut work) {
        let (i, new) = m.intern(s);
        m.add_initial(i);
        if new {
            q.push_back(i);
        }
    }
    if m.len() > budget {
        return Err(StructureError::BudgetExceeded(m.len()));
    }
    while let Some(s) = q.pop_front() {
        let st = m.states[s].clone();
        for (p, cp) in &procs {
            for t in composed_successors(cp, &st) {
                let (ti, new) = m.intern(t);
                m.add_edge(s, Label::Proc(p.clone()), ti);
                if new {
                    if m.len() > budget {
                        return Err(StructureError::BudgetExceeded(m.len()));
                    }
                    q.push_back(ti);
                }
            }
        }
    }
    Ok(m)
}

/// Successors of `s` by the composed process `cp`, over every enabled branch choice.
pub fn composed_successors(cp: &ComposedProcess, s: &JState) -> Vec<JState> {
    let mut out = Vec::new();
    let cur = match s.locals.get(&cp.owner) {
        Some(c) => c,
        None => return out,
    };
    for mv in cp.moves_from(cur) {
        for choice in all_enabled_choices(mv, s) {
            let mut t = s.clone();
            t.locals.insert(cp.owner.clone(), mv.to.clone());
            for (nb, bi) in &choice {
                let body = &mv.per_neighbor[nb].branches()[*bi].body;
                t.shared = apply_body(body, &t.shared);
            }
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    out
}

/// What to project a state onto.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Proc(Pid),
    Pair(Pid, Pid),
    Shared(Pid, Pid),
    Sub(Vec<PairKey>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Projected {
    Local(LocalState),
    State(JState),
    Shared(Valuation),
}

/// Maps each shared variable to the pair owning it.
pub type VarOwners = BTreeMap<String, PairKey>;

pub fn var_owners(vars: &[SharedVar]) -> VarOwners {
    vars.iter().map(|v| (v.name.clone(), PairKey::new(&v.pair.0, &v.pair.1))).collect()
}

/// s↾i, s↾ij, s↾SH_ij and s↾J'. `pairs` is the interconnection in force at `s`.
pub fn project_state(s: &JState, target: &Target, owners: &VarOwners, pairs: &BTreeSet<PairKey>) -> Result<Projected, StructureError> {
    let undefined = |what: String| StructureError::UndefinedProjection(what);
    match target {
        Target::Proc(p) => s.locals.get(p).cloned().map(Projected::Local).ok_or_else(|| undefined(p.to_string())),
        Target::Shared(a, b) => {
            let k = PairKey::new(a, b);
            if !pairs.contains(&k) {
                return Err(undefined(k.to_string()));
            }
            Ok(Projected::Shared(shared_of(s, &[k], owners)))
        }
        Target::Pair(a, b) => project_sub(s, &[PairKey::new(a, b)], owners, pairs).map(Projected::State),
        Target::Sub(j) => project_sub(s, j, owners, pairs).map(Projected::State),
    }
}

fn shared_of(s: &JState, j: &[PairKey], owners: &VarOwners) -> Valuation {
    s.shared
        .iter()
        .filter(|(k, _)| owners.get(*k).is_some_and(|o| j.contains(o)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

pub fn project_sub(s: &JState, j: &[PairKey], owners: &VarOwners, pairs: &BTreeSet<PairKey>) -> Result<JState, StructureError> {
    let mut locals = BTreeMap::new();
    for k in j {
        if !pairs.contains(k) {
            return Err(StructureError::UndefinedProjection(k.to_string()));
        }
        for p in [&k.0, &k.1] {
            let l = s.locals.get(p).ok_or_else(|| StructureError::UndefinedProjection(p.to_string()))?;
            locals.insert(p.clone(), l.clone());
        }
    }
    Ok(JState { locals, shared: shared_of(s, j, owners) })
}

/// A finite labeled path: `labels[k]` takes `states[k]` to `states[k + 1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Path {
    pub states: Vec<JState>,
    pub labels: Vec<Label>,
}

/// π↾J: keeps transitions by processes of dom(J) and coalesces the blocks in
/// between. Starts at the first state on which the projection is defined.
pub fn project_path(pi: &Path, j: &[PairKey], owners: &VarOwners) -> Path {
    let dom: BTreeSet<&Pid> = j.iter().flat_map(|k| [&k.0, &k.1]).collect();
    let keys: BTreeSet<PairKey> = j.iter().cloned().collect();
    let proj = |s: &JState| project_sub(s, j, owners, &keys).ok();
    let start = match pi.states.iter().position(|s| proj(s).is_some()) {
        Some(k) => k,
        None => return Path { states: Vec::new(), labels: Vec::new() },
    };
    let mut out = Path { states: vec![proj(&pi.states[start]).unwrap()], labels: Vec::new() };
    for k in start..pi.labels.len() {
        let l = &pi.labels[k];
        if l.pid().is_some_and(|p| dom.contains(p)) {
            out.labels.push(l.clone());
            out.states.push(proj(&pi.states[k + 1]).expect("projection stays defined"));
        }
    }
    out
}

/// Checks that consecutive states of `p` are transitions of `m`.
pub fn is_path_of(m: &Structure, p: &Path) -> bool {
    if p.states.is_empty() {
        return true;
    }
    let idx: Option<Vec<usize>> = p.states.iter().map(|s| m.index_of(s)).collect();
    let idx = match idx {
        Some(v) => v,
        None => return false,
    };
    p.labels.iter().enumerate().all(|(k, l)| m.succ[idx[k]].iter().any(|(ll, t)| ll == l && *t == idx[k + 1]))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum MappingViolation {
    /// A product transition whose projections are not pair transitions, or
    /// which changes state it should not touch.
    Extra { from: JState, label: Label, to: JState, reason: String },
    /// A transition the pair-programs allow but the product lacks.
    Missing { from: JState, label: Label, to: JState },
}

/// Checks the transition mapping in both directions on `m` (a
/// structure over all of `sp`'s pairs).
pub fn verify_transition_mapping(sp: &StaticProgram, m: &Structure) -> Vec<MappingViolation> {
    let owners = var_owners(&sp.shared_vars());
    let keys: BTreeSet<PairKey> = sp.pairs.keys().cloned().collect();
    let mut out = Vec::new();
    for (s, l, t) in m.edges() {
        let (from, to) = (&m.states[s], &m.states[t]);
        let i = match l.pid() {
            Some(i) => i,
            None => continue,
        };
        if let Some(reason) = transition_defect(sp, &owners, &keys, from, i, to) {
            out.push(MappingViolation::Extra { from: from.clone(), label: l.clone(), to: to.clone(), reason });
        }
    }
    for (s, from) in m.states.iter().enumerate() {
        for i in sp.processes() {
            for to in product_candidates(sp, &owners, &keys, from, &i) {
                let lab = Label::Proc(i.clone());
                let present = m.index_of(&to).is_some_and(|t| m.succ[s].iter().any(|(l, x)| *l == lab && *x == t));
                if !present {
                    out.push(MappingViolation::Missing { from: from.clone(), label: lab, to });
                }
            }
        }
    }
    out
}

fn transition_defect(
    sp: &StaticProgram,
    owners: &VarOwners,
    keys: &BTreeSet<PairKey>,
    from: &JState,
    i: &Pid,
    to: &JState,
) -> Option<String> {
    for nb in sp.neighbors(i) {
        let pp = sp.pair(i, &nb).unwrap();
        let k = [pp.key()];
        let (a, b) = match (project_sub(from, &k, owners, keys), project_sub(to, &k, owners, keys)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return Some(format!("projection onto {} undefined", pp.key())),
        };
        if !pair_successors(pp, &a, i).contains(&b) {
            return Some(format!("projection onto {} is not an {i}-transition", pp.key()));
        }
    }
    for (p, l) in &from.locals {
        if p != i && to.locals.get(p) != Some(l) {
            return Some(format!("local state of {p} changed"));
        }
    }
    for (var, v) in &from.shared {
        let touches = owners.get(var).is_some_and(|o| o.contains(i));
        if !touches && to.shared.get(var) != Some(v) {
            return Some(format!("variable {var} of an unrelated pair changed"));
        }
    }
    if from.locals.keys().ne(to.locals.keys()) || from.shared.keys().ne(to.shared.keys()) {
        return Some("state shape changed".into());
    }
    None
}

/// All J-states t with (s, i, t) allowed by clauses (i)-(iii): one pair
/// successor per neighbour, all agreeing on i's new local state.
fn product_candidates(sp: &StaticProgram, owners: &VarOwners, keys: &BTreeSet<PairKey>, s: &JState, i: &Pid) -> Vec<JState> {
    let mut per_nb: Vec<Vec<JState>> = Vec::new();
    for nb in sp.neighbors(i) {
        let pp = sp.pair(i, &nb).unwrap();
        match project_sub(s, &[pp.key()], owners, keys) {
            Ok(a) => per_nb.push(pair_successors(pp, &a, i)),
            Err(_) => return Vec::new(),
        }
    }
    let targets: BTreeSet<&LocalState> = per_nb.iter().flatten().map(|b| &b.locals[i]).collect();
    let mut out = Vec::new();
    for li in targets {
        let mut partial = vec![s.clone()];
        for succs in &per_nb {
            let mut next = Vec::new();
            for base in &partial {
                for b in succs.iter().filter(|b| &b.locals[i] == li) {
                    let mut t = base.clone();
                    t.locals.insert(i.clone(), li.clone());
                    for (var, v) in &b.shared {
                        t.shared.insert(var.clone(), v.clone());
                    }
                    next.push(t);
                }
            }
            partial = next;
        }
        out.extend(partial);
    }
    out.sort();
    out.dedup();
    out
}

/// Graphviz rendering; states are labeled with their true propositions and
/// edges with the executing process.
pub fn to_dot(m: &Structure, name: &str) -> String {
    let mut out = format!("digraph \"{name}\" {{\n  node [shape=box];\n");
    for (k, s) in m.states.iter().enumerate() {
        let style = if m.initials.contains(&k) { ", penwidth=2" } else { "" };
        out.push_str(&format!("  s{k} [label=\"{}\"{style}];\n", s.to_string().replace('"', "'")));
    }
    for (s, l, t) in m.edges() {
        out.push_str(&format!("  s{s} -> s{t} [label=\"{l}\"];\n"));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{GuardExpr, GuardedCommand};

    fn looping(owner: &str, peer: &str) -> SyncSkeleton {
        let mut sk = SyncSkeleton::new(owner, peer, &["s"]);
        sk.add_state("s", &["s"]);
        sk.set_initial("s");
        sk.add_arc("s", "s", GuardedCommand::always());
        sk
    }

    #[test]
    fn single_state_pair() {
        let pp = PairProgram::new("ab", looping("a", "b"), looping("b", "a"), vec![]);
        let m = build_pair_structure(&pp).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.edge_count(), 2);
    }

    #[test]
    fn invalid_skeleton_is_refused() {
        let mut sk = SyncSkeleton::new("a", "b", &["s", "t"]);
        sk.add_state("s", &["s"]);
        sk.add_state("t", &["t"]);
        sk.set_initial("s");
        sk.add_arc("s", "t", GuardedCommand::always());
        let pp = PairProgram::new("ab", sk, looping("b", "a"), vec![]);
        assert!(matches!(build_pair_structure(&pp), Err(StructureError::InvalidSkeleton { .. })));
    }

    #[test]
    fn pair_key_is_unordered() {
        let (a, b) = (Pid::new("a"), Pid::new("b"));
        assert_eq!(PairKey::new(&a, &b), PairKey::new(&b, &a));
        assert_eq!(PairKey::new(&a, &b).other(&a), Some(&b));
    }

    #[test]
    fn projections() {
        let mut s = JState::default();
        for p in ["a", "b", "c"] {
            s.locals.insert(Pid::new(p), LocalState::from_true(p, &["s".to_string()], &["s"]));
        }
        s.shared.insert("x".into(), "0".into());
        s.shared.insert("y".into(), "1".into());
        let vars = vec![
            SharedVar { name: "x".into(), pair: ("a".into(), "b".into()), domain: vec!["0".into()], initial: "0".into() },
            SharedVar { name: "y".into(), pair: ("b".into(), "c".into()), domain: vec!["1".into()], initial: "1".into() },
        ];
        let owners = var_owners(&vars);
        let (a, b, c) = (Pid::new("a"), Pid::new("b"), Pid::new("c"));
        let pairs: BTreeSet<PairKey> = [PairKey::new(&a, &b), PairKey::new(&b, &c)].into_iter().collect();
        let ab = project_state(&s, &Target::Pair(a.clone(), b.clone()), &owners, &pairs).unwrap();
        match ab {
            Projected::State(st) => {
                assert_eq!(st.locals.len(), 2);
                assert_eq!(st.shared.keys().collect::<Vec<_>>(), vec!["x"]);
                let direct = project_state(&s, &Target::Proc(a.clone()), &owners, &pairs).unwrap();
                assert_eq!(direct, Projected::Local(st.locals[&a].clone()));
            }
            _ => panic!(),
        }
        assert!(project_state(&s, &Target::Pair(a.clone(), c.clone()), &owners, &pairs).is_err());
        assert!(project_state(&s, &Target::Proc(Pid::new("z")), &owners, &pairs).is_err());
    }

    #[test]
    fn path_blocks_coalesce() {
        let mk = |p: &str, on: &str| LocalState::from_true(p, &["s".to_string(), "t".to_string()], &[on]);
        let st = |a: &str, b: &str, k: &str| {
            let mut s = JState::default();
            s.locals.insert(Pid::new("i"), mk("i", a));
            s.locals.insert(Pid::new("j"), mk("j", b));
            s.locals.insert(Pid::new("k"), mk("k", k));
            s
        };
        let pi = Path {
            states: vec![st("s", "s", "s"), st("t", "s", "s"), st("t", "s", "t")],
            labels: vec![Label::Proc(Pid::new("i")), Label::Proc(Pid::new("k"))],
        };
        let j = [PairKey::new(&Pid::new("i"), &Pid::new("j"))];
        let p = project_path(&pi, &j, &VarOwners::new());
        assert_eq!(p.labels, vec![Label::Proc(Pid::new("i"))]);
        assert_eq!(p.states.len(), 2);
        let only_k = Path { states: pi.states[1..].to_vec(), labels: pi.labels[1..].to_vec() };
        assert_eq!(project_path(&only_k, &j, &VarOwners::new()).states.len(), 1);
    }

    #[test]
    fn guarded_pair_reachability() {
        // b may leave s only after a has reached t.
        let mut a = SyncSkeleton::new("a", "b", &["s", "t"]);
        a.add_state("s", &["s"]);
        a.add_state("t", &["t"]);
        a.set_initial("s");
        a.add_arc("s", "t", GuardedCommand::always());
        a.add_arc("t", "t", GuardedCommand::always());
        let mut b = SyncSkeleton::new("b", "a", &["s", "t"]);
        b.add_state("s", &["s"]);
        b.add_state("t", &["t"]);
        b.set_initial("s");
        b.add_arc("s", "t", GuardedCommand::guard(GuardExpr::prop("a", "t")));
        b.add_arc("t", "t", GuardedCommand::always());
        let pp = PairProgram::new("ab", a, b, vec![]);
        let m = build_pair_structure(&pp).unwrap();
        assert_eq!(m.len(), 3);
        let full = build_pair_structure_with(&pp, true).unwrap();
        assert_eq!(full.len(), 4);
    }
}
