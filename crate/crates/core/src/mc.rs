//! Explicit-state CTL model checking by fixpoint labeling, and the derived
//! predicates used by the soundness conditions (blk, pnd, aen, TSTAB, liveness).

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sexpr::formula_to_string;
use crate::skeleton::{eval_guard, GuardExpr, LocalState, Pid, PropRef, SyncSkeleton};
use crate::structure::{build_pair_structure, JState, PairProgram, StructureError};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Formula {
    True,
    False,
    Prop(PropRef),
    NegProp(PropRef),
    VarEq { var: String, value: String },
    NegVarEq { var: String, value: String },
    And(Vec<Formula>),
    Or(Vec<Formula>),
    AX(Pid, Box<Formula>),
    EX(Pid, Box<Formula>),
    AU(Box<Formula>, Box<Formula>),
    AUw(Box<Formula>, Box<Formula>),
    AG(Box<Formula>),
    AF(Box<Formula>),
    EF(Box<Formula>),
    /// `f ↝ g`, i.e. A[(f ⟹ AF g) Uw g].
    LeadsToWeak(Box<Formula>, Box<Formula>),
    /// `f ⇝ g`, i.e. AG(f ⟹ AF g).
    LeadsTo(Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn prop(owner: &str, name: &str) -> Formula {
        Formula::Prop(PropRef::new(owner, name))
    }

    pub fn nprop(owner: &str, name: &str) -> Formula {
        Formula::NegProp(PropRef::new(owner, name))
    }

    pub fn and(fs: Vec<Formula>) -> Formula {
        Formula::And(fs)
    }

    pub fn or(fs: Vec<Formula>) -> Formula {
        Formula::Or(fs)
    }

    pub fn ag(f: Formula) -> Formula {
        Formula::AG(Box::new(f))
    }

    pub fn af(f: Formula) -> Formula {
        Formula::AF(Box::new(f))
    }

    pub fn ef(f: Formula) -> Formula {
        Formula::EF(Box::new(f))
    }

    pub fn au(f: Formula, g: Formula) -> Formula {
        Formula::AU(Box::new(f), Box::new(g))
    }

    pub fn auw(f: Formula, g: Formula) -> Formula {
        Formula::AUw(Box::new(f), Box::new(g))
    }

    pub fn ax(j: &str, f: Formula) -> Formula {
        Formula::AX(Pid::new(j), Box::new(f))
    }

    pub fn ex(j: &str, f: Formula) -> Formula {
        Formula::EX(Pid::new(j), Box::new(f))
    }

    pub fn leads_weak(f: Formula, g: Formula) -> Formula {
        Formula::LeadsToWeak(Box::new(f), Box::new(g))
    }

    pub fn leads(f: Formula, g: Formula) -> Formula {
        Formula::LeadsTo(Box::new(f), Box::new(g))
    }

    /// `f ⟹ g` for propositional `f`.
    pub fn implies(f: Formula, g: Formula) -> Formula {
        let nf = f.negate_propositional().expect("antecedent must be propositional");
        Formula::Or(vec![nf, g])
    }

    pub fn is_propositional(&self) -> bool {
        match self {
            Formula::True
            | Formula::False
            | Formula::Prop(_)
            | Formula::NegProp(_)
            | Formula::VarEq { .. }
            | Formula::NegVarEq { .. } => true,
            Formula::And(fs) | Formula::Or(fs) => fs.iter().all(|f| f.is_propositional()),
            _ => false,
        }
    }

    /// Pushes a negation through a propositional formula; `None` for temporal ones.
    pub fn negate_propositional(&self) -> Option<Formula> {
        Some(match self {
            Formula::True => Formula::False,
            Formula::False => Formula::True,
            Formula::Prop(p) => Formula::NegProp(p.clone()),
            Formula::NegProp(p) => Formula::Prop(p.clone()),
            Formula::VarEq { var, value } => Formula::NegVarEq { var: var.clone(), value: value.clone() },
            Formula::NegVarEq { var, value } => Formula::VarEq { var: var.clone(), value: value.clone() },
            Formula::And(fs) => Formula::Or(fs.iter().map(|f| f.negate_propositional()).collect::<Option<_>>()?),
            Formula::Or(fs) => Formula::And(fs.iter().map(|f| f.negate_propositional()).collect::<Option<_>>()?),
            _ => return None,
        })
    }

    /// Negation normal form of a guard.
    pub fn from_guard(g: &GuardExpr) -> Formula {
        fn go(g: &GuardExpr, neg: bool) -> Formula {
            match (g, neg) {
                (GuardExpr::True, false) | (GuardExpr::False, true) => Formula::True,
                (GuardExpr::True, true) | (GuardExpr::False, false) => Formula::False,
                (GuardExpr::Prop(p), false) => Formula::Prop(p.clone()),
                (GuardExpr::Prop(p), true) => Formula::NegProp(p.clone()),
                (GuardExpr::VarEq { var, value }, false) => Formula::VarEq { var: var.clone(), value: value.clone() },
                (GuardExpr::VarEq { var, value }, true) => Formula::NegVarEq { var: var.clone(), value: value.clone() },
                (GuardExpr::Not(h), n) => go(h, !n),
                (GuardExpr::And(gs), false) | (GuardExpr::Or(gs), true) => {
                    Formula::And(gs.iter().map(|h| go(h, neg)).collect())
                }
                (GuardExpr::Or(gs), false) | (GuardExpr::And(gs), true) => {
                    Formula::Or(gs.iter().map(|h| go(h, neg)).collect())
                }
            }
        }
        go(g, false)
    }

    /// 𝓕(s): the conjunction of literals fixing a local state.
    pub fn of_local_state(s: &LocalState) -> Formula {
        Formula::And(
            s.assignment
                .iter()
                .map(|(k, v)| {
                    let p = PropRef::new(s.owner.clone(), k.clone());
                    if *v {
                        Formula::Prop(p)
                    } else {
                        Formula::NegProp(p)
                    }
                })
                .collect(),
        )
    }

    /// Immediate subformulas, after expanding the leads-to abbreviations.
    fn children(&self) -> Vec<Formula> {
        match self {
            Formula::And(fs) | Formula::Or(fs) => fs.clone(),
            Formula::AX(_, f) | Formula::EX(_, f) | Formula::AG(f) | Formula::AF(f) | Formula::EF(f) => {
                vec![(**f).clone()]
            }
            Formula::AU(f, g) | Formula::AUw(f, g) => vec![(**f).clone(), (**g).clone()],
            Formula::LeadsToWeak(f, g) | Formula::LeadsTo(f, g) => {
                vec![(**f).clone(), (**g).clone(), Formula::af((**g).clone())]
            }
            _ => Vec::new(),
        }
    }

    /// Every proposition mentioned.
    pub fn props(&self) -> BTreeSet<PropRef> {
        let mut out = BTreeSet::new();
        for f in closure(self) {
            if let Formula::Prop(p) | Formula::NegProp(p) = f {
                out.insert(p);
            }
        }
        out
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&formula_to_string(self))
    }
}

/// Subformulas of `f` including `f`, children before parents, without duplicates.
pub fn closure(f: &Formula) -> Vec<Formula> {
    fn go(f: &Formula, out: &mut Vec<Formula>, seen: &mut BTreeSet<Formula>) {
        if seen.contains(f) {
            return;
        }
        for c in f.children() {
            go(&c, out, seen);
        }
        seen.insert(f.clone());
        out.push(f.clone());
    }
    let mut out = Vec::new();
    go(f, &mut out, &mut BTreeSet::new());
    out
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Proc(Pid),
    Create(Pid, Pid),
}

impl Label {
    pub fn pid(&self) -> Option<&Pid> {
        match self {
            Label::Proc(p) => Some(p),
            Label::Create(..) => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Proc(p) => write!(f, "{p}"),
            Label::Create(i, j) => write!(f, "CREATE({i},{j})"),
        }
    }
}

/// An explicit transition system over J-states.
#[derive(Clone, Debug, Default)]
pub struct Structure {
    pub procs: Vec<Pid>,
    pub states: Vec<JState>,
    pub initials: Vec<usize>,
    pub succ: Vec<Vec<(Label, usize)>>,
    index: HashMap<JState, usize>,
}

impl Structure {
    pub fn new(procs: Vec<Pid>) -> Self {
        Structure { procs, ..Default::default() }
    }

    /// Inserts `s` if absent; returns its index and whether it was new.
    pub fn intern(&mut self, s: JState) -> (usize, bool) {
        if let Some(&i) = self.index.get(&s) {
            return (i, false);
        }
        let i = self.states.len();
        self.index.insert(s.clone(), i);
        self.states.push(s);
        self.succ.push(Vec::new());
        (i, true)
    }

    pub fn index_of(&self, s: &JState) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn add_edge(&mut self, from: usize, label: Label, to: usize) {
        if !self.succ[from].iter().any(|(l, t)| *l == label && *t == to) {
            self.succ[from].push((label, to));
        }
    }

    pub fn add_initial(&mut self, i: usize) {
        if !self.initials.contains(&i) {
            self.initials.push(i);
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.succ.iter().map(|v| v.len()).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, &Label, usize)> + '_ {
        self.succ.iter().enumerate().flat_map(|(s, v)| v.iter().map(move |(l, t)| (s, l, *t)))
    }

    pub fn preds(&self) -> Vec<Vec<usize>> {
        let mut p = vec![Vec::new(); self.len()];
        for (s, _, t) in self.edges() {
            p[t].push(s);
        }
        p
    }

    /// States reachable from the initial states.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut q: VecDeque<usize> = self.initials.iter().copied().collect();
        for &i in &self.initials {
            seen[i] = true;
        }
        while let Some(s) = q.pop_front() {
            for (_, t) in &self.succ[s] {
                if !seen[*t] {
                    seen[*t] = true;
                    q.push_back(*t);
                }
            }
        }
        seen
    }

    /// A shortest path of states from some initial state to `target`.
    pub fn path_to(&self, target: usize) -> Option<Vec<(Option<Label>, usize)>> {
        let mut parent: Vec<Option<(usize, Label)>> = vec![None; self.len()];
        let mut seen = vec![false; self.len()];
        let mut q = VecDeque::new();
        for &i in &self.initials {
            seen[i] = true;
            q.push_back(i);
        }
        while let Some(s) = q.pop_front() {
            if s == target {
                let mut path = vec![(None, s)];
                let mut cur = s;
                while let Some((p, l)) = parent[cur].clone() {
                    path.last_mut().unwrap().0 = Some(l);
                    path.push((None, p));
                    cur = p;
                }
                path.reverse();
                // Shift labels so each entry carries the label of the step into it.
                let mut out = Vec::with_capacity(path.len());
                let mut prev_label: Option<Label> = None;
                for (l, st) in path {
                    out.push((prev_label.take(), st));
                    prev_label = l;
                }
                return Some(out);
            }
            for (l, t) in &self.succ[s] {
                if !seen[*t] {
                    seen[*t] = true;
                    parent[*t] = Some((s, l.clone()));
                    q.push_back(*t);
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error("formula mentions `{0}`, which the structure does not define")]
    ForeignSymbol(String),
    #[error(transparent)]
    Structure(#[from] StructureError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckOptions {
    /// Restrict AF/AU path quantification to weakly fair fullpaths.
    pub fair: bool,
}

impl CheckOptions {
    pub fn plain() -> Self {
        CheckOptions { fair: false }
    }

    pub fn fair() -> Self {
        CheckOptions { fair: true }
    }
}

/// The states satisfying each member of a formula's closure.
#[derive(Clone, Debug, Default)]
pub struct Labeling {
    sets: HashMap<Formula, Vec<bool>>,
}

impl Labeling {
    pub fn get(&self, f: &Formula) -> Option<&[bool]> {
        self.sets.get(f).map(|v| v.as_slice())
    }

    pub fn holds(&self, f: &Formula, s: usize) -> bool {
        self.sets.get(f).is_some_and(|v| v[s])
    }

    pub fn states(&self, f: &Formula) -> BTreeSet<usize> {
        self.get(f)
            .map(|v| v.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect())
            .unwrap_or_default()
    }

    pub fn formulas(&self) -> impl Iterator<Item = &Formula> {
        self.sets.keys()
    }
}

/// Evaluates a propositional formula at a J-state. Propositions of processes
/// absent from the state are false.
pub fn eval_state_formula(f: &Formula, s: &JState) -> Result<bool, McError> {
    Ok(match f {
        Formula::True => true,
        Formula::False => false,
        Formula::Prop(p) => prop_value(p, s)?,
        Formula::NegProp(p) => !prop_value(p, s)?,
        Formula::VarEq { var, value } => s.shared.get(var) == Some(value),
        Formula::NegVarEq { var, value } => s.shared.get(var) != Some(value),
        Formula::And(fs) => {
            for g in fs {
                if !eval_state_formula(g, s)? {
                    return Ok(false);
                }
            }
            true
        }
        Formula::Or(fs) => {
            for g in fs {
                if eval_state_formula(g, s)? {
                    return Ok(true);
                }
            }
            false
        }
        other => return Err(McError::ForeignSymbol(format!("temporal operator in {other}"))),
    })
}

fn prop_value(p: &PropRef, s: &JState) -> Result<bool, McError> {
    match s.locals.get(&p.owner) {
        None => Ok(false),
        Some(l) => l.holds(&p.name).ok_or_else(|| McError::ForeignSymbol(p.to_string())),
    }
}

struct Checker<'a> {
    m: &'a Structure,
    preds: Vec<Vec<usize>>,
    opts: CheckOptions,
}

/// Labels every state of `m` with every member of `closure(f)`.
pub fn check(m: &Structure, f: &Formula, opts: CheckOptions) -> Result<Labeling, McError> {
    let mut lab = Labeling::default();
    check_into(m, f, opts, &mut lab)?;
    Ok(lab)
}

/// Like `check`, but extends an existing labeling (shared subformulas are reused).
pub fn check_into(m: &Structure, f: &Formula, opts: CheckOptions, lab: &mut Labeling) -> Result<(), McError> {
    for p in f.props() {
        if !m.procs.contains(&p.owner) {
            return Err(McError::ForeignSymbol(p.to_string()));
        }
        if let Some(s) = m.states.first() {
            if s.locals.get(&p.owner).is_some_and(|l| l.holds(&p.name).is_none()) {
                return Err(McError::ForeignSymbol(p.to_string()));
            }
        }
    }
    let mut c = Checker { m, preds: m.preds(), opts };
    for g in closure(f) {
        if lab.sets.contains_key(&g) {
            continue;
        }
        let v = c.label(&g, &lab.sets)?;
        lab.sets.insert(g, v);
    }
    Ok(())
}

impl<'a> Checker<'a> {
    fn n(&self) -> usize {
        self.m.len()
    }

    fn label(&mut self, f: &Formula, done: &HashMap<Formula, Vec<bool>>) -> Result<Vec<bool>, McError> {
        let n = self.n();
        let get = |g: &Formula| done.get(g).cloned().expect("closure order");
        Ok(match f {
            Formula::True => vec![true; n],
            Formula::False => vec![false; n],
            Formula::Prop(_) | Formula::NegProp(_) | Formula::VarEq { .. } | Formula::NegVarEq { .. } => {
                if let Formula::VarEq { var, .. } | Formula::NegVarEq { var, .. } = f {
                    if let Some(s) = self.m.states.first() {
                        if !s.shared.contains_key(var) {
                            return Err(McError::ForeignSymbol(var.clone()));
                        }
                    }
                }
                self.m.states.iter().map(|s| eval_state_formula(f, s)).collect::<Result<_, _>>()?
            }
            Formula::And(fs) => {
                let mut v = vec![true; n];
                for g in fs {
                    let gv = get(g);
                    v.iter_mut().zip(gv).for_each(|(a, b)| *a &= b);
                }
                v
            }
            Formula::Or(fs) => {
                let mut v = vec![false; n];
                for g in fs {
                    let gv = get(g);
                    v.iter_mut().zip(gv).for_each(|(a, b)| *a |= b);
                }
                v
            }
            Formula::AX(j, g) => {
                let gv = get(g);
                (0..n)
                    .map(|s| self.m.succ[s].iter().filter(|(l, _)| l.pid() == Some(j)).all(|(_, t)| gv[*t]))
                    .collect()
            }
            Formula::EX(j, g) => {
                let gv = get(g);
                (0..n)
                    .map(|s| self.m.succ[s].iter().filter(|(l, _)| l.pid() == Some(j)).any(|(_, t)| gv[*t]))
                    .collect()
            }
            Formula::EF(g) => self.eu(&vec![true; n], &get(g)),
            Formula::AG(g) => self.auw(&get(g), &vec![false; n]),
            Formula::AUw(a, b) => self.auw(&get(a), &get(b)),
            Formula::AF(g) => self.au(&vec![true; n], &get(g)),
            Formula::AU(a, b) => self.au(&get(a), &get(b)),
            Formula::LeadsToWeak(a, b) => {
                let lhs: Vec<bool> = get(a).iter().zip(get(&Formula::af((**b).clone()))).map(|(x, y)| !x || y).collect();
                self.auw(&lhs, &get(b))
            }
            Formula::LeadsTo(a, b) => {
                let lhs: Vec<bool> = get(a).iter().zip(get(&Formula::af((**b).clone()))).map(|(x, y)| !x || y).collect();
                self.auw(&lhs, &vec![false; n])
            }
        })
    }

    /// E[a U b]: least fixpoint by backward search.
    fn eu(&self, a: &[bool], b: &[bool]) -> Vec<bool> {
        let mut z = b.to_vec();
        let mut q: VecDeque<usize> = (0..self.n()).filter(|&s| b[s]).collect();
        while let Some(t) = q.pop_front() {
            for &s in &self.preds[t] {
                if !z[s] && a[s] {
                    z[s] = true;
                    q.push_back(s);
                }
            }
        }
        z
    }

    /// A[a Uw b]: greatest fixpoint. Finite fullpaths ending in `a` states satisfy it.
    fn auw(&self, a: &[bool], b: &[bool]) -> Vec<bool> {
        let n = self.n();
        let mut z: Vec<bool> = (0..n).map(|s| a[s] || b[s]).collect();
        let mut q: VecDeque<usize> = VecDeque::new();
        for s in 0..n {
            if z[s] && !b[s] && self.m.succ[s].iter().any(|(_, t)| !z[*t]) {
                z[s] = false;
                q.push_back(s);
            }
        }
        while let Some(t) = q.pop_front() {
            for &s in &self.preds[t] {
                if z[s] && !b[s] {
                    z[s] = false;
                    q.push_back(s);
                }
            }
        }
        z
    }

    fn au(&mut self, a: &[bool], b: &[bool]) -> Vec<bool> {
        if self.opts.fair {
            let n = self.n();
            let not_b: Vec<bool> = b.iter().map(|x| !x).collect();
            let neither: Vec<bool> = (0..n).map(|s| !a[s] && !b[s]).collect();
            let e1 = self.eu(&not_b, &neither);
            let e2 = self.eg_fair(&not_b);
            (0..n).map(|s| !e1[s] && !e2[s]).collect()
        } else {
            self.au_plain(a, b)
        }
    }

    /// A[a U b] over all fullpaths: least fixpoint; a deadlocked `a ∧ ¬b` state fails.
    fn au_plain(&self, a: &[bool], b: &[bool]) -> Vec<bool> {
        let n = self.n();
        let mut z = b.to_vec();
        let mut remaining: Vec<usize> = (0..n).map(|s| self.m.succ[s].len()).collect();
        let mut q: VecDeque<usize> = (0..n).filter(|&s| b[s]).collect();
        let mut pred_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (s, _, t) in self.m.edges() {
            pred_edges[t].push(s);
        }
        while let Some(t) = q.pop_front() {
            for &s in &pred_edges[t] {
                if z[s] || !a[s] {
                    continue;
                }
                remaining[s] -= 1;
                if remaining[s] == 0 {
                    z[s] = true;
                    q.push_back(s);
                }
            }
        }
        z
    }

    /// States with a weakly fair fullpath staying inside `phi` forever, or
    /// ending in a deadlock state inside `phi`.
    fn eg_fair(&mut self, phi: &[bool]) -> Vec<bool> {
        let n = self.n();
        let mut g: DiGraph<usize, ()> = DiGraph::new();
        let mut node = vec![NodeIndex::end(); n];
        for s in 0..n {
            if phi[s] {
                node[s] = g.add_node(s);
            }
        }
        for (s, _, t) in self.m.edges() {
            if phi[s] && phi[t] {
                g.add_edge(node[s], node[t], ());
            }
        }
        let mut target = vec![false; n];
        for s in 0..n {
            if phi[s] && self.m.succ[s].is_empty() {
                target[s] = true;
            }
        }
        let mut comp = vec![usize::MAX; n];
        for (ci, scc) in tarjan_scc(&g).into_iter().enumerate() {
            for &v in &scc {
                comp[g[v]] = ci;
            }
            let members: Vec<usize> = scc.iter().map(|&v| g[v]).collect();
            if self.scc_is_fair(&members, &comp, ci) {
                for s in members {
                    target[s] = true;
                }
            }
        }
        self.eu(phi, &target)
    }

    fn scc_is_fair(&self, members: &[usize], comp: &[usize], ci: usize) -> bool {
        let inner = |s: usize, t: usize| comp[s] == ci && comp[t] == ci;
        let has_edge = members.iter().any(|&s| self.m.succ[s].iter().any(|(_, t)| inner(s, *t)));
        if !has_edge {
            return false;
        }
        self.m.procs.iter().all(|p| {
            let executes = members
                .iter()
                .any(|&s| self.m.succ[s].iter().any(|(l, t)| l.pid() == Some(p) && inner(s, *t)));
            let disabled_somewhere = members
                .iter()
                .any(|&s| !self.m.succ[s].iter().any(|(l, _)| l.pid() == Some(p)));
            executes || disabled_somewhere
        })
    }
}

/// Outcome of checking a pair-specification on a pair-structure.
#[derive(Clone, Debug, Serialize)]
pub struct SpecResult {
    pub holds: bool,
    pub counterexample: Option<JState>,
    pub states: usize,
}

/// M_ij, S⁰_ij ⊨ spec, with weak process fairness on eventualities.
pub fn check_spec(pp: &PairProgram, spec: &Formula) -> Result<SpecResult, McError> {
    let m = build_pair_structure(pp)?;
    check_spec_on(&m, spec, CheckOptions::fair())
}

pub fn check_spec_on(m: &Structure, spec: &Formula, opts: CheckOptions) -> Result<SpecResult, McError> {
    let lab = check(m, spec, opts)?;
    let bad = m.initials.iter().copied().find(|&s| !lab.holds(spec, s));
    Ok(SpecResult { holds: bad.is_none(), counterexample: bad.map(|s| m.states[s].clone()), states: m.len() })
}

/// blk_i^j: i-states under which, reachably, some move of the peer is present but disabled.
pub fn compute_blk(pp: &PairProgram, i: &Pid) -> Result<BTreeSet<LocalState>, McError> {
    let m = build_pair_structure(pp)?;
    let (_, peer_sk) = pp.skeletons_for(i).ok_or_else(|| McError::ForeignSymbol(i.to_string()))?;
    let reach = m.reachable();
    let mut out = BTreeSet::new();
    for (s, st) in m.states.iter().enumerate() {
        if !reach[s] {
            continue;
        }
        let si = &st.locals[i];
        if peer_has_blocked_move(peer_sk, si, st) {
            out.insert(si.clone());
        }
    }
    Ok(out)
}

fn peer_has_blocked_move(peer_sk: &SyncSkeleton, own: &LocalState, st: &JState) -> bool {
    let pj = &st.locals[&peer_sk.owner];
    peer_sk
        .arcs_from(pj)
        .any(|a| !eval_guard(&a.label.disjunction(), own, &st.shared).unwrap_or(false))
}

/// aen_j at a pair-state: every move of j from its current local state is enabled.
pub fn aen(peer_sk: &SyncSkeleton, st: &JState) -> bool {
    let own = match st.locals.get(&peer_sk.peer) {
        Some(l) => l,
        None => return true,
    };
    !peer_has_blocked_move(peer_sk, own, st)
}

/// pnd_ij: pair-states where some closure member is false now but inevitable.
pub fn compute_pnd(pp: &PairProgram, spec: &Formula) -> Result<BTreeSet<JState>, McError> {
    let m = build_pair_structure(pp)?;
    Ok(compute_pnd_on(&m, spec)?.into_iter().map(|s| m.states[s].clone()).collect())
}

pub fn compute_pnd_on(m: &Structure, spec: &Formula) -> Result<BTreeSet<usize>, McError> {
    let mut lab = Labeling::default();
    let cl = closure(spec);
    for f in &cl {
        check_into(m, &Formula::af(f.clone()), CheckOptions::fair(), &mut lab)?;
    }
    let mut out = BTreeSet::new();
    for f in &cl {
        let af = Formula::af(f.clone());
        for s in 0..m.len() {
            if !lab.holds(f, s) && lab.holds(&af, s) {
                out.insert(s);
            }
        }
    }
    Ok(out)
}

/// An arc branch that is not temporarily stable.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TstabViolation {
    pub owner: Pid,
    pub from: String,
    pub to: String,
    pub branch: usize,
    pub guard: String,
    pub state: JState,
}

/// Checks every branch guard of both skeletons for temporary stability.
pub fn check_tstab(pp: &PairProgram) -> Result<Option<TstabViolation>, McError> {
    let m = build_pair_structure(pp)?;
    let reach = m.reachable();
    for sk in [&pp.skel_i, &pp.skel_j] {
        for arc in &sk.arcs {
            let at = Formula::of_local_state(&sk.states[arc.from]);
            let leave = at.negate_propositional().unwrap();
            for (bi, b) in arc.label.branches().iter().enumerate() {
                let phi = Formula::and(vec![at.clone(), Formula::from_guard(&b.guard)]);
                let stable = Formula::auw(phi.clone(), leave.clone());
                let f = Formula::or(vec![phi.negate_propositional().unwrap(), stable]);
                let lab = check(&m, &f, CheckOptions::plain())?;
                if let Some(s) = (0..m.len()).find(|&s| reach[s] && !lab.holds(&f, s)) {
                    return Ok(Some(TstabViolation {
                        owner: sk.owner.clone(),
                        from: sk.names[arc.from].clone(),
                        to: sk.names[arc.to].clone(),
                        branch: bi,
                        guard: crate::sexpr::guard_to_string(&b.guard),
                        state: m.states[s].clone(),
                    }));
                }
            }
        }
    }
    Ok(None)
}

/// A cycle of i-transitions through a state where some peer move is disabled.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LivenessWitness {
    pub process: Pid,
    pub cycle: Vec<JState>,
}

/// Checks that no reachable i-only cycle of M_ij visits a state violating aen_j.
pub fn check_liveness_condition(pp: &PairProgram, i: &Pid) -> Result<Option<LivenessWitness>, McError> {
    let m = build_pair_structure(pp)?;
    let (_, peer_sk) = pp.skeletons_for(i).ok_or_else(|| McError::ForeignSymbol(i.to_string()))?;
    let reach = m.reachable();
    let mut g: DiGraph<usize, ()> = DiGraph::new();
    let mut node = vec![NodeIndex::end(); m.len()];
    for s in 0..m.len() {
        if reach[s] {
            node[s] = g.add_node(s);
        }
    }
    let own = Label::Proc(i.clone());
    for (s, l, t) in m.edges() {
        if reach[s] && *l == own {
            g.add_edge(node[s], node[t], ());
        }
    }
    let mut comp = vec![usize::MAX; m.len()];
    for (ci, scc) in tarjan_scc(&g).into_iter().enumerate() {
        for &v in &scc {
            comp[g[v]] = ci;
        }
        for &v in &scc {
            let s = g[v];
            let cyclic = scc.len() > 1 || g.find_edge(v, v).is_some();
            if cyclic && !aen(peer_sk, &m.states[s]) {
                let cycle = cycle_through(&m, &own, s, &comp, ci);
                return Ok(Some(LivenessWitness {
                    process: i.clone(),
                    cycle: cycle.into_iter().map(|x| m.states[x].clone()).collect(),
                }));
            }
        }
    }
    Ok(None)
}

fn cycle_through(m: &Structure, own: &Label, start: usize, comp: &[usize], ci: usize) -> Vec<usize> {
    let mut parent: HashMap<usize, usize> = HashMap::new();
    let mut q = VecDeque::from([start]);
    while let Some(s) = q.pop_front() {
        for (l, t) in &m.succ[s] {
            if l != own || comp[*t] != ci {
                continue;
            }
            if *t == start {
                let mut path = vec![s];
                let mut cur = s;
                while cur != start {
                    cur = parent[&cur];
                    path.push(cur);
                }
                path.reverse();
                return path;
            }
            if !parent.contains_key(t) {
                parent.insert(*t, s);
                q.push_back(*t);
            }
        }
    }
    vec![start]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn ls(owner: &str, props: &[&str], on: &[&str]) -> LocalState {
        let props: Vec<String> = props.iter().map(|s| s.to_string()).collect();
        LocalState::from_true(owner, &props, on)
    }

    fn js(p: bool) -> JState {
        let mut locals = BTreeMap::new();
        locals.insert(Pid::new("a"), ls("a", &["p"], if p { &["p"] } else { &[] }));
        JState { locals, shared: BTreeMap::new() }
    }

    /// s -a-> t, t -a-> t; p holds only at t.
    fn chain() -> Structure {
        let mut m = Structure::new(vec![Pid::new("a")]);
        let (s, _) = m.intern(js(false));
        let (t, _) = m.intern(js(true));
        m.add_initial(s);
        m.add_edge(s, Label::Proc(Pid::new("a")), t);
        m.add_edge(t, Label::Proc(Pid::new("a")), t);
        m
    }

    #[test]
    fn closure_is_bottom_up() {
        let p = Formula::prop("a", "p");
        let q = Formula::prop("a", "q");
        let f = Formula::ag(Formula::and(vec![p.clone(), q.clone()]));
        assert_eq!(closure(&p), vec![p.clone()]);
        assert_eq!(closure(&f), vec![p.clone(), q.clone(), Formula::and(vec![p, q]), f.clone()]);
    }

    #[test]
    fn forced_eventuality() {
        let m = chain();
        let f = Formula::af(Formula::prop("a", "p"));
        let lab = check(&m, &f, CheckOptions::plain()).unwrap();
        assert_eq!(lab.states(&f), BTreeSet::from([0, 1]));
        let lab = check(&m, &Formula::True, CheckOptions::plain()).unwrap();
        assert_eq!(lab.states(&Formula::True).len(), 2);
    }

    #[test]
    fn finite_fullpaths() {
        let mut m = Structure::new(vec![Pid::new("a")]);
        let (s, _) = m.intern(js(false));
        m.add_initial(s);
        let p = Formula::prop("a", "p");
        let np = Formula::nprop("a", "p");
        let lab = check(&m, &Formula::af(p.clone()), CheckOptions::plain()).unwrap();
        assert!(!lab.holds(&Formula::af(p.clone()), s));
        let lab = check(&m, &Formula::ag(np.clone()), CheckOptions::plain()).unwrap();
        assert!(lab.holds(&Formula::ag(np.clone()), s));
        let lab = check(&m, &Formula::ax("a", p.clone()), CheckOptions::plain()).unwrap();
        assert!(lab.holds(&Formula::ax("a", p.clone()), s));
        let lab = check(&m, &Formula::ex("a", Formula::True), CheckOptions::plain()).unwrap();
        assert!(!lab.holds(&Formula::ex("a", Formula::True), s));
        let lab = check(&m, &Formula::af(p.clone()), CheckOptions::fair()).unwrap();
        assert!(!lab.holds(&Formula::af(p), s));
    }

    #[test]
    fn fairness_excludes_starving_paths() {
        // Process b spins on a self-loop while a could move to p.
        let mut m = Structure::new(vec![Pid::new("a"), Pid::new("b")]);
        let mk = |p: bool| {
            let mut s = js(p);
            s.locals.insert(Pid::new("b"), ls("b", &["q"], &[]));
            s
        };
        let (s, _) = m.intern(mk(false));
        let (t, _) = m.intern(mk(true));
        m.add_initial(s);
        m.add_edge(s, Label::Proc(Pid::new("a")), t);
        m.add_edge(s, Label::Proc(Pid::new("b")), s);
        m.add_edge(t, Label::Proc(Pid::new("b")), t);
        let f = Formula::af(Formula::prop("a", "p"));
        assert!(!check(&m, &f, CheckOptions::plain()).unwrap().holds(&f, s));
        assert!(check(&m, &f, CheckOptions::fair()).unwrap().holds(&f, s));
    }

    #[test]
    fn foreign_symbols() {
        let m = chain();
        assert!(matches!(
            check(&m, &Formula::prop("zz", "p"), CheckOptions::plain()),
            Err(McError::ForeignSymbol(_))
        ));
        assert!(matches!(
            check(&m, &Formula::prop("a", "zz"), CheckOptions::plain()),
            Err(McError::ForeignSymbol(_))
        ));
    }

    #[test]
    fn guard_nnf() {
        let g = GuardExpr::not(GuardExpr::and(vec![GuardExpr::prop("b", "x"), GuardExpr::not(GuardExpr::eq("v", "1"))]));
        let f = Formula::from_guard(&g);
        assert_eq!(
            f,
            Formula::or(vec![Formula::nprop("b", "x"), Formula::VarEq { var: "v".into(), value: "1".into() }])
        );
        assert!(f.is_propositional());
    }
}
