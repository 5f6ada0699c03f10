//! Wait-for graphs, supercycles, the static and dynamic wait-for-graph
//! conditions, and blocked sets.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::Serialize;

use crate::dynamic::{successors, Configuration, DynError, DynamicSpec, ProgramCache};
use crate::mc::{Label, Structure};
use crate::overlay::{blocking_neighbors, synthesize_static, ComposedProcess, OverlayError};
use crate::skeleton::{LocalState, Pid};
use crate::structure::{build_pair_structure, build_product_structure, JState, PairKey, StaticProgram, StructureError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MoveNode {
    pub owner: Pid,
    pub from: LocalState,
    pub to: LocalState,
    pub name: String,
}

/// W(s): process nodes, their pending moves, and move → process blocking edges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WaitForGraph {
    pub processes: Vec<Pid>,
    pub moves: Vec<MoveNode>,
    pub blocked: Vec<(usize, Pid)>,
}

impl WaitForGraph {
    pub fn moves_of<'a>(&'a self, p: &'a Pid) -> impl Iterator<Item = usize> + 'a {
        self.moves.iter().enumerate().filter(move |(_, m)| &m.owner == p).map(|(k, _)| k)
    }

    pub fn blockers_of(&self, mv: usize) -> impl Iterator<Item = &Pid> + '_ {
        self.blocked.iter().filter(move |(m, _)| *m == mv).map(|(_, p)| p)
    }

    /// True if some move of `j` is blocked on `k`.
    pub fn waits_on(&self, j: &Pid, k: &Pid) -> bool {
        self.blocked.iter().any(|(m, p)| p == k && &self.moves[*m].owner == j)
    }

    /// True if `k` has a move with no outgoing blocking edge.
    pub fn has_free_move(&self, k: &Pid) -> bool {
        self.moves_of(k).any(|m| self.blockers_of(m).next().is_none())
    }
}

/// Builds W(s) for the processes present in `s`.
pub fn build_wfg(procs: &BTreeMap<Pid, ComposedProcess>, s: &JState) -> WaitForGraph {
    let mut w = WaitForGraph { processes: Vec::new(), moves: Vec::new(), blocked: Vec::new() };
    for (p, cp) in procs {
        let cur = match s.locals.get(p) {
            Some(c) => c,
            None => continue,
        };
        w.processes.push(p.clone());
        for mv in cp.moves_from(cur) {
            let k = w.moves.len();
            w.moves.push(MoveNode {
                owner: p.clone(),
                from: mv.from.clone(),
                to: mv.to.clone(),
                name: format!("{}->{}", cp.name_of(&mv.from), cp.name_of(&mv.to)),
            });
            for nb in blocking_neighbors(mv, s) {
                w.blocked.push((k, nb));
            }
        }
    }
    w
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Supercycle {
    pub processes: BTreeSet<Pid>,
    pub moves: BTreeSet<usize>,
    pub edges: Vec<(usize, Pid)>,
}

/// Prunes moves with no blocking edge into the surviving processes, and
/// processes that lost a move, until nothing changes. A nonempty residue is
/// a supercycle.
pub fn find_supercycle(w: &WaitForGraph) -> Option<Supercycle> {
    let mut procs: BTreeSet<Pid> = w.processes.iter().cloned().collect();
    let mut moves: BTreeSet<usize> = (0..w.moves.len()).collect();
    loop {
        let dead_moves: Vec<usize> = moves
            .iter()
            .copied()
            .filter(|&m| !procs.contains(&w.moves[m].owner) || !w.blockers_of(m).any(|p| procs.contains(p)))
            .collect();
        let dead_procs: Vec<Pid> = procs
            .iter()
            .filter(|p| w.moves_of(p).any(|m| dead_moves.contains(&m)))
            .cloned()
            .collect();
        if dead_moves.is_empty() && dead_procs.is_empty() {
            break;
        }
        for m in dead_moves {
            moves.remove(&m);
        }
        for p in dead_procs {
            procs.remove(&p);
        }
    }
    if procs.is_empty() {
        return None;
    }
    let edges = w
        .blocked
        .iter()
        .filter(|(m, p)| moves.contains(m) && procs.contains(p))
        .cloned()
        .collect();
    let sc = Supercycle { processes: procs, moves, edges };
    debug_assert!(is_supercycle(w, &sc.processes, &sc.moves));
    Some(sc)
}

/// The definition: nonempty; every included process brings all of its moves;
/// every included move has a blocking edge into the included processes.
pub fn is_supercycle(w: &WaitForGraph, procs: &BTreeSet<Pid>, moves: &BTreeSet<usize>) -> bool {
    if procs.is_empty() {
        return false;
    }
    let all_moves = procs.iter().all(|p| w.moves_of(p).all(|m| moves.contains(&m)));
    let owners_in = moves.iter().all(|m| procs.contains(&w.moves[*m].owner));
    let blocked = moves.iter().all(|&m| w.blockers_of(m).any(|p| procs.contains(p)));
    all_moves && owners_in && blocked
}

/// Union of the process sets of all supercycles, by enumerating subsets.
/// Exponential; a test oracle for small graphs only.
pub fn brute_force_supercycle(w: &WaitForGraph) -> BTreeSet<Pid> {
    let n = w.processes.len();
    assert!(n <= 20, "oracle limited to 20 processes");
    let mut union = BTreeSet::new();
    for mask in 1u32..(1u32 << n) {
        let procs: BTreeSet<Pid> = (0..n).filter(|b| mask & (1 << b) != 0).map(|b| w.processes[b].clone()).collect();
        let moves: BTreeSet<usize> = procs.iter().flat_map(|p| w.moves_of(p).collect::<Vec<_>>()).collect();
        if is_supercycle(w, &procs, &moves) {
            union.extend(procs);
        }
    }
    union
}

/// Graphviz rendering: processes as boxes, moves as ellipses, blocking edges dashed.
pub fn wfg_to_dot(w: &WaitForGraph) -> String {
    let mut out = String::from("digraph wfg {\n");
    for p in &w.processes {
        out.push_str(&format!("  \"P:{p}\" [shape=box, label=\"{p}\"];\n"));
    }
    for (k, m) in w.moves.iter().enumerate() {
        out.push_str(&format!("  \"m{k}\" [shape=ellipse, label=\"{}:{}\"];\n", m.owner, m.name));
        out.push_str(&format!("  \"P:{}\" -> \"m{k}\";\n", m.owner));
    }
    for (m, p) in &w.blocked {
        out.push_str(&format!("  \"m{m}\" -> \"P:{p}\" [style=dashed];\n"));
    }
    out.push_str("}\n");
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Witness {
    /// W(s) has a supercycle at an initial state.
    InitialSupercycle { state: JState, processes: BTreeSet<Pid> },
    /// A k-transition into `state` leaves `j` blocked on `k`, and every move
    /// of `k` is blocked toward some process in `ls`.
    Static { k: Pid, t_k: String, j: Pid, ls: Vec<Pid>, state: JState },
    /// The same failure after a transition of the dynamic program.
    Dynamic { label: Label, k: Pid, j: Pid, state: JState },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WfgReport {
    pub ok: bool,
    pub products: usize,
    pub checked: usize,
    /// False if the exploration bound cut the search short.
    pub complete: bool,
    pub witness: Option<Witness>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum WfgError {
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
    #[error(transparent)]
    Dynamic(#[from] DynError),
}

/// The static wait-for-graph condition, checked on star-shaped J-products,
/// plus supercycle freedom of W(s⁰) for every initial state.
pub fn check_static_wfg_condition(sp: &StaticProgram, budget: usize) -> Result<WfgReport, WfgError> {
    let syn = synthesize_static(sp)?;
    let mut report = WfgReport { ok: true, products: 0, checked: 0, complete: true, witness: None, notes: Vec::new() };
    for s0 in &syn.initials {
        let w = build_wfg(&syn.processes, s0);
        if let Some(sc) = find_supercycle(&w) {
            report.ok = false;
            report.witness = Some(Witness::InitialSupercycle { state: s0.clone(), processes: sc.processes });
            return Ok(report);
        }
    }
    // Local states of each process reachable in every one of its pair-structures.
    let mut reach_local: BTreeMap<Pid, Option<BTreeSet<LocalState>>> = BTreeMap::new();
    for pp in sp.pairs.values() {
        let m = build_pair_structure(pp)?;
        let r = m.reachable();
        for p in [&pp.i, &pp.j] {
            let here: BTreeSet<LocalState> =
                (0..m.len()).filter(|&s| r[s]).map(|s| m.states[s].locals[p].clone()).collect();
            let slot = reach_local.entry(p.clone()).or_insert(None);
            *slot = Some(match slot.take() {
                None => here,
                Some(prev) => prev.intersection(&here).cloned().collect(),
            });
        }
    }
    let mut products: HashMap<Vec<PairKey>, Structure> = HashMap::new();
    for (k, cp) in &syn.processes {
        let nbs = sp.neighbors(k);
        let locals = reach_local.get(k).cloned().flatten().unwrap_or_default();
        let max_moves = locals.iter().map(|t| cp.moves_from(t).count()).max().unwrap_or(0);
        for j in &nbs {
            for ls in subsets_up_to(&nbs, max_moves) {
                let mut jset: BTreeSet<PairKey> = ls.iter().map(|l| PairKey::new(k, l)).collect();
                jset.insert(PairKey::new(j, k));
                let key: Vec<PairKey> = jset.into_iter().collect();
                if !products.contains_key(&key) {
                    products.insert(key.clone(), build_product_structure(sp, &key, budget)?);
                }
                let m = &products[&key];
                let sub = sp.restrict(&key).composed()?;
                let reach = m.reachable();
                let kl = Label::Proc(k.clone());
                let mut entered = vec![false; m.len()];
                for (s, l, t) in m.edges() {
                    if reach[s] && *l == kl {
                        entered[t] = true;
                    }
                }
                for t in (0..m.len()).filter(|&t| entered[t]) {
                    let st = &m.states[t];
                    let t_k = &st.locals[k];
                    let n = cp.moves_from(t_k).count();
                    if !locals.contains(t_k) || ls.len() > n {
                        continue;
                    }
                    report.checked += 1;
                    let w = build_wfg(&sub, st);
                    let j_blocked = w.waits_on(j, k);
                    let k_free = w.moves_of(k).any(|mv| !w.blockers_of(mv).any(|p| ls.contains(p)));
                    if j_blocked && !k_free {
                        report.ok = false;
                        report.products = products.len();
                        report.witness = Some(Witness::Static {
                            k: k.clone(),
                            t_k: cp.name_of(t_k),
                            j: j.clone(),
                            ls: ls.clone(),
                            state: st.clone(),
                        });
                        return Ok(report);
                    }
                }
            }
        }
    }
    report.products = products.len();
    Ok(report)
}

/// Nonempty subsets of `xs` with at most `max` elements.
fn subsets_up_to(xs: &[Pid], max: usize) -> Vec<Vec<Pid>> {
    let mut out = Vec::new();
    let n = xs.len();
    for mask in 1usize..(1usize << n) {
        if (mask.count_ones() as usize) <= max {
            out.push((0..n).filter(|b| mask & (1 << b) != 0).map(|b| xs[b].clone()).collect());
        }
    }
    out
}

/// The dynamic wait-for-graph condition on configurations explored
/// breadth-first up to `bound`: initial configurations must have
/// supercycle-free wait-for graphs, and after every normal k-transition and
/// every create of a pair containing k, if some j waits on k then k has a
/// move blocked on nobody.
pub fn check_dynamic_wfg_condition(ds: &DynamicSpec, bound: usize) -> Result<WfgReport, WfgError> {
    let mut cache = ProgramCache::default();
    let mut report = WfgReport { ok: true, products: 0, checked: 0, complete: true, witness: None, notes: Vec::new() };
    report.notes.push(format!("star contexts checked are those arising within {bound} configurations"));
    let inits = crate::dynamic::initial_configurations(ds, &mut cache)?;
    let mut seen: HashSet<Configuration> = HashSet::new();
    let mut q = VecDeque::new();
    for c in inits {
        let w = build_wfg(&c.composed(), &c.global());
        if let Some(sc) = find_supercycle(&w) {
            report.ok = false;
            report.witness = Some(Witness::InitialSupercycle { state: c.global(), processes: sc.processes });
            return Ok(report);
        }
        if seen.insert(c.clone()) {
            q.push_back(c);
        }
    }
    while let Some(c) = q.pop_front() {
        for (label, t) in successors(ds, &c, &mut cache)? {
            // (k, j) contexts: a normal move of k, or a create adding {j, k}.
            let contexts: Vec<(Pid, Pid)> = match &label {
                Label::Proc(k) => t.neighbors(k).into_iter().map(|j| (k.clone(), j)).collect(),
                Label::Create(a, b) => vec![(a.clone(), b.clone()), (b.clone(), a.clone())],
            };
            let procs = cache.composed(&t);
            let g = t.global();
            let w = build_wfg(&procs, &g);
            report.checked += 1;
            for (k, j) in contexts {
                {
                    if w.waits_on(&j, &k) && !w.has_free_move(&k) {
                        report.ok = false;
                        report.witness = Some(Witness::Dynamic { label, k, j, state: g });
                        return Ok(report);
                    }
                }
            }
            if seen.len() >= bound {
                report.complete = false;
                continue;
            }
            if seen.insert(t.clone()) {
                q.push_back(t);
            }
        }
    }
    report.products = seen.len();
    Ok(report)
}

/// W̃_ij(s): processes reachable from P_i or P_j along wait-for paths.
pub fn blocked_set(cfg: &Configuration, pair: &PairKey) -> BTreeSet<Pid> {
    let w = build_wfg(&cfg.composed(), &cfg.global());
    blocked_set_in(&w, pair)
}

pub fn blocked_set_in(w: &WaitForGraph, pair: &PairKey) -> BTreeSet<Pid> {
    let mut out = BTreeSet::new();
    let mut q: VecDeque<&Pid> = VecDeque::from([&pair.0, &pair.1]);
    let mut visited: BTreeSet<&Pid> = BTreeSet::new();
    while let Some(p) = q.pop_front() {
        if !visited.insert(p) {
            continue;
        }
        for m in w.moves_of(p) {
            for b in w.blockers_of(m) {
                out.insert(b.clone());
                q.push_back(b);
            }
        }
    }
    out
}
