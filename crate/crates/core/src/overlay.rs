//! Conjunctive overlay of pair-processes and static synthesis.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{eval_guard, strip_labels, GuardedCommand, LocalState, Pid, SyncSkeleton};
use crate::structure::{join_initials, JState, PairProgram, StaticProgram, StructureError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OverlayError {
    #[error("nothing to overlay")]
    Empty,
    #[error("skeletons of {0} have different local structures")]
    IncompatibleLocalStructure(Pid),
    #[error("skeletons belong to different processes ({0} and {1})")]
    MixedOwners(Pid, Pid),
    #[error("no global state is initial in every pair-program")]
    EmptyInitialSet,
    #[error("invalid program: {0}")]
    InvalidProgram(String),
}

/// A move of a composed process: one ⊕-command per neighbour, combined with ⊗.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedMove {
    pub from: LocalState,
    pub to: LocalState,
    pub per_neighbor: BTreeMap<Pid, GuardedCommand>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedProcess {
    pub owner: Pid,
    pub states: Vec<LocalState>,
    #[serde(with = "names_as_pairs")]
    pub names: BTreeMap<LocalState, String>,
    pub moves: Vec<ComposedMove>,
}

/// JSON object keys must be strings, so the name map is a list of pairs.
mod names_as_pairs {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<LocalState, String>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<LocalState, String>, D::Error> {
        Ok(Vec::<(LocalState, String)>::deserialize(d)?.into_iter().collect())
    }
}

impl ComposedProcess {
    pub fn moves_from<'a>(&'a self, s: &'a LocalState) -> impl Iterator<Item = &'a ComposedMove> + 'a {
        self.moves.iter().filter(move |m| &m.from == s)
    }

    pub fn name_of(&self, s: &LocalState) -> String {
        self.names.get(s).cloned().unwrap_or_else(|| s.label())
    }

    pub fn neighbors(&self) -> BTreeSet<Pid> {
        self.moves.iter().flat_map(|m| m.per_neighbor.keys().cloned()).collect()
    }

    /// Number of pair-program elements this process was built from.
    pub fn size(&self) -> usize {
        self.states.len() + self.moves.iter().map(|m| m.per_neighbor.values().map(|c| c.branches().len()).sum::<usize>()).sum::<usize>()
    }
}

/// ⊗ of the given pair-processes of one owner.
pub fn overlay(skels: &[&SyncSkeleton]) -> Result<ComposedProcess, OverlayError> {
    let mut work = 0;
    overlay_counted(skels, &mut work)
}

fn overlay_counted(skels: &[&SyncSkeleton], work: &mut usize) -> Result<ComposedProcess, OverlayError> {
    let first = skels.first().ok_or(OverlayError::Empty)?;
    let shape = strip_labels(first);
    for sk in &skels[1..] {
        if sk.owner != first.owner {
            return Err(OverlayError::MixedOwners(first.owner.clone(), sk.owner.clone()));
        }
        if strip_labels(sk) != shape {
            return Err(OverlayError::IncompatibleLocalStructure(first.owner.clone()));
        }
    }
    let mut moves: BTreeMap<(LocalState, LocalState), BTreeMap<Pid, GuardedCommand>> = BTreeMap::new();
    for sk in skels {
        for a in &sk.arcs {
            *work += 1 + a.label.branches().len();
            let key = (sk.states[a.from].clone(), sk.states[a.to].clone());
            let slot = moves.entry(key).or_default();
            // Two pair-programs with the same peer would collide; ⊕ them.
            let cmd = match slot.remove(&sk.peer) {
                Some(prev) => prev.plus(&a.label),
                None => a.label.clone(),
            };
            slot.insert(sk.peer.clone(), cmd);
        }
    }
    let mut names = BTreeMap::new();
    for (s, n) in first.states.iter().zip(&first.names) {
        *work += 1;
        names.insert(s.clone(), n.clone());
    }
    Ok(ComposedProcess {
        owner: first.owner.clone(),
        states: first.states.clone(),
        names,
        moves: moves
            .into_iter()
            .map(|((from, to), per_neighbor)| ComposedMove { from, to, per_neighbor })
            .collect(),
    })
}

/// One enabled branch per neighbour, least index first; `None` if some
/// neighbour's command has no true guard.
pub fn enabled_branches(mv: &ComposedMove, s: &JState) -> Option<BTreeMap<Pid, usize>> {
    let mut out = BTreeMap::new();
    for (nb, cmd) in &mv.per_neighbor {
        let peer = s.locals.get(nb)?;
        let k = cmd
            .branches()
            .iter()
            .position(|b| eval_guard(&b.guard, peer, &s.shared).unwrap_or(false))?;
        out.insert(nb.clone(), k);
    }
    Some(out)
}

/// Every combination of enabled branches.
pub fn all_enabled_choices(mv: &ComposedMove, s: &JState) -> Vec<BTreeMap<Pid, usize>> {
    let mut out = vec![BTreeMap::new()];
    for (nb, cmd) in &mv.per_neighbor {
        let peer = match s.locals.get(nb) {
            Some(p) => p,
            None => return Vec::new(),
        };
        let ks: Vec<usize> = cmd
            .branches()
            .iter()
            .enumerate()
            .filter(|(_, b)| eval_guard(&b.guard, peer, &s.shared).unwrap_or(false))
            .map(|(k, _)| k)
            .collect();
        let mut next = Vec::new();
        for base in &out {
            for &k in &ks {
                let mut c = base.clone();
                c.insert(nb.clone(), k);
                next.push(c);
            }
        }
        out = next;
    }
    out
}

/// Neighbours whose guard conjunct of `mv` is false at `s`.
pub fn blocking_neighbors(mv: &ComposedMove, s: &JState) -> Vec<Pid> {
    mv.per_neighbor
        .iter()
        .filter(|(nb, cmd)| match s.locals.get(*nb) {
            Some(peer) => !cmd.branches().iter().any(|b| eval_guard(&b.guard, peer, &s.shared).unwrap_or(false)),
            None => false,
        })
        .map(|(nb, _)| nb.clone())
        .collect()
}

/// The synthesized static program.
#[derive(Clone, Debug, Serialize)]
pub struct Synthesis {
    pub processes: BTreeMap<Pid, ComposedProcess>,
    pub initials: Vec<JState>,
    /// Pair-program elements visited; proportional to the running time.
    pub work: usize,
}

/// Overlays every process's pair-processes and joins the initial sets.
pub fn synthesize_static(sp: &StaticProgram) -> Result<Synthesis, OverlayError> {
    sp.validate().map_err(|e| match e {
        StructureError::Overlay(o) => o,
        other => OverlayError::InvalidProgram(other.to_string()),
    })?;
    let mut work = 0;
    let mut by_owner: BTreeMap<Pid, Vec<&SyncSkeleton>> = BTreeMap::new();
    for pp in sp.pairs.values() {
        by_owner.entry(pp.i.clone()).or_default().push(&pp.skel_i);
        by_owner.entry(pp.j.clone()).or_default().push(&pp.skel_j);
    }
    let mut processes = BTreeMap::new();
    for (p, skels) in by_owner {
        processes.insert(p, overlay_counted(&skels, &mut work)?);
    }
    let pairs: Vec<&PairProgram> = sp.pairs.values().collect();
    let initials = join_initials(&pairs, &mut work);
    if initials.is_empty() {
        return Err(OverlayError::EmptyInitialSet);
    }
    Ok(Synthesis { processes, initials, work })
}

/// Graphviz rendering of a composed process with per-neighbour guards.
pub fn process_to_dot(cp: &ComposedProcess) -> String {
    let mut out = format!("digraph \"{}\" {{\n", cp.owner);
    for s in &cp.states {
        out.push_str(&format!("  \"{}\";\n", cp.name_of(s)));
    }
    for m in &cp.moves {
        let label: Vec<String> = m
            .per_neighbor
            .iter()
            .map(|(nb, c)| {
                let bs: Vec<String> = c.branches().iter().map(crate::sexpr::branch_to_string).collect();
                format!("{nb}: {}", bs.join(" | "))
            })
            .collect();
        out.push_str(&format!(
            "  \"{}\" -> \"{}\" [label=\"{}\"];\n",
            cp.name_of(&m.from),
            cp.name_of(&m.to),
            label.join("\\n").replace('"', "'")
        ));
    }
    out.push_str("}\n");
    out
}
