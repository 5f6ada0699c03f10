//! Cross-checks on the explicit product of a static program: the mapping
//! properties, deadlock freedom and safety inherited from the pair-programs.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dynamic::TraceProperty;
use crate::mc::{check, closure, CheckOptions, Formula, McError, Structure};
use crate::structure::{
    build_pair_structure, build_product_structure, is_path_of, project_path, project_sub, var_owners, verify_transition_mapping,
    JState, MappingViolation, PairKey, Path, StaticProgram, StructureError,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Check(#[from] McError),
}

/// The propositional part of `h` that any state satisfying `h` satisfies.
pub fn propositional_content(h: &Formula) -> Formula {
    if h.is_propositional() {
        return h.clone();
    }
    match h {
        Formula::And(fs) => Formula::And(fs.iter().map(propositional_content).collect()),
        Formula::Or(fs) => Formula::Or(fs.iter().map(propositional_content).collect()),
        Formula::AG(f) => propositional_content(f),
        Formula::AUw(f, g) | Formula::AU(f, g) => Formula::Or(vec![propositional_content(f), propositional_content(g)]),
        _ => Formula::True,
    }
}

/// `AG h` members of the closure, with `f ⇝ g` read as AG(f ⟹ AF g).
pub fn ag_rooted(spec: &Formula) -> Vec<(Formula, Formula)> {
    closure(spec)
        .into_iter()
        .filter_map(|g| match &g {
            Formula::AG(h) => Some((g.clone(), (**h).clone())),
            Formula::LeadsTo(..) => Some((g.clone(), Formula::True)),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct LargeModelViolation {
    pub pair: PairKey,
    pub formula: String,
    pub state: JState,
}

/// Propositional invariants every run inherits: the content of each
/// AG-rooted closure member that holds at all initial states of its pair.
pub fn inherited_invariants(sp: &StaticProgram) -> Result<Vec<TraceProperty>, OracleError> {
    let mut out = Vec::new();
    for e in &sp.entries {
        let k = PairKey::new(&e.i, &e.j);
        let pm = build_pair_structure(&sp.pairs[&k])?;
        let lab = check(&pm, &e.spec, CheckOptions::plain())?;
        for (g, h) in ag_rooted(&e.spec) {
            let p = propositional_content(&h);
            if p != Formula::True && pm.initials.iter().all(|&s| lab.holds(&g, s)) {
                out.push(TraceProperty::Invariant { name: format!("{k} {g}"), p });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LargeModelReport {
    /// (pair, formula) combinations examined.
    pub formulas: usize,
    /// Product states where the pair-level formula held and was checked.
    pub checked: usize,
    pub violations: Vec<LargeModelViolation>,
}

/// For each AG-rooted member g = AG h of every pair-spec and each product
/// state s: if M_ij, s↾ij ⊨ g then M_I, s ⊨ AG(content(h)).
pub fn large_model_check(sp: &StaticProgram, m: &Structure) -> Result<LargeModelReport, OracleError> {
    let owners = var_owners(&sp.shared_vars());
    let keys: BTreeSet<PairKey> = sp.pairs.keys().cloned().collect();
    let reach = m.reachable();
    let mut rep = LargeModelReport::default();
    for e in &sp.entries {
        let k = PairKey::new(&e.i, &e.j);
        let pm = build_pair_structure(&sp.pairs[&k])?;
        let plab = check(&pm, &e.spec, CheckOptions::plain())?;
        for (g, h) in ag_rooted(&e.spec) {
            let target = Formula::ag(propositional_content(&h));
            let glab = check(m, &target, CheckOptions::plain())?;
            rep.formulas += 1;
            for s in (0..m.len()).filter(|&s| reach[s]) {
                let proj = project_sub(&m.states[s], std::slice::from_ref(&k), &owners, &keys)?;
                let holds = match pm.index_of(&proj) {
                    Some(ps) => plab.holds(&g, ps),
                    None => {
                        rep.violations.push(LargeModelViolation { pair: k.clone(), formula: "projection is not a pair state".into(), state: m.states[s].clone() });
                        continue;
                    }
                };
                if holds {
                    rep.checked += 1;
                    if !glab.holds(&target, s) {
                        rep.violations.push(LargeModelViolation { pair: k.clone(), formula: g.to_string(), state: m.states[s].clone() });
                    }
                }
            }
        }
    }
    Ok(rep)
}

/// A reachable state without successors, if any (AG EX true fails there).
pub fn deadlock_witness(m: &Structure) -> Result<Option<usize>, McError> {
    let f = Formula::ag(Formula::Or(m.procs.iter().map(|p| Formula::ex(p.as_str(), Formula::True)).collect()));
    let lab = check(m, &f, CheckOptions::plain())?;
    let reach = m.reachable();
    let bad = m.initials.iter().copied().find(|&s| !lab.holds(&f, s));
    Ok(bad.and_then(|_| (0..m.len()).find(|&s| reach[s] && m.succ[s].is_empty())))
}

/// Random walks from initial states, each at most `max_len` steps.
pub fn random_paths(m: &Structure, count: usize, max_len: usize, seed: u64) -> Vec<Path> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if m.initials.is_empty() {
        return out;
    }
    for _ in 0..count {
        let mut s = m.initials[rng.gen_range(0..m.initials.len())];
        let mut p = Path { states: vec![m.states[s].clone()], labels: Vec::new() };
        let len = rng.gen_range(0..=max_len);
        for _ in 0..len {
            if m.succ[s].is_empty() {
                break;
            }
            let (l, t) = m.succ[s][rng.gen_range(0..m.succ[s].len())].clone();
            p.labels.push(l);
            p.states.push(m.states[t].clone());
            s = t;
        }
        out.push(p);
    }
    out
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PathMappingReport {
    pub paths: usize,
    pub projections: usize,
    pub failures: usize,
}

/// Projects random paths of `m` onto each J and checks they are paths of M_J.
pub fn path_mapping_check(sp: &StaticProgram, m: &Structure, subsets: &[Vec<PairKey>], count: usize, seed: u64, budget: usize) -> Result<PathMappingReport, OracleError> {
    let owners = var_owners(&sp.shared_vars());
    let subs: Vec<(Vec<PairKey>, Structure)> =
        subsets.iter().map(|j| build_product_structure(sp, j, budget).map(|mj| (j.clone(), mj))).collect::<Result<_, _>>()?;
    let mut rep = PathMappingReport::default();
    for pi in random_paths(m, count, 12, seed) {
        rep.paths += 1;
        for (j, mj) in &subs {
            rep.projections += 1;
            if !is_path_of(mj, &project_path(&pi, j, &owners)) {
                rep.failures += 1;
            }
        }
    }
    Ok(rep)
}

/// Every single pair and every two pairs sharing a process.
pub fn default_subsets(sp: &StaticProgram) -> Vec<Vec<PairKey>> {
    let keys: Vec<PairKey> = sp.pairs.keys().cloned().collect();
    let mut out: Vec<Vec<PairKey>> = keys.iter().map(|k| vec![k.clone()]).collect();
    for (a, ka) in keys.iter().enumerate() {
        for kb in &keys[a + 1..] {
            if ka.contains(&kb.0) || ka.contains(&kb.1) {
                out.push(vec![ka.clone(), kb.clone()]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub states: usize,
    pub edges: usize,
    pub mapping_violations: Vec<MappingViolation>,
    pub deadlock: Option<JState>,
    pub paths: PathMappingReport,
    pub large_model: LargeModelReport,
}

impl OracleReport {
    pub fn pass(&self) -> bool {
        self.mapping_violations.is_empty() && self.deadlock.is_none() && self.paths.failures == 0 && self.large_model.violations.is_empty()
    }
}

/// Builds M_I within `budget` states and runs every cross-check on it.
pub fn run_oracle(sp: &StaticProgram, budget: usize, seed: u64) -> Result<OracleReport, OracleError> {
    let m = build_product_structure(sp, &sp.keys(), budget)?;
    Ok(OracleReport {
        states: m.len(),
        edges: m.edge_count(),
        mapping_violations: verify_transition_mapping(sp, &m),
        deadlock: deadlock_witness(&m)?.map(|s| m.states[s].clone()),
        paths: path_mapping_check(sp, &m, &default_subsets(sp), 200, seed, budget)?,
        large_model: large_model_check(sp, &m)?,
    })
}
