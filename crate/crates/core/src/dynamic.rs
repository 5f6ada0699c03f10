//! Dynamic specifications: configurations, normal and create transitions,
//! the creation protocol, the fair simulator and trace checking.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::{self, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::mc::{check_spec_on, compute_pnd_on, eval_state_formula, CheckOptions, Formula, Label, Structure};
use crate::overlay::{all_enabled_choices, overlay, ComposedMove, ComposedProcess};
use crate::skeleton::{apply_body, strip_labels, LocalState, Pid, SyncSkeleton};
use crate::structure::{build_pair_structure, pair_successors, JState, PairKey, PairProgram, PairState, StructureError};
use crate::waitfor::{blocked_set_in, build_wfg, WaitForGraph};

/// ⟨{i,j}, spec_ij⟩ together with the name of the pair-program realizing it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct PairSpec {
    pub pair: PairKey,
    pub spec: Formula,
    pub program: String,
}

/// One create transition the rule may fire: a pair-spec and its program.
#[derive(Clone, Debug)]
pub struct CreateItem {
    pub spec: Arc<PairSpec>,
    pub program: Arc<PairProgram>,
}

/// Creates that must be installed consecutively, in order.
#[derive(Clone, Debug)]
pub struct CreateBatch {
    pub id: String,
    /// Earliest simulation step at which the batch may start.
    pub due: usize,
    /// Remaining items, in installation order.
    pub items: Vec<CreateItem>,
    /// Some items are already in force.
    pub started: bool,
}

/// A named, pluggable creation rule.
pub trait CreateGenerator: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Batches not yet fully installed whose preconditions hold in `cfg`.
    /// A batch that has started is returned with its remaining items.
    fn allowed(&self, cfg: &Configuration) -> Vec<CreateBatch>;

    /// Opaque data attached to a normal step, such as payload updates.
    fn annotate(&self, _pid: &Pid, _from: &LocalState, _to: &LocalState) -> Option<String> {
        None
    }
}

/// A create fired at or after a given step.
#[derive(Clone, Debug)]
pub struct ScriptedCreate {
    pub at_step: usize,
    pub spec: PairSpec,
}

#[derive(Clone, Debug, Default)]
pub enum CreateRule {
    #[default]
    None,
    Script(Vec<ScriptedCreate>),
    Generator(Arc<dyn CreateGenerator>),
}

#[derive(Clone, Debug)]
pub struct DynamicSpec {
    /// Explicit universe entries; a generator may contribute more.
    pub universe: Vec<PairSpec>,
    pub programs: BTreeMap<String, Arc<PairProgram>>,
    pub initial: Vec<PairKey>,
    pub rule: CreateRule,
    /// At most this many creates in a row before a normal step.
    pub max_consecutive_creates: usize,
}

impl DynamicSpec {
    pub fn program(&self, name: &str) -> Result<Arc<PairProgram>, DynError> {
        self.programs.get(name).cloned().ok_or_else(|| DynError::UnknownProgram(name.to_string()))
    }

    fn universe_entry(&self, k: &PairKey) -> Result<&PairSpec, DynError> {
        self.universe.iter().find(|p| &p.pair == k).ok_or_else(|| DynError::InvalidScenario(format!("{k} not in the universe")))
    }

    /// Batches the rule allows in `cfg`, ignoring due steps.
    pub fn allowed_batches(&self, cfg: &Configuration) -> Result<Vec<CreateBatch>, DynError> {
        match &self.rule {
            CreateRule::None => Ok(Vec::new()),
            CreateRule::Generator(g) => Ok(g.allowed(cfg)),
            CreateRule::Script(items) => {
                // Scripted creates fire in order; each is its own batch.
                for (k, sc) in items.iter().enumerate() {
                    if cfg.specs.contains_key(&sc.spec.pair) {
                        continue;
                    }
                    let program = self.program(&sc.spec.program)?;
                    return Ok(vec![CreateBatch {
                        id: format!("script{k}"),
                        due: sc.at_step,
                        items: vec![CreateItem { spec: Arc::new(sc.spec.clone()), program }],
                        started: false,
                    }]);
                }
                Ok(Vec::new())
            }
        }
    }

    fn annotate(&self, pid: &Pid, from: &LocalState, to: &LocalState) -> Option<String> {
        match &self.rule {
            CreateRule::Generator(g) => g.annotate(pid, from, to),
            _ => None,
        }
    }

    /// Creates that may fire next: the next item of the started batch if
    /// there is one, else the first item of every allowed batch.
    pub fn next_creates(&self, cfg: &Configuration) -> Result<Vec<CreateItem>, DynError> {
        let batches = self.allowed_batches(cfg)?;
        let started: Vec<&CreateBatch> = batches.iter().filter(|b| b.started).collect();
        let pool: Vec<&CreateBatch> = if started.is_empty() { batches.iter().collect() } else { started };
        Ok(pool.iter().filter_map(|b| b.items.first().cloned()).collect())
    }

    /// Alive processes named by the remaining creates of a started batch.
    /// They may not move until the batch is complete.
    pub fn frozen(&self, cfg: &Configuration) -> Result<BTreeSet<Pid>, DynError> {
        let alive = cfg.alive();
        Ok(self
            .allowed_batches(cfg)?
            .iter()
            .filter(|b| b.started)
            .flat_map(|b| b.items.iter().flat_map(|it| [it.spec.pair.0.clone(), it.spec.pair.1.clone()]))
            .filter(|p| alive.contains(p))
            .collect())
    }

    /// Whether the rule admits creating `ps` in `cfg`.
    pub fn permits(&self, cfg: &Configuration, ps: &PairSpec) -> Result<bool, DynError> {
        Ok(self.next_creates(cfg)?.iter().any(|it| *it.spec == *ps))
    }
}

/// ⟨ℐ, Pr, 𝒮⟩.
#[derive(Clone, Debug, Default)]
pub struct Configuration {
    pub specs: BTreeMap<PairKey, Arc<PairSpec>>,
    pub programs: BTreeMap<PairKey, Arc<PairProgram>>,
    pub states: BTreeMap<PairKey, PairState>,
}

impl PartialEq for Configuration {
    fn eq(&self, other: &Self) -> bool {
        self.specs == other.specs && self.states == other.states
    }
}

impl Eq for Configuration {}

impl Hash for Configuration {
    fn hash<H: Hasher>(&self, h: &mut H) {
        self.specs.hash(h);
        self.states.hash(h);
    }
}

impl Configuration {
    pub fn pairs(&self) -> BTreeSet<PairKey> {
        self.specs.keys().cloned().collect()
    }

    pub fn alive(&self) -> BTreeSet<Pid> {
        self.specs.keys().flat_map(|k| [k.0.clone(), k.1.clone()]).collect()
    }

    pub fn neighbors(&self, p: &Pid) -> Vec<Pid> {
        self.specs.keys().filter_map(|k| k.other(p).cloned()).collect()
    }

    pub fn local(&self, p: &Pid) -> Option<&LocalState> {
        self.states.iter().find(|(k, _)| k.contains(p)).map(|(_, s)| &s.locals[p])
    }

    /// The union of all pair-states.
    pub fn global(&self) -> JState {
        let mut g = JState::default();
        for s in self.states.values() {
            for (p, l) in &s.locals {
                g.locals.insert(p.clone(), l.clone());
            }
            for (k, v) in &s.shared {
                g.shared.insert(k.clone(), v.clone());
            }
        }
        g
    }

    /// All pair-states agree on the local states of common processes.
    pub fn is_consistent(&self) -> bool {
        let mut seen: BTreeMap<&Pid, &LocalState> = BTreeMap::new();
        for s in self.states.values() {
            for (p, l) in &s.locals {
                if let Some(prev) = seen.insert(p, l) {
                    if prev != l {
                        return false;
                    }
                }
            }
        }
        self.specs.keys().eq(self.states.keys()) && self.specs.keys().eq(self.programs.keys())
    }

    /// P_i = ⊗_{j ∈ ℐ(i)} P_i^j for one process.
    pub fn composed_process(&self, p: &Pid) -> Option<ComposedProcess> {
        let sks: Vec<&SyncSkeleton> = self.programs.values().filter_map(|pp| pp.skeleton_of(p)).collect();
        if sks.is_empty() {
            return None;
        }
        Some(overlay(&sks).expect("local structures checked at creation"))
    }

    /// P_i = ⊗_{j ∈ ℐ(i)} P_i^j for every alive process.
    pub fn composed(&self) -> BTreeMap<Pid, ComposedProcess> {
        let mut by_owner: BTreeMap<Pid, Vec<&SyncSkeleton>> = BTreeMap::new();
        for pp in self.programs.values() {
            by_owner.entry(pp.i.clone()).or_default().push(&pp.skel_i);
            by_owner.entry(pp.j.clone()).or_default().push(&pp.skel_j);
        }
        by_owner
            .into_iter()
            .map(|(p, sks)| {
                let cp = overlay(&sks).expect("local structures checked at creation");
                (p, cp)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Error)]
pub enum DynError {
    #[error("pair-program for {0} violates its specification")]
    SpecViolated(PairKey),
    #[error("no consistent initial configuration")]
    EmptyInitialSet,
    #[error("the creation rule does not allow {0}")]
    RuleForbids(PairKey),
    #[error("join state for {0} disagrees with a live process")]
    InconsistentJoinState(PairKey),
    #[error("no reachable state of {0} matches the live processes")]
    NoCompatibleState(PairKey),
    #[error("pair {0} is already in force")]
    AlreadyPresent(PairKey),
    #[error("pair-program for {pair} gives {pid} a different local structure")]
    IncompatibleLocalStructure { pair: PairKey, pid: Pid },
    #[error("unknown pair-program {0}")]
    UnknownProgram(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("model checking failed: {0}")]
    Check(String),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error("deadlock reached after {} steps", .0.trace.steps.len())]
    DeadlockReached(Box<Deadlock>),
    #[error("blocked set of pending pair {0} kept growing")]
    UnboundedBlocking(PairKey),
}

#[derive(Debug, Clone)]
pub struct Deadlock {
    pub trace: Trace,
    pub wfg: WaitForGraph,
}

/// Pair structures, spec verdicts and pending-eventuality sets, by program name.
#[derive(Default)]
pub struct ProgramCache {
    structures: HashMap<String, Arc<Structure>>,
    verdicts: HashMap<(String, Formula), bool>,
    pending: HashMap<(String, Formula), Arc<HashSet<JState>>>,
    composed: HashMap<Vec<String>, Arc<BTreeMap<Pid, ComposedProcess>>>,
}

impl ProgramCache {
    /// `cfg.composed()`, memoized on the set of installed programs.
    pub fn composed(&mut self, cfg: &Configuration) -> Arc<BTreeMap<Pid, ComposedProcess>> {
        let key: Vec<String> = cfg.programs.values().map(|pp| pp.name.clone()).collect();
        self.composed.entry(key).or_insert_with(|| Arc::new(cfg.composed())).clone()
    }

    pub fn structure(&mut self, pp: &PairProgram) -> Result<Arc<Structure>, DynError> {
        if let Some(m) = self.structures.get(&pp.name) {
            return Ok(m.clone());
        }
        let m = Arc::new(build_pair_structure(pp)?);
        self.structures.insert(pp.name.clone(), m.clone());
        Ok(m)
    }

    pub fn satisfies(&mut self, pp: &PairProgram, spec: &Formula) -> Result<bool, DynError> {
        let key = (pp.name.clone(), spec.clone());
        if let Some(&v) = self.verdicts.get(&key) {
            return Ok(v);
        }
        let m = self.structure(pp)?;
        let v = check_spec_on(&m, spec, CheckOptions::fair()).map_err(|e| DynError::Check(e.to_string()))?.holds;
        self.verdicts.insert(key, v);
        Ok(v)
    }

    pub fn pending(&mut self, pp: &PairProgram, spec: &Formula) -> Result<Arc<HashSet<JState>>, DynError> {
        let key = (pp.name.clone(), spec.clone());
        if let Some(v) = self.pending.get(&key) {
            return Ok(v.clone());
        }
        let m = self.structure(pp)?;
        let set = compute_pnd_on(&m, spec).map_err(|e| DynError::Check(e.to_string()))?;
        let v: Arc<HashSet<JState>> = Arc::new(set.into_iter().map(|s| m.states[s].clone()).collect());
        self.pending.insert(key, v.clone());
        Ok(v)
    }
}

/// All consistent configurations over ℐ₀ built from initial pair-states.
pub fn initial_configurations(ds: &DynamicSpec, cache: &mut ProgramCache) -> Result<Vec<Configuration>, DynError> {
    let mut entries = Vec::new();
    for k in &ds.initial {
        let ps = ds.universe_entry(k)?.clone();
        let pp = ds.program(&ps.program)?;
        if pp.key() != *k {
            return Err(DynError::InvalidScenario(format!("program {} is not over {k}", pp.name)));
        }
        if !cache.satisfies(&pp, &ps.spec)? {
            return Err(DynError::SpecViolated(k.clone()));
        }
        entries.push((ps, pp));
    }
    let mut out = vec![Configuration::default()];
    for (ps, pp) in &entries {
        let mut next = Vec::new();
        for cfg in &out {
            check_compatible(cfg, pp)?;
            for s in &pp.initials {
                if s.locals.iter().all(|(p, l)| cfg.local(p).is_none_or(|x| x == l)) {
                    let mut c = cfg.clone();
                    c.specs.insert(ps.pair.clone(), Arc::new(ps.clone()));
                    c.programs.insert(ps.pair.clone(), pp.clone());
                    c.states.insert(ps.pair.clone(), s.clone());
                    next.push(c);
                }
            }
        }
        out = next;
    }
    if out.is_empty() {
        return Err(DynError::EmptyInitialSet);
    }
    Ok(out)
}

fn check_compatible(cfg: &Configuration, pp: &PairProgram) -> Result<(), DynError> {
    for p in [&pp.i, &pp.j] {
        let new_shape = strip_labels(pp.skeleton_of(p).unwrap());
        for other in cfg.programs.values() {
            if let Some(sk) = other.skeleton_of(p) {
                if strip_labels(sk) != new_shape {
                    return Err(DynError::IncompatibleLocalStructure { pair: pp.key(), pid: p.clone() });
                }
            }
        }
    }
    Ok(())
}

/// One enabled normal transition.
#[derive(Clone, Debug)]
pub struct NormalStep<'a> {
    pub pid: Pid,
    pub mv: &'a ComposedMove,
    pub choice: BTreeMap<Pid, usize>,
}

impl NormalStep<'_> {
    /// A self-loop whose chosen bodies leave every variable unchanged.
    pub fn is_noop(&self, g: &JState) -> bool {
        self.mv.from == self.mv.to
            && self.choice.iter().all(|(nb, &bi)| {
                self.mv.per_neighbor[nb].branches()[bi].body.0.iter().all(|(x, v)| g.shared.get(x) == Some(v))
            })
    }

    pub fn target(&self, cfg: &Configuration) -> Configuration {
        apply_normal(cfg, &self.pid, self.mv, &self.choice)
    }
}

/// Enabled normal transitions of `cfg`, given its composed processes.
pub fn enabled_normal_with<'a>(g: &JState, procs: &'a BTreeMap<Pid, ComposedProcess>) -> Vec<NormalStep<'a>> {
    let mut out = Vec::new();
    for (p, cp) in procs {
        let cur = match g.locals.get(p) {
            Some(c) => c,
            None => continue,
        };
        for mv in cp.moves.iter().filter(|m| &m.from == cur) {
            for choice in all_enabled_choices(mv, g) {
                out.push(NormalStep { pid: p.clone(), mv, choice });
            }
        }
    }
    out
}

/// Enabled normal transitions as (process, successor configuration).
pub fn enabled_normal(cfg: &Configuration) -> Vec<(Pid, Configuration)> {
    let procs = cfg.composed();
    let g = cfg.global();
    enabled_normal_with(&g, &procs).into_iter().map(|s| (s.pid.clone(), s.target(cfg))).collect()
}

/// Executes a composed move with the given per-neighbour branch choice.
pub fn apply_normal(cfg: &Configuration, p: &Pid, mv: &ComposedMove, choice: &BTreeMap<Pid, usize>) -> Configuration {
    let mut t = cfg.clone();
    for (k, s) in t.states.iter_mut() {
        if let Some(nb) = k.other(p) {
            s.locals.insert(p.clone(), mv.to.clone());
            if let (Some(cmd), Some(bi)) = (mv.per_neighbor.get(nb), choice.get(nb)) {
                s.shared = apply_body(&cmd.branches()[*bi].body, &s.shared);
            }
        }
    }
    t
}

/// Reachable states of the new pair-program matching the live processes,
/// initial states first.
pub fn select_join_state(cfg: &Configuration, pp: &PairProgram, cache: &mut ProgramCache) -> Result<Option<PairState>, DynError> {
    let m = cache.structure(pp)?;
    let reach = m.reachable();
    let matches = |s: &JState| s.locals.iter().all(|(p, l)| cfg.local(p).is_none_or(|x| x == l));
    if let Some(s) = pp.initials.iter().find(|s| matches(s)) {
        return Ok(Some(s.clone()));
    }
    Ok((0..m.len()).filter(|&s| reach[s]).map(|s| &m.states[s]).find(|s| matches(s)).cloned())
}

/// A create transition, with all of its preconditions checked.
pub fn apply_create(
    ds: &DynamicSpec,
    cfg: &Configuration,
    ps: &Arc<PairSpec>,
    pp: &Arc<PairProgram>,
    s_ij: &PairState,
    cache: &mut ProgramCache,
) -> Result<Configuration, DynError> {
    let k = &ps.pair;
    if cfg.specs.contains_key(k) {
        return Err(DynError::AlreadyPresent(k.clone()));
    }
    if pp.key() != *k {
        return Err(DynError::InvalidScenario(format!("program {} is not over {k}", pp.name)));
    }
    if !ds.permits(cfg, ps)? {
        return Err(DynError::RuleForbids(k.clone()));
    }
    if !cache.satisfies(pp, &ps.spec)? {
        return Err(DynError::SpecViolated(k.clone()));
    }
    check_compatible(cfg, pp)?;
    let m = cache.structure(pp)?;
    let reachable = m.index_of(s_ij).is_some_and(|s| m.reachable()[s]);
    if !reachable {
        return Err(DynError::InconsistentJoinState(k.clone()));
    }
    for (p, l) in &s_ij.locals {
        if cfg.local(p).is_some_and(|x| x != l) {
            return Err(DynError::InconsistentJoinState(k.clone()));
        }
    }
    Ok(install(cfg, ps, pp, s_ij))
}

fn install(cfg: &Configuration, ps: &Arc<PairSpec>, pp: &Arc<PairProgram>, s_ij: &PairState) -> Configuration {
    let mut t = cfg.clone();
    t.specs.insert(ps.pair.clone(), ps.clone());
    t.programs.insert(ps.pair.clone(), pp.clone());
    t.states.insert(ps.pair.clone(), s_ij.clone());
    t
}

/// What the creation protocol needs from a running system.
pub trait SystemHandle {
    fn is_alive(&self, p: &Pid) -> bool;
    fn request_halt(&mut self, p: &Pid);
    /// Blocks until `p` has stopped between moves.
    fn await_ack(&mut self, p: &Pid);
    /// The configuration with halted processes frozen.
    fn snapshot(&self) -> Configuration;
    fn install(&mut self, cfg: Configuration, ps: &Arc<PairSpec>, pp: &Arc<PairProgram>, s_ij: &PairState);
    fn resume(&mut self, p: &Pid);
}

/// Halt, acknowledge, select a join state, install, resume.
pub fn creation_protocol(
    ds: &DynamicSpec,
    h: &mut dyn SystemHandle,
    ps: &Arc<PairSpec>,
    pp: &Arc<PairProgram>,
    cache: &mut ProgramCache,
) -> Result<Configuration, DynError> {
    let (i, j) = (ps.pair.0.clone(), ps.pair.1.clone());
    let live: Vec<Pid> = [i, j].into_iter().filter(|p| h.is_alive(p)).collect();
    for p in &live {
        h.request_halt(p);
    }
    for p in &live {
        h.await_ack(p);
    }
    let cfg = h.snapshot();
    let result = match select_join_state(&cfg, pp, cache)? {
        None => Err(DynError::NoCompatibleState(ps.pair.clone())),
        Some(s) => apply_create(ds, &cfg, ps, pp, &s, cache).inspect(|next| {
            h.install(next.clone(), ps, pp, &s);
        }),
    };
    for p in &live {
        h.resume(p);
    }
    result
}

/// All transitions out of `cfg`: every create the rule allows next, and the
/// normal moves of processes not frozen by a half-installed batch.
pub fn successors(ds: &DynamicSpec, cfg: &Configuration, cache: &mut ProgramCache) -> Result<Vec<(Label, Configuration)>, DynError> {
    let mut out = Vec::new();
    for it in ds.next_creates(cfg)? {
        let s = select_join_state(cfg, &it.program, cache)?.ok_or_else(|| DynError::NoCompatibleState(it.spec.pair.clone()))?;
        let next = apply_create(ds, cfg, &it.spec, &it.program, &s, cache)?;
        out.push((Label::Create(it.spec.pair.0.clone(), it.spec.pair.1.clone()), next));
    }
    let frozen = ds.frozen(cfg)?;
    let procs = cache.composed(cfg);
    let g = cfg.global();
    for st in enabled_normal_with(&g, &procs) {
        if !frozen.contains(&st.pid) {
            out.push((Label::Proc(st.pid.clone()), st.target(cfg)));
        }
    }
    Ok(out)
}

/// What happened at one step, as a delta on the previous configuration.
#[derive(Clone, Debug)]
pub struct TraceStep {
    pub label: Label,
    /// Pair-states that changed or were created.
    pub changed: BTreeMap<PairKey, PairState>,
    pub created: Option<(Arc<PairSpec>, Arc<PairProgram>)>,
    pub note: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EndReason {
    Quiescent,
    Budget,
    Deadlock,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub initial: Configuration,
    pub steps: Vec<TraceStep>,
    pub end: EndReason,
}

impl Trace {
    /// Configurations along the trace, starting with the initial one.
    pub fn configurations(&self) -> impl Iterator<Item = Configuration> + '_ {
        let mut cur = Some(self.initial.clone());
        let mut k = 0;
        std::iter::from_fn(move || {
            let out = cur.take()?;
            if k < self.steps.len() {
                let st = &self.steps[k];
                let mut next = out.clone();
                if let Some((ps, pp)) = &st.created {
                    next.specs.insert(ps.pair.clone(), ps.clone());
                    next.programs.insert(ps.pair.clone(), pp.clone());
                }
                for (pk, s) in &st.changed {
                    next.states.insert(pk.clone(), s.clone());
                }
                cur = Some(next);
                k += 1;
            }
            Some(out)
        })
    }

    /// Global states along the trace.
    pub fn global_states(&self) -> impl Iterator<Item = JState> + '_ {
        let mut cur: Option<JState> = None;
        let mut k = 0;
        std::iter::from_fn(move || {
            let next = match cur.take() {
                None => self.initial.global(),
                Some(mut g) => {
                    let st = self.steps.get(k)?;
                    k += 1;
                    for s in st.changed.values() {
                        for (p, l) in &s.locals {
                            g.locals.insert(p.clone(), l.clone());
                        }
                        for (x, v) in &s.shared {
                            g.shared.insert(x.clone(), v.clone());
                        }
                    }
                    g
                }
            };
            cur = Some(next.clone());
            Some(next)
        })
    }

    pub fn labels(&self) -> Vec<Label> {
        self.steps.iter().map(|s| s.label.clone()).collect()
    }

    pub fn create_count(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s.label, Label::Create(..))).count()
    }
}

fn delta(before: &Configuration, after: &Configuration) -> BTreeMap<PairKey, PairState> {
    after
        .states
        .iter()
        .filter(|(k, s)| before.states.get(*k) != Some(*s))
        .map(|(k, s)| (k.clone(), s.clone()))
        .collect()
}

/// Writes the line-oriented trace format.
pub fn write_trace(tr: &Trace, w: &mut dyn Write) -> io::Result<()> {
    writeln!(w, "INIT")?;
    for (k, s) in &tr.initial.states {
        writeln!(w, "PAIR {k} program={} state={s}", tr.initial.specs[k].program)?;
    }
    for (n, st) in tr.steps.iter().enumerate() {
        writeln!(w, "STEP {} {}", n + 1, st.label)?;
        if let Some((ps, _)) = &st.created {
            writeln!(w, "SPEC {} program={} spec={}", ps.pair, ps.program, ps.spec)?;
        }
        for (k, s) in &st.changed {
            writeln!(w, "DELTA {k} {s}")?;
        }
        if let Some(note) = &st.note {
            writeln!(w, "NOTE {note}")?;
        }
    }
    writeln!(w, "END {:?}", tr.end)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub seed: u64,
    pub max_steps: usize,
    /// Track blocked-set growth of pairs with pending eventualities.
    pub track_blocking: bool,
    /// Growth events tolerated within one pending episode.
    pub max_blocked_growth: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { seed: 0, max_steps: 50_000, track_blocking: false, max_blocked_growth: 1_000 }
    }
}

/// Scheduler bookkeeping exported with every run.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Audit {
    pub normal_steps: usize,
    pub create_steps: usize,
    /// Longest wait, in normal steps, of a continuously enabled process.
    pub max_wait: usize,
    /// Steps where a process waited at least as long as the number of live
    /// processes when it became enabled.
    pub fairness_violations: usize,
    pub max_consecutive_creates: usize,
    pub consistency_checks: usize,
    pub max_blocked_set: usize,
}

#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub trace: Trace,
    pub audit: Audit,
}

/// Runs the program under an oldest-continuously-enabled-first scheduler with
/// seeded tie-breaks. Allowed create batches compete as candidates; a started
/// batch is finished before anything else, subject to the consecutive-create cap.
pub fn simulate(ds: &DynamicSpec, opts: &SimOptions) -> Result<SimOutcome, DynError> {
    let mut cache = ProgramCache::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let inits = initial_configurations(ds, &mut cache)?;
    let mut cfg = inits[rng.gen_range(0..inits.len())].clone();
    let mut trace = Trace { initial: cfg.clone(), steps: Vec::new(), end: EndReason::Budget };
    let mut audit = Audit::default();
    let mut procs = cfg.composed();
    // Candidate -> (step first continuously enabled, normal steps then, alive then).
    let mut since: BTreeMap<Pid, (usize, usize, usize)> = BTreeMap::new();
    let mut batch_since: BTreeMap<String, usize> = BTreeMap::new();
    let mut consecutive = 0usize;
    let mut growth: BTreeMap<PairKey, (usize, usize)> = BTreeMap::new();
    let mut pnd: HashMap<PairKey, Arc<HashSet<JState>>> = HashMap::new();
    let cap = ds.max_consecutive_creates.max(1);

    for step in 0..opts.max_steps {
        let g = cfg.global();
        let normal = enabled_normal_with(&g, &procs);
        let alive = cfg.alive().len();
        let frozen = ds.frozen(&cfg)?;
        let mut by_pid: BTreeMap<Pid, Vec<NormalStep>> = BTreeMap::new();
        for st in normal {
            if !frozen.contains(&st.pid) {
                by_pid.entry(st.pid.clone()).or_default().push(st);
            }
        }
        since.retain(|p, _| by_pid.contains_key(p));
        for p in by_pid.keys() {
            since.entry(p.clone()).or_insert((step, audit.normal_steps, alive));
        }
        let batches = ds.allowed_batches(&cfg)?;
        batch_since.retain(|id, _| batches.iter().any(|b| &b.id == id));
        let started = batches.iter().find(|b| b.started);
        let ready: Vec<&CreateBatch> = match started {
            Some(b) => vec![b],
            None => batches.iter().filter(|b| b.due <= step).collect(),
        };
        for b in &ready {
            batch_since.entry(b.id.clone()).or_insert(step);
        }
        let all_noop = by_pid.values().flatten().all(|s| s.is_noop(&g));
        if !by_pid.is_empty() && all_noop && batches.is_empty() {
            trace.end = EndReason::Quiescent;
            break;
        }

        let may_create = consecutive < cap || by_pid.is_empty();
        let pick_batch: Option<&CreateBatch> = if !may_create {
            None
        } else if by_pid.is_empty() && ready.is_empty() {
            // Only future batches remain: start the earliest one now.
            batches.iter().min_by_key(|b| (b.due, b.id.clone()))
        } else if let Some(b) = started {
            Some(b)
        } else {
            let oldest_proc = since.values().map(|v| v.0).min();
            let oldest_batch = ready.iter().map(|b| batch_since[&b.id]).min();
            match (oldest_batch, oldest_proc) {
                (Some(tb), Some(tp)) if tb <= tp => {
                    ready.iter().filter(|b| batch_since[&b.id] == tb).min_by_key(|b| b.id.clone()).copied()
                }
                (Some(_), None) => ready.iter().min_by_key(|b| (batch_since[&b.id], b.id.clone())).copied(),
                _ => None,
            }
        };

        if let Some(b) = pick_batch {
            let it = &b.items[0];
            let mut handle = SimHandle { cfg: cfg.clone() };
            let next = creation_protocol(ds, &mut handle, &it.spec, &it.program, &mut cache)?;
            trace.steps.push(TraceStep {
                label: Label::Create(it.spec.pair.0.clone(), it.spec.pair.1.clone()),
                changed: delta(&cfg, &next),
                created: Some((it.spec.clone(), it.program.clone())),
                note: None,
            });
            cfg = next;
            for p in [&it.spec.pair.0, &it.spec.pair.1] {
                procs.insert(p.clone(), cfg.composed_process(p).unwrap());
            }
            consecutive += 1;
            audit.create_steps += 1;
            audit.max_consecutive_creates = audit.max_consecutive_creates.max(consecutive);
        } else if !by_pid.is_empty() {
            let oldest = since.values().map(|v| v.0).min().unwrap();
            let olds: Vec<&Pid> = since.iter().filter(|(_, v)| v.0 == oldest).map(|(p, _)| p).collect();
            let p = (*olds.choose(&mut rng).unwrap()).clone();
            let chosen = by_pid[&p].choose(&mut rng).unwrap().clone();
            let (_, normal_then, alive_then) = since.remove(&p).unwrap();
            let waited = audit.normal_steps - normal_then;
            audit.max_wait = audit.max_wait.max(waited);
            if waited >= alive_then {
                audit.fairness_violations += 1;
            }
            let note = ds.annotate(&p, &chosen.mv.from, &chosen.mv.to);
            let next = chosen.target(&cfg);
            trace.steps.push(TraceStep { label: Label::Proc(p), changed: delta(&cfg, &next), created: None, note });
            cfg = next;
            consecutive = 0;
            audit.normal_steps += 1;
        } else {
            trace.end = EndReason::Deadlock;
            let wfg = build_wfg(&procs, &cfg.global());
            return Err(DynError::DeadlockReached(Box::new(Deadlock { trace, wfg })));
        }

        audit.consistency_checks += 1;
        if !cfg.is_consistent() {
            return Err(DynError::InvalidScenario(format!("inconsistent configuration after step {}", step + 1)));
        }
        if opts.track_blocking {
            track_blocking(&cfg, &procs, &mut cache, &mut pnd, &mut growth, &mut audit, opts)?;
        }
    }
    Ok(SimOutcome { trace, audit })
}

fn track_blocking(
    cfg: &Configuration,
    procs: &BTreeMap<Pid, ComposedProcess>,
    cache: &mut ProgramCache,
    pnd: &mut HashMap<PairKey, Arc<HashSet<JState>>>,
    growth: &mut BTreeMap<PairKey, (usize, usize)>,
    audit: &mut Audit,
    opts: &SimOptions,
) -> Result<(), DynError> {
    let mut w = None;
    for (k, ps) in &cfg.specs {
        let set = match pnd.get(k) {
            Some(set) => set.clone(),
            None => {
                let set = cache.pending(&cfg.programs[k], &ps.spec)?;
                pnd.insert(k.clone(), set.clone());
                set
            }
        };
        if !set.contains(&cfg.states[k]) {
            growth.remove(k);
            continue;
        }
        let w = w.get_or_insert_with(|| build_wfg(procs, &cfg.global()));
        let size = blocked_set_in(w, k).len();
        audit.max_blocked_set = audit.max_blocked_set.max(size);
        let entry = growth.entry(k.clone()).or_insert((size, 0));
        if size > entry.0 {
            entry.1 += 1;
            if entry.1 > opts.max_blocked_growth {
                return Err(DynError::UnboundedBlocking(k.clone()));
            }
        }
        entry.0 = size;
    }
    Ok(())
}

/// The simulator's own handle: the stepper is single-threaded, so halting is
/// immediate and the snapshot is the current configuration.
struct SimHandle {
    cfg: Configuration,
}

impl SystemHandle for SimHandle {
    fn is_alive(&self, p: &Pid) -> bool {
        self.cfg.alive().contains(p)
    }
    fn request_halt(&mut self, _p: &Pid) {}
    fn await_ack(&mut self, _p: &Pid) {}
    fn snapshot(&self) -> Configuration {
        self.cfg.clone()
    }
    fn install(&mut self, cfg: Configuration, _ps: &Arc<PairSpec>, _pp: &Arc<PairProgram>, _s: &PairState) {
        self.cfg = cfg;
    }
    fn resume(&mut self, _p: &Pid) {}
}

/// Properties checkable on a finite trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum TraceProperty {
    /// p holds in every state.
    Invariant { name: String, p: Formula },
    /// q does not hold before p has held (p may hold at the same state).
    Precedence { name: String, p: Formula, q: Formula },
    /// Once p holds it keeps holding.
    Absorption { name: String, p: Formula },
    /// Whenever p holds, q holds within k steps.
    BoundedLeadsTo { name: String, p: Formula, q: Formula, k: usize },
}

impl TraceProperty {
    pub fn name(&self) -> &str {
        match self {
            TraceProperty::Invariant { name, .. }
            | TraceProperty::Precedence { name, .. }
            | TraceProperty::Absorption { name, .. }
            | TraceProperty::BoundedLeadsTo { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub pass: bool,
    /// First state index at which the property is violated.
    pub violation: Option<usize>,
}

/// Evaluates trace properties. A bounded leads-to window that runs past the
/// end of the trace fails only when the trace ended quiescent.
pub fn check_trace(tr: &Trace, props: &[TraceProperty]) -> Vec<PropertyResult> {
    let states: Vec<JState> = tr.global_states().collect();
    check_states(&states, tr.end == EndReason::Quiescent, props)
}

pub fn check_states(states: &[JState], quiescent: bool, props: &[TraceProperty]) -> Vec<PropertyResult> {
    let eval = |f: &Formula, s: &JState| eval_state_formula(f, s).unwrap_or(false);
    let n = states.len();
    props
        .iter()
        .map(|prop| {
            let violation = match prop {
                TraceProperty::Invariant { p, .. } => states.iter().position(|s| !eval(p, s)),
                TraceProperty::Precedence { p, q, .. } => {
                    let first_p = states.iter().position(|s| eval(p, s)).unwrap_or(n);
                    states[..first_p].iter().position(|s| eval(q, s))
                }
                TraceProperty::Absorption { p, .. } => {
                    let first = states.iter().position(|s| eval(p, s));
                    first.and_then(|f| states[f..].iter().position(|s| !eval(p, s)).map(|k| f + k))
                }
                TraceProperty::BoundedLeadsTo { p, q, k, .. } => {
                    let mut next_q = vec![usize::MAX; n + 1];
                    for t in (0..n).rev() {
                        next_q[t] = if eval(q, &states[t]) { t } else { next_q[t + 1] };
                    }
                    (0..n).find(|&t| {
                        if !eval(p, &states[t]) {
                            return false;
                        }
                        let nq = next_q[t];
                        if nq != usize::MAX {
                            return nq - t > *k;
                        }
                        // No q until the end: a violation only if the window
                        // closed inside the trace or the trace can never change.
                        t.saturating_add(*k) < n - 1 || quiescent
                    })
                }
            };
            PropertyResult { name: prop.name().to_string(), pass: violation.is_none(), violation }
        })
        .collect()
}

/// Checks that every pair's projection of the trace is a path of its
/// pair-structure, from the pair's creation onward.
pub fn verify_trace_projection(tr: &Trace) -> Result<(), String> {
    let mut prev: Option<Configuration> = None;
    for (n, cfg) in tr.configurations().enumerate() {
        if let Some(p) = &prev {
            let label = &tr.steps[n - 1].label;
            for (k, s) in &cfg.states {
                let before = match p.states.get(k) {
                    Some(b) => b,
                    None => continue,
                };
                match label {
                    Label::Proc(h) if k.contains(h) => {
                        if !pair_successors(&cfg.programs[k], before, h).contains(s) {
                            return Err(format!("step {n}: {k} moved outside its pair-structure"));
                        }
                    }
                    _ => {
                        if before != s {
                            return Err(format!("step {n}: {k} changed without a move by its processes"));
                        }
                    }
                }
            }
        }
        prev = Some(cfg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{GuardExpr, GuardedCommand};

    fn sk(owner: &str, peer: &str, guard: GuardExpr) -> SyncSkeleton {
        let mut s = SyncSkeleton::new(owner, peer, &["s", "t"]);
        s.add_state("s", &["s"]);
        s.add_state("t", &["t"]);
        s.set_initial("s");
        s.add_arc("s", "t", GuardedCommand::guard(guard));
        s.add_arc("t", "t", GuardedCommand::always());
        s
    }

    fn spec_for(pp: &PairProgram) -> PairSpec {
        PairSpec { pair: pp.key(), spec: Formula::True, program: pp.name.clone() }
    }

    fn one_pair(ga: GuardExpr, gb: GuardExpr) -> DynamicSpec {
        let pp = Arc::new(PairProgram::new("ab", sk("a", "b", ga), sk("b", "a", gb), vec![]));
        let ps = spec_for(&pp);
        DynamicSpec {
            universe: vec![ps.clone()],
            programs: BTreeMap::from([(pp.name.clone(), pp.clone())]),
            initial: vec![ps.pair.clone()],
            rule: CreateRule::None,
            max_consecutive_creates: 1,
        }
    }

    #[test]
    fn single_pair_initial_configuration() {
        let ds = one_pair(GuardExpr::True, GuardExpr::True);
        let cfgs = initial_configurations(&ds, &mut ProgramCache::default()).unwrap();
        assert_eq!(cfgs.len(), 1);
        assert_eq!(cfgs[0].states.values().next().unwrap(), &ds.programs["ab"].initials[0]);
    }

    #[test]
    fn blocked_process_has_no_step() {
        let ds = one_pair(GuardExpr::prop("b", "t"), GuardExpr::True);
        let cfg = initial_configurations(&ds, &mut ProgramCache::default()).unwrap().remove(0);
        let steps = enabled_normal(&cfg);
        assert!(steps.iter().all(|(p, _)| p == &Pid::new("b")));
    }

    #[test]
    fn immediate_deadlock() {
        let ds = one_pair(GuardExpr::prop("b", "t"), GuardExpr::prop("a", "t"));
        match simulate(&ds, &SimOptions::default()) {
            Err(DynError::DeadlockReached(d)) => {
                assert!(d.trace.steps.is_empty());
                assert!(crate::waitfor::find_supercycle(&d.wfg).is_some());
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn simulation_reaches_quiescence() {
        let ds = one_pair(GuardExpr::prop("b", "t"), GuardExpr::True);
        let out = simulate(&ds, &SimOptions { seed: 3, ..Default::default() }).unwrap();
        assert_eq!(out.trace.end, EndReason::Quiescent);
        let last = out.trace.global_states().last().unwrap();
        assert!(last.locals.values().all(|l| l.holds("t") == Some(true)));
        assert!(out.trace.steps.len() >= 2);
        assert_eq!(out.audit.fairness_violations, 0);
        verify_trace_projection(&out.trace).unwrap();
    }

    #[test]
    fn zero_step_budget() {
        let ds = one_pair(GuardExpr::True, GuardExpr::True);
        let out = simulate(&ds, &SimOptions { max_steps: 0, ..Default::default() }).unwrap();
        assert!(out.trace.steps.is_empty());
        let r = check_trace(&out.trace, &[TraceProperty::Invariant { name: "x".into(), p: Formula::prop("a", "t") }]);
        assert!(!r[0].pass);
    }

    #[test]
    fn create_for_new_processes_and_conflicts() {
        let ab = Arc::new(PairProgram::new("ab", sk("a", "b", GuardExpr::True), sk("b", "a", GuardExpr::True), vec![]));
        let bc = Arc::new(PairProgram::new("bc", sk("b", "c", GuardExpr::True), sk("c", "b", GuardExpr::True), vec![]));
        let cd = Arc::new(PairProgram::new("cd", sk("c", "d", GuardExpr::True), sk("d", "c", GuardExpr::True), vec![]));
        let (pab, pbc, pcd) = (spec_for(&ab), spec_for(&bc), spec_for(&cd));
        let ds = DynamicSpec {
            universe: vec![pab.clone(), pbc.clone(), pcd.clone()],
            programs: [ab.clone(), bc.clone(), cd.clone()].into_iter().map(|p| (p.name.clone(), p)).collect(),
            initial: vec![pab.pair.clone()],
            rule: CreateRule::Script(vec![
                ScriptedCreate { at_step: 0, spec: pcd.clone() },
                ScriptedCreate { at_step: 0, spec: pbc.clone() },
            ]),
            max_consecutive_creates: 1,
        };
        let (pbc, pcd) = (Arc::new(pbc), Arc::new(pcd));
        let mut cache = ProgramCache::default();
        let cfg = initial_configurations(&ds, &mut cache).unwrap().remove(0);
        // Fresh processes: any reachable state is admissible.
        let later = cd.initials[0].clone();
        let cfg2 = apply_create(&ds, &cfg, &pcd, &cd, &later, &mut cache).unwrap();
        assert_eq!(cfg2.alive().len(), 4);
        // Out of order: the script wants (c,d) first.
        assert!(matches!(apply_create(&ds, &cfg, &pbc, &bc, &bc.initials[0], &mut cache), Err(DynError::RuleForbids(_))));
        // b has moved to t, so the join state (s, s) conflicts with it.
        let moved = enabled_normal(&cfg2).into_iter().find(|(p, c)| p == &Pid::new("b") && c != &cfg2).unwrap().1;
        assert!(matches!(
            apply_create(&ds, &moved, &pbc, &bc, &bc.initials[0], &mut cache),
            Err(DynError::InconsistentJoinState(_))
        ));
        let s = select_join_state(&moved, &bc, &mut cache).unwrap().unwrap();
        let cfg3 = apply_create(&ds, &moved, &pbc, &bc, &s, &mut cache).unwrap();
        assert!(cfg3.is_consistent());
        assert_eq!(cfg3.states.len(), 3);
        // Existing pair-states are untouched.
        for (k, st) in &moved.states {
            assert_eq!(&cfg3.states[k], st);
        }
    }

    #[test]
    fn trace_properties() {
        let mk = |a: bool, b: bool| {
            let mut s = JState::default();
            let props = vec!["p".to_string()];
            s.locals.insert(Pid::new("a"), LocalState::from_true("a", &props, if a { &["p"] } else { &[] }));
            s.locals.insert(Pid::new("b"), LocalState::from_true("b", &props, if b { &["p"] } else { &[] }));
            s
        };
        let pa = Formula::prop("a", "p");
        let pb = Formula::prop("b", "p");
        let good = vec![mk(false, false), mk(true, false), mk(true, true)];
        let bad = vec![mk(false, false), mk(false, true), mk(true, true)];
        let props = vec![
            TraceProperty::Precedence { name: "a before b".into(), p: pa.clone(), q: pb.clone() },
            TraceProperty::Absorption { name: "a stays".into(), p: pa.clone() },
            TraceProperty::BoundedLeadsTo { name: "a then b".into(), p: pa.clone(), q: pb.clone(), k: 1 },
            TraceProperty::Invariant { name: "ghost".into(), p: Formula::nprop("z", "p") },
        ];
        assert!(check_states(&good, true, &props).iter().all(|r| r.pass));
        let r = check_states(&bad, true, &props);
        assert_eq!(r[0].violation, Some(1));
        let flicker = vec![mk(true, false), mk(false, false), mk(false, false)];
        let r = check_states(&flicker, false, &props);
        assert_eq!(r[1].violation, Some(1));
        assert_eq!(r[2].violation, Some(0));
        let late = vec![mk(false, false), mk(true, false)];
        assert!(check_states(&late, false, &props)[2].pass);
        assert!(!check_states(&late, true, &props)[2].pass);
    }
}
