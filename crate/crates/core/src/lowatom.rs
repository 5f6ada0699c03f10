//! Low-atomicity execution: agents over single-cell shared memory and an
//! ordered lock manager, with linearization records and their replay.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use petgraph::algo::is_cyclic_directed;
use petgraph::graphmap::DiGraphMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dynamic::{
    apply_create, creation_protocol, initial_configurations, CreateBatch, Configuration, DynError, DynamicSpec, EndReason,
    PairSpec, ProgramCache, SystemHandle, Trace, TraceStep,
};
use crate::mc::{check_tstab, Label};
use crate::overlay::{all_enabled_choices, ComposedProcess};
use crate::skeleton::{apply_body, eval_guard, LocalState, Pid, Valuation};
use crate::structure::{JState, PairKey, PairProgram, PairState};

#[derive(Debug, Error)]
pub enum LowAtomError {
    #[error("{program} is not temporarily stable: {owner} {from} -> {to} branch {branch}")]
    NotStable { program: String, owner: Pid, from: String, to: String, branch: usize },
    #[error(transparent)]
    Dyn(#[from] DynError),
    #[error("model checking failed: {0}")]
    Check(String),
}

/// A lockable group of cells: AP_i of one process or SH_ij of one pair.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum GroupId {
    Ap(Pid),
    Sh(PairKey),
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::Ap(p) => write!(f, "AP_{p}"),
            GroupId::Sh(k) => write!(f, "SH_{k}"),
        }
    }
}

#[derive(Debug)]
struct Cell {
    name: String,
    /// Values of a shared variable; `None` for a proposition (0 or 1).
    domain: Option<Vec<String>>,
    value: AtomicU32,
}

/// Cells of one group, a seqlock version and the group's lock word.
#[derive(Debug)]
pub struct Group {
    pub id: GroupId,
    version: AtomicU64,
    /// Holder id plus one, or zero when free.
    lock: AtomicU32,
    cells: Vec<Cell>,
}

impl Group {
    fn for_process(p: &Pid, l: &LocalState) -> Group {
        let cells = l
            .assignment
            .iter()
            .map(|(n, &v)| Cell { name: n.clone(), domain: None, value: AtomicU32::new(v as u32) })
            .collect();
        Group { id: GroupId::Ap(p.clone()), version: AtomicU64::new(0), lock: AtomicU32::new(0), cells }
    }

    fn for_pair(pp: &PairProgram, shared: &Valuation) -> Group {
        let cells = pp
            .shared
            .iter()
            .map(|v| {
                let k = v.domain.iter().position(|d| Some(d) == shared.get(&v.name)).unwrap_or(0);
                Cell { name: v.name.clone(), domain: Some(v.domain.clone()), value: AtomicU32::new(k as u32) }
            })
            .collect();
        Group { id: GroupId::Sh(pp.key()), version: AtomicU64::new(0), lock: AtomicU32::new(0), cells }
    }

    pub fn read(&self, k: usize) -> u32 {
        self.cells[k].value.load(SeqCst)
    }

    pub fn write(&self, k: usize, v: u32) {
        self.cells[k].value.store(v, SeqCst);
    }

    fn begin(&self) {
        self.version.store(self.version.load(SeqCst) + 1, SeqCst);
    }

    fn end(&self) {
        self.version.store(self.version.load(SeqCst) + 1, SeqCst);
    }

    fn decode_local(&self, owner: &Pid, vals: &[u32]) -> LocalState {
        let assignment = self.cells.iter().zip(vals).map(|(c, &v)| (c.name.clone(), v != 0)).collect();
        LocalState { owner: owner.clone(), assignment }
    }

    fn decode_shared(&self, vals: &[u32]) -> Valuation {
        self.cells
            .iter()
            .zip(vals)
            .map(|(c, &v)| (c.name.clone(), c.domain.as_ref().map_or_else(|| v.to_string(), |d| d[v as usize].clone())))
            .collect()
    }

    fn encode(&self, k: usize, value: &str) -> u32 {
        match &self.cells[k].domain {
            Some(d) => d.iter().position(|x| x == value).unwrap_or(0) as u32,
            None => (value == "1") as u32,
        }
    }
}

/// Reads several groups consistently, or `None` if a writer interfered.
fn snapshot(groups: &[&Group]) -> Option<Vec<Vec<u32>>> {
    let before: Vec<u64> = groups.iter().map(|g| g.version.load(SeqCst)).collect();
    if before.iter().any(|v| v % 2 == 1) {
        return None;
    }
    let vals = groups.iter().map(|g| (0..g.cells.len()).map(|k| g.read(k)).collect()).collect();
    let same = groups.iter().zip(&before).all(|(g, &v)| g.version.load(SeqCst) == v);
    same.then_some(vals)
}

/// Every proposition and shared variable of the running system.
#[derive(Debug, Default)]
pub struct SharedStore {
    groups: RwLock<BTreeMap<GroupId, Arc<Group>>>,
}

impl SharedStore {
    pub fn group(&self, id: &GroupId) -> Option<Arc<Group>> {
        self.groups.read().get(id).cloned()
    }

    fn add(&self, g: Group) -> Arc<Group> {
        let g = Arc::new(g);
        self.groups.write().insert(g.id.clone(), g.clone());
        g
    }

    pub fn group_count(&self) -> usize {
        self.groups.read().len()
    }
}

/// Try-locks on groups plus the waits-for bookkeeping used by the cycle check.
#[derive(Debug, Default)]
pub struct LockManager {
    waiting: Mutex<BTreeMap<u32, Arc<Group>>>,
}

impl LockManager {
    pub fn try_acquire(&self, agent: u32, g: &Arc<Group>) -> bool {
        let ok = g.lock.compare_exchange(0, agent + 1, SeqCst, SeqCst).is_ok();
        let mut w = self.waiting.lock();
        if ok {
            w.remove(&agent);
        } else {
            w.insert(agent, g.clone());
        }
        ok
    }

    pub fn release(&self, agent: u32, g: &Group) {
        let prev = g.lock.swap(0, SeqCst);
        debug_assert_eq!(prev, agent + 1, "released a lock held by another agent");
    }

    pub fn holder(&self, g: &Group) -> Option<u32> {
        g.lock.load(SeqCst).checked_sub(1)
    }

    /// Whether some agents wait on each other in a cycle.
    pub fn waits_for_cycle(&self) -> bool {
        let mut graph = DiGraphMap::<u32, ()>::new();
        for (&a, g) in self.waiting.lock().iter() {
            if let Some(h) = self.holder(g) {
                graph.add_edge(a, h, ());
            }
        }
        is_cyclic_directed(&graph)
    }
}

/// One linearized step of the running system.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum LinRecord {
    Move { ts: u64, pid: Pid, from: String, to: String, writes: BTreeMap<String, String> },
    Create { ts: u64, pair: PairKey, program: String, locals: BTreeMap<Pid, String>, shared: Valuation },
}

impl LinRecord {
    pub fn ts(&self) -> u64 {
        match self {
            LinRecord::Move { ts, .. } | LinRecord::Create { ts, .. } => *ts,
        }
    }
}

fn quote(s: &str) -> String {
    if s.is_empty() || s.contains([' ', '"']) {
        format!("\"{}\"", s.replace('"', "'"))
    } else {
        s.to_string()
    }
}

fn tokens(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    for c in line.chars() {
        match c {
            '"' => quoted = !quoted,
            ' ' if !quoted => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            _ => cur.push(c),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// `LIN <ts> <pid> <from->to> <cell=value ...>` and `CREATE <ts> <i> <j> program=<name> <pid:state ...> <var=value ...>`.
pub fn write_lin(records: &[LinRecord], w: &mut dyn Write) -> io::Result<()> {
    for r in records {
        match r {
            LinRecord::Move { ts, pid, from, to, writes } => {
                write!(w, "LIN {ts} {pid} {}", quote(&format!("{from}->{to}")))?;
                for (c, v) in writes {
                    write!(w, " {}", quote(&format!("{c}={v}")))?;
                }
            }
            LinRecord::Create { ts, pair, program, locals, shared } => {
                write!(w, "CREATE {ts} {} {} {}", pair.0, pair.1, quote(&format!("program={program}")))?;
                for (p, s) in locals {
                    write!(w, " {}", quote(&format!("{p}:{s}")))?;
                }
                for (x, v) in shared {
                    write!(w, " {}", quote(&format!("{x}={v}")))?;
                }
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn parse_lin(text: &str) -> Result<Vec<LinRecord>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let t = tokens(line);
        let bad = || format!("line {}: malformed record", n + 1);
        if t.is_empty() {
            continue;
        }
        let ts: u64 = t.get(1).and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        match t[0].as_str() {
            "LIN" if t.len() >= 4 => {
                let (from, to) = t[3].split_once("->").ok_or_else(bad)?;
                let mut writes = BTreeMap::new();
                for kv in &t[4..] {
                    let (c, v) = kv.rsplit_once('=').ok_or_else(bad)?;
                    writes.insert(c.to_string(), v.to_string());
                }
                out.push(LinRecord::Move { ts, pid: Pid::new(t[2].as_str()), from: from.into(), to: to.into(), writes });
            }
            "CREATE" if t.len() >= 5 => {
                let program = t[4].strip_prefix("program=").ok_or_else(bad)?.to_string();
                let (mut locals, mut shared) = (BTreeMap::new(), Valuation::new());
                for kv in &t[5..] {
                    if let Some((p, s)) = kv.split_once(':') {
                        locals.insert(Pid::new(p), s.to_string());
                    } else {
                        let (x, v) = kv.split_once('=').ok_or_else(bad)?;
                        shared.insert(x.to_string(), v.to_string());
                    }
                }
                let pair = PairKey::new(&Pid::new(t[2].as_str()), &Pid::new(t[3].as_str()));
                out.push(LinRecord::Create { ts, pair, program, locals, shared });
            }
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AgentsMode {
    /// One thread; a seeded scheduler picks which agent takes its next step.
    Stepper,
    /// One thread per agent.
    Free,
}

#[derive(Clone, Debug)]
pub struct LowAtomOptions {
    pub seed: u64,
    pub mode: AgentsMode,
    /// Stepper: agent steps before giving up.
    pub max_steps: usize,
    /// Free: linearized moves before giving up.
    pub max_moves: usize,
    /// Free: wall-clock limit.
    pub time_limit: Duration,
    /// Free: longest sleep of an agent whose polls keep failing.
    pub backoff: Duration,
}

impl Default for LowAtomOptions {
    fn default() -> Self {
        LowAtomOptions {
            seed: 0,
            mode: AgentsMode::Stepper,
            max_steps: 1_000_000,
            max_moves: 200_000,
            time_limit: Duration::from_secs(30),
            backoff: Duration::from_micros(200),
        }
    }
}

/// Instrumentation counters of one run.
#[derive(Debug, Default)]
struct Counters {
    steps: AtomicUsize,
    polls: AtomicUsize,
    torn_reads: AtomicUsize,
    lock_attempts: AtomicUsize,
    lock_failures: AtomicUsize,
    recheck_failures: AtomicUsize,
    cycle_checks: AtomicUsize,
    cycles: AtomicUsize,
    interrupted_polls: AtomicUsize,
    max_concurrent_writers: AtomicUsize,
    writers: AtomicUsize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunStats {
    pub steps: usize,
    pub moves: usize,
    pub creates: usize,
    pub polls: usize,
    /// Seqlock reads discarded because a writer was active.
    pub torn_reads: usize,
    pub lock_attempts: usize,
    pub lock_failures: usize,
    /// Chosen guards found false at the linearization point.
    pub recheck_failures: usize,
    pub cycle_checks: usize,
    pub cycles: usize,
    /// Polls cancelled by a halt request.
    pub interrupted_polls: usize,
    /// Most agents inside a write epoch at once.
    pub max_concurrent_writers: usize,
}

#[derive(Clone, Debug)]
pub struct LowAtomReport {
    pub initial: Configuration,
    pub records: Vec<LinRecord>,
    pub end: EndReason,
    pub stats: RunStats,
}

/// Halt/resume mailbox of one agent: the creation-protocol command queue.
#[derive(Debug, Default)]
struct Control {
    halt: AtomicBool,
    acked: AtomicBool,
    parked: AtomicBool,
    update: Mutex<Option<View>>,
}

/// What an agent knows about its place in the configuration.
#[derive(Clone, Debug)]
struct View {
    proc_: ComposedProcess,
    own: Arc<Group>,
    nbrs: BTreeMap<Pid, (Arc<Group>, Arc<Group>)>,
}

#[derive(Debug)]
struct Poll {
    /// Indices into the composed process's moves.
    moves: Vec<usize>,
    x: Vec<BTreeSet<Pid>>,
    choice: Vec<BTreeMap<Pid, usize>>,
    order: Vec<(usize, Pid)>,
    cursor: usize,
}

#[derive(Debug)]
enum Phase {
    Idle,
    Polling(Poll),
    Locking { mv: usize, choice: BTreeMap<Pid, usize>, locks: Vec<Arc<Group>>, held: usize },
    Writing { mv: usize, choice: BTreeMap<Pid, usize>, locks: Vec<Arc<Group>> },
    Releasing { to: LocalState, locks: Vec<Arc<Group>> },
    Halted,
    Parked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Progress,
    Spin,
    Quiet,
}

struct Agent {
    id: u32,
    pid: Pid,
    control: Arc<Control>,
    view: View,
    local: LocalState,
    phase: Phase,
    rng: ChaCha8Rng,
}

impl Agent {
    fn runnable(&self) -> bool {
        match self.phase {
            Phase::Parked => self.control.halt.load(SeqCst),
            Phase::Halted => !self.control.halt.load(SeqCst),
            _ => true,
        }
    }

    fn interruptible(&self) -> bool {
        matches!(self.phase, Phase::Idle | Phase::Polling(_) | Phase::Parked)
    }

    fn step(&mut self, rt: &Runtime) -> Outcome {
        rt.counters.steps.fetch_add(1, SeqCst);
        if self.interruptible() && self.control.halt.load(SeqCst) {
            if matches!(self.phase, Phase::Polling(_)) {
                rt.counters.interrupted_polls.fetch_add(1, SeqCst);
            }
            self.phase = Phase::Halted;
            self.control.parked.store(false, SeqCst);
            self.control.acked.store(true, SeqCst);
            return Outcome::Progress;
        }
        match std::mem::replace(&mut self.phase, Phase::Idle) {
            Phase::Halted => {
                if self.control.halt.load(SeqCst) {
                    self.phase = Phase::Halted;
                    return Outcome::Quiet;
                }
                if let Some(v) = self.control.update.lock().take() {
                    self.view = v;
                }
                self.control.acked.store(false, SeqCst);
                Outcome::Progress
            }
            Phase::Parked => {
                self.phase = Phase::Parked;
                Outcome::Quiet
            }
            Phase::Idle => {
                self.phase = self.choose();
                if matches!(self.phase, Phase::Parked) {
                    self.control.parked.store(true, SeqCst);
                }
                Outcome::Progress
            }
            Phase::Polling(p) => self.poll(rt, p),
            Phase::Locking { mv, choice, locks, held } => {
                rt.counters.lock_attempts.fetch_add(1, SeqCst);
                if rt.locks.try_acquire(self.id, &locks[held]) {
                    self.phase = if held + 1 == locks.len() {
                        Phase::Writing { mv, choice, locks }
                    } else {
                        Phase::Locking { mv, choice, locks, held: held + 1 }
                    };
                    Outcome::Progress
                } else {
                    rt.counters.lock_failures.fetch_add(1, SeqCst);
                    self.phase = Phase::Locking { mv, choice, locks, held };
                    Outcome::Spin
                }
            }
            Phase::Writing { mv, choice, locks } => {
                let to = self.execute(rt, mv, &choice);
                self.phase = Phase::Releasing { to, locks };
                Outcome::Progress
            }
            Phase::Releasing { to, locks } => {
                for g in locks.iter().rev() {
                    rt.locks.release(self.id, g);
                }
                self.local = to;
                Outcome::Progress
            }
        }
    }

    /// Starts Choose: one Poll per move out of the current state. Moves that
    /// cannot change anything are left out unless nothing else exists, in
    /// which case the agent parks.
    fn choose(&mut self) -> Phase {
        let cp = &self.view.proc_;
        let useful: Vec<usize> = (0..cp.moves.len())
            .filter(|&k| {
                let m = &cp.moves[k];
                m.from == self.local && (m.from != m.to || m.per_neighbor.values().any(|c| c.branches().iter().any(|b| !b.body.is_empty())))
            })
            .collect();
        if useful.is_empty() {
            return Phase::Parked;
        }
        let x: Vec<BTreeSet<Pid>> = useful.iter().map(|&k| cp.moves[k].per_neighbor.keys().cloned().collect()).collect();
        let mut order: Vec<(usize, Pid)> = x.iter().enumerate().flat_map(|(a, s)| s.iter().map(move |j| (a, j.clone()))).collect();
        order.shuffle(&mut self.rng);
        let choice = vec![BTreeMap::new(); useful.len()];
        if let Some(a) = x.iter().position(|s| s.is_empty()) {
            return self.lock_phase(useful[a], BTreeMap::new());
        }
        Phase::Polling(Poll { moves: useful, x, choice, order, cursor: 0 })
    }

    /// One guard read of one Poll, interleaved round-robin over all Polls.
    fn poll(&mut self, rt: &Runtime, mut p: Poll) -> Outcome {
        let n = p.order.len();
        let mut k = 0;
        while k < n {
            let (a, j) = &p.order[(p.cursor + k) % n];
            if p.x[*a].contains(j) {
                break;
            }
            k += 1;
        }
        let (a, j) = p.order[(p.cursor + k) % n].clone();
        p.cursor = (p.cursor + k + 1) % n;
        rt.counters.polls.fetch_add(1, SeqCst);
        let (ap, sh) = &self.view.nbrs[&j];
        let vals = match snapshot(&[&**ap, &**sh]) {
            Some(v) => v,
            None => {
                rt.counters.torn_reads.fetch_add(1, SeqCst);
                self.phase = Phase::Polling(p);
                return Outcome::Spin;
            }
        };
        let peer = ap.decode_local(&j, &vals[0]);
        let shared = sh.decode_shared(&vals[1]);
        let cmd = &self.view.proc_.moves[p.moves[a]].per_neighbor[&j];
        let hit = cmd.branches().iter().position(|b| eval_guard(&b.guard, &peer, &shared).unwrap_or(false));
        match hit {
            Some(bi) => {
                p.x[a].remove(&j);
                p.choice[a].insert(j, bi);
                if p.x[a].is_empty() {
                    let mv = p.moves[a];
                    let choice = std::mem::take(&mut p.choice[a]);
                    self.phase = self.lock_phase(mv, choice);
                } else {
                    self.phase = Phase::Polling(p);
                }
                Outcome::Progress
            }
            None => {
                self.phase = Phase::Polling(p);
                Outcome::Spin
            }
        }
    }

    /// Locks AP_i and every SH_ij, in the global group order.
    fn lock_phase(&self, mv: usize, choice: BTreeMap<Pid, usize>) -> Phase {
        let mut locks: Vec<Arc<Group>> = vec![self.view.own.clone()];
        locks.extend(self.view.nbrs.values().map(|(_, sh)| sh.clone()));
        locks.sort_by(|a, b| a.id.cmp(&b.id));
        Phase::Locking { mv, choice, locks, held: 0 }
    }

    /// The linearization point: all bodies and the new AP_i in one lock epoch.
    fn execute(&mut self, rt: &Runtime, mv: usize, choice: &BTreeMap<Pid, usize>) -> LocalState {
        let w = rt.counters.writers.fetch_add(1, SeqCst) + 1;
        rt.counters.max_concurrent_writers.fetch_max(w, SeqCst);
        let m = self.view.proc_.moves[mv].clone();
        for (j, &bi) in choice {
            let (ap, sh) = &self.view.nbrs[j];
            let ok = snapshot(&[&**ap, &**sh]).is_some_and(|vals| {
                let peer = ap.decode_local(j, &vals[0]);
                let shared = sh.decode_shared(&vals[1]);
                eval_guard(&m.per_neighbor[j].branches()[bi].guard, &peer, &shared).unwrap_or(false)
            });
            if !ok {
                rt.counters.recheck_failures.fetch_add(1, SeqCst);
            }
        }
        let mut writes = BTreeMap::new();
        let own = &self.view.own;
        own.begin();
        for (k, c) in own.cells.iter().enumerate() {
            let v = m.to.holds(&c.name).unwrap_or(false);
            if m.from.holds(&c.name).unwrap_or(false) != v {
                own.write(k, v as u32);
                writes.insert(format!("{}.{}", self.pid, c.name), (v as u32).to_string());
            }
        }
        for (j, &bi) in choice {
            let body = &m.per_neighbor[j].branches()[bi].body;
            if body.is_empty() {
                continue;
            }
            let sh = &self.view.nbrs[j].1;
            sh.begin();
            for (x, v) in &body.0 {
                if let Some(k) = sh.cells.iter().position(|c| &c.name == x) {
                    sh.write(k, sh.encode(k, v));
                    writes.insert(x.clone(), v.clone());
                }
            }
            sh.end();
        }
        let ts = rt.clock.fetch_add(1, SeqCst);
        rt.records.lock().push(LinRecord::Move {
            ts,
            pid: self.pid.clone(),
            from: self.view.proc_.name_of(&m.from),
            to: self.view.proc_.name_of(&m.to),
            writes,
        });
        own.end();
        rt.counters.writers.fetch_sub(1, SeqCst);
        m.to
    }
}

/// State shared by all agents and the controller.
struct Runtime<'a> {
    ds: &'a DynamicSpec,
    store: SharedStore,
    locks: LockManager,
    clock: AtomicU64,
    records: Mutex<Vec<LinRecord>>,
    counters: Counters,
    controls: RwLock<BTreeMap<Pid, Arc<Control>>>,
    /// Pairs in force and their programs, as installed by the controller.
    meta: RwLock<Configuration>,
    next_id: AtomicU32,
    creates: AtomicUsize,
    stop: AtomicBool,
}

impl<'a> Runtime<'a> {
    fn new(ds: &'a DynamicSpec, initial: &Configuration) -> Runtime<'a> {
        let rt = Runtime {
            ds,
            store: SharedStore::default(),
            locks: LockManager::default(),
            clock: AtomicU64::new(0),
            records: Mutex::new(Vec::new()),
            counters: Counters::default(),
            controls: RwLock::new(BTreeMap::new()),
            meta: RwLock::new(Configuration::default()),
            next_id: AtomicU32::new(0),
            creates: AtomicUsize::new(0),
            stop: AtomicBool::new(false),
        };
        let g = initial.global();
        for (p, l) in &g.locals {
            rt.store.add(Group::for_process(p, l));
        }
        for (k, pp) in &initial.programs {
            rt.store.add(Group::for_pair(pp, &initial.states[k].shared));
        }
        let mut meta = initial.clone();
        meta.states.clear();
        *rt.meta.write() = meta;
        rt
    }

    fn view(&self, p: &Pid) -> View {
        let meta = self.meta.read();
        let proc_ = meta.composed_process(p).expect("alive process");
        let own = self.store.group(&GroupId::Ap(p.clone())).expect("AP group");
        let nbrs = meta
            .neighbors(p)
            .into_iter()
            .map(|j| {
                let ap = self.store.group(&GroupId::Ap(j.clone())).expect("AP group");
                let sh = self.store.group(&GroupId::Sh(PairKey::new(p, &j))).expect("SH group");
                (j, (ap, sh))
            })
            .collect();
        View { proc_, own, nbrs }
    }

    /// A new agent, halted until resumed.
    fn agent(&self, p: &Pid, local: LocalState, halted: bool, seed: u64) -> Agent {
        let id = self.next_id.fetch_add(1, SeqCst);
        let control = Arc::new(Control::default());
        control.halt.store(halted, SeqCst);
        control.acked.store(halted, SeqCst);
        self.controls.write().insert(p.clone(), control.clone());
        Agent {
            id,
            pid: p.clone(),
            control,
            view: self.view(p),
            local,
            phase: if halted { Phase::Halted } else { Phase::Idle },
            rng: ChaCha8Rng::seed_from_u64(seed ^ (u64::from(id) << 32) ^ 0x9e37_79b9),
        }
    }

    fn control(&self, p: &Pid) -> Option<Arc<Control>> {
        self.controls.read().get(p).cloned()
    }

    /// The configuration read from the store, one seqlock read per pair.
    fn snapshot(&self) -> Configuration {
        let mut cfg = self.meta.read().clone();
        let keys: Vec<PairKey> = cfg.specs.keys().cloned().collect();
        for k in keys {
            let ga = self.store.group(&GroupId::Ap(k.0.clone())).expect("AP group");
            let gb = self.store.group(&GroupId::Ap(k.1.clone())).expect("AP group");
            let sh = self.store.group(&GroupId::Sh(k.clone())).expect("SH group");
            let vals = loop {
                if let Some(v) = snapshot(&[&*ga, &*gb, &*sh]) {
                    break v;
                }
                std::hint::spin_loop();
            };
            let mut locals = BTreeMap::new();
            locals.insert(k.0.clone(), ga.decode_local(&k.0, &vals[0]));
            locals.insert(k.1.clone(), gb.decode_local(&k.1, &vals[1]));
            cfg.states.insert(k, JState { locals, shared: sh.decode_shared(&vals[2]) });
        }
        cfg
    }

    /// Registers a new pair: groups for new processes and the pair, new
    /// agents, and refreshed views for the existing endpoints.
    fn install(&self, ps: &Arc<PairSpec>, pp: &Arc<PairProgram>, s: &PairState, seed: u64) -> Vec<Agent> {
        {
            let mut meta = self.meta.write();
            meta.specs.insert(ps.pair.clone(), ps.clone());
            meta.programs.insert(ps.pair.clone(), pp.clone());
        }
        let mut fresh = Vec::new();
        for (p, l) in &s.locals {
            if self.store.group(&GroupId::Ap(p.clone())).is_none() {
                self.store.add(Group::for_process(p, l));
                fresh.push(p.clone());
            }
        }
        self.store.add(Group::for_pair(pp, &s.shared));
        let mut agents = Vec::new();
        for p in s.locals.keys() {
            if fresh.contains(p) {
                agents.push(self.agent(p, s.locals[p].clone(), true, seed));
            } else if let Some(c) = self.control(p) {
                *c.update.lock() = Some(self.view(p));
            }
        }
        let ts = self.clock.fetch_add(1, SeqCst);
        let names = |p: &Pid| pp.skeleton_of(p).map(|sk| sk.name_of(&s.locals[p])).unwrap_or_default();
        self.records.lock().push(LinRecord::Create {
            ts,
            pair: ps.pair.clone(),
            program: pp.name.clone(),
            locals: s.locals.keys().map(|p| (p.clone(), names(p))).collect(),
            shared: s.shared.clone(),
        });
        self.creates.fetch_add(1, SeqCst);
        agents
    }

    fn stats(&self) -> RunStats {
        let c = &self.counters;
        RunStats {
            steps: c.steps.load(SeqCst),
            moves: self.records.lock().iter().filter(|r| matches!(r, LinRecord::Move { .. })).count(),
            creates: self.creates.load(SeqCst),
            polls: c.polls.load(SeqCst),
            torn_reads: c.torn_reads.load(SeqCst),
            lock_attempts: c.lock_attempts.load(SeqCst),
            lock_failures: c.lock_failures.load(SeqCst),
            recheck_failures: c.recheck_failures.load(SeqCst),
            cycle_checks: c.cycle_checks.load(SeqCst),
            cycles: c.cycles.load(SeqCst),
            interrupted_polls: c.interrupted_polls.load(SeqCst),
            max_concurrent_writers: c.max_concurrent_writers.load(SeqCst),
        }
    }

    fn check_cycles(&self) {
        self.counters.cycle_checks.fetch_add(1, SeqCst);
        if self.locks.waits_for_cycle() {
            self.counters.cycles.fetch_add(1, SeqCst);
        }
    }

    /// The batch to install next: a started one, else the earliest due one,
    /// else, when `idle`, the earliest of all.
    fn pick_batch(&self, batches: Vec<CreateBatch>, now: usize, idle: bool) -> Option<CreateBatch> {
        let mut bs = batches;
        bs.sort_by_key(|a| (!a.started, a.due, a.id.clone()));
        bs.into_iter().find(|b| b.started || b.due <= now || idle)
    }
}

/// The controller's side of the creation protocol. Processes named by a
/// batch stay halted until the whole batch is installed.
struct Controller<'r, 'a> {
    rt: &'r Runtime<'a>,
    hold: BTreeSet<Pid>,
    fresh: Vec<Agent>,
    seed: u64,
    /// Stepper mode: the agents to drive while waiting for acknowledgements.
    stepper: Option<(&'r mut Vec<Agent>, &'r mut ChaCha8Rng, usize)>,
    budget_hit: bool,
}

impl SystemHandle for Controller<'_, '_> {
    fn is_alive(&self, p: &Pid) -> bool {
        self.rt.control(p).is_some()
    }

    fn request_halt(&mut self, p: &Pid) {
        if let Some(c) = self.rt.control(p) {
            c.halt.store(true, SeqCst);
        }
    }

    fn await_ack(&mut self, p: &Pid) {
        let c = match self.rt.control(p) {
            Some(c) => c,
            None => return,
        };
        let rt = self.rt;
        match &mut self.stepper {
            Some((agents, rng, limit)) => {
                let mut n = 0;
                while !c.acked.load(SeqCst) {
                    let cand: Vec<usize> = (0..agents.len()).filter(|&k| agents[k].runnable()).collect();
                    if cand.is_empty() || n > *limit {
                        self.budget_hit = true;
                        return;
                    }
                    let k = cand[rng.gen_range(0..cand.len())];
                    if agents[k].step(rt) == Outcome::Spin && matches!(agents[k].phase, Phase::Locking { .. }) {
                        rt.check_cycles();
                    }
                    n += 1;
                }
            }
            None => {
                let start = Instant::now();
                while !c.acked.load(SeqCst) {
                    if rt.stop.load(SeqCst) || start.elapsed() > Duration::from_secs(10) {
                        self.budget_hit = true;
                        return;
                    }
                    std::thread::yield_now();
                }
            }
        }
    }

    fn snapshot(&self) -> Configuration {
        self.rt.snapshot()
    }

    fn install(&mut self, _cfg: Configuration, ps: &Arc<PairSpec>, pp: &Arc<PairProgram>, s_ij: &PairState) {
        let agents = self.rt.install(ps, pp, s_ij, self.seed);
        for a in &agents {
            self.hold.insert(a.pid.clone());
        }
        self.fresh.extend(agents);
    }

    fn resume(&mut self, p: &Pid) {
        if self.hold.contains(p) {
            return;
        }
        if let Some(c) = self.rt.control(p) {
            c.halt.store(false, SeqCst);
        }
    }
}

impl Controller<'_, '_> {
    fn run_batch(&mut self, batch: &CreateBatch, cache: &mut ProgramCache) -> Result<(), DynError> {
        let mut named: BTreeSet<Pid> = BTreeSet::new();
        for it in &batch.items {
            named.insert(it.spec.pair.0.clone());
            named.insert(it.spec.pair.1.clone());
        }
        let live: Vec<Pid> = named.into_iter().filter(|p| self.is_alive(p)).collect();
        for p in &live {
            self.request_halt(p);
        }
        for p in &live {
            self.await_ack(p);
            if self.budget_hit {
                return Ok(());
            }
        }
        self.hold.extend(live.iter().cloned());
        let mut result = Ok(());
        for it in &batch.items {
            if let Err(e) = creation_protocol(self.rt.ds, self, &it.spec, &it.program, cache) {
                result = Err(e);
                break;
            }
            if self.budget_hit {
                break;
            }
        }
        for p in std::mem::take(&mut self.hold) {
            if let Some(c) = self.rt.control(&p) {
                c.halt.store(false, SeqCst);
            }
        }
        result
    }
}

fn check_programs(ds: &DynamicSpec) -> Result<(), LowAtomError> {
    for pp in ds.programs.values() {
        if let Some(v) = check_tstab(pp).map_err(|e| LowAtomError::Check(e.to_string()))? {
            return Err(LowAtomError::NotStable {
                program: pp.name.clone(),
                owner: v.owner,
                from: v.from,
                to: v.to,
                branch: v.branch,
            });
        }
    }
    Ok(())
}

/// Runs the program with one agent per process until every agent has parked
/// and no creates remain, or the budget runs out.
pub fn run_lowatom(ds: &DynamicSpec, opts: &LowAtomOptions) -> Result<LowAtomReport, LowAtomError> {
    check_programs(ds)?;
    let mut cache = ProgramCache::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let inits = initial_configurations(ds, &mut cache)?;
    let initial = inits[rng.gen_range(0..inits.len())].clone();
    let rt = Runtime::new(ds, &initial);
    let g = initial.global();
    let mut agents: Vec<Agent> = g.locals.iter().map(|(p, l)| rt.agent(p, l.clone(), false, opts.seed)).collect();
    let end = match opts.mode {
        AgentsMode::Stepper => run_stepper(&rt, &mut agents, &mut rng, opts, &mut cache)?,
        AgentsMode::Free => run_free(&rt, agents, opts, &mut cache)?,
    };
    let mut records = std::mem::take(&mut *rt.records.lock());
    records.sort_by_key(|r| r.ts());
    let mut stats = rt.stats();
    stats.moves = records.iter().filter(|r| matches!(r, LinRecord::Move { .. })).count();
    Ok(LowAtomReport { initial, records, end, stats })
}

fn run_stepper(
    rt: &Runtime,
    agents: &mut Vec<Agent>,
    rng: &mut ChaCha8Rng,
    opts: &LowAtomOptions,
    cache: &mut ProgramCache,
) -> Result<EndReason, LowAtomError> {
    while rt.counters.steps.load(SeqCst) < opts.max_steps {
        let cand: Vec<usize> = (0..agents.len()).filter(|&k| agents[k].runnable()).collect();
        // The controller is one more candidate.
        let pick = rng.gen_range(0..=cand.len());
        if pick < cand.len() {
            let k = cand[pick];
            if agents[k].step(rt) == Outcome::Spin && matches!(agents[k].phase, Phase::Locking { .. }) {
                rt.check_cycles();
            }
            continue;
        }
        rt.counters.steps.fetch_add(1, SeqCst);
        let cfg = rt.snapshot();
        let batches = rt.ds.allowed_batches(&cfg)?;
        if batches.is_empty() {
            if cand.is_empty() {
                return Ok(EndReason::Quiescent);
            }
            continue;
        }
        let now = rt.records.lock().len();
        let batch = match rt.pick_batch(batches, now, cand.is_empty()) {
            Some(b) => b,
            None => continue,
        };
        let limit = opts.max_steps;
        let mut ctl = Controller { rt, hold: BTreeSet::new(), fresh: Vec::new(), seed: opts.seed, stepper: Some((agents, rng, limit)), budget_hit: false };
        ctl.run_batch(&batch, cache)?;
        if ctl.budget_hit {
            return Ok(EndReason::Budget);
        }
        let fresh = std::mem::take(&mut ctl.fresh);
        drop(ctl);
        agents.extend(fresh);
    }
    Ok(EndReason::Budget)
}

fn run_free(rt: &Runtime, agents: Vec<Agent>, opts: &LowAtomOptions, cache: &mut ProgramCache) -> Result<EndReason, LowAtomError> {
    let start = Instant::now();
    let backoff = opts.backoff;
    let drive = move |mut a: Agent, rt: &Runtime| {
        let mut spins = 0u32;
        while !rt.stop.load(SeqCst) {
            match a.step(rt) {
                Outcome::Progress => spins = 0,
                Outcome::Spin | Outcome::Quiet => {
                    spins += 1;
                    if spins < 64 {
                        std::hint::spin_loop();
                    } else if spins < 256 {
                        std::thread::yield_now();
                    } else {
                        std::thread::sleep(backoff.min(Duration::from_micros(u64::from(spins))));
                    }
                }
            }
        }
        // Locks are never held across a stop: finish the current execute.
        while matches!(a.phase, Phase::Locking { .. } | Phase::Writing { .. } | Phase::Releasing { .. }) {
            if let Phase::Locking { ref locks, held, .. } = a.phase {
                // Give up cleanly before the epoch starts.
                for g in locks[..held].iter().rev() {
                    rt.locks.release(a.id, g);
                }
                break;
            }
            a.step(rt);
        }
    };
    std::thread::scope(|s| -> Result<EndReason, LowAtomError> {
        for a in agents {
            s.spawn(move || drive(a, rt));
        }
        let result = loop {
            if start.elapsed() > opts.time_limit || rt.records.lock().len() > opts.max_moves {
                break Ok(EndReason::Budget);
            }
            if rt.counters.steps.load(SeqCst).is_multiple_of(64) {
                rt.check_cycles();
            }
            let cfg = rt.snapshot();
            let batches = match rt.ds.allowed_batches(&cfg) {
                Ok(b) => b,
                Err(e) => break Err(e.into()),
            };
            let idle = rt.controls.read().values().all(|c| c.parked.load(SeqCst));
            if batches.is_empty() {
                if idle {
                    break Ok(EndReason::Quiescent);
                }
                std::thread::sleep(Duration::from_micros(50));
                continue;
            }
            let now = rt.records.lock().len();
            let batch = match rt.pick_batch(batches, now, idle) {
                Some(b) => b,
                None => {
                    std::thread::sleep(Duration::from_micros(50));
                    continue;
                }
            };
            let mut ctl = Controller { rt, hold: BTreeSet::new(), fresh: Vec::new(), seed: opts.seed, stepper: None, budget_hit: false };
            let r = ctl.run_batch(&batch, cache);
            for a in std::mem::take(&mut ctl.fresh) {
                s.spawn(move || drive(a, rt));
            }
            if let Err(e) = r {
                break Err(e.into());
            }
            if ctl.budget_hit {
                break Ok(EndReason::Budget);
            }
        };
        rt.stop.store(true, SeqCst);
        result
    })
}

/// Outcome of replaying linearization records.
#[derive(Clone, Debug)]
pub struct ReplayVerdict {
    pub valid: bool,
    pub failed_at: Option<usize>,
    pub reason: Option<String>,
    /// The replayed prefix as an abstract trace.
    pub trace: Trace,
}

/// Replays records against the normal and create transition semantics,
/// starting from `initial`.
pub fn replay_linearization(ds: &DynamicSpec, initial: &Configuration, records: &[LinRecord], end: EndReason) -> ReplayVerdict {
    let mut cache = ProgramCache::default();
    let mut cfg = initial.clone();
    let mut g = cfg.global();
    let mut trace = Trace { initial: initial.clone(), steps: Vec::new(), end };
    let mut last_ts: Option<u64> = None;
    let fail = |trace: Trace, k: usize, why: String| ReplayVerdict { valid: false, failed_at: Some(k), reason: Some(why), trace };
    for (k, r) in records.iter().enumerate() {
        if last_ts.is_some_and(|t| r.ts() <= t) {
            return fail(trace, k, "timestamps out of order".into());
        }
        last_ts = Some(r.ts());
        match r {
            LinRecord::Move { pid, from, to, writes, .. } => {
                let frozen = match ds.frozen(&cfg) {
                    Ok(f) => f,
                    Err(e) => return fail(trace, k, e.to_string()),
                };
                if frozen.contains(pid) {
                    return fail(trace, k, format!("{pid} moved inside a create batch"));
                }
                let cp = match cfg.composed_process(pid) {
                    Some(cp) => cp,
                    None => return fail(trace, k, format!("{pid} is not alive")),
                };
                let cur = g.locals[pid].clone();
                if &cp.name_of(&cur) != from {
                    return fail(trace, k, format!("{pid} is in {}, not {from}", cp.name_of(&cur)));
                }
                let mut found = None;
                'search: for mv in cp.moves.iter().filter(|m| m.from == cur && &cp.name_of(&m.to) == to) {
                    for choice in all_enabled_choices(mv, &g) {
                        let mut t = g.clone();
                        t.locals.insert(pid.clone(), mv.to.clone());
                        for (nb, &bi) in &choice {
                            t.shared = apply_body(&mv.per_neighbor[nb].branches()[bi].body, &t.shared);
                        }
                        if writes_match(pid, &g, &t, writes) {
                            found = Some((mv.clone(), choice));
                            break 'search;
                        }
                    }
                }
                let (mv, choice) = match found {
                    Some(f) => f,
                    None => return fail(trace, k, format!("no enabled move of {pid} {from}->{to} yields the recorded writes")),
                };
                let next = crate::dynamic::apply_normal(&cfg, pid, &mv, &choice);
                let changed = next.states.iter().filter(|(key, s)| cfg.states.get(*key) != Some(*s)).map(|(a, b)| (a.clone(), b.clone())).collect();
                trace.steps.push(TraceStep { label: Label::Proc(pid.clone()), changed, created: None, note: None });
                cfg = next;
                g = cfg.global();
            }
            LinRecord::Create { pair, program, locals, shared, .. } => {
                let item = match ds.next_creates(&cfg) {
                    Ok(items) => items.into_iter().find(|it| &it.spec.pair == pair && &it.program.name == program),
                    Err(e) => return fail(trace, k, e.to_string()),
                };
                let item = match item {
                    Some(it) => it,
                    None => return fail(trace, k, format!("the rule does not allow {pair} with {program} here")),
                };
                let pp = &item.program;
                let mut s = JState { locals: BTreeMap::new(), shared: shared.clone() };
                for (p, name) in locals {
                    match pp.skeleton_of(p).and_then(|sk| sk.state_index(name).map(|i| sk.states[i].clone())) {
                        Some(l) => {
                            s.locals.insert(p.clone(), l);
                        }
                        None => return fail(trace, k, format!("unknown state {name} of {p}")),
                    }
                }
                match apply_create(ds, &cfg, &item.spec, pp, &s, &mut cache) {
                    Ok(next) => {
                        let mut changed = BTreeMap::new();
                        changed.insert(pair.clone(), s);
                        trace.steps.push(TraceStep {
                            label: Label::Create(pair.0.clone(), pair.1.clone()),
                            changed,
                            created: Some((item.spec.clone(), pp.clone())),
                            note: None,
                        });
                        cfg = next;
                        g = cfg.global();
                    }
                    Err(e) => return fail(trace, k, e.to_string()),
                }
            }
        }
    }
    ReplayVerdict { valid: true, failed_at: None, reason: None, trace }
}

/// The recorded writes are exactly the cells changed by the step, plus
/// possibly rewrites of a variable to its current value.
fn writes_match(pid: &Pid, before: &JState, after: &JState, writes: &BTreeMap<String, String>) -> bool {
    let prefix = format!("{pid}.");
    let cell = |s: &JState, c: &str| -> Option<String> {
        match c.strip_prefix(&prefix) {
            Some(prop) if s.shared.get(c).is_none() => s.locals[pid].holds(prop).map(|b| (b as u32).to_string()),
            _ => s.shared.get(c).cloned(),
        }
    };
    if writes.iter().any(|(c, v)| cell(after, c).as_ref() != Some(v)) {
        return false;
    }
    let props: HashSet<&String> = after.locals[pid].assignment.keys().collect();
    let prop_ok = props.iter().all(|p| {
        before.locals[pid].holds(p) == after.locals[pid].holds(p) || writes.contains_key(&format!("{pid}.{p}"))
    });
    let vars_ok = after.shared.iter().all(|(x, v)| before.shared.get(x) == Some(v) || writes.contains_key(x));
    prop_ok && vars_ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamic::{CreateRule, ScriptedCreate};
    use crate::mc::Formula;
    use crate::skeleton::{GuardExpr, GuardedCommand, SyncSkeleton};

    fn sk(owner: &str, peer: &str, guard: GuardExpr) -> SyncSkeleton {
        let mut s = SyncSkeleton::new(owner, peer, &["s", "t"]);
        s.add_state("s", &["s"]);
        s.add_state("t", &["t"]);
        s.set_initial("s");
        s.add_arc("s", "t", GuardedCommand::guard(guard));
        s.add_arc("t", "t", GuardedCommand::always());
        s
    }

    fn spec(pp: &PairProgram) -> PairSpec {
        PairSpec { pair: pp.key(), spec: Formula::True, program: pp.name.clone() }
    }

    fn ds_of(pps: Vec<PairProgram>, initial: usize, script: Vec<(usize, usize)>) -> DynamicSpec {
        let universe: Vec<PairSpec> = pps.iter().map(spec).collect();
        let rule = if script.is_empty() {
            CreateRule::None
        } else {
            CreateRule::Script(script.iter().map(|&(at, k)| ScriptedCreate { at_step: at, spec: universe[k].clone() }).collect())
        };
        DynamicSpec {
            initial: universe[..initial].iter().map(|p| p.pair.clone()).collect(),
            programs: pps.into_iter().map(|p| (p.name.clone(), Arc::new(p))).collect(),
            universe,
            rule,
            max_consecutive_creates: 1,
        }
    }

    /// b waits for a to reach t.
    fn chain() -> DynamicSpec {
        let pp = PairProgram::new("ab", sk("a", "b", GuardExpr::True), sk("b", "a", GuardExpr::prop("a", "t")), vec![]);
        ds_of(vec![pp], 1, vec![])
    }

    #[test]
    fn stepper_run_replays() {
        let ds = chain();
        for seed in 0..10 {
            let r = run_lowatom(&ds, &LowAtomOptions { seed, ..Default::default() }).unwrap();
            assert_eq!(r.end, EndReason::Quiescent);
            assert_eq!(r.records.len(), 2);
            let v = replay_linearization(&ds, &r.initial, &r.records, r.end);
            assert!(v.valid, "{:?}", v.reason);
            assert_eq!(r.stats.recheck_failures, 0);
            assert_eq!(r.stats.cycles, 0);
        }
    }

    #[test]
    fn empty_records_are_valid() {
        let ds = chain();
        let mut cache = ProgramCache::default();
        let init = initial_configurations(&ds, &mut cache).unwrap().remove(0);
        assert!(replay_linearization(&ds, &init, &[], EndReason::Quiescent).valid);
    }

    #[test]
    fn swapped_records_are_invalid() {
        let ds = chain();
        let r = run_lowatom(&ds, &LowAtomOptions::default()).unwrap();
        let mut recs = r.records.clone();
        let (t0, t1) = (recs[0].ts(), recs[1].ts());
        recs.swap(0, 1);
        for (rec, t) in recs.iter_mut().zip([t0, t1]) {
            match rec {
                LinRecord::Move { ts, .. } | LinRecord::Create { ts, .. } => *ts = t,
            }
        }
        let v = replay_linearization(&ds, &r.initial, &recs, r.end);
        assert!(!v.valid);
        assert_eq!(v.failed_at, Some(0));
    }

    #[test]
    fn lin_file_round_trip() {
        let ds = chain();
        let r = run_lowatom(&ds, &LowAtomOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_lin(&r.records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("LIN 0 a s->t a.s=0 a.t=1"));
        assert_eq!(parse_lin(&text).unwrap(), r.records);
    }

    #[test]
    fn free_run_replays() {
        let ds = chain();
        let r = run_lowatom(&ds, &LowAtomOptions { mode: AgentsMode::Free, ..Default::default() }).unwrap();
        assert_eq!(r.end, EndReason::Quiescent);
        assert!(replay_linearization(&ds, &r.initial, &r.records, r.end).valid);
    }

    #[test]
    fn scripted_create_interrupts_poll() {
        // b polls a guard that only becomes true after (b,c) exists and c moves.
        let ab = PairProgram::new("ab", sk("a", "b", GuardExpr::True), sk("b", "a", GuardExpr::True), vec![]);
        let bc = PairProgram::new("bc", sk("b", "c", GuardExpr::prop("c", "t")), sk("c", "b", GuardExpr::True), vec![]);
        let ds = ds_of(vec![ab, bc], 1, vec![(0, 1)]);
        for seed in 0..20 {
            let r = run_lowatom(&ds, &LowAtomOptions { seed, ..Default::default() }).unwrap();
            assert_eq!(r.end, EndReason::Quiescent, "seed {seed}");
            assert_eq!(r.stats.creates, 1);
            let v = replay_linearization(&ds, &r.initial, &r.records, r.end);
            assert!(v.valid, "seed {seed}: {:?}", v.reason);
        }
    }

    #[test]
    fn unstable_program_is_refused() {
        // b's guard on a.s is falsified by a's own move.
        let pp = PairProgram::new("ab", sk("a", "b", GuardExpr::True), sk("b", "a", GuardExpr::prop("a", "s")), vec![]);
        let ds = ds_of(vec![pp], 1, vec![]);
        assert!(matches!(run_lowatom(&ds, &LowAtomOptions::default()), Err(LowAtomError::NotStable { .. })));
    }

    #[test]
    fn lock_manager_detects_cycles() {
        let lm = LockManager::default();
        let ga = Arc::new(Group::for_process(&Pid::new("a"), &LocalState::from_true("a", &["s".to_string()], &["s"])));
        let gb = Arc::new(Group::for_process(&Pid::new("b"), &LocalState::from_true("b", &["s".to_string()], &["s"])));
        assert!(lm.try_acquire(0, &ga));
        assert!(lm.try_acquire(1, &gb));
        assert!(!lm.try_acquire(0, &gb));
        assert!(!lm.waits_for_cycle());
        assert!(!lm.try_acquire(1, &ga));
        assert!(lm.waits_for_cycle());
        lm.release(0, &ga);
        assert!(lm.try_acquire(1, &ga));
        assert!(!lm.waits_for_cycle());
    }
}
