//! Generated corpora: the ring two-phase commit, the eventually-serializable
//! data service, small toys and documented mutants.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamic::{
    Configuration, CreateBatch, CreateGenerator, CreateItem, CreateRule, DynamicSpec, PairSpec, ScriptedCreate, TraceProperty,
};
use crate::mc::{CheckOptions, Formula};
use crate::skeleton::{Body, Branch, GuardExpr, GuardedCommand, LocalState, Pid, SharedVar, SyncSkeleton};
use crate::structure::{PairKey, PairProgram, StaticEntry, StaticProgram};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("a ring needs at least two processes, got {0}")]
    RingTooSmall(usize),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

fn g(owner: &Pid, prop: &str) -> GuardExpr {
    GuardExpr::prop(owner.as_str(), prop)
}

fn f(owner: &Pid, prop: &str) -> Formula {
    Formula::prop(owner.as_str(), prop)
}

fn nf(owner: &Pid, prop: &str) -> Formula {
    Formula::nprop(owner.as_str(), prop)
}

/// Process `k` of a two-phase ring.
pub fn ring_pid(k: usize) -> Pid {
    Pid::new(format!("p{k}"))
}

/// Guards of one side of a ring pair: vote (st->sb or st->pr), commit, abort.
struct RingGuards {
    vote: GuardExpr,
    commit: GuardExpr,
    abort: GuardExpr,
}

fn ring_skeleton(owner: &Pid, peer: &Pid, coordinator: bool, gs: RingGuards) -> SyncSkeleton {
    let mid = if coordinator { "pr" } else { "sb" };
    let mut sk = SyncSkeleton::new(owner.as_str(), peer.as_str(), &["st", mid, "cm", "ab"]);
    for s in ["st", mid, "cm", "ab"] {
        sk.add_state(s, &[s]);
    }
    sk.set_initial("st");
    sk.add_arc("st", mid, GuardedCommand::guard(gs.vote));
    if !coordinator {
        sk.add_arc("st", "ab", GuardedCommand::always());
    }
    sk.add_arc(mid, "cm", GuardedCommand::guard(gs.commit));
    sk.add_arc(mid, "ab", GuardedCommand::guard(gs.abort));
    sk.add_arc("cm", "cm", GuardedCommand::always());
    sk.add_arc("ab", "ab", GuardedCommand::always());
    sk
}

fn free() -> RingGuards {
    RingGuards { vote: GuardExpr::True, commit: GuardExpr::True, abort: GuardExpr::True }
}

/// Guards of a participant waiting on predecessor `p`, whose "voted" state is `voted`.
fn follower(p: &Pid, voted: &str) -> RingGuards {
    RingGuards { vote: g(p, voted), commit: g(p, "cm"), abort: g(p, "ab") }
}

/// Guards of a predecessor that decides once successor `q` has left st.
fn leader(q: &Pid) -> RingGuards {
    let left = GuardExpr::not(g(q, "st"));
    RingGuards { vote: GuardExpr::True, commit: left.clone(), abort: left }
}

fn exclusive_absorbing(p: &Pid) -> Formula {
    Formula::and(vec![
        Formula::ag(Formula::or(vec![nf(p, "cm"), nf(p, "ab")])),
        Formula::ag(Formula::implies(f(p, "cm"), Formula::ag(f(p, "cm")))),
    ])
}

fn waits_for_decision(p: &Pid, i: &Pid) -> Formula {
    let decided = Formula::or(vec![f(p, "cm"), f(p, "ab")]);
    Formula::ag(Formula::implies(
        f(i, "sb"),
        Formula::au(f(i, "sb"), Formula::and(vec![f(i, "sb"), decided])),
    ))
}

fn can_abort(i: &Pid) -> Formula {
    Formula::ag(Formula::implies(f(i, "st"), Formula::ex(i.as_str(), f(i, "ab"))))
}

/// The ring two-phase commit over processes p0 (coordinator) ... p{n-1}.
#[derive(Clone, Debug)]
pub struct TwoPhase {
    pub n: usize,
    pub program: StaticProgram,
}

/// A named property of a full product, checked in the given mode.
#[derive(Clone, Debug)]
pub struct ProductProperty {
    pub name: String,
    pub formula: Formula,
    pub options: CheckOptions,
}

pub fn gen_two_phase(n: usize) -> Result<TwoPhase, CorpusError> {
    if n < 2 {
        return Err(CorpusError::RingTooSmall(n));
    }
    let p: Vec<Pid> = (0..n).map(ring_pid).collect();
    let mut pairs = Vec::new();
    let (c, last) = (&p[0], &p[n - 1]);

    // (0,1), merged with (n-1,0) when n = 2.
    let coord_1 = if n == 2 {
        RingGuards { vote: GuardExpr::True, commit: g(last, "sb"), abort: GuardExpr::not(g(last, "st")) }
    } else {
        leader(&p[1])
    };
    let mut spec01 = vec![
        Formula::leads_weak(f(&p[1], "cm"), f(c, "cm")),
        Formula::leads(Formula::and(vec![f(c, "cm"), f(&p[1], "sb")]), f(&p[1], "cm")),
        exclusive_absorbing(c),
        exclusive_absorbing(&p[1]),
        waits_for_decision(c, &p[1]),
        Formula::leads_weak(f(c, "ab"), f(&p[1], "ab")),
        can_abort(&p[1]),
    ];
    if n == 2 {
        spec01.push(Formula::leads_weak(f(c, "cm"), f(last, "sb")));
        spec01.push(Formula::af(Formula::or(vec![f(c, "cm"), f(c, "ab")])));
    }
    pairs.push((
        format!("ring{n}:{c}|{}", p[1]),
        ring_skeleton(c, &p[1], true, coord_1),
        ring_skeleton(&p[1], c, false, follower(c, "pr")),
        Formula::and(spec01),
    ));

    for i in 2..n {
        let (a, b) = (&p[i - 1], &p[i]);
        let spec = Formula::and(vec![
            Formula::leads_weak(f(b, "sb"), f(a, "sb")),
            Formula::leads_weak(f(b, "cm"), f(a, "cm")),
            Formula::leads(Formula::and(vec![f(a, "cm"), f(b, "sb")]), f(b, "cm")),
            exclusive_absorbing(a),
            exclusive_absorbing(b),
            waits_for_decision(a, b),
            Formula::leads_weak(f(a, "ab"), f(b, "ab")),
            can_abort(b),
        ]);
        pairs.push((
            format!("ring{n}:{a}|{b}"),
            ring_skeleton(a, b, false, leader(b)),
            ring_skeleton(b, a, false, follower(a, "sb")),
            spec,
        ));
    }

    if n > 2 {
        let coord = RingGuards { vote: GuardExpr::True, commit: g(last, "sb"), abort: GuardExpr::not(g(last, "st")) };
        let spec = Formula::and(vec![
            Formula::leads_weak(f(c, "cm"), f(last, "sb")),
            exclusive_absorbing(c),
            exclusive_absorbing(last),
            Formula::af(Formula::or(vec![f(c, "cm"), f(c, "ab")])),
            can_abort(last),
        ]);
        pairs.push((
            format!("ring{n}:{last}|{c}"),
            ring_skeleton(last, c, false, follower(c, "pr")),
            ring_skeleton(c, last, true, coord),
            spec,
        ));
    }

    let mut program = StaticProgram::default();
    for (name, si, sj, spec) in pairs {
        let pp = PairProgram::new(name, si, sj, vec![]);
        program.entries.push(StaticEntry { i: pp.i.clone(), j: pp.j.clone(), spec });
        program.pairs.insert(pp.key(), pp);
    }
    Ok(TwoPhase { n, program })
}

impl TwoPhase {
    pub fn pids(&self) -> Vec<Pid> {
        (0..self.n).map(ring_pid).collect()
    }

    /// Ring pairs in order (0,1), (1,2), ..., (n-1,0).
    pub fn ring_keys(&self) -> Vec<PairKey> {
        let p = self.pids();
        let mut keys: Vec<PairKey> = (1..self.n).map(|i| PairKey::new(&p[i - 1], &p[i])).collect();
        if self.n > 2 {
            keys.push(PairKey::new(&p[self.n - 1], &p[0]));
        }
        keys
    }

    /// End-to-end properties of the full product.
    pub fn product_properties(&self) -> Vec<ProductProperty> {
        let p = self.pids();
        let c = &p[0];
        let parts = &p[1..];
        let all = |prop: &str| Formula::and(parts.iter().map(|q| f(q, prop)).collect());
        let prop = |name: &str, formula: Formula, options: CheckOptions| ProductProperty { name: name.to_string(), formula, options };
        let mut out = vec![
            prop(
                "no deadlock",
                Formula::ag(Formula::or(p.iter().map(|q| Formula::ex(q.as_str(), Formula::True)).collect())),
                CheckOptions::plain(),
            ),
            prop(
                "commit implies all commit (state invariant)",
                Formula::ag(Formula::and(parts.iter().map(|q| Formula::or(vec![nf(c, "cm"), f(q, "cm")])).collect())),
                CheckOptions::plain(),
            ),
            prop("commit leads to all commit", Formula::leads_weak(f(c, "cm"), all("cm")), CheckOptions::fair()),
            prop(
                "commit excludes abort",
                Formula::ag(Formula::and(parts.iter().map(|q| Formula::or(vec![nf(c, "cm"), nf(q, "ab")])).collect())),
                CheckOptions::plain(),
            ),
            prop("abort propagates", Formula::leads(f(c, "ab"), all("ab")), CheckOptions::fair()),
            prop("coordinator decides", Formula::af(Formula::or(vec![f(c, "cm"), f(c, "ab")])), CheckOptions::fair()),
            prop("unilateral abort", Formula::and(parts.iter().map(can_abort).collect()), CheckOptions::plain()),
        ];
        for i in 1..self.n.saturating_sub(1) {
            let (a, b) = (&p[i], &p[i + 1]);
            out.push(prop(
                &format!("commit relayed by {a}"),
                Formula::leads_weak(f(a, "cm"), Formula::au(f(b, "sb"), Formula::and(vec![f(b, "sb"), f(a, "cm")]))),
                CheckOptions::fair(),
            ));
        }
        out
    }
}

impl TwoPhase {
    /// Run-level counterparts of the end-to-end properties; eventualities
    /// must be met within `horizon` steps.
    pub fn trace_properties(&self, horizon: usize) -> Vec<TraceProperty> {
        let p = self.pids();
        let c = &p[0];
        let parts = &p[1..];
        let all = |prop: &str| Formula::and(parts.iter().map(|q| f(q, prop)).collect());
        let mut out = vec![
            TraceProperty::Invariant {
                name: "commit excludes abort".into(),
                p: Formula::and(parts.iter().map(|q| Formula::or(vec![nf(c, "cm"), nf(q, "ab")])).collect()),
            },
            TraceProperty::BoundedLeadsTo { name: "commit leads to all commit".into(), p: f(c, "cm"), q: all("cm"), k: horizon },
            TraceProperty::BoundedLeadsTo { name: "abort propagates".into(), p: f(c, "ab"), q: all("ab"), k: horizon },
            TraceProperty::BoundedLeadsTo {
                name: "coordinator decides".into(),
                p: Formula::True,
                q: Formula::or(vec![f(c, "cm"), f(c, "ab")]),
                k: horizon,
            },
        ];
        for q in &p {
            out.push(TraceProperty::Absorption { name: format!("{q} commit is final"), p: f(q, "cm") });
            out.push(TraceProperty::Absorption { name: format!("{q} abort is final"), p: f(q, "ab") });
        }
        out
    }
}

/// The ring with the predecessor's decision guard "successor left st"
/// replaced by true in pair (i-1, i): the successor's submit guard sb_{i-1}
/// is then no longer stable.
pub fn two_phase_tstab_mutant(n: usize, i: usize) -> Result<TwoPhase, CorpusError> {
    let mut tp = gen_two_phase(n)?;
    if i < 2 || i >= n {
        return Err(CorpusError::InvalidScenario(format!("mutated pair index {i} outside 2..{n}")));
    }
    let p = tp.pids();
    let key = PairKey::new(&p[i - 1], &p[i]);
    let pp = tp.program.pairs.get_mut(&key).unwrap();
    let (a, b) = (p[i - 1].clone(), p[i].clone());
    let skel = ring_skeleton(&a, &b, false, free());
    let other = pp.skeleton_of(&b).unwrap().clone();
    *pp = PairProgram::new(format!("{}-tstab", pp.name), skel, other, vec![]);
    Ok(tp)
}

/// An ESDS operation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsdsOp {
    pub id: String,
    pub client: String,
    pub home: String,
    #[serde(default)]
    pub prev: Vec<String>,
    #[serde(default)]
    pub strict: bool,
    /// Earliest simulation step at which the client may issue the operation.
    #[serde(default)]
    pub due: usize,
    /// In force from the start instead of created.
    #[serde(default)]
    pub initial: bool,
}

/// A replica and the index of the first operation it takes part in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsdsReplica {
    pub id: String,
    #[serde(default)]
    pub from_op: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsdsScenario {
    pub ops: Vec<EsdsOp>,
    pub replicas: Vec<EsdsReplica>,
    /// Mutate the CSC guard so that the liveness condition fails.
    #[serde(default)]
    pub liveness_mutant: bool,
}

impl EsdsScenario {
    /// A random scenario with `n_ops` operations over up to `n_replicas`
    /// replicas; later replicas join part-way through.
    pub fn random(n_ops: usize, n_replicas: usize, seed: u64) -> EsdsScenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_replicas = n_replicas.max(1);
        let mut replicas = vec![EsdsReplica { id: "r1".into(), from_op: 0 }];
        for k in 1..n_replicas {
            replicas.push(EsdsReplica { id: format!("r{}", k + 1), from_op: rng.gen_range(0..n_ops.max(1)) });
        }
        let mut ops = Vec::new();
        for x in 0..n_ops {
            let present: Vec<&EsdsReplica> = replicas.iter().filter(|r| r.from_op <= x).collect();
            let home = present.choose(&mut rng).unwrap().id.clone();
            let mut prev = Vec::new();
            for y in 0..x {
                if rng.gen_bool(0.25) && prev.len() < 2 {
                    prev.push(format!("x{}", y + 1));
                }
            }
            ops.push(EsdsOp {
                id: format!("x{}", x + 1),
                client: format!("c{}", rng.gen_range(1..=2)),
                home,
                prev,
                strict: rng.gen_bool(0.3),
                due: x * rng.gen_range(0..4),
                initial: false,
            });
        }
        EsdsScenario { ops, replicas, liveness_mutant: false }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidScenario(m));
        let mut seen = BTreeSet::new();
        let rids: BTreeSet<&str> = self.replicas.iter().map(|r| r.id.as_str()).collect();
        if rids.len() != self.replicas.len() {
            return bad("duplicate replica id".into());
        }
        for (k, op) in self.ops.iter().enumerate() {
            if op.id.contains('.') || op.client.contains('.') || op.home.contains('.') {
                return bad(format!("identifiers of {} may not contain '.'", op.id));
            }
            if !seen.insert(op.id.as_str()) {
                return bad(format!("duplicate op id {}", op.id));
            }
            match self.replicas.iter().find(|r| r.id == op.home) {
                None => return bad(format!("home replica {} of {} is not declared", op.home, op.id)),
                Some(r) if r.from_op > k => return bad(format!("home replica {} of {} joins later", op.home, op.id)),
                _ => {}
            }
            for x in &op.prev {
                if !self.ops[..k].iter().any(|o| &o.id == x) {
                    return bad(format!("{} lists {x} in prev, which is not an earlier operation", op.id));
                }
            }
            if op.initial && !op.prev.is_empty() {
                return bad(format!("initial operation {} cannot have predecessors", op.id));
            }
            if self.ops.iter().any(|o| o.client == op.home) {
                return bad(format!("{} names both a client and a replica", op.home));
            }
        }
        Ok(())
    }

    fn op_index(&self, id: &str) -> usize {
        self.ops.iter().position(|o| o.id == id).unwrap()
    }

    /// Replicas present when op `k` is issued.
    pub fn replicas_for(&self, k: usize) -> Vec<&str> {
        self.replicas.iter().filter(|r| r.from_op <= k).map(|r| r.id.as_str()).collect()
    }
}

pub fn client_pid(op: &EsdsOp) -> Pid {
    Pid::new(format!("{}.{}", op.client, op.id))
}

pub fn replica_pid(replica: &str, op: &EsdsOp) -> Pid {
    Pid::new(format!("{replica}.{}", op.id))
}

const REPLICA_PROPS: [&str; 5] = ["in", "wt", "dn", "st", "snt"];

/// The replica local structure with every arc guarded by `guard(from, to)`.
fn replica_skeleton(owner: &Pid, peer: &Pid, strict: bool, guard: impl Fn(&str, &str) -> GuardExpr) -> SyncSkeleton {
    let mut sk = SyncSkeleton::new(owner.as_str(), peer.as_str(), &REPLICA_PROPS);
    sk.add_state("in", &["in"]);
    sk.add_state("wt", &["wt"]);
    sk.add_state("dn", &["dn"]);
    sk.add_state("st", &["dn", "st"]);
    sk.add_state("st snt", &["dn", "st", "snt"]);
    let mut arcs = vec![("in", "wt"), ("wt", "dn"), ("dn", "st"), ("st", "st snt"), ("st snt", "st snt")];
    if !strict {
        sk.add_state("dn snt", &["dn", "snt"]);
        arcs.push(("dn", "dn snt"));
        arcs.push(("dn snt", "st snt"));
    }
    sk.set_initial("in");
    for (a, b) in arcs {
        sk.add_arc(a, b, GuardedCommand::guard(guard(a, b)));
    }
    sk
}

fn client_skeleton(owner: &Pid, replica: &Pid) -> SyncSkeleton {
    let mut sk = SyncSkeleton::new(owner.as_str(), replica.as_str(), &["in", "wt", "dn"]);
    for s in ["in", "wt", "dn"] {
        sk.add_state(s, &[s]);
    }
    sk.set_initial("in");
    sk.add_arc("in", "wt", GuardedCommand::always());
    sk.add_arc("wt", "dn", GuardedCommand::guard(g(replica, "dn")));
    sk.add_arc("dn", "dn", GuardedCommand::always());
    sk
}

fn absorbing(p: &Pid, prop: &str) -> Formula {
    Formula::ag(Formula::implies(f(p, prop), Formula::ag(f(p, prop))))
}

/// C_c^x || R_r^x.
pub fn esds_client_pair(op: &EsdsOp) -> (PairProgram, Formula) {
    let (c, r) = (client_pid(op), replica_pid(&op.home, op));
    let rs = replica_skeleton(&r, &c, op.strict, |a, _| if a == "in" { g(&c, "wt") } else { GuardExpr::True });
    let pp = PairProgram::new(format!("esds-client:{c}|{r}"), client_skeleton(&c, &r), rs, vec![]);
    let spec = Formula::and(vec![
        Formula::ag(Formula::implies(f(&r, "wt"), f(&c, "wt"))),
        Formula::ag(Formula::implies(f(&c, "wt"), Formula::af(Formula::or(vec![f(&r, "wt"), f(&r, "dn")])))),
        Formula::ag(Formula::implies(f(&c, "wt"), Formula::af(f(&c, "dn")))),
        absorbing(&c, "dn"),
    ]);
    (pp, spec)
}

/// R_r^x || R_{r'}^{x'} for x' in x.prev.
pub fn esds_csc_pair(op: &EsdsOp, before: &EsdsOp, mutant: bool) -> (PairProgram, Formula) {
    let (r, r2) = (replica_pid(&op.home, op), replica_pid(&before.home, before));
    let entry = if mutant { g(&r2, "in") } else { g(&r2, "dn") };
    let own = replica_skeleton(&r, &r2, op.strict, |a, _| if a == "in" { entry.clone() } else { GuardExpr::True });
    let other = replica_skeleton(&r2, &r, before.strict, |_, _| GuardExpr::True);
    let suffix = if mutant { "-mutant" } else { "" };
    let pp = PairProgram::new(format!("esds-csc{suffix}:{r}|{r2}"), own, other, vec![]);
    let spec = Formula::and(vec![
        Formula::ag(Formula::implies(f(&r, "dn"), f(&r2, "dn"))),
        absorbing(&r, "dn"),
        absorbing(&r2, "dn"),
    ]);
    (pp, spec)
}

/// R_r^x || R_{r'}^x for a replica r' other than the home of x.
pub fn esds_replica_pair(op: &EsdsOp, other: &str) -> (PairProgram, Formula) {
    let (r, r2) = (replica_pid(&op.home, op), replica_pid(other, op));
    let own = replica_skeleton(&r, &r2, op.strict, |a, b| match (a, b) {
        ("dn", "st") | ("dn snt", "st snt") => g(&r2, "dn"),
        ("st", "st snt") if op.strict => g(&r2, "st"),
        _ => GuardExpr::True,
    });
    let peer = replica_skeleton(&r2, &r, op.strict, |a, b| match (a, b) {
        ("dn", "st") | ("dn snt", "st snt") => g(&r, "dn"),
        _ => GuardExpr::True,
    });
    let pp = PairProgram::new(format!("esds-replica:{r}|{r2}"), own, peer, vec![]);
    let mut parts = vec![Formula::ag(Formula::implies(
        f(&r, "wt"),
        Formula::and(vec![Formula::af(f(&r, "st")), Formula::af(f(&r2, "st"))]),
    ))];
    if op.strict {
        parts.push(Formula::ag(Formula::implies(f(&r, "snt"), Formula::and(vec![f(&r, "st"), f(&r2, "st")]))));
        parts.push(absorbing(&r, "snt"));
        parts.push(absorbing(&r, "st"));
    }
    (pp, Formula::and(parts))
}

/// All pair-specs and programs of one operation, in creation order.
pub fn esds_op_items(scn: &EsdsScenario, k: usize) -> Vec<CreateItem> {
    let op = &scn.ops[k];
    let mut pairs = vec![esds_client_pair(op)];
    for r in scn.replicas_for(k) {
        if r != op.home {
            pairs.push(esds_replica_pair(op, r));
        }
    }
    for x in &op.prev {
        pairs.push(esds_csc_pair(op, &scn.ops[scn.op_index(x)], scn.liveness_mutant));
    }
    pairs
        .into_iter()
        .map(|(pp, spec)| CreateItem { spec: Arc::new(PairSpec { pair: pp.key(), spec, program: pp.name.clone() }), program: Arc::new(pp) })
        .collect()
}

/// The ESDS creation rule: a client issues op x once every x' in x.prev has
/// been received by its home replica; the op's pairs are then created as one
/// batch (client pair, replica pairs, CSC pairs).
#[derive(Debug)]
pub struct EsdsRule {
    scn: EsdsScenario,
    items: Vec<Vec<CreateItem>>,
}

impl EsdsRule {
    pub fn new(scn: EsdsScenario) -> Self {
        let items = (0..scn.ops.len()).map(|k| esds_op_items(&scn, k)).collect();
        EsdsRule { scn, items }
    }

    fn received(&self, cfg: &Configuration, id: &str) -> bool {
        let op = &self.scn.ops[self.scn.op_index(id)];
        cfg.local(&replica_pid(&op.home, op)).is_some_and(|l| l.holds("in") == Some(false))
    }
}

impl CreateGenerator for EsdsRule {
    fn name(&self) -> &str {
        "esds"
    }

    fn allowed(&self, cfg: &Configuration) -> Vec<CreateBatch> {
        let mut out = Vec::new();
        for (k, op) in self.scn.ops.iter().enumerate() {
            let items = &self.items[k];
            let remaining: Vec<CreateItem> = items.iter().filter(|it| !cfg.specs.contains_key(&it.spec.pair)).cloned().collect();
            if remaining.is_empty() {
                continue;
            }
            let started = remaining.len() < items.len();
            if !started && !op.prev.iter().all(|x| self.received(cfg, x)) {
                continue;
            }
            out.push(CreateBatch { id: op.id.clone(), due: op.due, items: remaining, started });
        }
        out
    }

    fn annotate(&self, pid: &Pid, from: &LocalState, to: &LocalState) -> Option<String> {
        let (replica, op) = pid.as_str().split_once('.')?;
        let o = self.scn.ops.iter().find(|o| o.id == op)?;
        if o.home != replica {
            return None;
        }
        if from.holds("wt") == Some(true) && to.holds("dn") == Some(true) {
            Some(format!("lb_{replica}({op}) := next(lb_{replica}); v := val({op}, lb_{replica})"))
        } else {
            None
        }
    }
}

/// A generated ESDS system.
#[derive(Clone, Debug)]
pub struct Esds {
    pub scenario: EsdsScenario,
    pub spec: DynamicSpec,
}

pub fn gen_esds(scn: &EsdsScenario) -> Result<Esds, CorpusError> {
    scn.validate()?;
    let rule = EsdsRule::new(scn.clone());
    let mut universe = Vec::new();
    let mut programs = BTreeMap::new();
    let mut initial = Vec::new();
    let mut cap = 1;
    for (k, op) in scn.ops.iter().enumerate() {
        cap = cap.max(rule.items[k].len());
        for it in &rule.items[k] {
            universe.push((*it.spec).clone());
            programs.insert(it.program.name.clone(), it.program.clone());
            if op.initial {
                initial.push(it.spec.pair.clone());
            }
        }
    }
    let spec = DynamicSpec { universe, programs, initial, rule: CreateRule::Generator(Arc::new(rule)), max_consecutive_creates: cap };
    Ok(Esds { scenario: scn.clone(), spec })
}

impl Esds {
    /// Trace-level properties: every op is done at its home, stable at every
    /// replica present at its issue, strict results are sent only once stable
    /// everywhere, and prev operations are done first.
    pub fn trace_properties(&self, horizon: usize) -> Vec<TraceProperty> {
        let scn = &self.scenario;
        let mut out = Vec::new();
        for (k, op) in scn.ops.iter().enumerate() {
            let home = replica_pid(&op.home, op);
            out.push(TraceProperty::BoundedLeadsTo {
                name: format!("{} done", op.id),
                p: Formula::True,
                q: f(&home, "dn"),
                k: horizon,
            });
            let reps: Vec<Pid> = scn.replicas_for(k).iter().map(|r| replica_pid(r, op)).collect();
            for r in &reps {
                out.push(TraceProperty::BoundedLeadsTo {
                    name: format!("{} stable at {r}", op.id),
                    p: Formula::True,
                    q: f(r, "st"),
                    k: horizon,
                });
            }
            if op.strict {
                out.push(TraceProperty::Invariant {
                    name: format!("{} sent only when stable", op.id),
                    p: Formula::or(vec![nf(&home, "snt"), Formula::and(reps.iter().map(|r| f(r, "st")).collect())]),
                });
            }
            for x in &op.prev {
                let before = &scn.ops[scn.op_index(x)];
                out.push(TraceProperty::Precedence {
                    name: format!("{x} done before {}", op.id),
                    p: f(&replica_pid(&before.home, before), "dn"),
                    q: f(&home, "dn"),
                });
            }
            out.push(TraceProperty::Absorption { name: format!("{} stays done", op.id), p: f(&home, "dn") });
        }
        out
    }
}

/// Two processes whose only moves wait on each other: deadlocked from the start.
pub fn toy_static_deadlock() -> StaticProgram {
    let mut program = StaticProgram::default();
    let mk = |o: &str, p: &str| {
        let mut sk = SyncSkeleton::new(o, p, &["s", "t"]);
        sk.add_state("s", &["s"]);
        sk.add_state("t", &["t"]);
        sk.set_initial("s");
        sk.add_arc("s", "t", GuardedCommand::guard(GuardExpr::prop(p, "t")));
        sk.add_arc("t", "t", GuardedCommand::always());
        sk
    };
    let pp = PairProgram::new("deadlock:a|b", mk("a", "b"), mk("b", "a"), vec![]);
    program.entries.push(StaticEntry { i: pp.i.clone(), j: pp.j.clone(), spec: Formula::True });
    program.pairs.insert(pp.key(), pp);
    program
}

/// A free pair (a,b) in force initially, then a scripted create of (b,c)
/// whose processes each wait for the other to finish first.
pub fn toy_dynamic_deadlock() -> DynamicSpec {
    let mk = |o: &str, p: &str, guard: GuardExpr| {
        let mut sk = SyncSkeleton::new(o, p, &["s", "t"]);
        sk.add_state("s", &["s"]);
        sk.add_state("t", &["t"]);
        sk.set_initial("s");
        sk.add_arc("s", "t", GuardedCommand::guard(guard));
        sk.add_arc("t", "t", GuardedCommand::always());
        sk
    };
    let ab = PairProgram::new("dyn-toy:a|b", mk("a", "b", GuardExpr::True), mk("b", "a", GuardExpr::True), vec![]);
    let bc = PairProgram::new(
        "dyn-toy:b|c",
        mk("b", "c", GuardExpr::prop("c", "t")),
        mk("c", "b", GuardExpr::prop("b", "t")),
        vec![],
    );
    let ps_ab = PairSpec { pair: ab.key(), spec: Formula::True, program: ab.name.clone() };
    let ps_bc = PairSpec { pair: bc.key(), spec: Formula::True, program: bc.name.clone() };
    DynamicSpec {
        universe: vec![ps_ab.clone(), ps_bc.clone()],
        programs: [ab, bc].into_iter().map(|p| (p.name.clone(), Arc::new(p))).collect(),
        initial: vec![ps_ab.pair],
        rule: CreateRule::Script(vec![ScriptedCreate { at_step: 0, spec: ps_bc }]),
        max_consecutive_creates: 1,
    }
}

/// A static program viewed as a dynamic one: every pair in force, no creates.
pub fn static_as_dynamic(sp: &StaticProgram) -> DynamicSpec {
    let mut universe = Vec::new();
    let mut programs = BTreeMap::new();
    for (k, pp) in &sp.pairs {
        let spec = sp.spec_of(k).cloned().unwrap_or(Formula::True);
        universe.push(PairSpec { pair: k.clone(), spec, program: pp.name.clone() });
        programs.insert(pp.name.clone(), Arc::new(pp.clone()));
    }
    DynamicSpec { initial: sp.keys(), universe, programs, rule: CreateRule::None, max_consecutive_creates: 1 }
}

/// A random valid program over processes a, b, c with two or three pairs,
/// two or three local states per process and one shared variable per pair.
pub fn random_toy(seed: u64) -> StaticProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["a", "b", "c"];
    let mut keys = vec![("a", "b"), ("b", "c")];
    if rng.gen_bool(0.5) {
        keys.push(("a", "c"));
    }
    // One local shape per process: states and arcs.
    let mut shapes: BTreeMap<&str, (Vec<String>, Vec<(usize, usize)>)> = BTreeMap::new();
    for p in names {
        let k = rng.gen_range(2..=3);
        let states: Vec<String> = (0..k).map(|s| format!("s{s}")).collect();
        let mut arcs: BTreeSet<(usize, usize)> = (0..k).map(|s| (s, (s + 1) % k)).collect();
        for _ in 0..rng.gen_range(0..3) {
            arcs.insert((rng.gen_range(0..k), rng.gen_range(0..k)));
        }
        shapes.insert(p, (states, arcs.into_iter().collect()));
    }
    let mut program = StaticProgram::default();
    for (x, y) in keys {
        let var = format!("v_{x}{y}");
        let shared = vec![SharedVar {
            name: var.clone(),
            pair: (Pid::new(x), Pid::new(y)),
            domain: vec!["0".into(), "1".into()],
            initial: "0".into(),
        }];
        let build = |o: &str, p: &str, rng: &mut ChaCha8Rng| {
            let (states, arcs) = &shapes[o];
            let peer_states = &shapes[p].0;
            let props: Vec<&str> = states.iter().map(|s| s.as_str()).collect();
            let mut sk = SyncSkeleton::new(o, p, &props);
            for s in states {
                sk.add_state(s, &[s.as_str()]);
            }
            sk.set_initial("s0");
            for &(a, b) in arcs {
                let nb = rng.gen_range(1..=2);
                let branches = (0..nb)
                    .map(|_| {
                        let ps = peer_states.choose(rng).unwrap();
                        let guard = match rng.gen_range(0..5) {
                            0 | 1 => GuardExpr::True,
                            2 => GuardExpr::prop(p, ps),
                            3 => GuardExpr::not(GuardExpr::prop(p, ps)),
                            _ => GuardExpr::eq(&var, if rng.gen_bool(0.5) { "0" } else { "1" }),
                        };
                        let body = if rng.gen_bool(0.3) {
                            Body::set(&[(var.as_str(), if rng.gen_bool(0.5) { "0" } else { "1" })])
                        } else {
                            Body::empty()
                        };
                        Branch { guard, body }
                    })
                    .collect();
                sk.add_arc(&states[a], &states[b], GuardedCommand::new(branches));
            }
            sk
        };
        let si = build(x, y, &mut rng);
        let sj = build(y, x, &mut rng);
        let pp = PairProgram::new(format!("toy{seed}:{x}|{y}"), si, sj, shared);
        program.entries.push(StaticEntry { i: pp.i.clone(), j: pp.j.clone(), spec: Formula::True });
        program.pairs.insert(pp.key(), pp);
    }
    program
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc::{check_liveness_condition, check_spec, check_tstab};
    use crate::skeleton::strip_labels;

    #[test]
    fn ring_sizes() {
        assert_eq!(gen_two_phase(1).unwrap_err(), CorpusError::RingTooSmall(1));
        assert_eq!(gen_two_phase(2).unwrap().program.pairs.len(), 1);
        let tp = gen_two_phase(4).unwrap();
        assert_eq!(tp.program.pairs.len(), 4);
        assert_eq!(tp.program.processes().len(), 4);
        tp.program.validate().unwrap();
        assert_eq!(tp.ring_keys().len(), 4);
    }

    #[test]
    fn ring_pair_specs_hold() {
        for n in [2, 3, 4] {
            let tp = gen_two_phase(n).unwrap();
            for (k, pp) in &tp.program.pairs {
                let r = check_spec(pp, tp.program.spec_of(k).unwrap()).unwrap();
                assert!(r.holds, "n={n} pair {k}: {:?}", r.counterexample);
                assert_eq!(check_tstab(pp).unwrap(), None, "n={n} pair {k}");
            }
        }
    }

    #[test]
    fn participant_shapes_agree() {
        let tp = gen_two_phase(4).unwrap();
        let p2 = ring_pid(2);
        let shapes: Vec<_> = tp.program.pairs.values().filter_map(|pp| pp.skeleton_of(&p2)).map(strip_labels).collect();
        assert_eq!(shapes.len(), 2);
        assert_eq!(shapes[0], shapes[1]);
    }

    #[test]
    fn tstab_mutant_fails_on_submit() {
        let tp = two_phase_tstab_mutant(4, 2).unwrap();
        let key = PairKey::new(&ring_pid(1), &ring_pid(2));
        let v = check_tstab(&tp.program.pairs[&key]).unwrap().expect("mutant must fail");
        assert_eq!(v.owner, ring_pid(2));
        assert_eq!((v.from.as_str(), v.to.as_str()), ("st", "sb"));
    }

    fn scenario() -> EsdsScenario {
        EsdsScenario {
            ops: vec![
                EsdsOp { id: "x1".into(), client: "c1".into(), home: "r1".into(), prev: vec![], strict: true, due: 0, initial: false },
                EsdsOp { id: "x2".into(), client: "c2".into(), home: "r2".into(), prev: vec!["x1".into()], strict: false, due: 0, initial: false },
            ],
            replicas: vec![EsdsReplica { id: "r1".into(), from_op: 0 }, EsdsReplica { id: "r2".into(), from_op: 0 }],
            liveness_mutant: false,
        }
    }

    #[test]
    fn esds_pairs_pass_gates() {
        let scn = scenario();
        for k in 0..scn.ops.len() {
            for it in esds_op_items(&scn, k) {
                it.program.validate().unwrap();
                let r = check_spec(&it.program, &it.spec.spec).unwrap();
                assert!(r.holds, "{}: {:?}", it.program.name, r.counterexample);
                assert_eq!(check_tstab(&it.program).unwrap(), None, "{}", it.program.name);
                for p in [&it.program.i, &it.program.j] {
                    assert_eq!(check_liveness_condition(&it.program, p).unwrap(), None, "{} {p}", it.program.name);
                }
            }
        }
    }

    #[test]
    fn esds_liveness_mutant() {
        let mut scn = scenario();
        scn.liveness_mutant = true;
        let items = esds_op_items(&scn, 1);
        let csc = items.iter().find(|it| it.program.name.starts_with("esds-csc")).unwrap();
        let w = check_liveness_condition(&csc.program, &Pid::new("r1.x1")).unwrap();
        assert!(w.is_some());
    }

    #[test]
    fn esds_rule_orders_batches() {
        let esds = gen_esds(&scenario()).unwrap();
        let cfg = Configuration::default();
        let batches = esds.spec.allowed_batches(&cfg).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].id, "x1");
        assert_eq!(batches[0].items.len(), 2);
        assert_eq!(esds.spec.max_consecutive_creates, 3);
    }

    #[test]
    fn scenario_validation() {
        let mut scn = scenario();
        scn.ops[1].prev = vec!["x9".into()];
        assert!(scn.validate().is_err());
        let mut scn = scenario();
        scn.ops[0].home = "r7".into();
        assert!(scn.validate().is_err());
        for seed in 0..20 {
            EsdsScenario::random(10, 3, seed).validate().unwrap();
        }
    }

    #[test]
    fn random_toys_validate() {
        for seed in 0..50 {
            random_toy(seed).validate().unwrap();
        }
    }
}
