//! The JSON system file: processes, pair-programs, pair-specs and either a
//! static interconnection or a dynamic specification.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{gen_esds, EsdsScenario};
use crate::dynamic::{CreateRule, DynamicSpec, PairSpec, ScriptedCreate, TraceProperty};
use crate::mc::Formula;
use crate::sexpr::{body_to_string, formula_to_string, guard_to_string, parse_body, parse_formula, parse_guard, ParseError};
use crate::skeleton::{validate_skeleton, Body, Branch, GuardedCommand, LocalState, Pid, SharedVar, SkeletonArc, SyncSkeleton};
use crate::structure::{PairKey, PairProgram, StaticEntry, StaticProgram};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{context}: {source}")]
    Parse { context: String, source: ParseError },
    #[error("undeclared process {0}")]
    UnknownProcess(String),
    #[error("process {pid} has no proposition {prop}")]
    UnknownProp { pid: String, prop: String },
    #[error("skeleton {owner}/{peer} has no state {state}")]
    UnknownState { owner: String, peer: String, state: String },
    #[error("unknown program {0}")]
    UnknownProgram(String),
    #[error("program {0} needs exactly two skeletons, one per process")]
    BadProgram(String),
    #[error("unknown generator {0}")]
    UnknownGenerator(String),
    #[error("the file has neither a static nor a dynamic section")]
    NoSection,
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessDecl {
    pub pid: String,
    pub props: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarDecl {
    pub name: String,
    pub domain: Vec<String>,
    pub initial: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateDecl {
    pub name: String,
    /// Propositions true in the state; the others are false.
    #[serde(rename = "true", default)]
    pub true_props: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchDecl {
    pub guard: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcDecl {
    pub from: String,
    pub to: String,
    pub branches: Vec<BranchDecl>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonDecl {
    pub owner: String,
    pub peer: String,
    pub states: Vec<StateDecl>,
    pub initial: Vec<String>,
    pub arcs: Vec<ArcDecl>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramDecl {
    pub name: String,
    #[serde(default)]
    pub shared: Vec<VarDecl>,
    pub skeletons: Vec<SkeletonDecl>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpecDecl {
    pub pair: [String; 2],
    pub program: String,
    pub spec: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticDecl {
    pub pairs: Vec<PairSpecDecl>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptDecl {
    pub at_step: usize,
    pub pair: [String; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorDecl {
    pub name: String,
    pub scenario: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicDecl {
    pub universe: Vec<PairSpecDecl>,
    pub initial: Vec<[String; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub script: Vec<ScriptDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorDecl>,
    #[serde(default = "one")]
    pub max_consecutive_creates: usize,
}

/// A trace property; state formulas are s-expressions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PropertyDecl {
    /// p holds in every state.
    Invariant { name: String, p: String },
    /// q does not hold before p has.
    Precedence { name: String, p: String, q: String },
    /// Once p holds it keeps holding.
    Absorption { name: String, p: String },
    /// Whenever p holds, q holds within `within` steps (unbounded if absent).
    Leads {
        name: String,
        p: String,
        q: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        within: Option<usize>,
    },
}

impl PropertyDecl {
    pub fn from_property(tp: &TraceProperty) -> PropertyDecl {
        let s = formula_to_string;
        match tp {
            TraceProperty::Invariant { name, p } => PropertyDecl::Invariant { name: name.clone(), p: s(p) },
            TraceProperty::Precedence { name, p, q } => PropertyDecl::Precedence { name: name.clone(), p: s(p), q: s(q) },
            TraceProperty::Absorption { name, p } => PropertyDecl::Absorption { name: name.clone(), p: s(p) },
            TraceProperty::BoundedLeadsTo { name, p, q, k } => {
                PropertyDecl::Leads { name: name.clone(), p: s(p), q: s(q), within: (*k != usize::MAX).then_some(*k) }
            }
        }
    }

    pub fn to_property(&self) -> Result<TraceProperty, SystemError> {
        let f = |name: &str, t: &str| parse(format!("property {name}"), parse_formula(t));
        Ok(match self {
            PropertyDecl::Invariant { name, p } => TraceProperty::Invariant { name: name.clone(), p: f(name, p)? },
            PropertyDecl::Precedence { name, p, q } => TraceProperty::Precedence { name: name.clone(), p: f(name, p)?, q: f(name, q)? },
            PropertyDecl::Absorption { name, p } => TraceProperty::Absorption { name: name.clone(), p: f(name, p)? },
            PropertyDecl::Leads { name, p, q, within } => {
                TraceProperty::BoundedLeadsTo { name: name.clone(), p: f(name, p)?, q: f(name, q)?, k: within.unwrap_or(usize::MAX) }
            }
        })
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemFile {
    pub name: String,
    pub processes: Vec<ProcessDecl>,
    pub programs: Vec<ProgramDecl>,
    #[serde(rename = "static", default, skip_serializing_if = "Option::is_none")]
    pub static_: Option<StaticDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamic: Option<DynamicDecl>,
    /// Trace properties checked on simulated and low-atomicity runs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub properties: Vec<PropertyDecl>,
}

/// A loaded system file.
#[derive(Clone, Debug)]
pub struct System {
    pub name: String,
    pub programs: BTreeMap<String, PairProgram>,
    /// Every pair-spec named by the file.
    pub specs: Vec<PairSpec>,
    pub kind: SystemKind,
    pub properties: Vec<TraceProperty>,
}

#[derive(Clone, Debug)]
pub enum SystemKind {
    Static(StaticProgram),
    Dynamic(DynamicSpec),
}

impl System {
    /// The program as a dynamic specification; static programs have no creates.
    pub fn as_dynamic(&self) -> DynamicSpec {
        match &self.kind {
            SystemKind::Dynamic(ds) => ds.clone(),
            SystemKind::Static(sp) => crate::corpus::static_as_dynamic(sp),
        }
    }

    pub fn spec_for(&self, k: &PairKey) -> Option<&PairSpec> {
        self.specs.iter().find(|s| &s.pair == k)
    }
}

fn parse<T>(context: impl Into<String>, r: Result<T, ParseError>) -> Result<T, SystemError> {
    r.map_err(|source| SystemError::Parse { context: context.into(), source })
}

fn key(p: &[String; 2]) -> PairKey {
    PairKey::new(&Pid::new(p[0].as_str()), &Pid::new(p[1].as_str()))
}

impl SystemFile {
    pub fn from_json(text: &str) -> Result<SystemFile, SystemError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    fn props_of(&self) -> BTreeMap<String, Vec<String>> {
        self.processes.iter().map(|p| (p.pid.clone(), p.props.clone())).collect()
    }

    fn skeleton(&self, d: &SkeletonDecl, props: &BTreeMap<String, Vec<String>>) -> Result<SyncSkeleton, SystemError> {
        let own = props.get(&d.owner).ok_or_else(|| SystemError::UnknownProcess(d.owner.clone()))?;
        if !props.contains_key(&d.peer) {
            return Err(SystemError::UnknownProcess(d.peer.clone()));
        }
        let mut sk = SyncSkeleton {
            owner: Pid::new(d.owner.as_str()),
            peer: Pid::new(d.peer.as_str()),
            props: own.clone(),
            states: Vec::new(),
            names: Vec::new(),
            initials: Vec::new(),
            arcs: Vec::new(),
        };
        for s in &d.states {
            if let Some(p) = s.true_props.iter().find(|p| !own.contains(p)) {
                return Err(SystemError::UnknownProp { pid: d.owner.clone(), prop: p.clone() });
            }
            let t: Vec<&str> = s.true_props.iter().map(String::as_str).collect();
            sk.states.push(LocalState::from_true(d.owner.as_str(), own, &t));
            sk.names.push(s.name.clone());
        }
        let idx = |name: &str| {
            sk.state_index(name).ok_or_else(|| SystemError::UnknownState {
                owner: d.owner.clone(),
                peer: d.peer.clone(),
                state: name.to_string(),
            })
        };
        let mut initials = Vec::new();
        for i in &d.initial {
            initials.push(idx(i)?);
        }
        let mut arcs = Vec::new();
        for a in &d.arcs {
            let ctx = format!("{}/{} {} -> {}", d.owner, d.peer, a.from, a.to);
            let mut bs = Vec::new();
            for b in &a.branches {
                let guard = parse(ctx.clone(), parse_guard(&b.guard))?;
                let body = match &b.body {
                    Some(t) => parse(ctx.clone(), parse_body(t))?,
                    None => Body::empty(),
                };
                bs.push(Branch { guard, body });
            }
            arcs.push(SkeletonArc { from: idx(&a.from)?, to: idx(&a.to)?, label: GuardedCommand::new(bs) });
        }
        sk.initials = initials;
        sk.arcs = arcs;
        Ok(sk)
    }

    fn program(&self, d: &ProgramDecl, props: &BTreeMap<String, Vec<String>>) -> Result<PairProgram, SystemError> {
        if d.skeletons.len() != 2 || d.skeletons[0].owner != d.skeletons[1].peer || d.skeletons[1].owner != d.skeletons[0].peer {
            return Err(SystemError::BadProgram(d.name.clone()));
        }
        let si = self.skeleton(&d.skeletons[0], props)?;
        let sj = self.skeleton(&d.skeletons[1], props)?;
        let shared = d
            .shared
            .iter()
            .map(|v| SharedVar { name: v.name.clone(), pair: (si.owner.clone(), sj.owner.clone()), domain: v.domain.clone(), initial: v.initial.clone() })
            .collect();
        Ok(PairProgram::new(d.name.clone(), si, sj, shared))
    }

    fn pair_spec(&self, d: &PairSpecDecl, programs: &BTreeMap<String, PairProgram>) -> Result<PairSpec, SystemError> {
        let pp = programs.get(&d.program).ok_or_else(|| SystemError::UnknownProgram(d.program.clone()))?;
        let pair = key(&d.pair);
        if pp.key() != pair {
            return Err(SystemError::BadProgram(d.program.clone()));
        }
        let spec = parse(format!("spec of {pair}"), parse_formula(&d.spec))?;
        Ok(PairSpec { pair, spec, program: d.program.clone() })
    }

    /// Builds the programs without checking skeleton invariants.
    pub fn load(&self) -> Result<System, SystemError> {
        let props = self.props_of();
        let properties: Vec<TraceProperty> = self.properties.iter().map(PropertyDecl::to_property).collect::<Result<_, _>>()?;
        let mut programs = BTreeMap::new();
        for d in &self.programs {
            programs.insert(d.name.clone(), self.program(d, &props)?);
        }
        if let Some(st) = &self.static_ {
            let mut sp = StaticProgram::default();
            let mut specs = Vec::new();
            for d in &st.pairs {
                let ps = self.pair_spec(d, &programs)?;
                let pp = programs[&ps.program].clone();
                sp.entries.push(StaticEntry { i: pp.i.clone(), j: pp.j.clone(), spec: ps.spec.clone() });
                sp.pairs.insert(ps.pair.clone(), pp);
                specs.push(ps);
            }
            return Ok(System { name: self.name.clone(), programs, specs, kind: SystemKind::Static(sp), properties });
        }
        let dy = self.dynamic.as_ref().ok_or(SystemError::NoSection)?;
        let specs: Vec<PairSpec> = dy.universe.iter().map(|d| self.pair_spec(d, &programs)).collect::<Result<_, _>>()?;
        let ds = match &dy.generator {
            Some(g) if g.name == "esds" => {
                let scn: EsdsScenario = serde_json::from_value(g.scenario.clone())?;
                gen_esds(&scn).map_err(|e| SystemError::Scenario(e.to_string()))?.spec
            }
            Some(g) => return Err(SystemError::UnknownGenerator(g.name.clone())),
            None => {
                let mut script = Vec::new();
                for s in &dy.script {
                    let k = key(&s.pair);
                    let spec = specs.iter().find(|p| p.pair == k).ok_or_else(|| SystemError::Scenario(format!("{k} is not in the universe")))?;
                    script.push(ScriptedCreate { at_step: s.at_step, spec: spec.clone() });
                }
                DynamicSpec {
                    universe: specs.clone(),
                    programs: programs.iter().map(|(n, p)| (n.clone(), Arc::new(p.clone()))).collect(),
                    initial: dy.initial.iter().map(key).collect(),
                    rule: if script.is_empty() { CreateRule::None } else { CreateRule::Script(script) },
                    max_consecutive_creates: dy.max_consecutive_creates,
                }
            }
        };
        Ok(System { name: self.name.clone(), programs, specs, kind: SystemKind::Dynamic(ds), properties })
    }

    /// Every invariant violation of the file, as human-readable lines.
    pub fn validate(&self) -> Vec<String> {
        let sys = match self.load() {
            Ok(s) => s,
            Err(e) => return vec![e.to_string()],
        };
        let props = self.props_of();
        let mut out = Vec::new();
        for pp in sys.programs.values() {
            for (sk, peer) in [(&pp.skel_i, &pp.skel_j), (&pp.skel_j, &pp.skel_i)] {
                for v in validate_skeleton(sk, &pp.shared, props.get(peer.owner.as_str()).map(|v| v.as_slice())) {
                    out.push(format!("{} ({}): {v}", pp.name, sk.owner));
                }
            }
        }
        let named: BTreeSet<&String> = sys.specs.iter().map(|s| &s.program).collect();
        for s in &sys.specs {
            for p in s.spec.props() {
                let ok = s.pair.contains(&p.owner) && props.get(p.owner.as_str()).is_some_and(|ps| ps.contains(&p.name));
                if !ok {
                    out.push(format!("spec of {} mentions {p}", s.pair));
                }
            }
        }
        for name in sys.programs.keys() {
            if !named.contains(name) {
                out.push(format!("program {name} is not used by any pair-spec"));
            }
        }
        if let SystemKind::Static(sp) = &sys.kind {
            if let Err(e) = sp.validate() {
                out.push(e.to_string());
            }
        }
        out
    }

    fn decl_of(pp: &PairProgram) -> ProgramDecl {
        let sk = |s: &SyncSkeleton| SkeletonDecl {
            owner: s.owner.to_string(),
            peer: s.peer.to_string(),
            states: s
                .states
                .iter()
                .zip(&s.names)
                .map(|(l, n)| StateDecl { name: n.clone(), true_props: l.true_props().into_iter().map(String::from).collect() })
                .collect(),
            initial: s.initials.iter().map(|&i| s.names[i].clone()).collect(),
            arcs: s
                .arcs
                .iter()
                .map(|a| ArcDecl {
                    from: s.names[a.from].clone(),
                    to: s.names[a.to].clone(),
                    branches: a
                        .label
                        .branches()
                        .iter()
                        .map(|b| BranchDecl {
                            guard: guard_to_string(&b.guard),
                            body: (!b.body.is_empty()).then(|| body_to_string(&b.body)),
                        })
                        .collect(),
                })
                .collect(),
        };
        ProgramDecl {
            name: pp.name.clone(),
            shared: pp.shared.iter().map(|v| VarDecl { name: v.name.clone(), domain: v.domain.clone(), initial: v.initial.clone() }).collect(),
            skeletons: vec![sk(&pp.skel_i), sk(&pp.skel_j)],
        }
    }

    fn processes_of<'a>(pps: impl Iterator<Item = &'a PairProgram>) -> Vec<ProcessDecl> {
        let mut props: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for pp in pps {
            for sk in [&pp.skel_i, &pp.skel_j] {
                props.insert(sk.owner.to_string(), sk.props.clone());
            }
        }
        props.into_iter().map(|(pid, props)| ProcessDecl { pid, props }).collect()
    }

    fn spec_decl(ps: &PairSpec) -> PairSpecDecl {
        PairSpecDecl { pair: [ps.pair.0.to_string(), ps.pair.1.to_string()], program: ps.program.clone(), spec: formula_to_string(&ps.spec) }
    }

    pub fn from_static(name: &str, sp: &StaticProgram) -> SystemFile {
        let pairs = sp
            .entries
            .iter()
            .map(|e| {
                let k = PairKey::new(&e.i, &e.j);
                Self::spec_decl(&PairSpec { pair: k.clone(), spec: e.spec.clone(), program: sp.pairs[&k].name.clone() })
            })
            .collect();
        SystemFile {
            name: name.to_string(),
            processes: Self::processes_of(sp.pairs.values()),
            programs: sp.pairs.values().map(Self::decl_of).collect(),
            static_: Some(StaticDecl { pairs }),
            dynamic: None,
            properties: Vec::new(),
        }
    }

    /// A dynamic file; `generator` names the creation rule when it is not a script.
    pub fn from_dynamic(name: &str, ds: &DynamicSpec, generator: Option<GeneratorDecl>) -> SystemFile {
        let script = match &ds.rule {
            CreateRule::Script(s) => s
                .iter()
                .map(|c| ScriptDecl { at_step: c.at_step, pair: [c.spec.pair.0.to_string(), c.spec.pair.1.to_string()] })
                .collect(),
            _ => Vec::new(),
        };
        SystemFile {
            name: name.to_string(),
            processes: Self::processes_of(ds.programs.values().map(|p| p.as_ref())),
            programs: ds.programs.values().map(|p| Self::decl_of(p)).collect(),
            static_: None,
            dynamic: Some(DynamicDecl {
                universe: ds.universe.iter().map(Self::spec_decl).collect(),
                initial: ds.initial.iter().map(|k| [k.0.to_string(), k.1.to_string()]).collect(),
                script,
                generator,
                max_consecutive_creates: ds.max_consecutive_creates,
            }),
            properties: Vec::new(),
        }
    }

    pub fn from_esds(name: &str, scn: &EsdsScenario) -> Result<SystemFile, SystemError> {
        let esds = gen_esds(scn).map_err(|e| SystemError::Scenario(e.to_string()))?;
        let g = GeneratorDecl { name: "esds".into(), scenario: serde_json::to_value(scn)? };
        Ok(Self::from_dynamic(name, &esds.spec, Some(g)).with_properties(&esds.trace_properties(usize::MAX)))
    }

    pub fn with_properties(mut self, props: &[TraceProperty]) -> SystemFile {
        self.properties = props.iter().map(PropertyDecl::from_property).collect();
        self
    }
}

/// Formula of the pair-spec for `k`, or `true`.
pub fn spec_or_true(sys: &System, k: &PairKey) -> Formula {
    sys.spec_for(k).map(|s| s.spec.clone()).unwrap_or(Formula::True)
}
