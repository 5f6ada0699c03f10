//! Command-line front end: validation, pair checks, synthesis, wait-for
//! analysis, product oracle, simulation, low-atomicity runs and generators.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use pairsynth::corpus::{
    gen_two_phase, toy_dynamic_deadlock, toy_static_deadlock, two_phase_tstab_mutant, EsdsScenario,
};
use pairsynth::dynamic::{check_trace, simulate, verify_trace_projection, write_trace, DynError, EndReason, SimOptions, Trace, TraceProperty};
use pairsynth::lowatom::{replay_linearization, run_lowatom, write_lin, AgentsMode, LowAtomError, LowAtomOptions};
use pairsynth::mc::{check_liveness_condition, check_spec, check_tstab};
use pairsynth::oracle::{inherited_invariants, run_oracle, OracleError};
use pairsynth::overlay::{process_to_dot, synthesize_static};
use pairsynth::structure::{build_pair_structure, to_dot, PairKey, StructureError};
use pairsynth::system::{System, SystemFile, SystemKind};
use pairsynth::waitfor::{build_wfg, check_dynamic_wfg_condition, check_static_wfg_condition, find_supercycle, wfg_to_dot, WfgError, Witness};
use pairsynth::Pid;

#[derive(Parser)]
#[command(name = "pairsynth", version, about = "Pairwise synthesis and checking of concurrent programs")]
struct Cli {
    /// Print the JSON report instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check skeleton and system invariants.
    Validate { file: PathBuf },
    /// Model check one pair-program: spec, temporary stability, liveness condition.
    CheckPair {
        file: PathBuf,
        i: String,
        j: String,
        /// Also write the pair-structure as DOT.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Compose the pair-processes and write the program and DOT renders.
    Synthesize {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the wait-for-graph condition.
    Analyze(AnalyzeArgs),
    /// Build the full product and cross-check it against the pair-programs.
    Oracle {
        file: PathBuf,
        #[arg(long, env = "PAIRSYNTH_MAX_STATES", default_value_t = 200_000)]
        max_states: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the fair simulator and check trace properties.
    Simulate {
        file: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "PAIRSYNTH_STEPS", default_value_t = 50_000)]
        steps: usize,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the low-atomicity runtime and replay its linearization.
    RunLowatom {
        file: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Mode::Stepper)]
        agents_mode: Mode,
        #[arg(long)]
        lin: Option<PathBuf>,
        #[arg(long, env = "PAIRSYNTH_LOWATOM_STEPS", default_value_t = 1_000_000)]
        max_steps: usize,
    },
    /// Write a corpus system file.
    Gen {
        #[command(subcommand)]
        what: GenCmd,
        #[arg(long, global = true)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AnalyzeArgs {
    file: PathBuf,
    #[arg(long = "static", conflicts_with = "dynamic")]
    static_: bool,
    #[arg(long)]
    dynamic: bool,
    /// Configurations explored (dynamic) or states per star product (static).
    #[arg(long, env = "PAIRSYNTH_BOUND", default_value_t = 5_000)]
    bound: usize,
    /// Write the wait-for graph at the witness state as DOT.
    #[arg(long)]
    dot: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Stepper,
    Free,
}

#[derive(Subcommand)]
enum GenCmd {
    /// Ring two-phase commit.
    Twophase {
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
    /// Ring with an unstable submit guard at pair (i-1, i).
    TwophaseMutant {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        i: usize,
    },
    /// Random ESDS scenario.
    Esds {
        #[arg(long, default_value_t = 3)]
        ops: usize,
        #[arg(long, default_value_t = 3)]
        replicas: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Weaken the CSC guard so that the liveness condition fails.
        #[arg(long)]
        liveness_mutant: bool,
    },
    /// ESDS from a scenario JSON file.
    EsdsScenario { scenario: PathBuf },
    /// Two processes waiting on each other from the start.
    ToyStatic,
    /// A create that closes a wait cycle.
    ToyDynamic,
}

/// Command failures, by exit code.
enum Failure {
    Input(anyhow::Error),
    Budget(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

struct Report {
    pass: bool,
    text: Vec<String>,
    json: Value,
}

type CmdResult = Result<Report, Failure>;

fn load(path: &Path) -> Result<(SystemFile, System), Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file = SystemFile::from_json(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let sys = file.load().map_err(|e| anyhow!("{}: {e}", path.display()))?;
    Ok((file, sys))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn structure_failure(e: StructureError) -> Failure {
    match e {
        StructureError::BudgetExceeded(n) => Failure::Budget(format!("state budget exceeded ({n} states)")),
        other => Failure::Input(other.into()),
    }
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_validate(file: &Path) -> CmdResult {
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let sf = SystemFile::from_json(&text).map_err(|e| anyhow!("{}: {e}", file.display()))?;
    let problems = sf.validate();
    let mut text = vec![format!("{}: {} problem(s)", sf.name, problems.len())];
    text.extend(problems.iter().map(|p| format!("  {p}")));
    if problems.is_empty() {
        Ok(Report { pass: true, text, json: json!({ "name": sf.name, "problems": problems }) })
    } else {
        // Invalid input is an input error, not a property failure.
        Err(Failure::Input(anyhow!(text.join("\n"))))
    }
}

fn cmd_check_pair(file: &Path, i: &str, j: &str, dot: Option<&Path>) -> CmdResult {
    let (_, sys) = load(file)?;
    let k = PairKey::new(&Pid::new(i), &Pid::new(j));
    let ps = sys.spec_for(&k).ok_or_else(|| anyhow!("no pair-spec for {k}"))?;
    let pp = &sys.programs[&ps.program];
    let m = build_pair_structure(pp).map_err(structure_failure)?;
    if let Some(p) = dot {
        write(p, &to_dot(&m, &pp.name))?;
    }
    let spec = check_spec(pp, &ps.spec).map_err(|e| anyhow!("{e}"))?;
    let tstab = check_tstab(pp).map_err(|e| anyhow!("{e}"))?;
    let live_i = check_liveness_condition(pp, &pp.i).map_err(|e| anyhow!("{e}"))?;
    let live_j = check_liveness_condition(pp, &pp.j).map_err(|e| anyhow!("{e}"))?;
    let pass = spec.holds && tstab.is_none() && live_i.is_none() && live_j.is_none();
    let mut text = vec![format!("pair {k} program {} ({} states)", pp.name, m.len())];
    text.push(format!("  spec      {}", mark(spec.holds)));
    if let Some(s) = &spec.counterexample {
        text.push(format!("    fails at {s}"));
    }
    text.push(format!("  tstab     {}", mark(tstab.is_none())));
    if let Some(v) = &tstab {
        text.push(format!("    {} {} -> {} branch {} ({}) unstable at {}", v.owner, v.from, v.to, v.branch, v.guard, v.state));
    }
    for (p, w) in [(&pp.i, &live_i), (&pp.j, &live_j)] {
        text.push(format!("  liveness {p} {}", mark(w.is_none())));
        if let Some(w) = w {
            let cyc: Vec<String> = w.cycle.iter().map(|s| s.to_string()).collect();
            text.push(format!("    cycle {}", cyc.join(" ; ")));
        }
    }
    let json = json!({ "pair": k.to_string(), "program": pp.name, "states": m.len(), "spec": spec, "tstab": tstab,
        "liveness": { pp.i.to_string(): live_i, pp.j.to_string(): live_j }, "pass": pass });
    Ok(Report { pass, text, json })
}

fn cmd_synthesize(file: &Path, out: &Path) -> CmdResult {
    let (_, sys) = load(file)?;
    let sp = match &sys.kind {
        SystemKind::Static(sp) => sp.clone(),
        SystemKind::Dynamic(ds) => {
            // The initial configuration's program.
            let mut sp = pairsynth::StaticProgram::default();
            for k in &ds.initial {
                let ps = sys.spec_for(k).ok_or_else(|| anyhow!("no pair-spec for {k}"))?;
                sp.entries.push(pairsynth::structure::StaticEntry { i: k.0.clone(), j: k.1.clone(), spec: ps.spec.clone() });
                sp.pairs.insert(k.clone(), sys.programs[&ps.program].clone());
            }
            sp
        }
    };
    let syn = synthesize_static(&sp).map_err(|e| Failure::Input(e.into()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("program.json"), &serde_json::to_string_pretty(&syn).map_err(|e| anyhow!(e))?)?;
    for (p, cp) in &syn.processes {
        write(&out.join(format!("{p}.dot")), &process_to_dot(cp))?;
    }
    let mut text = vec![format!("{} composed processes, {} initial states, work {}", syn.processes.len(), syn.initials.len(), syn.work)];
    for (p, cp) in &syn.processes {
        text.push(format!("  {p}: {} states, {} moves, neighbors {:?}", cp.states.len(), cp.moves.len(), cp.neighbors().iter().map(|q| q.to_string()).collect::<Vec<_>>()));
    }
    let json = json!({ "processes": syn.processes.len(), "initials": syn.initials.len(), "work": syn.work, "out": out.display().to_string() });
    Ok(Report { pass: true, text, json })
}

fn cmd_analyze(a: &AnalyzeArgs) -> CmdResult {
    let (_, sys) = load(&a.file)?;
    let use_static = a.static_ || (!a.dynamic && matches!(sys.kind, SystemKind::Static(_)));
    let wfg_failure = |e: WfgError| match e {
        WfgError::Structure(s) => structure_failure(s),
        other => Failure::Input(other.into()),
    };
    let rep = if use_static {
        let sp = match &sys.kind {
            SystemKind::Static(sp) => sp,
            SystemKind::Dynamic(_) => return Err(Failure::Input(anyhow!("--static needs a static system"))),
        };
        let rep = check_static_wfg_condition(sp, a.bound).map_err(wfg_failure)?;
        if let (Some(p), Some(w)) = (&a.dot, &rep.witness) {
            let state = match w {
                Witness::InitialSupercycle { state, .. } | Witness::Static { state, .. } | Witness::Dynamic { state, .. } => state,
            };
            let procs = sp.composed().map_err(structure_failure)?;
            write(p, &wfg_to_dot(&build_wfg(&procs, state)))?;
        }
        rep
    } else {
        check_dynamic_wfg_condition(&sys.as_dynamic(), a.bound).map_err(wfg_failure)?
    };
    let mut text = vec![format!(
        "{} wait-for-graph condition: {} ({} checked, {} explored{})",
        if use_static { "static" } else { "dynamic" },
        mark(rep.ok),
        rep.checked,
        rep.products,
        if rep.complete { "" } else { ", bound reached" }
    )];
    if let Some(w) = &rep.witness {
        text.push(format!("  witness {}", serde_json::to_string(w).unwrap_or_default()));
    }
    text.extend(rep.notes.iter().map(|n| format!("  note: {n}")));
    Ok(Report { pass: rep.ok, text, json: serde_json::to_value(&rep).map_err(|e| anyhow!(e))? })
}

fn cmd_oracle(file: &Path, max_states: usize, seed: u64) -> CmdResult {
    let (_, sys) = load(file)?;
    let sp = match &sys.kind {
        SystemKind::Static(sp) => sp,
        SystemKind::Dynamic(_) => return Err(Failure::Input(anyhow!("the oracle needs a static system"))),
    };
    let rep = run_oracle(sp, max_states, seed).map_err(|e| match e {
        OracleError::Structure(s) => structure_failure(s),
        other => Failure::Input(other.into()),
    })?;
    let text = vec![
        format!("product: {} states, {} transitions", rep.states, rep.edges),
        format!("  transition mapping  {} ({} violations)", mark(rep.mapping_violations.is_empty()), rep.mapping_violations.len()),
        format!("  path mapping        {} ({} of {} projections fail)", mark(rep.paths.failures == 0), rep.paths.failures, rep.paths.projections),
        format!("  deadlock freedom    {}{}", mark(rep.deadlock.is_none()), rep.deadlock.as_ref().map(|s| format!(" (stuck at {s})")).unwrap_or_default()),
        format!(
            "  inherited safety    {} ({} formulas, {} state checks, {} violations)",
            mark(rep.large_model.violations.is_empty()),
            rep.large_model.formulas,
            rep.large_model.checked,
            rep.large_model.violations.len()
        ),
    ];
    Ok(Report { pass: rep.pass(), text, json: serde_json::to_value(&rep).map_err(|e| anyhow!(e))? })
}

/// The file's trace properties plus, for static systems, the propositional
/// invariants inherited from the pair-specs.
fn trace_properties(sys: &System) -> Result<Vec<TraceProperty>, Failure> {
    let mut out = sys.properties.clone();
    if let SystemKind::Static(sp) = &sys.kind {
        out.extend(inherited_invariants(sp).map_err(|e| match e {
            OracleError::Structure(s) => structure_failure(s),
            other => Failure::Input(other.into()),
        })?);
    }
    Ok(out)
}

/// Processes stuck in a supercycle at the end of the trace.
fn final_supercycle(tr: &Trace) -> Option<Vec<String>> {
    let cfg = tr.configurations().last()?;
    find_supercycle(&build_wfg(&cfg.composed(), &cfg.global())).map(|sc| sc.processes.iter().map(|p| p.to_string()).collect())
}

fn cmd_simulate(file: &Path, seed: u64, steps: usize, trace: Option<&Path>) -> CmdResult {
    let (_, sys) = load(file)?;
    let ds = sys.as_dynamic();
    let props = trace_properties(&sys)?;
    let opts = SimOptions { seed, max_steps: steps, track_blocking: true, ..Default::default() };
    let (tr, audit) = match simulate(&ds, &opts) {
        Ok(o) => (o.trace, o.audit),
        Err(DynError::DeadlockReached(d)) => {
            let text = vec![format!("deadlock after {} steps", d.trace.steps.len())];
            if let Some(p) = trace {
                let mut buf = Vec::new();
                write_trace(&d.trace, &mut buf).map_err(|e| anyhow!(e))?;
                write(p, &String::from_utf8_lossy(&buf))?;
            }
            return Ok(Report { pass: false, text, json: json!({ "end": "Deadlock", "steps": d.trace.steps.len() }) });
        }
        Err(e) => return Err(Failure::Input(e.into())),
    };
    if let Some(p) = trace {
        let mut buf = Vec::new();
        write_trace(&tr, &mut buf).map_err(|e| anyhow!(e))?;
        write(p, &String::from_utf8_lossy(&buf))?;
    }
    let results = check_trace(&tr, &props);
    let projection = verify_trace_projection(&tr);
    let stuck = final_supercycle(&tr);
    let pass = results.iter().all(|r| r.pass) && projection.is_ok() && stuck.is_none() && tr.end != EndReason::Deadlock;
    let mut text = vec![format!("{} steps ({} creates), end {:?}", tr.steps.len(), tr.create_count(), tr.end)];
    for r in &results {
        text.push(format!("  {} {}{}", mark(r.pass), r.name, r.violation.map(|v| format!(" (state {v})")).unwrap_or_default()));
    }
    text.push(format!("  {} projection onto pair-programs", mark(projection.is_ok())));
    text.push(format!("  {} no supercycle at the end{}", mark(stuck.is_none()), stuck.as_ref().map(|p| format!(" ({})", p.join(" "))).unwrap_or_default()));
    let json = json!({ "steps": tr.steps.len(), "creates": tr.create_count(), "end": tr.end, "audit": audit,
        "properties": results, "projection": projection.err(), "supercycle": stuck, "pass": pass });
    Ok(Report { pass, text, json })
}

fn cmd_run_lowatom(file: &Path, seed: u64, mode: Mode, lin: Option<&Path>, max_steps: usize) -> CmdResult {
    let (_, sys) = load(file)?;
    let ds = sys.as_dynamic();
    let mode = match mode {
        Mode::Stepper => AgentsMode::Stepper,
        Mode::Free => AgentsMode::Free,
    };
    let opts = LowAtomOptions { seed, mode, max_steps, ..Default::default() };
    let run = run_lowatom(&ds, &opts).map_err(|e| match e {
        e @ LowAtomError::NotStable { .. } => Failure::Input(anyhow!("refused: {e}")),
        other => Failure::Input(other.into()),
    })?;
    if let Some(p) = lin {
        let mut buf = Vec::new();
        write_lin(&run.records, &mut buf).map_err(|e| anyhow!(e))?;
        write(p, &String::from_utf8_lossy(&buf))?;
    }
    let verdict = replay_linearization(&ds, &run.initial, &run.records, run.end);
    let props = trace_properties(&sys)?;
    let results = check_trace(&verdict.trace, &props);
    let stuck = final_supercycle(&verdict.trace);
    let pass = verdict.valid && results.iter().all(|r| r.pass) && stuck.is_none() && run.stats.recheck_failures == 0 && run.stats.cycles == 0;
    let mut text = vec![
        format!("{} records, end {:?}", run.records.len(), run.end),
        format!("  {} replay{}", mark(verdict.valid), verdict.reason.as_ref().map(|r| format!(" (record {}: {r})", verdict.failed_at.unwrap_or(0))).unwrap_or_default()),
    ];
    for r in &results {
        text.push(format!("  {} {}", mark(r.pass), r.name));
    }
    text.push(format!("  {} no supercycle at the end{}", mark(stuck.is_none()), stuck.as_ref().map(|p| format!(" ({})", p.join(" "))).unwrap_or_default()));
    text.push(format!("  stats {}", serde_json::to_string(&run.stats).unwrap_or_default()));
    let json = json!({ "records": run.records.len(), "end": run.end, "valid": verdict.valid, "failed_at": verdict.failed_at,
        "reason": verdict.reason, "properties": results, "supercycle": stuck, "stats": run.stats, "pass": pass });
    Ok(Report { pass, text, json })
}

fn cmd_gen(what: &GenCmd, out: Option<&Path>) -> CmdResult {
    let bad = |e: pairsynth::corpus::CorpusError| Failure::Input(e.into());
    let sf = match what {
        GenCmd::Twophase { n } => {
            let tp = gen_two_phase(*n).map_err(bad)?;
            SystemFile::from_static(&format!("twophase{n}"), &tp.program).with_properties(&tp.trace_properties(usize::MAX))
        }
        GenCmd::TwophaseMutant { n, i } => {
            let tp = two_phase_tstab_mutant(*n, *i).map_err(bad)?;
            SystemFile::from_static(&format!("twophase{n}-mutant{i}"), &tp.program).with_properties(&tp.trace_properties(usize::MAX))
        }
        GenCmd::Esds { ops, replicas, seed, liveness_mutant } => {
            let mut scn = EsdsScenario::random(*ops, *replicas, *seed);
            scn.liveness_mutant = *liveness_mutant;
            SystemFile::from_esds(&format!("esds{ops}x{replicas}s{seed}"), &scn).map_err(|e| Failure::Input(e.into()))?
        }
        GenCmd::EsdsScenario { scenario } => {
            let text = fs::read_to_string(scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let scn: EsdsScenario = serde_json::from_str(&text).map_err(|e| anyhow!(e))?;
            SystemFile::from_esds("esds", &scn).map_err(|e| Failure::Input(e.into()))?
        }
        GenCmd::ToyStatic => SystemFile::from_static("toy-static", &toy_static_deadlock()),
        GenCmd::ToyDynamic => SystemFile::from_dynamic("toy-dynamic", &toy_dynamic_deadlock(), None),
    };
    let body = sf.to_json();
    let text = match out {
        Some(p) => {
            write(p, &body)?;
            vec![format!("wrote {}", p.display())]
        }
        None => vec![body],
    };
    Ok(Report { pass: true, text, json: json!({ "name": sf.name }) })
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.cmd {
        Cmd::Validate { file } => cmd_validate(file),
        Cmd::CheckPair { file, i, j, dot } => cmd_check_pair(file, i, j, dot.as_deref()),
        Cmd::Synthesize { file, out } => cmd_synthesize(file, out),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Oracle { file, max_states, seed } => cmd_oracle(file, *max_states, *seed),
        Cmd::Simulate { file, seed, steps, trace } => cmd_simulate(file, *seed, *steps, trace.as_deref()),
        Cmd::RunLowatom { file, seed, agents_mode, lin, max_steps } => cmd_run_lowatom(file, *seed, *agents_mode, lin.as_deref(), *max_steps),
        Cmd::Gen { what, out } => cmd_gen(what, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Generated files go to stdout verbatim.
    let raw = matches!(cli.cmd, Cmd::Gen { out: None, .. });
    let mut out = std::io::stdout().lock();
    match run(&cli) {
        Ok(r) => {
            // A closed pipe is not an error of the command.
            if cli.json && !raw {
                let _ = writeln!(out, "{}", serde_json::to_string_pretty(&r.json).unwrap_or_default());
            } else {
                for l in &r.text {
                    if writeln!(out, "{l}").is_err() {
                        break;
                    }
                }
            }
            if r.pass {
                ExitCode::from(0)
            } else {
                ExitCode::from(1)
            }
        }
        Err(Failure::Input(e)) => {
            if cli.json {
                let _ = writeln!(out, "{}", json!({ "error": format!("{e:#}") }));
            }
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Budget(msg)) => {
            if cli.json {
                let _ = writeln!(out, "{}", json!({ "refused": msg }));
            }
            eprintln!("refused: {msg}");
            ExitCode::from(3)
        }
    }
}
