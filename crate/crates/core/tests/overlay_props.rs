use std::collections::{BTreeMap, BTreeSet};

use pairsynth::corpus::{gen_two_phase, random_toy};
use pairsynth::overlay::{overlay, synthesize_static, OverlayError};
use pairsynth::skeleton::{apply_body, eval_guard, Branch, GuardExpr, GuardedCommand, LocalState, Pid, SyncSkeleton};
use pairsynth::structure::{build_product_structure, JState, StaticProgram};
use proptest::prelude::*;

/// Successors of `s` by `p`, read directly off the pair skeletons: p moves
/// to `to` iff every neighbour's skeleton has an enabled arc there, and
/// each neighbour contributes the body of one enabled branch.
fn skeleton_successors(sp: &StaticProgram, s: &JState, p: &Pid) -> BTreeSet<JState> {
    let skels: Vec<&SyncSkeleton> = sp.pairs.values().filter_map(|pp| pp.skeleton_of(p)).collect();
    let cur = &s.locals[p];
    let targets: BTreeSet<&LocalState> =
        skels[0].arcs.iter().filter(|a| &skels[0].states[a.from] == cur).map(|a| &skels[0].states[a.to]).collect();
    let mut out = BTreeSet::new();
    for to in targets {
        let mut partial = vec![s.shared.clone()];
        for sk in &skels {
            let peer = &s.locals[&sk.peer];
            let enabled: Vec<&Branch> = sk
                .arcs
                .iter()
                .filter(|a| &sk.states[a.from] == cur && &sk.states[a.to] == to)
                .flat_map(|a| a.label.branches())
                .filter(|b| eval_guard(&b.guard, peer, &s.shared).unwrap())
                .collect();
            partial = partial.iter().flat_map(|v| enabled.iter().map(move |b| apply_body(&b.body, v))).collect();
        }
        for shared in partial {
            let mut t = s.clone();
            t.locals.insert(p.clone(), to.clone());
            t.shared = shared;
            out.insert(t);
        }
    }
    out
}

fn check_against_skeletons(sp: &StaticProgram) -> Result<(), TestCaseError> {
    let m = build_product_structure(sp, &sp.keys(), 200_000).unwrap();
    for s in 0..m.len() {
        for p in sp.processes() {
            let got: BTreeSet<JState> =
                m.succ[s].iter().filter(|(l, _)| l.pid() == Some(&p)).map(|(_, t)| m.states[*t].clone()).collect();
            prop_assert_eq!(got, skeleton_successors(sp, &m.states[s], &p), "{} at {}", p, m.states[s]);
        }
    }
    Ok(())
}

/// Skeletons of owner "o" sharing one local shape, one per peer.
fn same_shape() -> impl Strategy<Value = Vec<SyncSkeleton>> {
    let guard = prop_oneof![Just(GuardExpr::True), Just(GuardExpr::prop("x", "on")), Just(GuardExpr::not(GuardExpr::prop("x", "on")))];
    (2..4usize, 1..5usize)
        .prop_flat_map(move |(n, peers)| {
            let arcs = prop::collection::btree_set((0..n, 0..n), 1..5);
            (Just(n), arcs, prop::collection::vec(prop::collection::vec(guard.clone(), 5), peers))
        })
        .prop_map(|(n, arcs, guards)| {
            let names: Vec<String> = (0..n).map(|k| format!("s{k}")).collect();
            let props: Vec<&str> = names.iter().map(String::as_str).collect();
            guards
                .iter()
                .enumerate()
                .map(|(k, gs)| {
                    let mut sk = SyncSkeleton::new("o", format!("x{k}").as_str(), &props);
                    for s in &names {
                        sk.add_state(s, &[s.as_str()]);
                    }
                    sk.set_initial("s0");
                    for (&(a, b), g) in arcs.iter().zip(gs.iter().cycle()) {
                        sk.add_arc(&names[a], &names[b], GuardedCommand::guard(g.clone()));
                    }
                    sk
                })
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn product_steps_match_skeleton_semantics(seed in 0..1000u64) {
        check_against_skeletons(&random_toy(seed))?;
    }

    #[test]
    fn overlay_ignores_order(
        (skels, order) in same_shape().prop_flat_map(|v| { let n = v.len(); (Just(v), Just((0..n).collect::<Vec<_>>()).prop_shuffle()) })
    ) {
        let refs: Vec<&SyncSkeleton> = skels.iter().collect();
        let perm: Vec<&SyncSkeleton> = order.iter().map(|&k| &skels[k]).collect();
        let a = overlay(&refs).unwrap();
        prop_assert_eq!(&a, &overlay(&perm).unwrap());
        let peers: BTreeSet<Pid> = skels.iter().map(|s| s.peer.clone()).collect();
        for mv in &a.moves {
            prop_assert_eq!(&mv.per_neighbor.keys().cloned().collect::<BTreeSet<_>>(), &peers);
        }
    }

    #[test]
    fn synthesis_keeps_every_arc(seed in 0..1000u64) {
        let sp = random_toy(seed);
        let syn = synthesize_static(&sp).unwrap();
        for pp in sp.pairs.values() {
            for sk in [&pp.skel_i, &pp.skel_j] {
                let cp = &syn.processes[&sk.owner];
                for a in &sk.arcs {
                    let mv = cp.moves.iter().find(|m| m.from == sk.states[a.from] && m.to == sk.states[a.to]).unwrap();
                    for b in a.label.branches() {
                        prop_assert!(mv.per_neighbor[&sk.peer].branches().contains(b));
                    }
                }
            }
        }
    }
}

#[test]
fn two_phase_steps_match_skeleton_semantics() {
    for n in 3..=4 {
        check_against_skeletons(&gen_two_phase(n).unwrap().program).unwrap();
    }
}

#[test]
fn mismatched_shapes_are_refused() {
    let mut a = SyncSkeleton::new("o", "x", &["s", "t"]);
    a.add_state("s", &["s"]);
    a.add_state("t", &["t"]);
    a.set_initial("s");
    a.add_arc("s", "t", GuardedCommand::always());
    let mut b = a.clone();
    b.peer = Pid::new("y");
    b.add_arc("t", "s", GuardedCommand::always());
    assert_eq!(overlay(&[&a, &b]), Err(OverlayError::IncompatibleLocalStructure(Pid::new("o"))));
    let mut c = a.clone();
    c.owner = Pid::new("z");
    assert!(matches!(overlay(&[&a, &c]), Err(OverlayError::MixedOwners(..))));
}

#[test]
fn initial_states_join_pair_initials() {
    let tp = gen_two_phase(4).unwrap();
    let syn = synthesize_static(&tp.program).unwrap();
    let expected: BTreeMap<Pid, LocalState> = tp
        .program
        .pairs
        .values()
        .flat_map(|pp| pp.initials[0].locals.clone())
        .collect();
    assert_eq!(syn.initials.len(), 1);
    assert_eq!(syn.initials[0].locals, expected);
}
