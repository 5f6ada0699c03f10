use std::collections::BTreeSet;

use pairsynth::mc::Formula;
use pairsynth::sexpr::{body_to_string, formula_to_string, guard_to_string, parse_body, parse_formula, parse_guard};
use pairsynth::skeleton::{
    apply_body, eval_guard, strip_labels, Body, Branch, GuardExpr, GuardedCommand, LocalState, Pid, PropRef, SyncSkeleton, Valuation,
};
use proptest::prelude::*;

const PROPS: [&str; 3] = ["a", "b", "c"];
const VARS: [&str; 2] = ["v", "w"];

fn guard() -> impl Strategy<Value = GuardExpr> {
    let leaf = prop_oneof![
        Just(GuardExpr::True),
        Just(GuardExpr::False),
        prop::sample::select(PROPS.to_vec()).prop_map(|n| GuardExpr::prop("p", n)),
        (prop::sample::select(VARS.to_vec()), 0..3u8).prop_map(|(v, x)| GuardExpr::eq(v, &x.to_string())),
    ];
    leaf.prop_recursive(3, 16, 3, |inner| {
        prop_oneof![
            inner.clone().prop_map(GuardExpr::not),
            prop::collection::vec(inner.clone(), 1..3).prop_map(GuardExpr::And),
            prop::collection::vec(inner, 1..3).prop_map(GuardExpr::Or),
        ]
    })
}

fn peer() -> impl Strategy<Value = LocalState> {
    prop::collection::vec(any::<bool>(), 3).prop_map(|bits| {
        let props: Vec<String> = PROPS.iter().map(|s| s.to_string()).collect();
        let t: Vec<&str> = PROPS.iter().zip(&bits).filter(|(_, b)| **b).map(|(p, _)| *p).collect();
        LocalState::from_true("p", &props, &t)
    })
}

fn valuation() -> impl Strategy<Value = Valuation> {
    (0..3u8, 0..3u8).prop_map(|(a, b)| [("v".to_string(), a.to_string()), ("w".to_string(), b.to_string())].into_iter().collect())
}

fn body() -> impl Strategy<Value = Body> {
    prop::collection::btree_map(prop::sample::select(VARS.to_vec()).prop_map(String::from), (0..3u8).prop_map(|x| x.to_string()), 0..3)
        .prop_map(Body)
}

fn formula() -> impl Strategy<Value = Formula> {
    let pr = (prop::sample::select(vec!["p", "q"]), prop::sample::select(PROPS.to_vec())).prop_map(|(o, n)| PropRef::new(o, n));
    let leaf = prop_oneof![
        Just(Formula::True),
        Just(Formula::False),
        pr.clone().prop_map(Formula::Prop),
        pr.prop_map(Formula::NegProp),
        (0..3u8).prop_map(|x| Formula::VarEq { var: "v".into(), value: x.to_string() }),
    ];
    leaf.prop_recursive(3, 20, 2, |f| {
        let b = |x: Formula| Box::new(x);
        prop_oneof![
            prop::collection::vec(f.clone(), 2..3).prop_map(Formula::And),
            prop::collection::vec(f.clone(), 2..3).prop_map(Formula::Or),
            (prop::sample::select(vec!["p", "q"]), f.clone()).prop_map(move |(j, x)| Formula::AX(Pid::new(j), b(x))),
            (prop::sample::select(vec!["p", "q"]), f.clone()).prop_map(move |(j, x)| Formula::EX(Pid::new(j), b(x))),
            (f.clone(), f.clone()).prop_map(move |(x, y)| Formula::AU(b(x), b(y))),
            (f.clone(), f.clone()).prop_map(move |(x, y)| Formula::AUw(b(x), b(y))),
            f.clone().prop_map(move |x| Formula::AG(b(x))),
            f.clone().prop_map(move |x| Formula::AF(b(x))),
            f.clone().prop_map(move |x| Formula::EF(b(x))),
            (f.clone(), f.clone()).prop_map(move |(x, y)| Formula::LeadsTo(b(x), b(y))),
            (f.clone(), f).prop_map(move |(x, y)| Formula::LeadsToWeak(b(x), b(y))),
        ]
    })
}

fn skeleton() -> impl Strategy<Value = SyncSkeleton> {
    (2..5usize)
        .prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n, guard()), 0..8)))
        .prop_map(|(n, arcs)| {
            let names: Vec<String> = (0..n).map(|k| format!("s{k}")).collect();
            let props: Vec<&str> = names.iter().map(String::as_str).collect();
            let mut sk = SyncSkeleton::new("o", "p", &props);
            for s in &names {
                sk.add_state(s, &[s.as_str()]);
            }
            sk.set_initial("s0");
            for (a, b, g) in arcs {
                sk.add_arc(&names[a], &names[b], GuardedCommand::guard(g));
            }
            sk
        })
}

proptest! {
    #[test]
    fn negation_flips(g in guard(), s in peer(), v in valuation()) {
        let x = eval_guard(&g, &s, &v).unwrap();
        prop_assert_eq!(eval_guard(&GuardExpr::not(g), &s, &v).unwrap(), !x);
    }

    #[test]
    fn and_or_commute_and_associate(g in guard(), h in guard(), k in guard(), s in peer(), v in valuation()) {
        let e = |x: GuardExpr| eval_guard(&x, &s, &v).unwrap();
        for op in [GuardExpr::And as fn(Vec<GuardExpr>) -> GuardExpr, GuardExpr::Or] {
            prop_assert_eq!(e(op(vec![g.clone(), h.clone()])), e(op(vec![h.clone(), g.clone()])));
            prop_assert_eq!(
                e(op(vec![g.clone(), op(vec![h.clone(), k.clone()])])),
                e(op(vec![op(vec![g.clone(), h.clone()]), k.clone()]))
            );
        }
    }

    #[test]
    fn body_application_is_idempotent(b in body(), v in valuation()) {
        let once = apply_body(&b, &v);
        prop_assert_eq!(apply_body(&b, &once), once);
    }

    #[test]
    fn stripping_keeps_nodes_and_arcs(sk in skeleton()) {
        let g = strip_labels(&sk);
        let nodes: BTreeSet<LocalState> = sk.states.iter().cloned().collect();
        prop_assert_eq!(&g.nodes, &nodes);
        for a in &sk.states {
            for b in &sk.states {
                let arc = sk.arcs.iter().any(|x| &sk.states[x.from] == a && &sk.states[x.to] == b);
                prop_assert_eq!(g.edges.contains(&(a.clone(), b.clone())), arc);
            }
        }
    }

    #[test]
    fn guard_text_round_trips(g in guard(), s in peer(), v in valuation()) {
        let text = guard_to_string(&g);
        let back = parse_guard(&text).unwrap();
        prop_assert_eq!(guard_to_string(&back), text);
        prop_assert_eq!(eval_guard(&back, &s, &v).unwrap(), eval_guard(&g, &s, &v).unwrap());
    }

    #[test]
    fn body_text_round_trips(b in body()) {
        prop_assert_eq!(parse_body(&body_to_string(&b)).unwrap(), b);
    }

    #[test]
    fn formula_text_round_trips(f in formula()) {
        let text = formula_to_string(&f);
        let back = parse_formula(&text).unwrap();
        prop_assert_eq!(formula_to_string(&back), text);
    }

    #[test]
    fn command_order_is_irrelevant(gs in prop::collection::vec((guard(), body()), 1..4), rot in 0..4usize) {
        let branches: Vec<Branch> = gs.into_iter().map(|(guard, body)| Branch { guard, body }).collect();
        let mut other = branches.clone();
        other.rotate_left(rot % branches.len());
        other.reverse();
        prop_assert_eq!(GuardedCommand::new(branches.clone()), GuardedCommand::new(other));
        let a = GuardedCommand::new(branches[..1].to_vec());
        let b = GuardedCommand::new(branches[1..].to_vec());
        prop_assert_eq!(a.plus(&b), b.plus(&a));
    }
}
