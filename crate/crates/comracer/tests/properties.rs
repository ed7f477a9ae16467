//! Property tests for the invariants that hold across the whole input
//! space: serializer round-trips, merge lattice laws, CFG partitioning,
//! oracle monotonicity, and scorer conventions.

use std::collections::BTreeMap;

use proptest::prelude::*;

use comracer::cfg::{self, Terminator};
use comracer::isa::{BinaryImage, Register};
use comracer::metrics::{self, CaseLabel, Prediction};
use comracer::oracle::{self, AbstractOp, Scenario, ThreadProgram};
use comracer::taint::{self, AbstractValue, FieldPath, LockId, MachineState};

fn reg_strategy() -> impl Strategy<Value = Register> {
    prop::sample::select(Register::ALL.to_vec())
}

fn value_strategy() -> impl Strategy<Value = AbstractValue> {
    prop_oneof![
        (-0x100i64..0x100).prop_map(AbstractValue::ThisDerived),
        (0i64..0x100).prop_map(|o| AbstractValue::FieldContents(FieldPath::single(o * 8))),
        (0u64..4).prop_map(|v| AbstractValue::VtableRef(0x5000 + v * 8)),
        (-0x40i64..0x40).prop_map(AbstractValue::StackAddr),
        (0u64..4).prop_map(|s| AbstractValue::AllocFresh(0x1000 + s * 8)),
        Just(AbstractValue::Unknown),
    ]
}

fn state_strategy() -> impl Strategy<Value = MachineState> {
    let regs = prop::collection::btree_map(reg_strategy(), value_strategy(), 0..6);
    let stack = prop::collection::btree_map(-0x20i64..0x40, value_strategy(), 0..4);
    let locks = prop::collection::btree_map(
        (0i64..4).prop_map(|o| LockId::FieldAddr(FieldPath::single(0x30 + o * 8))),
        1u8..4,
        0..3,
    );
    (regs, stack, locks).prop_map(|(mut regs, stack, locks)| {
        regs.remove(&Register::Rsp);
        regs.retain(|_, v| !v.is_unknown());
        MachineState { regs, stack, locks }
    })
}

proptest! {
    #[test]
    fn merge_is_idempotent(state in state_strategy()) {
        prop_assert_eq!(taint::merge_states(&state, &state), state);
    }

    #[test]
    fn merge_is_commutative(a in state_strategy(), b in state_strategy()) {
        prop_assert_eq!(taint::merge_states(&a, &b), taint::merge_states(&b, &a));
    }

    #[test]
    fn merge_is_associative(a in state_strategy(), b in state_strategy(), c in state_strategy()) {
        let left = taint::merge_states(&taint::merge_states(&a, &b), &c);
        let right = taint::merge_states(&a, &taint::merge_states(&b, &c));
        prop_assert_eq!(left, right);
    }
}

/// A small well-formed single-function fixture: straight-line body with
/// random in-function branches, ending in ret.
fn function_fixture_strategy() -> impl Strategy<Value = String> {
    (2usize..12, prop::collection::vec((0u8..5, 0usize..12), 0..4)).prop_map(|(len, branches)| {
        let addr = |i: usize| 0x1000 + (i as u64) * 4;
        let mut lines: Vec<String> = (0..len)
            .map(|i| format!("{:#x}: nop", addr(i)))
            .collect();
        for (kind, target) in branches {
            let at = target % len;
            let to = addr((target * 7 + 3) % len);
            let mn = if kind % 2 == 0 { "jcc" } else { "jmp" };
            lines[at] = format!("{:#x}: {mn} {to:#x}", addr(at));
        }
        lines[len - 1] = format!("{:#x}: ret", addr(len - 1));
        format!(".func f @0x1000\n{}\n", lines.join("\n"))
    })
}

proptest! {
    #[test]
    fn cfg_partitions_the_instruction_list(text in function_fixture_strategy()) {
        let image = BinaryImage::parse(&text).unwrap();
        let func = &image.functions["f"];
        let cfg = cfg::build_cfg(func);
        let total: usize = cfg.blocks.iter().map(|b| b.end - b.start).sum();
        prop_assert_eq!(total, func.instructions.len());
        for pair in cfg.blocks.windows(2) {
            prop_assert_eq!(pair[0].end, pair[1].start);
        }
        // every edge is named by its terminator
        for block in &cfg.blocks {
            for &s in &cfg.successors[block.id] {
                let named = match block.terminator {
                    Terminator::FallThrough(t) | Terminator::Jump(t) => t == s,
                    Terminator::Branch { taken, fallthrough } => taken == s || fallthrough == s,
                    Terminator::Return => false,
                };
                prop_assert!(named);
            }
        }
        // bfs order is a stable permutation of the reachable blocks
        let order = cfg::bfs_order(&cfg);
        prop_assert_eq!(order.clone(), cfg::bfs_order(&cfg));
        let mut sorted = order.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), order.len());
    }

    #[test]
    fn fixture_round_trip(text in function_fixture_strategy(), words in prop::collection::vec(0u64..0x10000, 0..4)) {
        let mut full = text;
        if !words.is_empty() {
            let rendered: Vec<String> = words.iter().map(|w| format!("{w:#x}")).collect();
            full.push_str(&format!(".data @0x8000\ndq {}\n", rendered.join(", ")));
        }
        full.push_str(".sym 0x7000 EnterCriticalSection lock_acquire\n.entry f\n");
        let image = BinaryImage::parse(&full).unwrap();
        let serialized = image.to_fixture();
        let reparsed = BinaryImage::parse(&serialized).unwrap();
        prop_assert_eq!(&reparsed, &image);
        prop_assert_eq!(reparsed.to_fixture(), serialized);
    }
}

fn program_strategy(max_ops: usize) -> impl Strategy<Value = ThreadProgram> {
    let op = prop_oneof![
        Just(AbstractOp::Load { field: "f".into(), into: "p".into() }),
        Just(AbstractOp::Store { field: "f".into(), from: None }),
        Just(AbstractOp::AllocInto { into: "p".into() }),
        Just(AbstractOp::FreeVal { local: "p".into() }),
        Just(AbstractOp::UseVal { local: "p".into() }),
        Just(AbstractOp::Guard { local: "p".into() }),
    ];
    prop::collection::vec(op, 1..=max_ops).prop_map(|mut ops| {
        // make locals defined before use
        ops.insert(
            0,
            AbstractOp::Load { field: "f".into(), into: "p".into() },
        );
        ThreadProgram::new(ops)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn adding_a_thread_never_loses_a_fault(
        a in program_strategy(3),
        b in program_strategy(3),
        extra in program_strategy(2),
    ) {
        let base = Scenario {
            init: BTreeMap::from([("f".to_string(), 1)]),
            threads: vec![a, b],
        };
        let verdict = oracle::enumerate(&base).unwrap();
        let mut extended = base.clone();
        extended.threads.push(extra);
        let bigger = oracle::enumerate(&extended).unwrap();
        prop_assert!(!verdict.uaf || bigger.uaf);
        prop_assert!(!verdict.df || bigger.df);
    }

    #[test]
    fn memoized_matches_naive_on_random_programs(
        a in program_strategy(3),
        b in program_strategy(3),
    ) {
        let scenario = Scenario {
            init: BTreeMap::from([("f".to_string(), 1)]),
            threads: vec![a, b],
        };
        let memoized = oracle::enumerate(&scenario).unwrap();
        let naive = oracle::enumerate_naive(&scenario).unwrap();
        prop_assert_eq!(memoized.uaf, naive.uaf);
        prop_assert_eq!(memoized.df, naive.df);
        prop_assert_eq!(memoized.uaf_witness, naive.uaf_witness);
        prop_assert_eq!(memoized.df_witness, naive.df_witness);
    }

    #[test]
    fn witnesses_replay_to_their_faults(
        a in program_strategy(4),
        b in program_strategy(4),
    ) {
        let scenario = Scenario {
            init: BTreeMap::from([("f".to_string(), 1)]),
            threads: vec![a, b],
        };
        let verdict = oracle::enumerate(&scenario).unwrap();
        if let Some(w) = &verdict.uaf_witness {
            prop_assert_eq!(oracle::replay(&scenario, w).map(|(uaf, _)| uaf), Some(true));
        }
        if let Some(w) = &verdict.df_witness {
            prop_assert_eq!(oracle::replay(&scenario, w).map(|(_, df)| df), Some(true));
        }
    }
}

proptest! {
    #[test]
    fn score_case_is_order_and_duplicate_insensitive(
        picks in prop::collection::vec(0usize..6, 0..8),
        truth in prop::collection::vec(0usize..6, 0..4),
    ) {
        let names: Vec<String> = (0..6).map(|i| format!("f{i}")).collect();
        let label = CaseLabel {
            case_id: "c".into(),
            entry_functions: names.clone(),
            vulnerable: {
                let mut v: Vec<String> = truth.iter().map(|&i| names[i].clone()).collect();
                v.sort();
                v.dedup();
                v
            },
        };
        let forward = Prediction {
            case_id: "c".into(),
            predicted: picks.iter().map(|&i| names[i].clone()).collect(),
        };
        let mut shuffled = forward.clone();
        shuffled.predicted.reverse();
        shuffled.predicted.extend(forward.predicted.clone());
        let a = metrics::score_case(&label, &forward).unwrap();
        let b = metrics::score_case(&label, &shuffled).unwrap();
        prop_assert_eq!(a, b);
    }
}
