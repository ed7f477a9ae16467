//! Exhaustive thread-interleaving enumeration over abstract per-thread
//! field-access programs: the ground truth for use-after-free and
//! double-free reachability.
//!
//! Fields are shared slots holding allocation ids or null; locals are
//! thread-private. Reference counting is flattened to free-at-zero
//! semantics: two frees of one id are a double-free. Freeing null is a
//! no-op (mirrors a null guard around the free). A `Guard` op prunes
//! interleavings where its local is null.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taint::{AccessKind, FieldPath, MethodSummary};

pub const MAX_THREADS: usize = 3;
pub const MAX_THREAD_OPS: usize = 12;
pub const MAX_TOTAL_OPS: usize = 18;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AbstractOp {
    /// Copy the field's current id into a local.
    Load { field: String, into: String },
    /// Store a local (or, with `from` absent, an opaque fresh id) into the
    /// field slot. Writes the slot itself, not through the pointer.
    Store {
        field: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<String>,
    },
    /// Bind a fresh allocation to a local.
    #[serde(rename = "alloc")]
    AllocInto { into: String },
    /// Free the allocation a local points to; second free of an id is the
    /// double-free, free of null is a no-op.
    #[serde(rename = "free")]
    FreeVal { local: String },
    /// Dereference the allocation a local points to; a freed id is the
    /// use-after-free.
    #[serde(rename = "use")]
    UseVal { local: String },
    /// Proceed only when the local is non-null.
    Guard { local: String },
}

impl AbstractOp {
    fn render(&self) -> String {
        match self {
            AbstractOp::Load { field, into } => format!("load {field} -> {into}"),
            AbstractOp::Store { field, from: Some(l) } => format!("store {field} <- {l}"),
            AbstractOp::Store { field, from: None } => format!("store {field} <- fresh"),
            AbstractOp::AllocInto { into } => format!("alloc {into}"),
            AbstractOp::FreeVal { local } => format!("free {local}"),
            AbstractOp::UseVal { local } => format!("use {local}"),
            AbstractOp::Guard { local } => format!("guard {local}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadProgram {
    pub ops: Vec<AbstractOp>,
}

impl ThreadProgram {
    pub fn new(ops: Vec<AbstractOp>) -> ThreadProgram {
        ThreadProgram { ops }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    /// Initial shared heap: field name to allocation id (0 = null).
    #[serde(default)]
    pub init: BTreeMap<String, u32>,
    pub threads: Vec<ThreadProgram>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("at most {MAX_THREADS} threads supported, got {0}")]
    TooManyThreads(usize),
    #[error("thread {0} has {1} ops; the per-thread bound is {MAX_THREAD_OPS}")]
    ThreadTooLong(usize, usize),
    #[error("{0} total ops exceed the bound of {MAX_TOTAL_OPS}")]
    TooManyOps(usize),
    #[error("thread {thread}, op {index}: local `{local}` used before definition")]
    UndefinedLocal {
        thread: usize,
        index: usize,
        local: String,
    },
    #[error("field `{0}` absent from the summary")]
    FieldAbsent(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub uaf: bool,
    pub df: bool,
    /// Global op order as a thread-index sequence ending at the faulting
    /// step; present iff the corresponding flag is true.
    pub uaf_witness: Option<Vec<usize>>,
    pub df_witness: Option<Vec<usize>>,
    pub explored: u64,
}

impl Verdict {
    /// Witness rendering: `T1:op, T2:op, ...` (1-based thread indices).
    pub fn render_witness(scenario: &Scenario, witness: &[usize]) -> String {
        let mut pcs = vec![0usize; scenario.threads.len()];
        let mut parts = Vec::with_capacity(witness.len());
        for &t in witness {
            let op = &scenario.threads[t].ops[pcs[t]];
            parts.push(format!("T{}:{}", t + 1, op.render()));
            pcs[t] += 1;
        }
        parts.join(", ")
    }

    pub fn to_json(&self, scenario: &Scenario) -> serde_json::Value {
        serde_json::json!({
            "uaf": self.uaf,
            "df": self.df,
            "uaf_witness": self.uaf_witness.as_ref().map(|w| Verdict::render_witness(scenario, w)),
            "df_witness": self.df_witness.as_ref().map(|w| Verdict::render_witness(scenario, w)),
            "explored": self.explored,
        })
    }
}

fn validate(scenario: &Scenario) -> Result<(), OracleError> {
    if scenario.threads.len() > MAX_THREADS {
        return Err(OracleError::TooManyThreads(scenario.threads.len()));
    }
    let total: usize = scenario.threads.iter().map(|t| t.ops.len()).sum();
    if total > MAX_TOTAL_OPS {
        return Err(OracleError::TooManyOps(total));
    }
    for (ti, thread) in scenario.threads.iter().enumerate() {
        if thread.ops.len() > MAX_THREAD_OPS {
            return Err(OracleError::ThreadTooLong(ti, thread.ops.len()));
        }
        let mut defined: BTreeSet<&str> = BTreeSet::new();
        for (i, op) in thread.ops.iter().enumerate() {
            let used: Option<&str> = match op {
                AbstractOp::Store { from: Some(l), .. }
                | AbstractOp::FreeVal { local: l }
                | AbstractOp::UseVal { local: l }
                | AbstractOp::Guard { local: l } => Some(l),
                _ => None,
            };
            if let Some(l) = used {
                if !defined.contains(l) {
                    return Err(OracleError::UndefinedLocal {
                        thread: ti,
                        index: i,
                        local: l.to_string(),
                    });
                }
            }
            match op {
                AbstractOp::Load { into, .. } | AbstractOp::AllocInto { into } => {
                    defined.insert(into);
                }
                _ => {}
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct State {
    pcs: Vec<u8>,
    fields: BTreeMap<String, u32>,
    freed: BTreeSet<u32>,
    locals: Vec<BTreeMap<String, u32>>,
    next_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepOutcome {
    Ok,
    Pruned,
    Fault { uaf: bool, df: bool },
}

fn step(state: &mut State, thread: usize, op: &AbstractOp) -> StepOutcome {
    state.pcs[thread] += 1;
    match op {
        AbstractOp::Load { field, into } => {
            let v = state.fields.get(field).copied().unwrap_or(0);
            state.locals[thread].insert(into.clone(), v);
            StepOutcome::Ok
        }
        AbstractOp::Store { field, from } => {
            let v = match from {
                Some(l) => state.locals[thread][l],
                None => {
                    let id = state.next_id;
                    state.next_id += 1;
                    id
                }
            };
            state.fields.insert(field.clone(), v);
            StepOutcome::Ok
        }
        AbstractOp::AllocInto { into } => {
            let id = state.next_id;
            state.next_id += 1;
            state.locals[thread].insert(into.clone(), id);
            StepOutcome::Ok
        }
        AbstractOp::FreeVal { local } => {
            let v = state.locals[thread][local];
            if v == 0 {
                StepOutcome::Ok
            } else if state.freed.contains(&v) {
                StepOutcome::Fault { uaf: false, df: true }
            } else {
                state.freed.insert(v);
                StepOutcome::Ok
            }
        }
        AbstractOp::UseVal { local } => {
            let v = state.locals[thread][local];
            if v != 0 && state.freed.contains(&v) {
                StepOutcome::Fault { uaf: true, df: false }
            } else {
                StepOutcome::Ok
            }
        }
        AbstractOp::Guard { local } => {
            if state.locals[thread][local] == 0 {
                StepOutcome::Pruned
            } else {
                StepOutcome::Ok
            }
        }
    }
}

fn initial_state(scenario: &Scenario) -> State {
    let next_id = scenario.init.values().copied().max().unwrap_or(0) + 1;
    State {
        pcs: vec![0; scenario.threads.len()],
        fields: scenario.init.clone(),
        freed: BTreeSet::new(),
        locals: vec![BTreeMap::new(); scenario.threads.len()],
        next_id,
    }
}

/// Depth-first enumeration of all interleavings, memoized on the full
/// machine state. Thread 0 is tried first at every step, so the first
/// witness found per fault kind is the lexicographically smallest
/// schedule; exploration past a fault continues (the faulted id stays
/// freed) so every reachable fault kind is reported. `explored` counts
/// distinct state expansions.
pub fn enumerate(scenario: &Scenario) -> Result<Verdict, OracleError> {
    validate(scenario)?;
    let mut verdict = Verdict {
        uaf: false,
        df: false,
        uaf_witness: None,
        df_witness: None,
        explored: 0,
    };
    let mut memo: HashSet<State> = HashSet::new();
    let mut schedule: Vec<usize> = Vec::new();
    dfs(scenario, initial_state(scenario), &mut memo, &mut schedule, &mut verdict);
    Ok(verdict)
}

fn dfs(
    scenario: &Scenario,
    state: State,
    memo: &mut HashSet<State>,
    schedule: &mut Vec<usize>,
    verdict: &mut Verdict,
) {
    if (verdict.uaf && verdict.df) || !memo.insert(state.clone()) {
        return;
    }
    verdict.explored += 1;
    for thread in 0..scenario.threads.len() {
        let pc = state.pcs[thread] as usize;
        if pc >= scenario.threads[thread].ops.len() {
            continue;
        }
        let mut next = state.clone();
        schedule.push(thread);
        match step(&mut next, thread, &scenario.threads[thread].ops[pc]) {
            StepOutcome::Pruned => {}
            StepOutcome::Ok => dfs(scenario, next, memo, schedule, verdict),
            StepOutcome::Fault { uaf, df } => {
                if uaf && !verdict.uaf {
                    verdict.uaf = true;
                    verdict.uaf_witness = Some(schedule.clone());
                }
                if df && !verdict.df {
                    verdict.df = true;
                    verdict.df_witness = Some(schedule.clone());
                }
                dfs(scenario, next, memo, schedule, verdict);
            }
        }
        schedule.pop();
        if verdict.uaf && verdict.df {
            return;
        }
    }
}

/// Reference enumerator: plain recursion over every complete schedule,
/// no memoization, no early exit. `explored` counts complete schedules.
/// Exists to cross-check the memoized enumerator verdict-for-verdict.
pub fn enumerate_naive(scenario: &Scenario) -> Result<Verdict, OracleError> {
    validate(scenario)?;
    let mut verdict = Verdict {
        uaf: false,
        df: false,
        uaf_witness: None,
        df_witness: None,
        explored: 0,
    };
    let mut schedule = Vec::new();
    naive(scenario, initial_state(scenario), &mut schedule, &mut verdict);
    Ok(verdict)
}

fn naive(scenario: &Scenario, state: State, schedule: &mut Vec<usize>, verdict: &mut Verdict) {
    let mut any = false;
    for thread in 0..scenario.threads.len() {
        let pc = state.pcs[thread] as usize;
        if pc >= scenario.threads[thread].ops.len() {
            continue;
        }
        any = true;
        let mut next = state.clone();
        schedule.push(thread);
        match step(&mut next, thread, &scenario.threads[thread].ops[pc]) {
            StepOutcome::Pruned => {}
            StepOutcome::Ok => naive(scenario, next, schedule, verdict),
            StepOutcome::Fault { uaf, df } => {
                if uaf && !verdict.uaf {
                    verdict.uaf = true;
                    verdict.uaf_witness = Some(schedule.clone());
                }
                if df && !verdict.df {
                    verdict.df = true;
                    verdict.df_witness = Some(schedule.clone());
                }
                naive(scenario, next, schedule, verdict);
            }
        }
        schedule.pop();
    }
    if !any {
        verdict.explored += 1;
    }
}

/// Replays a witness schedule step by step; the claimed fault must occur
/// exactly at the final step.
pub fn replay(scenario: &Scenario, witness: &[usize]) -> Option<(bool, bool)> {
    let mut state = initial_state(scenario);
    for (i, &thread) in witness.iter().enumerate() {
        let pc = state.pcs[thread] as usize;
        let op = scenario.threads.get(thread)?.ops.get(pc)?;
        match step(&mut state, thread, op) {
            StepOutcome::Pruned => return None,
            StepOutcome::Fault { uaf, df } => {
                if i + 1 == witness.len() {
                    return Some((uaf, df));
                }
            }
            StepOutcome::Ok => {
                if i + 1 == witness.len() {
                    return Some((false, false));
                }
            }
        }
    }
    None
}

/// Site-ordered lift of a method summary's accesses on one field into an
/// abstract thread program:
///
/// - Read becomes a Load into a fresh local;
/// - Free becomes a FreeVal of the most recent prior Load's local
///   (the freed value was read from the field earlier), or Load + FreeVal
///   when no prior read exists; a Guard precedes it when the fixture's
///   null test dominated the free site;
/// - Write of a freshly allocated value becomes AllocInto + Store +
///   UseVal (publish, then initialize through the pointer); any other
///   write stores an opaque id.
pub fn summary_to_program(summary: &MethodSummary, field: &FieldPath) -> Result<ThreadProgram, OracleError> {
    let accesses: Vec<_> = summary.accesses.iter().filter(|a| &a.path == field).collect();
    if accesses.is_empty() {
        return Err(OracleError::FieldAbsent(field.to_string()));
    }
    let fname = field.to_string();
    let mut ops = Vec::new();
    let mut local_counter = 0usize;
    let fresh_local = |prefix: &str, counter: &mut usize| {
        let name = format!("{prefix}{counter}");
        *counter += 1;
        name
    };
    let mut last_load: Option<String> = None;
    for access in accesses {
        match access.kind {
            AccessKind::Read => {
                let local = fresh_local("p", &mut local_counter);
                ops.push(AbstractOp::Load {
                    field: fname.clone(),
                    into: local.clone(),
                });
                last_load = Some(local);
            }
            AccessKind::Free => {
                let local = match &last_load {
                    Some(l) => l.clone(),
                    None => {
                        let local = fresh_local("p", &mut local_counter);
                        ops.push(AbstractOp::Load {
                            field: fname.clone(),
                            into: local.clone(),
                        });
                        local
                    }
                };
                if access.null_guarded {
                    ops.push(AbstractOp::Guard { local: local.clone() });
                }
                ops.push(AbstractOp::FreeVal { local });
            }
            AccessKind::Write => {
                if access.wrote_fresh {
                    let local = fresh_local("q", &mut local_counter);
                    ops.push(AbstractOp::AllocInto { into: local.clone() });
                    ops.push(AbstractOp::Store {
                        field: fname.clone(),
                        from: Some(local.clone()),
                    });
                    ops.push(AbstractOp::UseVal { local });
                } else {
                    ops.push(AbstractOp::Store {
                        field: fname.clone(),
                        from: None,
                    });
                }
            }
        }
    }
    Ok(ThreadProgram::new(ops))
}
