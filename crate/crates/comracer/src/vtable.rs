//! Virtual function call recovery: resolves indirect calls through vtable
//! pointers to concrete target functions.
//!
//! Recovery is partial. Object provenance is followed through two tiers:
//! (a) a same-function store of a vtable at offset 0 of the same abstract
//! object, and (b) an object produced by a direct call to a function whose
//! body stores a vtable at offset 0 of the object it constructs and
//! returns. Anything else stays unresolved, with a diagnostic recording
//! why. Only offset-0 stores define primary vtables; stores at nonzero
//! offsets (secondary interfaces) are recorded as facts but never used as
//! candidates.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::config::AnalysisOpts;
use crate::isa::{BinaryImage, Function, Instruction, Mnemonic, Operand, SymbolTag};
use crate::taint::{self, AbstractValue, MachineState, VtableStoreFact};

/// One candidate dispatch target of a resolved call.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Candidate {
    pub vtable: u64,
    pub target: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResolvedCall {
    pub call_site: u64,
    pub method_offset: i64,
    pub candidates: BTreeSet<Candidate>,
}

impl ResolvedCall {
    pub fn target_addresses(&self) -> Vec<u64> {
        self.candidates.iter().map(|c| c.target).collect()
    }
}

pub type ResolvedCalls = BTreeMap<u64, ResolvedCall>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnresolvedCall {
    pub call_site: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Recovery {
    pub resolved: ResolvedCalls,
    pub unresolved: Vec<UnresolvedCall>,
    /// Virtual calls detected in total: |resolved| + |unresolved|.
    pub virtual_calls: usize,
}

/// All call instructions of a function, in address order.
pub fn collect_calls(func: &Function) -> Vec<&Instruction> {
    func.instructions
        .iter()
        .filter(|i| i.mnemonic == Mnemonic::Call)
        .collect()
}

/// A call is virtual when it dispatches through a vtable pointer at a
/// fixed offset: the operand is `[r+d]` (or plain `r`, offset-0 dispatch)
/// and `r` holds a word loaded from offset 0 of an object-typed value.
/// Direct calls and index-scaled dispatch are not.
pub fn is_virtual_call(call: &Instruction, state: &MachineState) -> bool {
    let base = match call.operands.first() {
        Some(&Operand::Reg(r)) => r,
        Some(&Operand::Mem { base, index: None, .. }) => base,
        _ => return false,
    };
    matches!(state.reg(base), AbstractValue::VtablePtr(_))
}

/// The object whose offset-0 load produced the call's base register, or
/// None when the definition chain broke.
pub fn trace_object(call: &Instruction, state: &MachineState) -> Option<AbstractValue> {
    let base = match call.operands.first() {
        Some(&Operand::Reg(r)) => r,
        Some(&Operand::Mem { base, index: None, .. }) => base,
        _ => return None,
    };
    match state.reg(base) {
        AbstractValue::VtablePtr(obj) => Some(*obj),
        _ => None,
    }
}

/// The vtable displacement of the call: the memory displacement, or 0 for
/// the register form.
pub fn parse_method_offset(call: &Instruction) -> i64 {
    match call.operands.first() {
        Some(&Operand::Mem { disp, .. }) => disp as i64,
        _ => 0,
    }
}

/// Reads the function pointer at `vtable_addr + offset`; None when the
/// word is unmapped or is not a known function entry address.
pub fn lookup_vtable(image: &BinaryImage, vtable_addr: u64, offset: i64) -> Option<u64> {
    let addr = vtable_addr.checked_add_signed(offset)?;
    let word = image.read_data_word(addr).ok()?;
    image.function_at_entry(word).map(|_| word)
}

/// Candidate vtables reachable from an object value, against the global
/// fact list. Tier (a): same-function offset-0 stores to the same object.
/// Tier (b): the object is the return of a direct call to a function whose
/// body stores a vtable at offset 0 of its constructed object.
pub fn follow_object_chain(
    image: &BinaryImage,
    current_function: &str,
    object: &AbstractValue,
    facts: &[VtableStoreFact],
    opts: &AnalysisOpts,
) -> BTreeSet<u64> {
    let mut out: BTreeSet<u64> = facts
        .iter()
        .filter(|f| f.function == current_function && f.field_offset == 0 && &f.object == object)
        .map(|f| f.vtable_addr)
        .collect();
    if out.is_empty() {
        if let AbstractValue::AllocFresh(site) = object {
            out.extend(producer_vtables(image, *site, facts, opts, &mut BTreeSet::new()));
        }
    }
    out
}

/// Tier (b) chain: the vtables stored at offset 0 of the object returned
/// by the call at `site`. Follows factory delegation with a visited set.
fn producer_vtables(
    image: &BinaryImage,
    site: u64,
    facts: &[VtableStoreFact],
    opts: &AnalysisOpts,
    visiting: &mut BTreeSet<String>,
) -> BTreeSet<u64> {
    let Some(instr) = image.instruction_at(site) else {
        return BTreeSet::new();
    };
    let Some(target) = instr.direct_target() else {
        return BTreeSet::new();
    };
    if image
        .symbol_at(target)
        .is_some_and(|s| s.tag != SymbolTag::Plain)
    {
        // A raw heap allocation carries no vtable of its own.
        return BTreeSet::new();
    }
    let Some(callee) = image.function_at_entry(target) else {
        return BTreeSet::new();
    };
    if !visiting.insert(callee.name.clone()) {
        return BTreeSet::new();
    }
    let states = taint::function_states(image, &callee.name, opts);
    let returned = states
        .exit
        .as_ref()
        .map(|s| s.reg(crate::isa::Register::Rax))
        .unwrap_or(AbstractValue::Unknown);
    let mut out: BTreeSet<u64> = match &returned {
        AbstractValue::AllocFresh(_) | AbstractValue::ThisDerived(0) => facts
            .iter()
            .filter(|f| f.function == callee.name && f.field_offset == 0 && f.object == returned)
            .map(|f| f.vtable_addr)
            .collect(),
        _ => BTreeSet::new(),
    };
    if out.is_empty() {
        if let AbstractValue::AllocFresh(inner) = returned {
            out = producer_vtables(image, inner, facts, opts, visiting);
        }
    }
    visiting.remove(&callee.name);
    out
}

/// Algorithm: collect calls, filter virtual ones, trace the object, follow
/// its definition chain to candidate vtables, look up the method offset in
/// each, and union targets. Calls with an empty target set are omitted from
/// the map; a diagnostic records why each detected virtual call was left
/// unresolved.
pub fn recover_virtual_calls(image: &BinaryImage) -> Recovery {
    recover_virtual_calls_with_opts(image, &AnalysisOpts::default())
}

pub fn recover_virtual_calls_with_opts(image: &BinaryImage, opts: &AnalysisOpts) -> Recovery {
    let facts = taint::collect_vtable_facts(image, opts);
    let mut recovery = Recovery::default();
    for func in image.functions.values() {
        let states = taint::function_states(image, &func.name, opts);
        for call in collect_calls(func) {
            let Some(state) = states.before.get(&call.address) else {
                continue;
            };
            if !is_virtual_call(call, state) {
                continue;
            }
            recovery.virtual_calls += 1;
            let Some(object) = trace_object(call, state) else {
                recovery.unresolved.push(UnresolvedCall {
                    call_site: call.address,
                    reason: "object untracked".into(),
                });
                continue;
            };
            let method_offset = parse_method_offset(call);
            if method_offset < 0 || method_offset % 8 != 0 {
                recovery.unresolved.push(UnresolvedCall {
                    call_site: call.address,
                    reason: format!("method offset {method_offset:#x} not 8-aligned"),
                });
                continue;
            }
            let vtables = follow_object_chain(image, &func.name, &object, &facts, opts);
            if vtables.is_empty() {
                recovery.unresolved.push(UnresolvedCall {
                    call_site: call.address,
                    reason: format!("no candidate vtables for object {object}"),
                });
                continue;
            }
            let mut candidates = BTreeSet::new();
            for vt in &vtables {
                if let Some(target) = lookup_vtable(image, *vt, method_offset) {
                    let name = image
                        .function_at_entry(target)
                        .map(|f| f.name.clone())
                        .unwrap_or_default();
                    candidates.insert(Candidate {
                        vtable: *vt,
                        target,
                        name,
                    });
                }
            }
            if candidates.is_empty() {
                recovery.unresolved.push(UnresolvedCall {
                    call_site: call.address,
                    reason: format!(
                        "no function entry at offset {method_offset:#x} of {} candidate vtable(s)",
                        vtables.len()
                    ),
                });
            } else {
                recovery.resolved.insert(
                    call.address,
                    ResolvedCall {
                        call_site: call.address,
                        method_offset,
                        candidates,
                    },
                );
            }
        }
    }
    recovery
}

impl Recovery {
    pub fn to_json(&self) -> serde_json::Value {
        let resolved: Vec<serde_json::Value> = self
            .resolved
            .values()
            .map(|rc| {
                serde_json::json!({
                    "call_site": format!("{:#x}", rc.call_site),
                    "method_offset": rc.method_offset,
                    "candidates": rc.candidates.iter().map(|c| serde_json::json!({
                        "vtable": format!("{:#x}", c.vtable),
                        "target": format!("{:#x}", c.target),
                        "name": c.name,
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        let unresolved: Vec<serde_json::Value> = self
            .unresolved
            .iter()
            .map(|u| {
                serde_json::json!({
                    "call_site": format!("{:#x}", u.call_site),
                    "reason": u.reason,
                })
            })
            .collect();
        serde_json::json!({ "resolved": resolved, "unresolved": unresolved })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(text: &str) -> BinaryImage {
        BinaryImage::parse(text).unwrap()
    }

    const CTOR_AND_CALL: &str = "\
.func Method @0x1000
0x1000: mov rdi, rcx
0x1003: lea rax, [rip+0x5000]
0x100a: mov [rdi], rax
0x100d: mov rax, [rcx]
0x1010: call [rax+0x8]
0x1013: ret
.func Target0 @0x1100
0x1100: ret
.func Target1 @0x1200
0x1200: ret
.data @0x5000
dq 0x1100, 0x1200
.entry Method
";

    #[test]
    fn collect_calls_in_order() {
        let img = image(
            ".func f @0x1000\n0x1000: call 0x2000\n0x1005: mov rax, [rcx]\n0x1008: call [rax+0x8]\n0x100b: ret\n.func g @0x2000\n0x2000: ret\n",
        );
        let calls = collect_calls(&img.functions["f"]);
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[0].address, 0x1000);
        assert_eq!(calls[1].address, 0x1008);
        assert!(collect_calls(&img.functions["g"]).is_empty());
    }

    #[test]
    fn direct_call_is_not_virtual() {
        let img = image(".func f @0x1000\n0x1000: call 0x2000\n0x1005: ret\n.func g @0x2000\n0x2000: ret\n");
        let func = &img.functions["f"];
        let states = taint::function_states(&img, "f", &AnalysisOpts::default());
        let call = collect_calls(func)[0];
        assert!(!is_virtual_call(call, &states.before[&0x1000]));
    }

    #[test]
    fn vtable_pointer_load_makes_call_virtual() {
        let img = image(CTOR_AND_CALL);
        let func = &img.functions["Method"];
        let states = taint::function_states(&img, "Method", &AnalysisOpts::default());
        let call = collect_calls(func)[0];
        let state = &states.before[&0x1010];
        assert!(is_virtual_call(call, state));
        assert_eq!(trace_object(call, state), Some(AbstractValue::ThisDerived(0)));
    }

    #[test]
    fn clobbered_base_breaks_the_chain() {
        let img = image(
            ".func f @0x1000\n0x1000: mov rax, [rcx]\n0x1003: add rax, 0x8\n0x1007: call [rax+0x8]\n0x100a: ret\n",
        );
        let func = &img.functions["f"];
        let states = taint::function_states(&img, "f", &AnalysisOpts::default());
        let call = collect_calls(func)[0];
        let state = &states.before[&0x1007];
        assert!(!is_virtual_call(call, state));
        assert_eq!(trace_object(call, state), None);
    }

    #[test]
    fn method_offset_parsing() {
        let img = image(
            ".func f @0x1000\n0x1000: mov rax, [rcx]\n0x1003: call [rax+0x10]\n0x1006: call [rax]\n0x1009: call rax\n0x100c: ret\n",
        );
        let calls = collect_calls(&img.functions["f"]);
        assert_eq!(parse_method_offset(calls[0]), 0x10);
        assert_eq!(parse_method_offset(calls[1]), 0);
        assert_eq!(parse_method_offset(calls[2]), 0);
    }

    #[test]
    fn lookup_vtable_examples() {
        let img = image(
            ".func Target @0x1200\n0x1200: ret\n.data @0x5000\ndq 0x1100, 0x1200\n",
        );
        // 0x1100 is not a function entry; 0x1200 is
        assert_eq!(lookup_vtable(&img, 0x5000, 8), Some(0x1200));
        assert_eq!(lookup_vtable(&img, 0x5000, 0), None);
        assert_eq!(lookup_vtable(&img, 0x5000, 0x10), None); // beyond the run
    }

    #[test]
    fn recover_ctor_fixture_single_candidate() {
        let img = image(CTOR_AND_CALL);
        let recovery = recover_virtual_calls(&img);
        assert_eq!(recovery.resolved.len(), 1);
        let rc = &recovery.resolved[&0x1010];
        assert_eq!(rc.method_offset, 8);
        assert_eq!(rc.candidates.len(), 1);
        let c = rc.candidates.iter().next().unwrap();
        assert_eq!((c.vtable, c.target, c.name.as_str()), (0x5000, 0x1200, "Target1"));
        assert_eq!(recovery.virtual_calls, 1);
        assert!(recovery.unresolved.is_empty());
    }

    #[test]
    fn two_constructor_stores_give_two_candidates() {
        let img = image(
            "\
.func Method @0x1000
0x1000: mov rdi, rcx
0x1003: jcc 0x1018
0x1007: lea rax, [rip+0x5000]
0x100e: mov [rdi], rax
0x1011: jmp 0x1022
0x1018: lea rax, [rip+0x5010]
0x101f: mov [rdi], rax
0x1022: mov rax, [rcx]
0x1025: call [rax+0x8]
0x1028: ret
.func TargetA @0x1100
0x1100: ret
.func TargetB @0x1200
0x1200: ret
.data @0x5000
dq 0x1100, 0x1100
.data @0x5010
dq 0x1200, 0x1200
",
        );
        let recovery = recover_virtual_calls(&img);
        let rc = &recovery.resolved[&0x1025];
        let vtables: BTreeSet<u64> = rc.candidates.iter().map(|c| c.vtable).collect();
        assert_eq!(vtables, BTreeSet::from([0x5000, 0x5010]));
        let targets: BTreeSet<u64> = rc.candidates.iter().map(|c| c.target).collect();
        assert_eq!(targets, BTreeSet::from([0x1100, 0x1200]));
    }

    #[test]
    fn factory_return_resolves_through_producer() {
        let img = image(
            "\
.func Caller @0x1000
0x1000: call 0x2000
0x1005: mov rbx, rax
0x1008: mov rax, [rbx]
0x100b: call [rax+0x8]
0x100e: ret
.func Factory @0x2000
0x2000: call 0x7100
0x2005: lea rcx, [rip+0x5000]
0x200c: mov [rax], rcx
0x200f: ret
.func Target @0x1200
0x1200: ret
.data @0x5000
dq 0x1200, 0x1200
.sym 0x7100 operator.new alloc
",
        );
        let recovery = recover_virtual_calls(&img);
        let rc = recovery.resolved.get(&0x100b).expect("factory call resolved");
        assert_eq!(rc.candidates.iter().next().unwrap().target, 0x1200);
    }

    #[test]
    fn external_object_stays_unresolved() {
        let img = image(
            "\
.func f @0x1000
0x1000: mov rbx, [rcx+0x8]
0x1005: mov rax, [rbx]
0x1008: call [rax+0x10]
0x100b: ret
",
        );
        let recovery = recover_virtual_calls(&img);
        assert!(recovery.resolved.is_empty());
        assert_eq!(recovery.virtual_calls, 1);
        assert_eq!(recovery.unresolved.len(), 1);
        assert!(recovery.unresolved[0].reason.contains("no candidate vtables"));
    }

    #[test]
    fn direct_calls_only_gives_empty_map() {
        let img = image(
            ".func f @0x1000\n0x1000: call 0x2000\n0x1005: ret\n.func g @0x2000\n0x2000: ret\n",
        );
        let recovery = recover_virtual_calls(&img);
        assert!(recovery.resolved.is_empty());
        assert_eq!(recovery.virtual_calls, 0);
        assert!(recovery.unresolved.is_empty());
    }

    #[test]
    fn partiality_bookkeeping_is_exact() {
        let img = image(
            "\
.func f @0x1000
0x1000: mov rsi, rcx
0x1003: mov rdi, rcx
0x1006: lea rax, [rip+0x5000]
0x100d: mov [rdi], rax
0x1010: mov rax, [rcx]
0x1013: call [rax+0x8]
0x1016: mov rbx, [rsi+0x18]
0x101b: mov rax, [rbx]
0x101e: call [rax+0x10]
0x1021: ret
.func Target @0x1200
0x1200: ret
.data @0x5000
dq 0x1200, 0x1200
",
        );
        let recovery = recover_virtual_calls(&img);
        assert_eq!(
            recovery.resolved.len() + recovery.unresolved.len(),
            recovery.virtual_calls
        );
        assert_eq!(recovery.virtual_calls, 2);
    }

    #[test]
    fn adding_an_unrelated_function_never_removes_a_resolution() {
        let img = image(CTOR_AND_CALL);
        let before = recover_virtual_calls(&img);
        let extended = format!("{CTOR_AND_CALL}.func Unrelated @0x9000\n0x9000: mov rax, [rcx+0x8]\n0x9005: ret\n");
        let after = recover_virtual_calls(&image(&extended));
        for (site, rc) in &before.resolved {
            let kept = after.resolved.get(site).expect("resolution kept");
            assert!(kept.candidates.is_superset(&rc.candidates));
        }
    }
}
