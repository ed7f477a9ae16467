//! Abstract interpretation over entry methods: this-pointer propagation via
//! (base, offset) tuples, per-field lockset tracking with minimum-merge at
//! join points, field-access extraction, recursive member analysis, and
//! sub-object recursion through dereferenced pointer fields.
//!
//! Taint originates from the this pointer passed in `rcx` at method entry.
//! Shared state is tracked exclusively through this-relative field offsets;
//! global variables and struct-embedded indirection are out of scope.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use crate::cfg::{self, Cfg, Terminator};
use crate::config::AnalysisOpts;
use crate::isa::{BinaryImage, Instruction, Mnemonic, Operand, Register, SymbolTag};
use crate::vtable::ResolvedCalls;

/// A chain of byte offsets identifying a (possibly nested) member slot,
/// outermost first. `[0x20, 0x68]` renders as `[this+0x20]+0x68`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FieldPath(Vec<i64>);

impl FieldPath {
    pub fn new(offsets: Vec<i64>) -> FieldPath {
        assert!(!offsets.is_empty(), "field path must have at least one segment");
        FieldPath(offsets)
    }

    pub fn single(offset: i64) -> FieldPath {
        FieldPath(vec![offset])
    }

    pub fn offsets(&self) -> &[i64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn push(&self, offset: i64) -> FieldPath {
        let mut v = self.0.clone();
        v.push(offset);
        FieldPath(v)
    }

    pub fn join(&self, tail: &FieldPath) -> FieldPath {
        let mut v = self.0.clone();
        v.extend_from_slice(&tail.0);
        FieldPath(v)
    }
}

fn fmt_offset(off: i64) -> String {
    if off < 0 {
        format!("-{:#x}", -(off as i128))
    } else {
        format!("+{off:#x}")
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = format!("this{}", fmt_offset(self.0[0]));
        for &off in &self.0[1..] {
            s = format!("[{s}]{}", fmt_offset(off));
        }
        f.write_str(&s)
    }
}

impl Serialize for FieldPath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Taint-domain value. `VtablePtr` marks a word loaded from offset 0 of an
/// object-typed value; the vtable recovery keys on it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AbstractValue {
    /// Object base plus a known displacement; `ThisDerived(0)` is this.
    ThisDerived(i64),
    /// Value loaded from a this-relative field chain.
    FieldContents(FieldPath),
    /// Vtable pointer of `object` (loaded from its offset 0).
    VtablePtr(Box<AbstractValue>),
    /// Address of a data-section word (a vtable produced by `lea r,[rip+V]`
    /// or `mov r, imm` of a data address).
    VtableRef(u64),
    /// Address of a stack slot.
    StackAddr(i64),
    /// Object produced at a call site (heap allocation or the return of an
    /// in-image function).
    AllocFresh(u64),
    Unknown,
}

impl AbstractValue {
    pub fn is_unknown(&self) -> bool {
        matches!(self, AbstractValue::Unknown)
    }
}

impl fmt::Display for AbstractValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbstractValue::ThisDerived(d) => write!(f, "this{}", fmt_offset(*d)),
            AbstractValue::FieldContents(p) => write!(f, "[{p}]"),
            AbstractValue::VtablePtr(o) => write!(f, "vtable-of({o})"),
            AbstractValue::VtableRef(a) => write!(f, "vt@{a:#x}"),
            AbstractValue::StackAddr(d) => write!(f, "stack{}", fmt_offset(*d)),
            AbstractValue::AllocFresh(s) => write!(f, "fresh@{s:#x}"),
            AbstractValue::Unknown => write!(f, "?"),
        }
    }
}

/// Identity of a lock object, keyed by where it lives relative to this.
/// `FieldAddr` is a lock embedded at a field location (`lea rcx,[this+d]`);
/// `FieldValue` is a lock pointer loaded from a field. Unknown identities
/// are never lock ids: crediting them would hide races.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LockId {
    FieldAddr(FieldPath),
    FieldValue(FieldPath),
}

impl LockId {
    fn remap(&self, prefix: &FieldPath) -> LockId {
        match self {
            LockId::FieldAddr(p) => LockId::FieldAddr(prefix.join(p)),
            LockId::FieldValue(p) => LockId::FieldValue(prefix.join(p)),
        }
    }
}

impl fmt::Display for LockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LockId::FieldAddr(p) => write!(f, "{p}"),
            LockId::FieldValue(p) => write!(f, "[{p}]"),
        }
    }
}

impl Serialize for LockId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Register file, tracked stack slots, and per-lock recursion counts.
/// Absent registers are Unknown; absent locks have count 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MachineState {
    pub regs: BTreeMap<Register, AbstractValue>,
    pub stack: BTreeMap<i64, AbstractValue>,
    pub locks: BTreeMap<LockId, u8>,
}

impl MachineState {
    pub fn entry_state(locks: BTreeMap<LockId, u8>) -> MachineState {
        let mut regs = BTreeMap::new();
        regs.insert(Register::Rcx, AbstractValue::ThisDerived(0));
        MachineState {
            regs,
            stack: BTreeMap::new(),
            locks,
        }
    }

    pub fn reg(&self, r: Register) -> AbstractValue {
        if r == Register::Rsp {
            return AbstractValue::StackAddr(0);
        }
        self.regs.get(&r).cloned().unwrap_or(AbstractValue::Unknown)
    }

    fn set_reg(&mut self, r: Register, v: AbstractValue) {
        if r == Register::Rsp {
            return;
        }
        if v.is_unknown() {
            self.regs.remove(&r);
        } else {
            self.regs.insert(r, v);
        }
    }

    fn clobber_volatile(&mut self) {
        self.regs.retain(|r, _| !r.is_volatile());
    }

    fn held_locks(&self) -> BTreeSet<LockId> {
        self.locks.keys().cloned().collect()
    }
}

/// Conservative merge at join points: registers and stack slots keep only
/// entries equal on both sides; lock counts take the per-lock minimum
/// (absent = 0), so a field is guarded only if guarded on all reaching
/// paths.
pub fn merge_states(a: &MachineState, b: &MachineState) -> MachineState {
    let mut regs = BTreeMap::new();
    for (r, v) in &a.regs {
        if b.regs.get(r) == Some(v) {
            regs.insert(*r, v.clone());
        }
    }
    let mut stack = BTreeMap::new();
    for (d, v) in &a.stack {
        if b.stack.get(d) == Some(v) {
            stack.insert(*d, v.clone());
        }
    }
    let mut locks = BTreeMap::new();
    for (id, &ca) in &a.locks {
        if let Some(&cb) = b.locks.get(id) {
            let m = ca.min(cb);
            if m > 0 {
                locks.insert(id.clone(), m);
            }
        }
    }
    MachineState { regs, stack, locks }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
    Free,
}

impl AccessKind {
    pub fn name(self) -> &'static str {
        match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Free => "free",
        }
    }
}

/// One field access: the unit the race detector consumes. The lockset is
/// the set of locks with count >= 1 at the access site after in-block
/// transfer. `null_guarded` and `wrote_fresh` carry the information the
/// interleaving lift needs (a dominating null test over a free; a freshly
/// allocated value stored to the field).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldAccess {
    pub method: String,
    pub path: FieldPath,
    pub kind: AccessKind,
    pub lockset: BTreeSet<LockId>,
    pub site: u64,
    pub null_guarded: bool,
    pub wrote_fresh: bool,
}

impl FieldAccess {
    pub fn new(
        method: &str,
        path: FieldPath,
        kind: AccessKind,
        lockset: BTreeSet<LockId>,
        site: u64,
    ) -> FieldAccess {
        FieldAccess {
            method: method.to_string(),
            path,
            kind,
            lockset,
            site,
            null_guarded: false,
            wrote_fresh: false,
        }
    }
}

impl Serialize for FieldAccess {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(4))?;
        m.serialize_entry("path", &self.path)?;
        m.serialize_entry("kind", self.kind.name())?;
        m.serialize_entry("lockset", &self.lockset)?;
        m.serialize_entry("site", &format!("{:#x}", self.site))?;
        m.end()
    }
}

/// A store of a vtable address into an object field, produced by register
/// tracking from `lea r,[rip+V]` (or `mov r, imm-addr`) reaching a
/// `mov [obj+off], r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VtableStoreFact {
    pub function: String,
    pub site: u64,
    pub object: AbstractValue,
    pub field_offset: i64,
    pub vtable_addr: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub accesses: Vec<FieldAccess>,
    pub diagnostics: Vec<String>,
}

impl MethodSummary {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.method,
            "accesses": self.accesses,
        })
    }
}

/// Flat (non-recursive) per-function analysis result, consumed by the
/// vtable recovery.
#[derive(Debug, Clone)]
pub struct FunctionStates {
    /// Final abstract state before each instruction, keyed by address.
    pub before: BTreeMap<u64, MachineState>,
    pub facts: Vec<VtableStoreFact>,
    /// Merge of the out-states of all return blocks.
    pub exit: Option<MachineState>,
    pub iterations: usize,
}

struct Sink {
    accesses: Vec<FieldAccess>,
    facts: Vec<VtableStoreFact>,
    diagnostics: Vec<String>,
    before: BTreeMap<u64, MachineState>,
    collect: bool,
}

impl Sink {
    fn silent() -> Sink {
        Sink {
            accesses: Vec::new(),
            facts: Vec::new(),
            diagnostics: Vec::new(),
            before: BTreeMap::new(),
            collect: false,
        }
    }

    fn collecting() -> Sink {
        Sink {
            collect: true,
            ..Sink::silent()
        }
    }

    fn diag(&mut self, msg: String) {
        if self.collect {
            self.diagnostics.push(msg);
        }
    }
}

struct FrameResult {
    accesses: Vec<FieldAccess>,
    facts: Vec<VtableStoreFact>,
    before: BTreeMap<u64, MachineState>,
    exit: Option<MachineState>,
    diagnostics: Vec<String>,
    iterations: usize,
}

enum MemTarget {
    StackSlot(i64),
    Field { root: AbstractValue, total: i64 },
    Untracked,
}

struct Engine<'a> {
    image: &'a BinaryImage,
    resolved: Option<&'a ResolvedCalls>,
    opts: &'a AnalysisOpts,
    recurse: bool,
}

impl<'a> Engine<'a> {
    fn resolve_mem(&self, st: &MachineState, base: Register, index: Option<Register>, disp: i32) -> MemTarget {
        if index.is_some() {
            return MemTarget::Untracked;
        }
        let disp = disp as i64;
        if base == Register::Rsp {
            return MemTarget::StackSlot(disp);
        }
        match st.reg(base) {
            AbstractValue::ThisDerived(d) => MemTarget::Field {
                root: AbstractValue::ThisDerived(0),
                total: d + disp,
            },
            AbstractValue::FieldContents(p) => MemTarget::Field {
                root: AbstractValue::FieldContents(p),
                total: disp,
            },
            AbstractValue::AllocFresh(s) => MemTarget::Field {
                root: AbstractValue::AllocFresh(s),
                total: disp,
            },
            AbstractValue::StackAddr(d) => MemTarget::StackSlot(d + disp),
            _ => MemTarget::Untracked,
        }
    }

    /// Field path of a load/store target, when it is expressible within
    /// the depth limit; emission is skipped otherwise.
    fn field_path(&self, root: &AbstractValue, total: i64) -> Option<FieldPath> {
        match root {
            AbstractValue::ThisDerived(0) => Some(FieldPath::single(total)),
            AbstractValue::FieldContents(p) => {
                if self.opts.deref_recursion && p.len() < self.opts.depth {
                    Some(p.push(total))
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    fn load(&self, st: &MachineState, target: &MemTarget, site: u64, sink: &mut Sink) -> AbstractValue {
        match target {
            MemTarget::StackSlot(d) => st.stack.get(d).cloned().unwrap_or(AbstractValue::Unknown),
            MemTarget::Field { root, total } => {
                if let Some(path) = self.field_path(root, *total) {
                    sink.accesses.push(FieldAccess::new(
                        "",
                        path,
                        AccessKind::Read,
                        st.held_locks(),
                        site,
                    ));
                } else if matches!(root, AbstractValue::FieldContents(p) if self.opts.deref_recursion && p.len() + 1 > self.opts.depth)
                {
                    sink.diag(format!(
                        "{site:#x}: field path depth limit ({}) exceeded on load; access dropped",
                        self.opts.depth
                    ));
                }
                if *total == 0 {
                    return AbstractValue::VtablePtr(Box::new(root.clone()));
                }
                match root {
                    AbstractValue::ThisDerived(0) => {
                        AbstractValue::FieldContents(FieldPath::single(*total))
                    }
                    AbstractValue::FieldContents(p)
                        if self.opts.deref_recursion && p.len() < self.opts.depth =>
                    {
                        AbstractValue::FieldContents(p.push(*total))
                    }
                    _ => AbstractValue::Unknown,
                }
            }
            MemTarget::Untracked => AbstractValue::Unknown,
        }
    }

    fn store(
        &self,
        st: &mut MachineState,
        target: &MemTarget,
        value: AbstractValue,
        site: u64,
        fname: &str,
        sink: &mut Sink,
    ) {
        match target {
            MemTarget::StackSlot(d) => {
                if self.opts.track_stack_spills {
                    if value.is_unknown() {
                        st.stack.remove(d);
                    } else {
                        st.stack.insert(*d, value);
                    }
                } else {
                    st.stack.remove(d);
                }
            }
            MemTarget::Field { root, total } => {
                if let AbstractValue::VtableRef(vt) = value {
                    sink.facts.push(VtableStoreFact {
                        function: fname.to_string(),
                        site,
                        object: root.clone(),
                        field_offset: *total,
                        vtable_addr: vt,
                    });
                }
                if let Some(path) = self.field_path(root, *total) {
                    let wrote_fresh = matches!(value, AbstractValue::AllocFresh(s)
                        if self.is_heap_alloc_site(s));
                    let mut access = FieldAccess::new(
                        "",
                        path,
                        AccessKind::Write,
                        st.held_locks(),
                        site,
                    );
                    access.wrote_fresh = wrote_fresh;
                    sink.accesses.push(access);
                } else if matches!(root, AbstractValue::FieldContents(p) if self.opts.deref_recursion && p.len() + 1 > self.opts.depth)
                {
                    sink.diag(format!(
                        "{site:#x}: field path depth limit ({}) exceeded on store; access dropped",
                        self.opts.depth
                    ));
                }
            }
            MemTarget::Untracked => {}
        }
    }

    fn is_heap_alloc_site(&self, site: u64) -> bool {
        let Some(instr) = self.image.instruction_at(site) else {
            return false;
        };
        instr
            .direct_target()
            .and_then(|t| self.image.symbol_at(t))
            .is_some_and(|s| s.tag == SymbolTag::Alloc)
    }

    fn operand_value(&self, st: &MachineState, op: &Operand, site: u64, sink: &mut Sink) -> AbstractValue {
        match *op {
            Operand::Reg(r) => st.reg(r),
            Operand::Imm(v) => {
                if v >= 0 && self.image.is_data_address(v as u64) {
                    AbstractValue::VtableRef(v as u64)
                } else {
                    AbstractValue::Unknown
                }
            }
            Operand::Mem { base, index, disp, .. } => {
                let target = self.resolve_mem(st, base, index, disp);
                self.load(st, &target, site, sink)
            }
            Operand::RipRel(_) => AbstractValue::Unknown,
        }
    }

    fn lock_id_of(value: &AbstractValue) -> Option<LockId> {
        match value {
            AbstractValue::ThisDerived(d) => Some(LockId::FieldAddr(FieldPath::single(*d))),
            AbstractValue::FieldContents(p) => Some(LockId::FieldValue(p.clone())),
            _ => None,
        }
    }

    fn transfer(
        &self,
        st: &mut MachineState,
        instr: &Instruction,
        fname: &str,
        call_stack: &mut Vec<String>,
        sink: &mut Sink,
    ) {
        let site = instr.address;
        match instr.mnemonic {
            Mnemonic::Mov => {
                let value = self.operand_value(st, &instr.operands[1], site, sink);
                match instr.operands[0] {
                    Operand::Reg(r) => st.set_reg(r, value),
                    Operand::Mem { base, index, disp, .. } => {
                        let target = self.resolve_mem(st, base, index, disp);
                        self.store(st, &target, value, site, fname, sink);
                    }
                    _ => {}
                }
            }
            Mnemonic::Lea => {
                let value = match instr.operands[1] {
                    Operand::Mem { base, index: None, disp, .. } => {
                        if base == Register::Rsp {
                            AbstractValue::StackAddr(disp as i64)
                        } else {
                            match st.reg(base) {
                                AbstractValue::ThisDerived(d) => {
                                    AbstractValue::ThisDerived(d + disp as i64)
                                }
                                AbstractValue::StackAddr(d) => {
                                    AbstractValue::StackAddr(d + disp as i64)
                                }
                                _ => AbstractValue::Unknown,
                            }
                        }
                    }
                    Operand::RipRel(addr) => {
                        if self.image.is_data_address(addr) {
                            AbstractValue::VtableRef(addr)
                        } else {
                            AbstractValue::Unknown
                        }
                    }
                    _ => AbstractValue::Unknown,
                };
                if let Operand::Reg(r) = instr.operands[0] {
                    st.set_reg(r, value);
                }
            }
            Mnemonic::Call => self.transfer_call(st, instr, fname, call_stack, sink),
            Mnemonic::Add | Mnemonic::Sub | Mnemonic::Xor | Mnemonic::And | Mnemonic::Sbb | Mnemonic::Neg => {
                if let Some(Operand::Reg(r)) = instr.operands.first() {
                    st.set_reg(*r, AbstractValue::Unknown);
                }
            }
            Mnemonic::Cmp | Mnemonic::Test | Mnemonic::Nop | Mnemonic::Ret | Mnemonic::Jmp | Mnemonic::Jcc => {}
        }
    }

    fn transfer_call(
        &self,
        st: &mut MachineState,
        instr: &Instruction,
        fname: &str,
        call_stack: &mut Vec<String>,
        sink: &mut Sink,
    ) {
        let site = instr.address;
        if let Some(target) = instr.direct_target() {
            self.call_effect(st, site, target, fname, call_stack, sink);
            return;
        }
        // Indirect call: behave as a direct call to each resolved candidate,
        // merging the resulting states and unioning emissions.
        let candidates: Vec<u64> = self
            .resolved
            .and_then(|r| r.get(&site))
            .map(|rc| rc.target_addresses())
            .unwrap_or_default();
        if candidates.is_empty() {
            sink.diag(format!("{site:#x}: unresolved indirect call"));
            st.clobber_volatile();
            return;
        }
        let mut merged: Option<MachineState> = None;
        for target in candidates {
            let mut branch = st.clone();
            self.call_effect(&mut branch, site, target, fname, call_stack, sink);
            merged = Some(match merged {
                None => branch,
                Some(acc) => merge_states(&acc, &branch),
            });
        }
        *st = merged.unwrap();
    }

    fn call_effect(
        &self,
        st: &mut MachineState,
        site: u64,
        target: u64,
        fname: &str,
        call_stack: &mut Vec<String>,
        sink: &mut Sink,
    ) {
        let rcx = st.reg(Register::Rcx);
        let tag = self.image.symbol_at(target).map(|s| s.tag);
        match tag {
            Some(SymbolTag::LockAcquire) => {
                match Self::lock_id_of(&rcx) {
                    Some(id) => {
                        let count = st.locks.entry(id).or_insert(0);
                        *count = (*count + 1).min(self.opts.lock_cap);
                    }
                    None => sink.diag(format!("{site:#x}: lock acquire with untracked identity; ignored")),
                }
                st.clobber_volatile();
            }
            Some(SymbolTag::LockRelease) => {
                match Self::lock_id_of(&rcx) {
                    Some(id) => {
                        if let Some(count) = st.locks.get_mut(&id) {
                            *count -= 1;
                            if *count == 0 {
                                st.locks.remove(&id);
                            }
                        }
                    }
                    None => sink.diag(format!("{site:#x}: lock release with untracked identity; ignored")),
                }
                st.clobber_volatile();
            }
            Some(SymbolTag::Free) => {
                if let AbstractValue::FieldContents(p) = &rcx {
                    if p.len() <= self.opts.depth && (p.len() == 1 || self.opts.deref_recursion) {
                        sink.accesses.push(FieldAccess::new(
                            "",
                            p.clone(),
                            AccessKind::Free,
                            st.held_locks(),
                            site,
                        ));
                    }
                }
                st.clobber_volatile();
            }
            Some(SymbolTag::Alloc) => {
                st.clobber_volatile();
                st.set_reg(Register::Rax, AbstractValue::AllocFresh(site));
            }
            _ => {
                // Plain symbol or untagged address.
                if let Some(callee) = self.image.function_at_entry(target) {
                    let callee_name = callee.name.clone();
                    if self.recurse {
                        self.recurse_into(st, site, &callee_name, &rcx, call_stack, sink);
                    }
                    st.clobber_volatile();
                    st.set_reg(Register::Rax, AbstractValue::AllocFresh(site));
                } else {
                    // External target: unknown effect on rax, volatiles gone.
                    st.clobber_volatile();
                }
                let _ = fname;
            }
        }
    }

    /// Recursive member analysis. A callee invoked on this is analyzed in
    /// the same frame (lock effects flow back); a callee invoked on a
    /// dereferenced pointer field is analyzed in the sub-object frame and
    /// its accesses remapped under the field path.
    fn recurse_into(
        &self,
        st: &mut MachineState,
        site: u64,
        callee: &str,
        rcx: &AbstractValue,
        call_stack: &mut Vec<String>,
        sink: &mut Sink,
    ) {
        if call_stack.iter().any(|f| f == callee) {
            sink.diag(format!(
                "{site:#x}: direct-call cycle through `{callee}`; treated as unknown effect"
            ));
            return;
        }
        match rcx {
            AbstractValue::ThisDerived(0) => {
                call_stack.push(callee.to_string());
                let frame = self.analyze_frame(callee, st.locks.clone(), call_stack);
                call_stack.pop();
                if sink.collect {
                    sink.accesses.extend(frame.accesses);
                    sink.facts.extend(frame.facts);
                    sink.diagnostics.extend(frame.diagnostics);
                }
                // Same frame: the callee's lock effects persist in the caller.
                if let Some(exit) = frame.exit {
                    st.locks = exit.locks;
                }
            }
            AbstractValue::FieldContents(prefix) if self.opts.deref_recursion => {
                if prefix.len() >= self.opts.depth {
                    sink.diag(format!(
                        "{site:#x}: sub-object recursion into `{callee}` exceeds depth limit ({}); truncated",
                        self.opts.depth
                    ));
                    return;
                }
                call_stack.push(callee.to_string());
                let frame = self.analyze_frame(callee, BTreeMap::new(), call_stack);
                call_stack.pop();
                if sink.collect {
                    let held = st.held_locks();
                    for mut access in frame.accesses {
                        if prefix.len() + access.path.len() > self.opts.depth {
                            sink.diag(format!(
                                "{site:#x}: remapped path exceeds depth limit ({}); access at {:#x} dropped",
                                self.opts.depth, access.site
                            ));
                            continue;
                        }
                        access.path = prefix.join(&access.path);
                        access.lockset = access
                            .lockset
                            .iter()
                            .map(|l| l.remap(prefix))
                            .chain(held.iter().cloned())
                            .collect();
                        sink.accesses.push(access);
                    }
                    sink.diagnostics.extend(frame.diagnostics);
                }
            }
            other => {
                sink.diag(format!(
                    "{site:#x}: call to `{callee}` with rcx = {other}; accesses unattributed"
                ));
            }
        }
    }

    /// Worklist fixpoint over the CFG in BFS order, followed by a
    /// collection pass over the fixed block in-states. Unreachable blocks
    /// are analyzed from the entry initial state.
    fn analyze_frame(
        &self,
        fname: &str,
        entry_locks: BTreeMap<LockId, u8>,
        call_stack: &mut Vec<String>,
    ) -> FrameResult {
        let func = &self.image.functions[fname];
        let cfg = cfg::build_cfg(func);
        let order = cfg::bfs_order(&cfg);
        let reachable: BTreeSet<usize> = order.iter().copied().collect();
        let n = cfg.blocks.len();

        let mut rank = vec![usize::MAX; n];
        for (i, &b) in order.iter().enumerate() {
            rank[b] = i;
        }
        let mut next_rank = order.len();
        for r in rank.iter_mut() {
            if *r == usize::MAX {
                *r = next_rank;
                next_rank += 1;
            }
        }

        let initial = MachineState::entry_state(entry_locks);
        let seed = |b: usize| -> Option<MachineState> {
            if b == cfg.entry || !reachable.contains(&b) {
                Some(initial.clone())
            } else {
                None
            }
        };

        let mut in_states: Vec<Option<MachineState>> = vec![None; n];
        let mut out_states: Vec<Option<MachineState>> = vec![None; n];
        let mut worklist: BTreeSet<(usize, usize)> = (0..n)
            .filter(|&b| seed(b).is_some())
            .map(|b| (rank[b], b))
            .collect();
        let mut iterations = 0usize;

        while let Some(&(r, b)) = worklist.iter().next() {
            worklist.remove(&(r, b));
            iterations += 1;
            let mut incoming = seed(b);
            for &p in &cfg.predecessors[b] {
                if let Some(out) = &out_states[p] {
                    incoming = Some(match incoming {
                        None => out.clone(),
                        Some(acc) => merge_states(&acc, out),
                    });
                }
            }
            let Some(state_in) = incoming else { continue };
            if in_states[b].as_ref() == Some(&state_in) && out_states[b].is_some() {
                continue;
            }
            in_states[b] = Some(state_in.clone());
            let mut st = state_in;
            let mut sink = Sink::silent();
            for instr in cfg.instructions_of(func, b) {
                self.transfer(&mut st, instr, fname, call_stack, &mut sink);
            }
            if out_states[b].as_ref() != Some(&st) {
                out_states[b] = Some(st);
                for &s in &cfg.successors[b] {
                    worklist.insert((rank[s], s));
                }
            } else {
                out_states[b] = Some(st);
            }
        }

        // Collection pass over the fixed in-states, in deterministic order.
        let mut sink = Sink::collecting();
        sink.diagnostics.extend(cfg.diagnostics.iter().cloned());
        let mut exit: Option<MachineState> = None;
        let mut collection_order: Vec<usize> = order.clone();
        collection_order.extend((0..n).filter(|b| !reachable.contains(b)));
        for &b in &collection_order {
            let Some(state_in) = in_states[b].clone() else { continue };
            let mut st = state_in;
            for instr in cfg.instructions_of(func, b) {
                sink.before.insert(instr.address, st.clone());
                self.transfer(&mut st, instr, fname, call_stack, &mut sink);
            }
            if matches!(cfg.blocks[b].terminator, Terminator::Return) && reachable.contains(&b) {
                exit = Some(match exit {
                    None => st,
                    Some(acc) => merge_states(&acc, &st),
                });
            }
        }

        annotate_null_guards(func, &cfg, &sink.before, &mut sink.accesses);

        FrameResult {
            accesses: sink.accesses,
            facts: sink.facts,
            before: sink.before,
            exit,
            diagnostics: sink.diagnostics,
            iterations,
        }
    }
}

/// Marks Free accesses dominated by a `test r, r` + `jcc` over the freed
/// value: the lift into the interleaving oracle inserts a null guard there.
fn annotate_null_guards(
    func: &crate::isa::Function,
    cfg: &Cfg,
    before: &BTreeMap<u64, MachineState>,
    accesses: &mut [FieldAccess],
) {
    let frees: Vec<usize> = accesses
        .iter()
        .enumerate()
        .filter(|(_, a)| a.kind == AccessKind::Free && func.contains_address(a.site))
        .map(|(i, _)| i)
        .collect();
    if frees.is_empty() {
        return;
    }
    let dom = cfg::dominators(cfg);
    let block_of = |addr: u64| {
        cfg.blocks
            .iter()
            .find(|b| {
                cfg.instructions_of(func, b.id)
                    .iter()
                    .any(|i| i.address == addr)
            })
            .map(|b| b.id)
    };
    // (block, tested value) for every test+jcc terminator pair.
    let mut tests: Vec<(usize, AbstractValue)> = Vec::new();
    for b in &cfg.blocks {
        let instrs = cfg.instructions_of(func, b.id);
        if instrs.len() < 2 {
            continue;
        }
        let last = &instrs[instrs.len() - 1];
        let prev = &instrs[instrs.len() - 2];
        if last.mnemonic != Mnemonic::Jcc {
            continue;
        }
        let tested = match (prev.mnemonic, prev.operands.as_slice()) {
            (Mnemonic::Test, [Operand::Reg(a), Operand::Reg(b)]) if a == b => Some(*a),
            (Mnemonic::Cmp, [Operand::Reg(a), Operand::Imm(0)]) => Some(*a),
            _ => None,
        };
        let Some(reg) = tested else { continue };
        if let Some(state) = before.get(&prev.address) {
            tests.push((b.id, state.reg(reg)));
        }
    }
    for i in frees {
        let path = accesses[i].path.clone();
        let Some(free_block) = block_of(accesses[i].site) else { continue };
        let guarded = tests.iter().any(|(tb, value)| {
            *tb != free_block
                && dom[free_block].contains(tb)
                && *value == AbstractValue::FieldContents(path.clone())
        });
        accesses[i].null_guarded = guarded;
    }
}

fn dedup_accesses(mut accesses: Vec<FieldAccess>) -> Vec<FieldAccess> {
    accesses.sort_by(|a, b| {
        (a.site, &a.path, a.kind).cmp(&(b.site, &b.path, b.kind))
    });
    let mut out: Vec<FieldAccess> = Vec::new();
    for access in accesses {
        match out.last_mut() {
            Some(prev)
                if prev.site == access.site
                    && prev.path == access.path
                    && prev.kind == access.kind =>
            {
                // Same site reached along several routes: a lock protects the
                // access only if held on every route.
                prev.lockset = prev.lockset.intersection(&access.lockset).cloned().collect();
                prev.null_guarded &= access.null_guarded;
                prev.wrote_fresh |= access.wrote_fresh;
            }
            _ => out.push(access),
        }
    }
    out
}

/// Analyzes one entry method end to end: worklist fixpoint per frame,
/// recursive member analysis through direct calls on this, and (when
/// enabled) sub-object recursion with path remapping.
pub fn analyze_method(
    image: &BinaryImage,
    method: &str,
    resolved: &ResolvedCalls,
    opts: &AnalysisOpts,
) -> MethodSummary {
    assert!(
        image.functions.contains_key(method),
        "method `{method}` not in image"
    );
    let engine = Engine {
        image,
        resolved: Some(resolved),
        opts,
        recurse: true,
    };
    let mut call_stack = vec![method.to_string()];
    let frame = engine.analyze_frame(method, BTreeMap::new(), &mut call_stack);
    let mut accesses = dedup_accesses(frame.accesses);
    for a in &mut accesses {
        a.method = method.to_string();
    }
    MethodSummary {
        method: method.to_string(),
        accesses,
        diagnostics: frame.diagnostics,
    }
}

/// Flat per-function state analysis (no callee recursion): the substrate
/// for vtable recovery. Every function is analyzed as a potential method
/// or constructor with rcx = this.
pub fn function_states(image: &BinaryImage, fname: &str, opts: &AnalysisOpts) -> FunctionStates {
    let engine = Engine {
        image,
        resolved: None,
        opts,
        recurse: false,
    };
    let mut call_stack = vec![fname.to_string()];
    let frame = engine.analyze_frame(fname, BTreeMap::new(), &mut call_stack);
    FunctionStates {
        before: frame.before,
        facts: frame.facts,
        exit: frame.exit,
        iterations: frame.iterations,
    }
}

/// Global vtable-store fact pass over every function in the image.
pub fn collect_vtable_facts(image: &BinaryImage, opts: &AnalysisOpts) -> Vec<VtableStoreFact> {
    let mut facts = Vec::new();
    for fname in image.functions.keys() {
        facts.extend(function_states(image, fname, opts).facts);
    }
    facts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::BinaryImage;

    fn opts() -> AnalysisOpts {
        AnalysisOpts::default()
    }

    fn analyze(text: &str, method: &str, opts: &AnalysisOpts) -> MethodSummary {
        let image = BinaryImage::parse(text).unwrap();
        analyze_method(&image, method, &ResolvedCalls::new(), opts)
    }

    #[test]
    fn this_propagates_through_mov() {
        let img = BinaryImage::parse(".func f @0x1000\n0x1000: mov rdi, rcx\n0x1003: ret\n").unwrap();
        let states = function_states(&img, "f", &opts());
        let exit = states.exit.unwrap();
        assert_eq!(exit.reg(Register::Rdi), AbstractValue::ThisDerived(0));
    }

    #[test]
    fn multi_hop_chain_and_stack_round_trip() {
        // mov [rsp+0x20],rbx followed by mov r12,[rsp+0x20]
        let img = BinaryImage::parse(
            "\
.func f @0x1000
0x1000: mov rbx, rcx
0x1003: mov rsi, rbx
0x1006: mov [rsp+0x20], rbx
0x100b: xor rbx, rbx
0x100e: mov r12, [rsp+0x20]
0x1013: ret
",
        )
        .unwrap();
        let exit = function_states(&img, "f", &opts()).exit.unwrap();
        assert_eq!(exit.reg(Register::Rsi), AbstractValue::ThisDerived(0));
        assert_eq!(exit.reg(Register::R12), AbstractValue::ThisDerived(0));
        assert_eq!(exit.reg(Register::Rbx), AbstractValue::Unknown);
    }

    #[test]
    fn spill_tracking_switch_loses_the_round_trip() {
        let img = BinaryImage::parse(
            ".func f @0x1000\n0x1000: mov [rsp+0x20], rcx\n0x1005: mov r12, [rsp+0x20]\n0x100a: ret\n",
        )
        .unwrap();
        let flat = AnalysisOpts {
            track_stack_spills: false,
            ..opts()
        };
        let exit = function_states(&img, "f", &flat).exit.unwrap();
        assert_eq!(exit.reg(Register::R12), AbstractValue::Unknown);
    }

    const FIG1: &str = "\
.func SetPrintTicket @0x1000
0x1000: mov rbx, rcx
0x1003: mov rcx, [rbx+0x50]
0x1008: test rcx, rcx
0x100b: jcc 0x1012
0x100d: call 0x7000
0x1012: mov rcx, 0x100
0x1017: call 0x7100
0x101c: mov [rbx+0x50], rax
0x1021: mov rcx, rax
0x1024: call 0x7200
0x1029: ret
.sym 0x7000 operator.delete[] free
.sym 0x7100 operator.new[] alloc
.sym 0x7200 memcpy plain
.entry SetPrintTicket
";

    #[test]
    fn fig1_sequence_emits_read_free_write_in_order() {
        let summary = analyze(FIG1, "SetPrintTicket", &opts());
        let kinds: Vec<(AccessKind, String)> = summary
            .accesses
            .iter()
            .map(|a| (a.kind, a.path.to_string()))
            .collect();
        assert_eq!(
            kinds,
            vec![
                (AccessKind::Read, "this+0x50".to_string()),
                (AccessKind::Free, "this+0x50".to_string()),
                (AccessKind::Write, "this+0x50".to_string()),
            ]
        );
        assert!(summary.accesses.iter().all(|a| a.lockset.is_empty()));
        // the null test dominates the free; the write stores a fresh allocation
        assert!(summary.accesses[1].null_guarded);
        assert!(summary.accesses[2].wrote_fresh);
        assert!(summary.diagnostics.is_empty());
    }

    #[test]
    fn read_under_acquired_then_released_lock() {
        let text = "\
.func Getter @0x1000
0x1000: mov rbx, rcx
0x1003: lea rcx, [rbx+0x30]
0x1008: call 0x7000
0x100d: mov rax, [rbx+0x10]
0x1012: lea rcx, [rbx+0x30]
0x1017: call 0x7008
0x101c: ret
.sym 0x7000 EnterCriticalSection lock_acquire
.sym 0x7008 LeaveCriticalSection lock_release
.entry Getter
";
        let summary = analyze(text, "Getter", &opts());
        assert_eq!(summary.accesses.len(), 1);
        let access = &summary.accesses[0];
        assert_eq!(access.kind, AccessKind::Read);
        assert_eq!(access.path.to_string(), "this+0x10");
        let locks: Vec<String> = access.lockset.iter().map(|l| l.to_string()).collect();
        assert_eq!(locks, vec!["this+0x30"]);
    }

    #[test]
    fn lock_held_on_one_branch_confers_no_protection_after_join() {
        let text = "\
.func M @0x1000
0x1000: mov rbx, rcx
0x1003: jcc 0x1015
0x1007: lea rcx, [rbx+0x30]
0x100c: call 0x7000
0x1011: nop
0x1015: mov [rbx+0x10], rdx
0x101a: ret
.sym 0x7000 EnterCriticalSection lock_acquire
.entry M
";
        let summary = analyze(text, "M", &opts());
        assert_eq!(summary.accesses.len(), 1);
        assert_eq!(summary.accesses[0].kind, AccessKind::Write);
        assert!(summary.accesses[0].lockset.is_empty());
    }

    #[test]
    fn subobject_recursion_remaps_paths() {
        // v4 = [this+0x20]; put(v4): the callee's this+0x68 becomes
        // [this+0x20]+0x68.
        let text = "\
.func Caller @0x1000
0x1000: mov rbx, rcx
0x1003: mov rcx, [rbx+0x20]
0x1008: call 0x2000
0x100d: ret
.func put @0x2000
0x2000: mov [rcx+0x68], rdx
0x2005: ret
.entry Caller
";
        let summary = analyze(text, "Caller", &opts());
        let writes: Vec<String> = summary
            .accesses
            .iter()
            .filter(|a| a.kind == AccessKind::Write)
            .map(|a| a.path.to_string())
            .collect();
        assert_eq!(writes, vec!["[this+0x20]+0x68"]);

        // with deref recursion off every path has length 1
        let base = AnalysisOpts {
            deref_recursion: false,
            ..opts()
        };
        let summary = analyze(text, "Caller", &base);
        assert!(summary.accesses.iter().all(|a| a.path.len() == 1));
        assert!(summary
            .diagnostics
            .iter()
            .any(|d| d.contains("accesses unattributed")));
    }

    #[test]
    fn produce_wrapper_pattern_is_not_a_this_alias() {
        let text = "\
.func Wrapper @0x1000
0x1000: lea rax, [rcx-0x8]
0x1005: neg rcx
0x1008: sbb rcx, rcx
0x100b: and rcx, rax
0x100e: call 0x2000
0x1013: ret
.func Impl @0x2000
0x2000: mov [rcx+0x40], rdx
0x2005: ret
.entry Wrapper
";
        let summary = analyze(text, "Wrapper", &opts());
        assert!(summary.accesses.is_empty());
        assert!(summary
            .diagnostics
            .iter()
            .any(|d| d.contains("accesses unattributed")));
    }

    #[test]
    fn recursion_through_this_keeps_the_frame_and_lock_effects() {
        // Lock() acquires this+0x30; the caller's later access is guarded.
        let text = "\
.func M @0x1000
0x1000: mov rbx, rcx
0x1003: call 0x2000
0x1008: mov rax, [rbx+0x10]
0x100d: ret
.func Lock @0x2000
0x2000: lea rcx, [rcx+0x30]
0x2005: call 0x7000
0x200a: ret
.sym 0x7000 EnterCriticalSection lock_acquire
.entry M
";
        let summary = analyze(text, "M", &opts());
        let read = summary
            .accesses
            .iter()
            .find(|a| a.kind == AccessKind::Read && a.path.to_string() == "this+0x10")
            .unwrap();
        assert_eq!(read.lockset.len(), 1);
        assert_eq!(read.lockset.iter().next().unwrap().to_string(), "this+0x30");
    }

    #[test]
    fn direct_call_cycle_is_cut_with_a_diagnostic() {
        let text = "\
.func A @0x1000
0x1000: call 0x2000
0x1005: ret
.func B @0x2000
0x2000: call 0x1000
0x2005: ret
.entry A
";
        let summary = analyze(text, "A", &opts());
        assert!(summary.diagnostics.iter().any(|d| d.contains("cycle")));
    }

    #[test]
    fn merge_lock_minimum() {
        let mut a = MachineState::default();
        a.locks.insert(LockId::FieldAddr(FieldPath::single(0x30)), 1);
        let b = MachineState::default();
        let m = merge_states(&a, &b);
        assert!(m.locks.is_empty()); // {L:1} merged with {} is {L:0}
        assert_eq!(merge_states(&a, &a), a);
    }

    #[test]
    fn merge_register_disagreement_is_unknown() {
        let mut a = MachineState::default();
        a.regs.insert(Register::Rcx, AbstractValue::ThisDerived(0));
        let b = MachineState::default();
        let m = merge_states(&a, &b);
        assert_eq!(m.reg(Register::Rcx), AbstractValue::Unknown);
    }

    #[test]
    fn fixpoint_terminates_within_lattice_bound_on_loops() {
        let text = "\
.func Loop @0x1000
0x1000: mov rbx, rcx
0x1003: lea rcx, [rbx+0x30]
0x1008: call 0x7000
0x100d: mov rax, [rbx+0x10]
0x1012: jcc 0x1003
0x1016: ret
.sym 0x7000 EnterCriticalSection lock_acquire
.entry Loop
";
        let img = BinaryImage::parse(text).unwrap();
        let states = function_states(&img, "Loop", &opts());
        // a generous bound: blocks x (lock cap + register lattice height)
        assert!(states.iterations < 200, "iterations = {}", states.iterations);
    }

    #[test]
    fn no_phantom_locks_in_emitted_locksets() {
        let summary = analyze(FIG1, "SetPrintTicket", &opts());
        for a in &summary.accesses {
            assert!(a.lockset.is_empty());
        }
    }

    #[test]
    fn summaries_are_deterministic_byte_for_byte() {
        let a = serde_json::to_string(&analyze(FIG1, "SetPrintTicket", &opts()).to_json()).unwrap();
        let b = serde_json::to_string(&analyze(FIG1, "SetPrintTicket", &opts()).to_json()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn writes_of_unknown_values_still_count() {
        let text = ".func W @0x1000\n0x1000: mov [rcx+0x10], rdx\n0x1005: ret\n.entry W\n";
        let summary = analyze(text, "W", &opts());
        assert_eq!(summary.accesses.len(), 1);
        assert_eq!(summary.accesses[0].kind, AccessKind::Write);
        assert!(!summary.accesses[0].wrote_fresh);
    }

    #[test]
    fn depth_limit_truncates_with_a_diagnostic() {
        // Three levels of pointer chasing against the default depth of 2.
        let text = "\
.func Deep @0x1000
0x1000: mov rbx, rcx
0x1003: mov rax, [rbx+0x20]
0x1008: mov rdx, [rax+0x30]
0x100d: mov rsi, [rdx+0x40]
0x1012: ret
.entry Deep
";
        let summary = analyze(text, "Deep", &opts());
        assert!(summary.accesses.iter().all(|a| a.path.len() <= 2));
        assert!(summary
            .diagnostics
            .iter()
            .any(|d| d.contains("depth limit")));

        let deeper = AnalysisOpts { depth: 3, ..opts() };
        let summary = analyze(text, "Deep", &deeper);
        assert!(summary
            .accesses
            .iter()
            .any(|a| a.path.to_string() == "[[this+0x20]+0x30]+0x40"));
    }

    #[test]
    fn field_path_rendering() {
        assert_eq!(FieldPath::single(0x50).to_string(), "this+0x50");
        assert_eq!(FieldPath::new(vec![0x20, 0x68]).to_string(), "[this+0x20]+0x68");
        assert_eq!(FieldPath::single(-8).to_string(), "this-0x8");
        assert_eq!(
            FieldPath::new(vec![0x10, 0x20, 0x30]).to_string(),
            "[[this+0x10]+0x20]+0x30"
        );
    }
}
