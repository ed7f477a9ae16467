//! Per-function control-flow graphs and the block ordering used by the
//! lockset fixpoint.
//!
//! Block boundaries fall at the function entry, at jump targets, and after
//! `jmp`/`jcc`/`ret`. A `call` does not end a block: lockset state must flow
//! through lock-API calls within one block.

use std::collections::{BTreeSet, VecDeque};

use crate::isa::{Function, Instruction, Mnemonic};

pub type BlockId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminator {
    /// Falls into the next block (boundary forced by a jump target).
    FallThrough(BlockId),
    Jump(BlockId),
    Branch { taken: BlockId, fallthrough: BlockId },
    Return,
}

#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub id: BlockId,
    /// Index range into the function's instruction list.
    pub start: usize,
    pub end: usize,
    pub terminator: Terminator,
}

#[derive(Debug, Clone)]
pub struct Cfg {
    pub blocks: Vec<BasicBlock>,
    pub entry: BlockId,
    pub predecessors: Vec<Vec<BlockId>>,
    pub successors: Vec<Vec<BlockId>>,
    /// Blocks with a dropped edge (jump target outside the function or an
    /// indirect jump) and blocks unreachable from entry.
    pub flagged: BTreeSet<BlockId>,
    pub diagnostics: Vec<String>,
}

impl Cfg {
    pub fn instructions_of<'f>(&self, func: &'f Function, block: BlockId) -> &'f [Instruction] {
        let b = &self.blocks[block];
        &func.instructions[b.start..b.end]
    }

    pub fn address_range(&self, func: &Function, block: BlockId) -> (u64, u64) {
        let instrs = self.instructions_of(func, block);
        (instrs[0].address, instrs[instrs.len() - 1].address)
    }

    pub fn reachable(&self) -> BTreeSet<BlockId> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([self.entry]);
        seen.insert(self.entry);
        while let Some(b) = queue.pop_front() {
            for &s in &self.successors[b] {
                if seen.insert(s) {
                    queue.push_back(s);
                }
            }
        }
        seen
    }

    /// DOT rendering for diagnostics. Node label = block id + address range.
    pub fn to_dot(&self, func: &Function) -> String {
        let mut out = format!("digraph \"{}\" {{\n", func.name);
        for b in &self.blocks {
            let (lo, hi) = self.address_range(func, b.id);
            let mark = if self.flagged.contains(&b.id) { " !" } else { "" };
            out.push_str(&format!(
                "  b{} [label=\"B{}\\n{lo:#x}..{hi:#x}{mark}\"];\n",
                b.id, b.id
            ));
        }
        for b in &self.blocks {
            for &s in &self.successors[b.id] {
                out.push_str(&format!("  b{} -> b{};\n", b.id, s));
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Builds the CFG of a function. Jump targets outside the function are
/// reported: the edge is dropped and the block flagged.
pub fn build_cfg(func: &Function) -> Cfg {
    let instrs = &func.instructions;
    if instrs.is_empty() {
        return Cfg {
            blocks: vec![BasicBlock {
                id: 0,
                start: 0,
                end: 0,
                terminator: Terminator::Return,
            }],
            entry: 0,
            predecessors: vec![vec![]],
            successors: vec![vec![]],
            flagged: BTreeSet::new(),
            diagnostics: vec![format!("function {} has no instructions", func.name)],
        };
    }

    let index_of = |addr: u64| instrs.iter().position(|i| i.address == addr);

    // Leaders: entry, every in-function jump target, every instruction
    // following a jmp/jcc/ret.
    let mut leaders = BTreeSet::from([0usize]);
    let mut diagnostics = Vec::new();
    for (i, instr) in instrs.iter().enumerate() {
        match instr.mnemonic {
            Mnemonic::Jmp | Mnemonic::Jcc => {
                if let Some(target) = instr.direct_target() {
                    if let Some(t) = index_of(target) {
                        leaders.insert(t);
                    }
                }
                if i + 1 < instrs.len() {
                    leaders.insert(i + 1);
                }
            }
            Mnemonic::Ret if i + 1 < instrs.len() => {
                leaders.insert(i + 1);
            }
            _ => {}
        }
    }

    let starts: Vec<usize> = leaders.into_iter().collect();
    let block_of_index = |idx: usize| starts.partition_point(|&s| s <= idx) - 1;
    let mut blocks = Vec::with_capacity(starts.len());
    let mut flagged = BTreeSet::new();

    for (id, &start) in starts.iter().enumerate() {
        let end = starts.get(id + 1).copied().unwrap_or(instrs.len());
        let last = &instrs[end - 1];
        let next_block = if end < instrs.len() { Some(block_of_index(end)) } else { None };
        let terminator = match last.mnemonic {
            Mnemonic::Ret => Terminator::Return,
            Mnemonic::Jmp => match last.direct_target().and_then(index_of) {
                Some(t) => Terminator::Jump(block_of_index(t)),
                None => {
                    flagged.insert(id);
                    diagnostics.push(format!(
                        "{}: jump at {:#x} leaves the function; edge dropped",
                        func.name, last.address
                    ));
                    Terminator::Return
                }
            },
            Mnemonic::Jcc => {
                let taken = last.direct_target().and_then(index_of).map(block_of_index);
                match (taken, next_block) {
                    (Some(t), Some(f)) => Terminator::Branch { taken: t, fallthrough: f },
                    (Some(t), None) => {
                        flagged.insert(id);
                        diagnostics.push(format!(
                            "{}: branch at {:#x} has no fall-through; edge dropped",
                            func.name, last.address
                        ));
                        Terminator::Jump(t)
                    }
                    (None, f) => {
                        flagged.insert(id);
                        diagnostics.push(format!(
                            "{}: branch at {:#x} targets outside the function; edge dropped",
                            func.name, last.address
                        ));
                        match f {
                            Some(f) => Terminator::FallThrough(f),
                            None => Terminator::Return,
                        }
                    }
                }
            }
            _ => match next_block {
                Some(n) => Terminator::FallThrough(n),
                None => Terminator::Return,
            },
        };
        blocks.push(BasicBlock {
            id,
            start,
            end,
            terminator,
        });
    }

    let n = blocks.len();
    let mut successors = vec![Vec::new(); n];
    let mut predecessors = vec![Vec::new(); n];
    for b in &blocks {
        let succ: Vec<BlockId> = match b.terminator {
            Terminator::FallThrough(t) | Terminator::Jump(t) => vec![t],
            Terminator::Branch { taken, fallthrough } => {
                if taken == fallthrough {
                    vec![taken]
                } else {
                    vec![taken, fallthrough]
                }
            }
            Terminator::Return => vec![],
        };
        for &s in &succ {
            predecessors[s].push(b.id);
        }
        successors[b.id] = succ;
    }
    for p in &mut predecessors {
        p.sort_unstable();
        p.dedup();
    }

    let mut cfg = Cfg {
        blocks,
        entry: 0,
        predecessors,
        successors,
        flagged,
        diagnostics,
    };
    let reachable = cfg.reachable();
    for id in 0..n {
        if !reachable.contains(&id) {
            cfg.flagged.insert(id);
            cfg.diagnostics
                .push(format!("{}: block B{id} unreachable from entry", func.name));
        }
    }
    cfg
}

/// Breadth-first order from entry; deterministic, ties broken by ascending
/// block id.
pub fn bfs_order(cfg: &Cfg) -> Vec<BlockId> {
    let mut order = Vec::new();
    let mut seen = vec![false; cfg.blocks.len()];
    let mut queue = VecDeque::from([cfg.entry]);
    seen[cfg.entry] = true;
    while let Some(b) = queue.pop_front() {
        order.push(b);
        let mut next: Vec<BlockId> = cfg.successors[b].clone();
        next.sort_unstable();
        for s in next {
            if !seen[s] {
                seen[s] = true;
                queue.push_back(s);
            }
        }
    }
    order
}

/// Edges (u, v) whose target was already discovered when the edge was
/// traversed during the BFS (loop back-edges and joins).
pub fn back_edges(cfg: &Cfg) -> Vec<(BlockId, BlockId)> {
    let mut edges = Vec::new();
    let mut seen = vec![false; cfg.blocks.len()];
    let mut queue = VecDeque::from([cfg.entry]);
    seen[cfg.entry] = true;
    while let Some(b) = queue.pop_front() {
        let mut next: Vec<BlockId> = cfg.successors[b].clone();
        next.sort_unstable();
        for s in next {
            if seen[s] {
                edges.push((b, s));
            } else {
                seen[s] = true;
                queue.push_back(s);
            }
        }
    }
    edges
}

/// Dominator sets over a small CFG, by the iterative dataflow equations.
/// Used to decide whether a null-test branch guards a downstream free site.
pub fn dominators(cfg: &Cfg) -> Vec<BTreeSet<BlockId>> {
    let n = cfg.blocks.len();
    let all: BTreeSet<BlockId> = (0..n).collect();
    let mut dom: Vec<BTreeSet<BlockId>> = vec![all; n];
    dom[cfg.entry] = BTreeSet::from([cfg.entry]);
    let order = bfs_order(cfg);
    let mut changed = true;
    while changed {
        changed = false;
        for &b in &order {
            if b == cfg.entry {
                continue;
            }
            let mut new: Option<BTreeSet<BlockId>> = None;
            for &p in &cfg.predecessors[b] {
                new = Some(match new {
                    None => dom[p].clone(),
                    Some(acc) => acc.intersection(&dom[p]).copied().collect(),
                });
            }
            let mut new = new.unwrap_or_default();
            new.insert(b);
            if new != dom[b] {
                dom[b] = new;
                changed = true;
            }
        }
    }
    dom
}
