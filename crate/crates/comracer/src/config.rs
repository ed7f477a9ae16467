//! Analysis configuration: ablation modes, tunable limits, and the bundled
//! synchronization-symbol tag defaults.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::isa::{BinaryImage, SymbolTag};

/// Ablation mode. `Base` always includes the correctness-critical core
/// (register tracking, CFG traversal, per-field locksets, self-races); the
/// modes toggle only the precision heuristics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Base,
    E4,
    E4e5,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::E4 => "e4",
            Mode::E4e5 => "e4e5",
        }
    }

    /// (rr_filter, deref_recursion) for this mode.
    pub fn toggles(self) -> (bool, bool) {
        match self {
            Mode::Base => (false, false),
            Mode::E4 => (true, false),
            Mode::E4e5 => (true, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalysisOpts {
    /// Drop read/read access pairs from race candidates.
    pub rr_filter: bool,
    /// Recurse through dereferenced pointer fields, remapping callee
    /// accesses under the caller's field path.
    pub deref_recursion: bool,
    /// Report a self-race for a method whose only accesses to a field are
    /// unguarded writes.
    pub ww_self: bool,
    /// Lock recursion counts saturate here.
    pub lock_cap: u8,
    /// Maximum field-path length (segments).
    pub depth: usize,
    /// Track values spilled to stack slots. Disabling loses the register
    /// round-trips through [rsp+d]; exists for regression tests only.
    pub track_stack_spills: bool,
}

impl Default for AnalysisOpts {
    fn default() -> Self {
        AnalysisOpts {
            rr_filter: true,
            deref_recursion: true,
            ww_self: true,
            lock_cap: 16,
            depth: 2,
            track_stack_spills: true,
        }
    }
}

impl AnalysisOpts {
    pub fn for_mode(mode: Mode) -> Self {
        let (rr_filter, deref_recursion) = mode.toggles();
        AnalysisOpts {
            rr_filter,
            deref_recursion,
            ..AnalysisOpts::default()
        }
    }
}

/// Bundled symbol-tag defaults for the Windows API families the analysis
/// models: critical sections, SRW locks, mutex waits, and the heap
/// allocate/release entry points. Fixture `.sym` tags override these.
pub const DEFAULT_SYMBOL_TAGS: &str = include_str!("../assets/sync_symbols.json");

pub fn default_symbol_tags() -> BTreeMap<String, SymbolTag> {
    serde_json::from_str(DEFAULT_SYMBOL_TAGS).expect("bundled sync_symbols.json is well-formed")
}

/// Retags `Plain` symbols whose name appears in the map. Explicit fixture
/// tags (anything other than `plain`) win over the map.
pub fn apply_symbol_tags(image: &mut BinaryImage, tags: &BTreeMap<String, SymbolTag>) {
    for sym in &mut image.symbols {
        if sym.tag == SymbolTag::Plain {
            if let Some(&tag) = tags.get(&sym.name) {
                sym.tag = tag;
            }
        }
    }
}
