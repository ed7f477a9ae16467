//! Racing access-pair enumeration across and within entry-method
//! summaries.
//!
//! Two accesses to the same field race when their locksets are disjoint
//! (Eraser discipline). The COM MTA threading model permits concurrent
//! invocations of the *same* method on one object, so pairs within a
//! single summary count too, and a Free access pairs with itself: two
//! concurrent instances both reaching one unguarded free site is the
//! double-free. Read/read pairs carry no corruption primitive; the base
//! configuration still reports them (that is where its false positives
//! come from) and the R/R filter drops them. Cross-method write/write
//! pairs are not a conflict class; a method whose only accesses to a
//! field are unguarded writes yields a self-race write/write report when
//! `ww_self` is enabled.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::config::AnalysisOpts;
use crate::taint::{AccessKind, FieldAccess, FieldPath, MethodSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictClass {
    ReadFree,
    WriteFree,
    FreeFree,
    ReadWrite,
    WriteWrite,
    ReadRead,
}

impl ConflictClass {
    pub fn name(self) -> &'static str {
        match self {
            ConflictClass::ReadFree => "read_free",
            ConflictClass::WriteFree => "write_free",
            ConflictClass::FreeFree => "free_free",
            ConflictClass::ReadWrite => "read_write",
            ConflictClass::WriteWrite => "write_write",
            ConflictClass::ReadRead => "read_read",
        }
    }

    /// Class of a kind pair, with kinds in canonical (rank) order.
    /// Write/write pairs classify only through the self-race rule.
    fn of(a: AccessKind, b: AccessKind) -> Option<ConflictClass> {
        use AccessKind::*;
        match (a, b) {
            (Read, Free) | (Free, Read) => Some(ConflictClass::ReadFree),
            (Write, Free) | (Free, Write) => Some(ConflictClass::WriteFree),
            (Free, Free) => Some(ConflictClass::FreeFree),
            (Read, Write) | (Write, Read) => Some(ConflictClass::ReadWrite),
            (Read, Read) => Some(ConflictClass::ReadRead),
            (Write, Write) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaceReport {
    pub path: FieldPath,
    pub a: FieldAccess,
    pub b: FieldAccess,
    pub class: ConflictClass,
    pub self_race: bool,
}

impl RaceReport {
    fn key(&self) -> (String, String, u64, String, u64, ConflictClass) {
        (
            self.path.to_string(),
            self.a.method.clone(),
            self.a.site,
            self.b.method.clone(),
            self.b.site,
            self.class,
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        let side = |x: &FieldAccess| {
            serde_json::json!({
                "method": x.method,
                "site": format!("{:#x}", x.site),
                "kind": x.kind.name(),
                "lockset": x.lockset.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
            })
        };
        serde_json::json!({
            "path": self.path.to_string(),
            "class": self.class.name(),
            "self": self.self_race,
            "a": side(&self.a),
            "b": side(&self.b),
        })
    }
}

fn kind_rank(k: AccessKind) -> u8 {
    match k {
        AccessKind::Read => 0,
        AccessKind::Write => 1,
        AccessKind::Free => 2,
    }
}

fn disjoint(a: &FieldAccess, b: &FieldAccess) -> bool {
    a.lockset.intersection(&b.lockset).next().is_none()
}

/// Canonicalizes the unordered pair: kind rank first (so the class name
/// reads left to right), then (method, site).
fn make_report(path: &FieldPath, x: &FieldAccess, y: &FieldAccess, class: ConflictClass) -> RaceReport {
    let ka = (kind_rank(x.kind), x.method.clone(), x.site);
    let kb = (kind_rank(y.kind), y.method.clone(), y.site);
    let (a, b) = if ka <= kb { (x, y) } else { (y, x) };
    RaceReport {
        path: path.clone(),
        a: a.clone(),
        b: b.clone(),
        class,
        self_race: x.method == y.method,
    }
}

/// Enumerates racing pairs over every field path touched by the
/// summaries. Reports are canonically ordered and deduplicated by
/// (path, site pair, class); the output is independent of summary input
/// order.
pub fn detect_races(summaries: &[MethodSummary], opts: &AnalysisOpts) -> Vec<RaceReport> {
    let mut by_path: BTreeMap<String, (FieldPath, Vec<&FieldAccess>)> = BTreeMap::new();
    for summary in summaries {
        for access in &summary.accesses {
            let entry = by_path
                .entry(access.path.to_string())
                .or_insert_with(|| (access.path.clone(), Vec::new()));
            entry.1.push(access);
        }
    }

    let mut reports: Vec<RaceReport> = Vec::new();
    for (path, accesses) in by_path.values() {
        let mut accesses = accesses.clone();
        accesses.sort_by(|a, b| (&a.method, a.site, a.kind).cmp(&(&b.method, b.site, b.kind)));
        for i in 0..accesses.len() {
            for j in i..accesses.len() {
                let (x, y) = (accesses[i], accesses[j]);
                if i == j {
                    // A lone site pairs with itself only when the operation
                    // is destructive: two concurrent invocations both
                    // executing one free site is the double-free.
                    if x.kind != AccessKind::Free {
                        continue;
                    }
                } else if x.method == y.method && x.site == y.site {
                    continue;
                }
                if !disjoint(x, y) {
                    continue;
                }
                let Some(class) = ConflictClass::of(x.kind, y.kind) else {
                    continue;
                };
                reports.push(make_report(path, x, y, class));
            }
        }
        if opts.ww_self {
            // Unguarded write with no other access kind on the field in the
            // same method: two concurrent self-invocations still race.
            let mut by_method: BTreeMap<&str, Vec<&FieldAccess>> = BTreeMap::new();
            for a in &accesses {
                by_method.entry(a.method.as_str()).or_default().push(a);
            }
            for method_accesses in by_method.values() {
                if !method_accesses.iter().all(|a| a.kind == AccessKind::Write) {
                    continue;
                }
                for (i, x) in method_accesses.iter().enumerate() {
                    for y in &method_accesses[i..] {
                        if disjoint(x, y) {
                            reports.push(make_report(path, x, y, ConflictClass::WriteWrite));
                        }
                    }
                }
            }
        }
    }

    if opts.rr_filter {
        reports = filter_rr(reports);
    }
    reports.sort_by_key(|r| r.key());
    reports.dedup_by_key(|r| r.key());
    reports
}

/// Removes exactly the read/read pairs. A genuine race requires at least
/// one write or free, so the filter cannot suppress one.
pub fn filter_rr(reports: Vec<RaceReport>) -> Vec<RaceReport> {
    reports
        .into_iter()
        .filter(|r| r.class != ConflictClass::ReadRead)
        .collect()
}

/// The prediction set consumed by the benchmark scorer: both methods of
/// every report. A self-race marks its single method.
pub fn vulnerable_functions(reports: &[RaceReport]) -> BTreeSet<String> {
    reports
        .iter()
        .flat_map(|r| [r.a.method.clone(), r.b.method.clone()])
        .collect()
}
