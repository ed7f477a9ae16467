//! Race-condition vulnerability detection for COM-style compiled code.
//!
//! The pipeline works on a textual fixture format describing x86-64-subset
//! functions, data words (vtables) and a tagged symbol table:
//!
//! - [`isa`] parses fixtures into an immutable [`isa::BinaryImage`].
//! - [`cfg`] builds per-function control-flow graphs.
//! - [`vtable`] resolves indirect calls through vtable pointers.
//! - [`taint`] runs the this-pointer abstract interpretation, producing
//!   per-method field-access summaries with locksets.
//! - [`race`] enumerates racing access pairs (lockset disjointness).
//! - [`oracle`] exhaustively enumerates thread interleavings of abstract
//!   access programs and certifies use-after-free / double-free verdicts.
//! - [`metrics`] scores predicted vulnerable entry functions against a
//!   labeled corpus (per-case P/R/F1, macro/micro, best-of-k).

pub mod cfg;
pub mod config;
pub mod isa;
pub mod metrics;
pub mod oracle;
pub mod race;
pub mod taint;
pub mod vtable;

pub use config::{AnalysisOpts, Mode};
