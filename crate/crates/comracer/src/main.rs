//! Command-line front end wiring the pipeline: parse, resolve, analyze,
//! detect, report; plus the interleaving oracle and the benchmark scorer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};

use comracer::config::{self, AnalysisOpts, Mode};
use comracer::isa::{BinaryImage, SymbolTag};
use comracer::metrics::{self, Corpus, PredictionFile};
use comracer::oracle::{self, Scenario};
use comracer::race::{self, RaceReport};
use comracer::taint::{self, MethodSummary};
use comracer::vtable;
use comracer::cfg;

#[derive(Parser)]
#[command(name = "comracer", version, about = "Race-condition UAF/DF detector for COM-style fixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Base,
    E4,
    E4e5,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Base => Mode::Base,
            ModeArg::E4 => Mode::E4,
            ModeArg::E4e5 => Mode::E4e5,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Md,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a fixture and print the race report.
    Analyze {
        fixture: PathBuf,
        #[arg(long, value_enum, default_value = "e4e5")]
        mode: ModeArg,
        /// Report self write/write races for methods whose only accesses
        /// to a field are unguarded writes.
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        ww_self: bool,
        #[arg(long, default_value_t = 16)]
        lock_cap: u8,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Write per-function control-flow graphs in DOT format.
        #[arg(long)]
        dot: Option<PathBuf>,
        /// JSON file mapping symbol names to tags, overriding the bundled
        /// defaults.
        #[arg(long)]
        sync_config: Option<PathBuf>,
        /// Include per-method access summaries in the JSON report.
        #[arg(long)]
        summaries: bool,
    },
    /// Print resolved virtual calls as JSON.
    Resolve {
        fixture: PathBuf,
        #[arg(long)]
        sync_config: Option<PathBuf>,
    },
    /// Enumerate all interleavings of a scenario file and print the
    /// verdict.
    Oracle { scenario: PathBuf },
    /// Score prediction runs against a labeled corpus.
    Bench {
        corpus: PathBuf,
        predictions: PathBuf,
        /// Select the best run per case before aggregating.
        #[arg(long)]
        best_of: Option<usize>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn read_to_string(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_image(path: &Path, sync_config: Option<&Path>) -> Result<BinaryImage, String> {
    let text = read_to_string(path)?;
    let mut image = BinaryImage::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut tags = config::default_symbol_tags();
    if let Some(cfg_path) = sync_config {
        let raw = read_to_string(cfg_path)?;
        let overrides: BTreeMap<String, SymbolTag> =
            serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", cfg_path.display()))?;
        tags.extend(overrides);
    }
    config::apply_symbol_tags(&mut image, &tags);
    Ok(image)
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Analyze {
            fixture,
            mode,
            ww_self,
            lock_cap,
            depth,
            format,
            dot,
            sync_config,
            summaries: dump_summaries,
        } => {
            if lock_cap < 1 {
                return Err("--lock-cap must be at least 1".into());
            }
            if depth < 1 {
                return Err("--depth must be at least 1".into());
            }
            let image = load_image(&fixture, sync_config.as_deref())?;
            let mode: Mode = mode.into();
            let opts = AnalysisOpts {
                ww_self,
                lock_cap,
                depth,
                ..AnalysisOpts::for_mode(mode)
            };
            if let Some(dot_path) = &dot {
                let mut out = String::new();
                for func in image.functions.values() {
                    out.push_str(&cfg::build_cfg(func).to_dot(func));
                }
                fs::write(dot_path, out).map_err(|e| format!("{}: {e}", dot_path.display()))?;
            }
            let recovery = vtable::recover_virtual_calls_with_opts(&image, &opts);
            let summaries: Vec<MethodSummary> = image
                .entries
                .iter()
                .map(|name| taint::analyze_method(&image, name, &recovery.resolved, &opts))
                .collect();
            let reports = race::detect_races(&summaries, &opts);
            let vulnerable = race::vulnerable_functions(&reports);
            let mut diagnostics: Vec<String> = summaries
                .iter()
                .flat_map(|s| s.diagnostics.iter().map(|d| format!("{}: {d}", s.method)))
                .collect();
            diagnostics.extend(
                recovery
                    .unresolved
                    .iter()
                    .map(|u| format!("unresolved virtual call at {:#x}: {}", u.call_site, u.reason)),
            );
            let image_name = fixture.display().to_string();
            match format {
                Format::Json => {
                    let mut doc = serde_json::json!({
                        "image": image_name,
                        "mode": mode.name(),
                        "races": reports.iter().map(RaceReport::to_json).collect::<Vec<_>>(),
                        "vulnerable": vulnerable,
                        "diagnostics": diagnostics,
                    });
                    if dump_summaries {
                        doc["summaries"] = summaries.iter().map(MethodSummary::to_json).collect();
                    }
                    println!("{}", serde_json::to_string_pretty(&doc).unwrap());
                }
                Format::Md => print!("{}", render_races_md(&image_name, mode, &reports, &vulnerable, &diagnostics)),
            }
            Ok(if diagnostics.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Command::Resolve { fixture, sync_config } => {
            let image = load_image(&fixture, sync_config.as_deref())?;
            let recovery = vtable::recover_virtual_calls(&image);
            println!("{}", serde_json::to_string_pretty(&recovery.to_json()).unwrap());
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle { scenario } => {
            let raw = read_to_string(&scenario)?;
            let scenario: Scenario =
                serde_json::from_str(&raw).map_err(|e| format!("scenario: {e}"))?;
            let verdict = oracle::enumerate(&scenario).map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&verdict.to_json(&scenario)).unwrap()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench {
            corpus,
            predictions,
            best_of,
            format,
        } => {
            let corpus: Corpus = serde_json::from_str(&read_to_string(&corpus)?)
                .map_err(|e| format!("corpus: {e}"))?;
            let preds: PredictionFile = serde_json::from_str(&read_to_string(&predictions)?)
                .map_err(|e| format!("predictions: {e}"))?;
            let scored = metrics::score_runs(&corpus, &preds).map_err(|e| e.to_string())?;
            if let Some(k) = best_of {
                if k != scored.len() {
                    return Err(format!(
                        "--best-of {k} does not match the {} runs in the predictions file",
                        scored.len()
                    ));
                }
                let runs: Vec<_> = scored.iter().map(|(_, s)| s.clone()).collect();
                let best = metrics::best_of_k(&runs).map_err(|e| e.to_string())?;
                let agg = metrics::aggregate(best).map_err(|e| e.to_string())?;
                match format {
                    Format::Json => {
                        let doc = serde_json::json!({ "best_of": k, "metrics": agg.to_json() });
                        println!("{}", serde_json::to_string_pretty(&doc).unwrap());
                    }
                    Format::Md => print!("{}", render_bench_md(&[("best".to_string(), agg)])),
                }
            } else {
                let mut aggregated = Vec::new();
                for (run_id, scores) in scored {
                    aggregated.push((run_id, metrics::aggregate(scores).map_err(|e| e.to_string())?));
                }
                match format {
                    Format::Json => {
                        let doc = serde_json::json!({
                            "runs": aggregated.iter().map(|(id, m)| serde_json::json!({
                                "run_id": id,
                                "metrics": m.to_json(),
                            })).collect::<Vec<_>>(),
                        });
                        println!("{}", serde_json::to_string_pretty(&doc).unwrap());
                    }
                    Format::Md => print!("{}", render_bench_md(&aggregated)),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn render_races_md(
    image: &str,
    mode: Mode,
    reports: &[RaceReport],
    vulnerable: &std::collections::BTreeSet<String>,
    diagnostics: &[String],
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Race report: {image} (mode {})\n", mode.name());
    if reports.is_empty() {
        let _ = writeln!(out, "No races detected.\n");
    } else {
        let _ = writeln!(out, "| path | class | self | a | b |");
        let _ = writeln!(out, "|---|---|---|---|---|");
        for r in reports {
            let side = |x: &comracer::taint::FieldAccess| {
                format!("{}@{:#x} ({})", x.method, x.site, x.kind.name())
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                r.path,
                r.class.name(),
                if r.self_race { "yes" } else { "no" },
                side(&r.a),
                side(&r.b)
            );
        }
        let _ = writeln!(out);
    }
    let vuln: Vec<&str> = vulnerable.iter().map(|s| s.as_str()).collect();
    let _ = writeln!(out, "Vulnerable: {}\n", if vuln.is_empty() { "none".to_string() } else { vuln.join(", ") });
    if !diagnostics.is_empty() {
        let _ = writeln!(out, "## Diagnostics\n");
        for d in diagnostics {
            let _ = writeln!(out, "- {d}");
        }
    }
    out
}

fn render_bench_md(runs: &[(String, metrics::Metrics)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "| Case |");
    for (id, _) in runs {
        let _ = write!(out, " {id} P | {id} R | {id} F1 |");
    }
    let _ = writeln!(out);
    let _ = write!(out, "|---|");
    for _ in runs {
        let _ = write!(out, "---|---|---|");
    }
    let _ = writeln!(out);
    let case_ids: Vec<&str> = runs[0].1.per_case.iter().map(|c| c.case_id.as_str()).collect();
    for case_id in case_ids {
        let _ = write!(out, "| {case_id} |");
        for (_, m) in runs {
            let c = m.per_case.iter().find(|c| c.case_id == case_id).unwrap();
            let _ = write!(
                out,
                " {:.3} | {:.3} | {:.3} |",
                metrics::round3(&c.precision),
                metrics::round3(&c.recall),
                metrics::round3(&c.f1)
            );
        }
        let _ = writeln!(out);
    }
    for (label, pick) in [
        ("MI", &|m: &metrics::Metrics| (m.micro_precision.clone(), m.micro_recall.clone(), m.micro_f1.clone())),
        ("MA", &|m: &metrics::Metrics| (m.macro_precision.clone(), m.macro_recall.clone(), m.macro_f1.clone())),
    ] as [(&str, &dyn Fn(&metrics::Metrics) -> _); 2]
    {
        let _ = write!(out, "| **{label}** |");
        for (_, m) in runs {
            let (p, r, f1) = pick(m);
            let _ = write!(
                out,
                " {:.3} | {:.3} | {:.3} |",
                metrics::round3(&p),
                metrics::round3(&r),
                metrics::round3(&f1)
            );
        }
        let _ = writeln!(out);
    }
    out
}
