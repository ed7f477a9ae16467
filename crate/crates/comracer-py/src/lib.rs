//! Python bindings: fixture parsing, the analysis pipeline, the
//! interleaving oracle, and the benchmark scorer. Structured results come
//! back as JSON strings so the Python side can `json.loads` them.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use comracer::config::{self, AnalysisOpts, Mode};
use comracer::isa::BinaryImage;
use comracer::metrics;
use comracer::oracle;
use comracer::race;
use comracer::taint;
use comracer::vtable;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    match mode {
        "base" => Ok(Mode::Base),
        "e4" => Ok(Mode::E4),
        "e4e5" => Ok(Mode::E4e5),
        other => Err(value_err(format!("unknown mode `{other}` (base|e4|e4e5)"))),
    }
}

fn load_image(text: &str) -> PyResult<BinaryImage> {
    let mut image = BinaryImage::parse(text).map_err(value_err)?;
    config::apply_symbol_tags(&mut image, &config::default_symbol_tags());
    Ok(image)
}

/// A parsed binary-image fixture.
#[pyclass(frozen, name = "Image")]
struct PyImage {
    inner: BinaryImage,
}

#[pymethods]
impl PyImage {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<PyImage> {
        Ok(PyImage {
            inner: load_image(text)?,
        })
    }

    /// Canonical fixture text; parsing it back gives an equal image.
    fn to_fixture(&self) -> String {
        self.inner.to_fixture()
    }

    fn functions(&self) -> Vec<String> {
        self.inner.functions.keys().cloned().collect()
    }

    fn entries(&self) -> Vec<String> {
        self.inner.entries.clone()
    }

    fn read_data_word(&self, addr: u64) -> PyResult<u64> {
        self.inner.read_data_word(addr).map_err(value_err)
    }

    fn symbol_at(&self, addr: u64) -> Option<(String, String)> {
        self.inner
            .symbol_at(addr)
            .map(|s| (s.name.clone(), s.tag.name().to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Image(functions={}, entries={}, data_words={})",
            self.inner.functions.len(),
            self.inner.entries.len(),
            self.inner.data.len()
        )
    }
}

/// Full pipeline on fixture text; returns the race report as JSON.
#[pyfunction]
#[pyo3(signature = (text, mode="e4e5", ww_self=true, lock_cap=16, depth=2))]
fn analyze(text: &str, mode: &str, ww_self: bool, lock_cap: u8, depth: usize) -> PyResult<String> {
    let image = load_image(text)?;
    let mode = parse_mode(mode)?;
    let opts = AnalysisOpts {
        ww_self,
        lock_cap,
        depth,
        ..AnalysisOpts::for_mode(mode)
    };
    let recovery = vtable::recover_virtual_calls_with_opts(&image, &opts);
    let summaries: Vec<taint::MethodSummary> = image
        .entries
        .iter()
        .map(|m| taint::analyze_method(&image, m, &recovery.resolved, &opts))
        .collect();
    let reports = race::detect_races(&summaries, &opts);
    let doc = serde_json::json!({
        "mode": mode.name(),
        "summaries": summaries.iter().map(|s| s.to_json()).collect::<Vec<_>>(),
        "races": reports.iter().map(|r| r.to_json()).collect::<Vec<_>>(),
        "vulnerable": race::vulnerable_functions(&reports),
        "diagnostics": summaries.iter().flat_map(|s| s.diagnostics.clone()).collect::<Vec<_>>(),
    });
    Ok(doc.to_string())
}

/// Virtual-call recovery on fixture text; returns the resolution map as
/// JSON.
#[pyfunction]
fn resolve(text: &str) -> PyResult<String> {
    let image = load_image(text)?;
    Ok(vtable::recover_virtual_calls(&image).to_json().to_string())
}

/// Exhaustive interleaving enumeration of a scenario (JSON with `init`
/// and `threads`); returns the verdict as JSON.
#[pyfunction]
fn enumerate_interleavings(scenario_json: &str) -> PyResult<String> {
    let scenario: oracle::Scenario = serde_json::from_str(scenario_json).map_err(value_err)?;
    let verdict = oracle::enumerate(&scenario).map_err(value_err)?;
    Ok(verdict.to_json(&scenario).to_string())
}

/// Scores prediction runs against a labeled corpus; `best_of` selects the
/// best run per case first. Returns metrics as JSON.
#[pyfunction]
#[pyo3(name = "bench", signature = (corpus_json, predictions_json, best_of=None))]
fn score_bench(corpus_json: &str, predictions_json: &str, best_of: Option<usize>) -> PyResult<String> {
    let corpus: metrics::Corpus = serde_json::from_str(corpus_json).map_err(value_err)?;
    let preds: metrics::PredictionFile =
        serde_json::from_str(predictions_json).map_err(value_err)?;
    let scored = metrics::score_runs(&corpus, &preds).map_err(value_err)?;
    let doc = if let Some(k) = best_of {
        if k != scored.len() {
            return Err(value_err(format!(
                "best_of={k} does not match the {} runs",
                scored.len()
            )));
        }
        let runs: Vec<_> = scored.into_iter().map(|(_, s)| s).collect();
        let best = metrics::best_of_k(&runs).map_err(value_err)?;
        let agg = metrics::aggregate(best).map_err(value_err)?;
        serde_json::json!({ "best_of": k, "metrics": agg.to_json() })
    } else {
        let mut runs = Vec::new();
        for (run_id, scores) in scored {
            let agg = metrics::aggregate(scores).map_err(value_err)?;
            runs.push(serde_json::json!({ "run_id": run_id, "metrics": agg.to_json() }));
        }
        serde_json::json!({ "runs": runs })
    };
    Ok(doc.to_string())
}

#[pymodule]
fn comracer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(resolve, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_interleavings, m)?)?;
    m.add_function(wrap_pyfunction!(score_bench, m)?)?;
    Ok(())
}
