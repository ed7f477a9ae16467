//! Scores predicted vulnerable entry functions against labeled corpora:
//! per-case precision/recall/F1 over function-name sets, macro and micro
//! aggregation, and best-of-k run selection.
//!
//! Arithmetic is exact (rationals) internally; values are rounded to three
//! decimals only at output.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseLabel {
    pub case_id: String,
    pub entry_functions: Vec<String>,
    pub vulnerable: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub cases: Vec<CaseLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub case_id: String,
    pub predicted: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub run_id: String,
    pub cases: Vec<Prediction>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub runs: Vec<Run>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("case `{0}`: unknown case id")]
    UnknownCase(String),
    #[error("case `{case}`: predicted function `{name}` is not an entry function")]
    ForeignName { case: String, name: String },
    #[error("case id mismatch: label `{0}` vs prediction `{1}`")]
    CaseMismatch(String, String),
    #[error("run `{run}` does not cover case `{case}`")]
    CaseSetMismatch { run: String, case: String },
    #[error("no cases to aggregate")]
    Empty,
    #[error("label `{0}`: vulnerable set not contained in entry functions")]
    BadLabel(String),
}

/// Exact per-case score plus the pooled counts behind it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseScore {
    pub case_id: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: BigRational,
    pub recall: BigRational,
    pub f1: BigRational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metrics {
    pub per_case: Vec<CaseScore>,
    pub macro_precision: BigRational,
    pub macro_recall: BigRational,
    pub macro_f1: BigRational,
    pub micro_precision: BigRational,
    pub micro_recall: BigRational,
    pub micro_f1: BigRational,
    pub pooled_tp: usize,
    pub pooled_fp: usize,
    pub pooled_fn: usize,
}

fn ratio(num: usize, den: usize) -> BigRational {
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (BigRational, BigRational, BigRational) {
    if tp == 0 && fp == 0 && fn_ == 0 {
        // Empty prediction against empty truth: a perfect score.
        return (BigRational::one(), BigRational::one(), BigRational::one());
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    (precision, recall, f1)
}

/// TP/FP/FN over function-name sets (duplicates collapse), then
/// P = TP/(TP+FP), R = TP/(TP+FN), F1 = 2PR/(P+R). TP = 0 with any FP or
/// FN scores (0, 0, 0); empty against empty scores (1, 1, 1).
pub fn score_case(label: &CaseLabel, prediction: &Prediction) -> Result<CaseScore, MetricsError> {
    if label.case_id != prediction.case_id {
        return Err(MetricsError::CaseMismatch(
            label.case_id.clone(),
            prediction.case_id.clone(),
        ));
    }
    let entries: BTreeSet<&str> = label.entry_functions.iter().map(|s| s.as_str()).collect();
    let truth: BTreeSet<&str> = label.vulnerable.iter().map(|s| s.as_str()).collect();
    if !truth.is_subset(&entries) {
        return Err(MetricsError::BadLabel(label.case_id.clone()));
    }
    let mut predicted: BTreeSet<&str> = BTreeSet::new();
    for name in &prediction.predicted {
        if !entries.contains(name.as_str()) {
            return Err(MetricsError::ForeignName {
                case: label.case_id.clone(),
                name: name.clone(),
            });
        }
        predicted.insert(name);
    }
    let tp = predicted.intersection(&truth).count();
    let fp = predicted.difference(&truth).count();
    let fn_ = truth.difference(&predicted).count();
    let (precision, recall, f1) = prf(tp, fp, fn_);
    Ok(CaseScore {
        case_id: label.case_id.clone(),
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
    })
}

/// Macro = unweighted mean of per-case scores; micro = scores of the
/// pooled TP/FP/FN counts.
pub fn aggregate(per_case: Vec<CaseScore>) -> Result<Metrics, MetricsError> {
    if per_case.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = BigRational::from(BigInt::from(per_case.len()));
    let mean = |f: fn(&CaseScore) -> &BigRational| -> BigRational {
        per_case.iter().map(f).sum::<BigRational>() / n.clone()
    };
    let macro_precision = mean(|c| &c.precision);
    let macro_recall = mean(|c| &c.recall);
    let macro_f1 = mean(|c| &c.f1);
    let pooled_tp: usize = per_case.iter().map(|c| c.tp).sum();
    let pooled_fp: usize = per_case.iter().map(|c| c.fp).sum();
    let pooled_fn: usize = per_case.iter().map(|c| c.fn_).sum();
    let (micro_precision, micro_recall, micro_f1) = prf(pooled_tp, pooled_fp, pooled_fn);
    Ok(Metrics {
        per_case,
        macro_precision,
        macro_recall,
        macro_f1,
        micro_precision,
        micro_recall,
        micro_f1,
        pooled_tp,
        pooled_fp,
        pooled_fn,
    })
}

/// Per case, the score of the run with maximal F1 (ties go to the lowest
/// run index). All runs must cover the same case set.
pub fn best_of_k(runs: &[Vec<CaseScore>]) -> Result<Vec<CaseScore>, MetricsError> {
    let first = runs.first().ok_or(MetricsError::Empty)?;
    let case_ids: Vec<&str> = first.iter().map(|c| c.case_id.as_str()).collect();
    for (ri, run) in runs.iter().enumerate() {
        let ids: BTreeSet<&str> = run.iter().map(|c| c.case_id.as_str()).collect();
        for id in &case_ids {
            if !ids.contains(id) {
                return Err(MetricsError::CaseSetMismatch {
                    run: ri.to_string(),
                    case: id.to_string(),
                });
            }
        }
        if run.len() != case_ids.len() {
            return Err(MetricsError::CaseSetMismatch {
                run: ri.to_string(),
                case: "<extra cases>".to_string(),
            });
        }
    }
    let mut selected = Vec::with_capacity(case_ids.len());
    for id in case_ids {
        let mut best: Option<&CaseScore> = None;
        for run in runs {
            let score = run.iter().find(|c| c.case_id == id).unwrap();
            if best.is_none_or(|b| score.f1 > b.f1) {
                best = Some(score);
            }
        }
        selected.push(best.unwrap().clone());
    }
    Ok(selected)
}

/// Scores every run of a prediction file against the corpus, in file
/// order. Labels are matched by case id; each run must predict every
/// corpus case at most once, missing cases count as empty predictions.
pub fn score_runs(corpus: &Corpus, preds: &PredictionFile) -> Result<Vec<(String, Vec<CaseScore>)>, MetricsError> {
    let labels: BTreeMap<&str, &CaseLabel> = corpus
        .cases
        .iter()
        .map(|c| (c.case_id.as_str(), c))
        .collect();
    let mut out = Vec::new();
    for run in &preds.runs {
        let mut by_case: BTreeMap<&str, &Prediction> = BTreeMap::new();
        for p in &run.cases {
            if !labels.contains_key(p.case_id.as_str()) {
                return Err(MetricsError::UnknownCase(p.case_id.clone()));
            }
            by_case.insert(&p.case_id, p);
        }
        let mut scores = Vec::new();
        for label in &corpus.cases {
            let empty = Prediction {
                case_id: label.case_id.clone(),
                predicted: vec![],
            };
            let pred = by_case.get(label.case_id.as_str()).copied().unwrap_or(&empty);
            scores.push(score_case(label, pred)?);
        }
        out.push((run.run_id.clone(), scores));
    }
    Ok(out)
}

/// Rounded to three decimals, the precision the output tables use.
pub fn round3(r: &BigRational) -> f64 {
    let scaled = (r * BigRational::from(BigInt::from(1000))).round();
    scaled.to_f64().unwrap_or(f64::NAN) / 1000.0
}

impl Metrics {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "per_case": self.per_case.iter().map(|c| serde_json::json!({
                "case_id": c.case_id,
                "tp": c.tp,
                "fp": c.fp,
                "fn": c.fn_,
                "precision": round3(&c.precision),
                "recall": round3(&c.recall),
                "f1": round3(&c.f1),
            })).collect::<Vec<_>>(),
            "macro": {
                "precision": round3(&self.macro_precision),
                "recall": round3(&self.macro_recall),
                "f1": round3(&self.macro_f1),
            },
            "micro": {
                "precision": round3(&self.micro_precision),
                "recall": round3(&self.micro_recall),
                "f1": round3(&self.micro_f1),
            },
            "pooled": { "tp": self.pooled_tp, "fp": self.pooled_fp, "fn": self.pooled_fn },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(id: &str, entries: &[&str], vuln: &[&str]) -> CaseLabel {
        CaseLabel {
            case_id: id.to_string(),
            entry_functions: entries.iter().map(|s| s.to_string()).collect(),
            vulnerable: vuln.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn pred(id: &str, names: &[&str]) -> Prediction {
        Prediction {
            case_id: id.to_string(),
            predicted: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn f1s(scores: &[CaseScore]) -> Vec<f64> {
        scores.iter().map(|c| round3(&c.f1)).collect()
    }

    #[test]
    fn half_right_scores_half() {
        let score = score_case(
            &label("c", &["f1", "f2", "f3"], &["f1", "f2"]),
            &pred("c", &["f1", "f3"]),
        )
        .unwrap();
        assert_eq!((score.tp, score.fp, score.fn_), (1, 1, 1));
        assert_eq!(round3(&score.precision), 0.5);
        assert_eq!(round3(&score.recall), 0.5);
        assert_eq!(round3(&score.f1), 0.5);
    }

    #[test]
    fn exact_hit_scores_one() {
        let score = score_case(&label("c", &["f1", "f2"], &["f1"]), &pred("c", &["f1"])).unwrap();
        assert_eq!(round3(&score.f1), 1.0);
    }

    #[test]
    fn all_miss_scores_zero() {
        let score = score_case(&label("c", &["f1", "f2"], &["f1", "f2"]), &pred("c", &[])).unwrap();
        assert_eq!(round3(&score.precision), 0.0);
        assert_eq!(round3(&score.recall), 0.0);
        assert_eq!(round3(&score.f1), 0.0);
    }

    #[test]
    fn empty_against_empty_scores_one() {
        let score = score_case(&label("c", &["f1"], &[]), &pred("c", &[])).unwrap();
        assert_eq!(round3(&score.f1), 1.0);
    }

    #[test]
    fn duplicates_collapse_and_order_is_irrelevant() {
        let l = label("c", &["f1", "f2"], &["f1"]);
        let a = score_case(&l, &pred("c", &["f1", "f2"])).unwrap();
        let b = score_case(&l, &pred("c", &["f2", "f1", "f1"])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn foreign_name_is_an_error() {
        let err = score_case(&label("c", &["f1"], &["f1"]), &pred("c", &["zzz"])).unwrap_err();
        assert!(matches!(err, MetricsError::ForeignName { .. }));
        let err = score_case(&label("c", &["f1"], &["f1"]), &pred("d", &["f1"])).unwrap_err();
        assert!(matches!(err, MetricsError::CaseMismatch(..)));
    }

    #[test]
    fn macro_is_the_exact_mean() {
        let one = score_case(&label("a", &["f1"], &["f1"]), &pred("a", &["f1"])).unwrap();
        let zero = score_case(&label("b", &["f1"], &["f1"]), &pred("b", &[])).unwrap();
        let metrics = aggregate(vec![one, zero]).unwrap();
        assert_eq!(round3(&metrics.macro_f1), 0.5);
    }

    #[test]
    fn single_case_macro_equals_micro() {
        let s = score_case(
            &label("a", &["f1", "f2", "f3"], &["f1", "f2"]),
            &pred("a", &["f1", "f3"]),
        )
        .unwrap();
        let metrics = aggregate(vec![s]).unwrap();
        assert_eq!(metrics.macro_f1, metrics.micro_f1);
    }

    #[test]
    fn micro_from_pooled_counts() {
        // two cases pooling to TP=2, FP=2, FN=2: micro F1 = 4/8 = 0.5
        let a = score_case(
            &label("a", &["f1", "f2", "f3"], &["f1", "f2"]),
            &pred("a", &["f1", "f3"]),
        )
        .unwrap();
        let b = score_case(
            &label("b", &["g1", "g2", "g3"], &["g1", "g2"]),
            &pred("b", &["g1", "g3"]),
        )
        .unwrap();
        let metrics = aggregate(vec![a, b]).unwrap();
        assert_eq!((metrics.pooled_tp, metrics.pooled_fp, metrics.pooled_fn), (2, 2, 2));
        assert_eq!(round3(&metrics.micro_f1), 0.5);
    }

    #[test]
    fn macro_mean_is_exact_in_thirds() {
        // mean of {1, 1, 0} is exactly 2/3, rounded to 0.667
        let scores = vec![
            score_case(&label("a", &["f"], &["f"]), &pred("a", &["f"])).unwrap(),
            score_case(&label("b", &["f"], &["f"]), &pred("b", &["f"])).unwrap(),
            score_case(&label("c", &["f"], &["f"]), &pred("c", &[])).unwrap(),
        ];
        let metrics = aggregate(scores).unwrap();
        assert_eq!(
            metrics.macro_f1,
            BigRational::new(BigInt::from(2), BigInt::from(3))
        );
        assert_eq!(round3(&metrics.macro_f1), 0.667);
    }

    #[test]
    fn best_of_k_selects_per_case_maxima() {
        let l1 = label("a", &["f1", "f2", "f3", "f4", "f5"], &["f1", "f2", "f3", "f4", "f5"]);
        let l2 = label("b", &["g1", "g2"], &["g1"]);
        // run 0: a scores 0.6 (3/5 recalled), b scores 0
        // run 1: a scores 0.9ish, b scores 0
        // run 2: a scores 0.7ish, b scores 1
        let r0 = vec![
            score_case(&l1, &pred("a", &["f1", "f2", "f3"])).unwrap(),
            score_case(&l2, &pred("b", &[])).unwrap(),
        ];
        let r1 = vec![
            score_case(&l1, &pred("a", &["f1", "f2", "f3", "f4"])).unwrap(),
            score_case(&l2, &pred("b", &["g2"])).unwrap(),
        ];
        let r2 = vec![
            score_case(&l1, &pred("a", &["f1", "f2"])).unwrap(),
            score_case(&l2, &pred("b", &["g1"])).unwrap(),
        ];
        let best = best_of_k(&[r0, r1, r2]).unwrap();
        assert_eq!(f1s(&best), vec![0.889, 1.0]); // maxima from different runs
    }

    #[test]
    fn best_of_k_ties_go_to_the_first_run() {
        let l = label("a", &["f1"], &["f1"]);
        let s = score_case(&l, &pred("a", &["f1"])).unwrap();
        let best = best_of_k(&[vec![s.clone()], vec![s.clone()]]).unwrap();
        assert_eq!(best, vec![s]);
    }

    #[test]
    fn best_of_k_rejects_mismatched_case_sets() {
        let l = label("a", &["f1"], &["f1"]);
        let s = score_case(&l, &pred("a", &["f1"])).unwrap();
        let err = best_of_k(&[vec![s], vec![]]).unwrap_err();
        assert!(matches!(err, MetricsError::CaseSetMismatch { .. }));
    }

    #[test]
    fn best_of_k_is_monotone_in_runs() {
        let l1 = label("a", &["f1", "f2"], &["f1"]);
        let l2 = label("b", &["g1", "g2"], &["g1"]);
        let r0 = vec![
            score_case(&l1, &pred("a", &["f2"])).unwrap(),
            score_case(&l2, &pred("b", &["g1"])).unwrap(),
        ];
        let r1 = vec![
            score_case(&l1, &pred("a", &["f1"])).unwrap(),
            score_case(&l2, &pred("b", &[])).unwrap(),
        ];
        let before = best_of_k(std::slice::from_ref(&r0)).unwrap();
        let after = best_of_k(&[r0, r1]).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert!(a.f1 >= b.f1);
        }
    }
}
