//! Sequence-level retrieval metrics over docid token lists: exact match,
//! ordered partial match, unordered set match, and a length-structure score,
//! plus aggregation into a serializable report.
//!
//! Tokens compared here are docid components, matching the tokenizer's
//! atomic-component convention.

use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 1 iff `pred` and `gold` are identical in length and order.
pub fn em<T: PartialEq>(pred: &[T], gold: &[T]) -> f64 {
    debug_assert!(!gold.is_empty());
    if pred == gold {
        1.0
    } else {
        0.0
    }
}

/// Positionwise match count over the shared prefix region, normalized by the
/// longer length, so both wrong tokens and wrong lengths are penalized.
pub fn pm<T: PartialEq>(pred: &[T], gold: &[T]) -> f64 {
    debug_assert!(!gold.is_empty());
    let overlap = pred.len().min(gold.len());
    let longest = pred.len().max(gold.len());
    if longest == 0 {
        return 0.0;
    }
    let matches = (0..overlap).filter(|&p| pred[p] == gold[p]).count();
    matches as f64 / longest as f64
}

/// Jaccard overlap between the token sets; duplicates collapse.
pub fn sm<T: Eq + Hash>(pred: &[T], gold: &[T]) -> f64 {
    debug_assert!(!gold.is_empty());
    if pred.is_empty() {
        return 0.0;
    }
    let pred_set: HashSet<&T> = pred.iter().collect();
    let gold_set: HashSet<&T> = gold.iter().collect();
    let inter = pred_set.intersection(&gold_set).count();
    let union = pred_set.union(&gold_set).count();
    inter as f64 / union as f64
}

/// `1 − | |pred| − |gold| | / max(|pred|, |gold|)`: relative length agreement.
pub fn s_score<T>(pred: &[T], gold: &[T]) -> f64 {
    debug_assert!(!gold.is_empty());
    let longest = pred.len().max(gold.len());
    if longest == 0 {
        return 0.0;
    }
    let diff = pred.len().abs_diff(gold.len());
    1.0 - diff as f64 / longest as f64
}

/// All four metrics for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub em: f64,
    pub pm: f64,
    pub sm: f64,
    pub s_score: f64,
}

impl MetricValues {
    pub fn compute<T: Eq + Hash>(pred: &[T], gold: &[T]) -> Self {
        MetricValues {
            em: em(pred, gold),
            pm: pm(pred, gold),
            sm: sm(pred, gold),
            s_score: s_score(pred, gold),
        }
    }
}

/// Per-query evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub pred_surface: String,
    pub gold_surface: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

/// Mean metrics over a query set, with the per-query records retained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub em: f64,
    pub pm: f64,
    pub sm: f64,
    pub s_score: f64,
    pub n: usize,
    pub records: Vec<QueryRecord>,
}

/// Plain arithmetic means over the records.
pub fn aggregate(records: Vec<QueryRecord>) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Invalid("cannot aggregate an empty record set".into()));
    }
    let n = records.len() as f64;
    let sum = |f: fn(&QueryRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        em: sum(|r| r.values.em),
        pm: sum(|r| r.values.pm),
        sm: sum(|r| r.values.sm),
        s_score: sum(|r| r.values.s_score),
        n: records.len(),
        records,
    })
}

impl MetricsReport {
    /// One CSV row under the header `Model,Split,EM,PM,SM,S`.
    pub fn csv_row(&self, model: &str, split: &str) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4}",
            model, split, self.em, self.pm, self.sm, self.s_score
        )
    }

    pub const CSV_HEADER: &'static str = "Model,Split,EM,PM,SM,S";
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split('-').collect()
    }

    #[test]
    fn em_exact_and_order() {
        assert_eq!(em(&toks("a-b-c"), &toks("a-b-c")), 1.0);
        assert_eq!(em(&toks("a-b"), &toks("a-b-c")), 0.0);
        assert_eq!(em(&toks("b-a-c"), &toks("a-b-c")), 0.0);
    }

    #[test]
    fn pm_hand_counts() {
        // positions: a=a, x!=b, c=c -> 2 matches / max(3,3)
        assert!((pm(&toks("a-x-c"), &toks("a-b-c")) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(pm(&toks("a-b-c"), &toks("a-b-c")), 1.0);
        assert_eq!(pm::<&str>(&[], &toks("a-b-c")), 0.0);
    }

    #[test]
    fn sm_jaccard() {
        assert_eq!(sm(&toks("c-a-b"), &toks("a-b-c")), 1.0);
        // |{a,d} ∩ {a,b,c}| = 1, |∪| = 4
        assert!((sm(&toks("a-d"), &toks("a-b-c")) - 0.25).abs() < 1e-15);
        assert_eq!(sm(&toks("x-y"), &toks("a-b-c")), 0.0);
    }

    #[test]
    fn s_score_lengths() {
        assert_eq!(s_score(&toks("a-b-c"), &toks("x-y-z")), 1.0);
        assert!((s_score(&toks("a-b"), &toks("a-b-c-d")) - 0.5).abs() < 1e-15);
        assert_eq!(s_score::<&str>(&[], &toks("a-b-c")), 0.0);
    }

    #[test]
    fn aggregate_means() {
        let rec = |em_v: f64| QueryRecord {
            query_id: "q".into(),
            pred_surface: String::new(),
            gold_surface: String::new(),
            values: MetricValues {
                em: em_v,
                pm: em_v,
                sm: em_v,
                s_score: em_v,
            },
        };
        let one = aggregate(vec![rec(1.0)]).unwrap();
        assert_eq!(one.em, 1.0);
        assert_eq!(one.n, 1);
        let half = aggregate(vec![rec(1.0), rec(0.0)]).unwrap();
        assert_eq!(half.em, 0.5);
        assert!(aggregate(vec![]).is_err());
    }

    #[test]
    fn aggregate_matches_brute_force_sum() {
        let mut recs = Vec::new();
        let mut acc = 0.0;
        for i in 0..100u32 {
            // cheap deterministic pseudo-random values in [0,1]
            let v = ((i as f64 * 0.37).sin().abs() * 1000.0).fract();
            acc += v;
            recs.push(QueryRecord {
                query_id: format!("q{i}"),
                pred_surface: String::new(),
                gold_surface: String::new(),
                values: MetricValues {
                    em: v,
                    pm: v,
                    sm: v,
                    s_score: v,
                },
            });
        }
        let report = aggregate(recs).unwrap();
        assert!((report.em - acc / 100.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ranges_and_implications(
            pred in proptest::collection::vec(0u8..6, 0..8),
            gold in proptest::collection::vec(0u8..6, 1..8),
        ) {
            let v = MetricValues::compute(&pred, &gold);
            for x in [v.em, v.pm, v.sm, v.s_score] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            if v.em == 1.0 {
                prop_assert_eq!(v.pm, 1.0);
                prop_assert_eq!(v.sm, 1.0);
                prop_assert_eq!(v.s_score, 1.0);
            }
        }

        #[test]
        fn sm_permutation_invariant_and_symmetric(
            mut pred in proptest::collection::vec(0u8..6, 1..8),
            gold in proptest::collection::vec(0u8..6, 1..8),
        ) {
            let before = sm(&pred, &gold);
            pred.reverse();
            prop_assert_eq!(before, sm(&pred, &gold));
            prop_assert_eq!(sm(&pred, &gold), sm(&gold, &pred));
            prop_assert_eq!(s_score(&pred, &gold), s_score(&gold, &pred));
            prop_assert_eq!(pm(&pred, &gold), pm(&gold, &pred));
        }
    }
}
