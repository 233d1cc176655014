//! Cross-entropy and the penalty-scaled loss: CE multiplied by a factor
//! P ≥ 1 built from the mismatch between the teacher-forced greedy
//! prediction and the gold docid. P is constant under differentiation, so
//! the loss gradient is exactly P times the CE gradient.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::tokenizer::TokenId;

/// Nonnegative weight per evaluation signal; all zero reduces the loss to
/// plain cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub w_em: f64,
    pub w_pm: f64,
    pub w_sm: f64,
    pub w_s: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        PenaltyWeights {
            w_em: 0.5,
            w_pm: 0.5,
            w_sm: 0.5,
            w_s: 0.5,
        }
    }
}

impl PenaltyWeights {
    pub const ZERO: PenaltyWeights = PenaltyWeights {
        w_em: 0.0,
        w_pm: 0.0,
        w_sm: 0.0,
        w_s: 0.0,
    };

    pub fn is_zero(&self) -> bool {
        self.w_em == 0.0 && self.w_pm == 0.0 && self.w_sm == 0.0 && self.w_s == 0.0
    }

    pub fn sum(&self) -> f64 {
        self.w_em + self.w_pm + self.w_sm + self.w_s
    }

    /// Parses `w_em,w_pm,w_sm,w_s`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!(
                "penalty weights `{s}`: expected w_em,w_pm,w_sm,w_s"
            )));
        }
        let mut vals = [0.0f64; 4];
        for (i, p) in parts.iter().enumerate() {
            vals[i] = p
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("penalty weight `{p}` is not a number")))?;
            if vals[i] < 0.0 || !vals[i].is_finite() {
                return Err(Error::Config(format!("penalty weight `{p}` must be >= 0")));
            }
        }
        Ok(PenaltyWeights {
            w_em: vals[0],
            w_pm: vals[1],
            w_sm: vals[2],
            w_s: vals[3],
        })
    }
}

/// Token-averaged cross-entropy of `target` under the given logits rows,
/// computed with max subtraction.
pub fn cross_entropy(logits: &Array2<f64>, target: &[TokenId]) -> Result<f64> {
    if logits.nrows() != target.len() {
        return Err(Error::Dims(format!(
            "cross_entropy: {} logits rows for {} target tokens",
            logits.nrows(),
            target.len()
        )));
    }
    if target.is_empty() {
        return Err(Error::Dims("cross_entropy: empty target".into()));
    }
    let vocab = logits.ncols();
    let mut total = 0.0;
    for (p, &gold) in target.iter().enumerate() {
        let gold = gold as usize;
        if gold >= vocab {
            return Err(Error::Dims(format!(
                "cross_entropy: target id {gold} outside vocabulary of {vocab}"
            )));
        }
        let row = logits.row(p);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += logsum - logits[[p, gold]];
    }
    Ok(total / target.len() as f64)
}

/// Positionwise argmax of each logits row; ties break toward the lowest id.
pub fn greedy_prediction(logits: &Array2<f64>) -> Vec<TokenId> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as TokenId
        })
        .collect()
}

/// `P = 1 + w_em·(1−EM) + w_pm·(1−PM) + w_sm·(1−SM) + w_s·(1−S)`,
/// always in [1, 1 + Σw].
pub fn penalty_factor(pred: &[TokenId], target: &[TokenId], w: &PenaltyWeights) -> f64 {
    let v = metrics::MetricValues::compute(pred, target);
    1.0 + w.w_em * (1.0 - v.em) + w.w_pm * (1.0 - v.pm) + w.w_sm * (1.0 - v.sm)
        + w.w_s * (1.0 - v.s_score)
}

/// Cross-entropy scaled by the penalty factor of the teacher-forced greedy
/// prediction. With all-zero weights the result is bitwise the plain CE.
/// Returns `(loss, P)`.
pub fn penalized_loss(
    logits: &Array2<f64>,
    target: &[TokenId],
    w: &PenaltyWeights,
) -> Result<(f64, f64)> {
    let ce = cross_entropy(logits, target)?;
    if w.is_zero() {
        return Ok((ce, 1.0));
    }
    let pred = greedy_prediction(logits);
    let p = penalty_factor(&pred, target, w);
    Ok((ce * p, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn near_one_hot_logits_give_near_zero_ce() {
        let target = vec![2u32, 0, 1];
        let mut logits = Array2::zeros((3, 4));
        for (p, &g) in target.iter().enumerate() {
            logits[[p, g as usize]] = 50.0;
        }
        let ce = cross_entropy(&logits, &target).unwrap();
        assert!(ce < 1e-9, "ce = {ce}");
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let logits = Array2::zeros((2, 10));
        let ce = cross_entropy(&logits, &[3, 7]).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12, "ce = {ce}");
    }

    #[test]
    fn length_mismatch_rejected() {
        let logits = Array2::zeros((2, 4));
        assert!(cross_entropy(&logits, &[1]).is_err());
        assert!(cross_entropy(&logits, &[1, 2, 3]).is_err());
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let mut logits = Array2::zeros((1, 5));
        logits[[0, 2]] = 3.0;
        logits[[0, 4]] = 3.0;
        assert_eq!(greedy_prediction(&logits), vec![2]);
    }

    #[test]
    fn perfect_prediction_has_unit_penalty() {
        let target = vec![1u32, 2, 3];
        assert_eq!(penalty_factor(&target, &target, &PenaltyWeights::default()), 1.0);
    }

    #[test]
    fn disjoint_equal_length_penalty_is_2_5() {
        // EM=0, PM=0, SM=0, S=1 at defaults: P = 1 + 0.5 + 0.5 + 0.5 + 0
        let pred = vec![7u32, 8, 9];
        let target = vec![1u32, 2, 3];
        let p = penalty_factor(&pred, &target, &PenaltyWeights::default());
        assert!((p - 2.5).abs() < 1e-15, "p = {p}");
    }

    #[test]
    fn zero_weights_give_unit_penalty() {
        let pred = vec![7u32, 8];
        let target = vec![1u32, 2, 3];
        assert_eq!(penalty_factor(&pred, &target, &PenaltyWeights::ZERO), 1.0);
    }

    #[test]
    fn penalized_loss_is_ce_times_p() {
        let target = vec![1u32, 2];
        let mut logits = Array2::zeros((2, 5));
        logits[[0, 3]] = 2.0; // greedy picks 3 and 4: fully disjoint from target
        logits[[1, 4]] = 2.0;
        let ce = cross_entropy(&logits, &target).unwrap();
        let (loss, p) = penalized_loss(&logits, &target, &PenaltyWeights::default()).unwrap();
        assert!((p - 2.5).abs() < 1e-15);
        assert_eq!(loss, ce * p);
    }

    #[test]
    fn zero_weights_reduce_to_ce_bitwise() {
        let target = vec![1u32, 2];
        let mut logits = Array2::zeros((2, 5));
        logits[[0, 0]] = 0.3;
        logits[[1, 4]] = -1.2;
        let ce = cross_entropy(&logits, &target).unwrap();
        let (loss, p) = penalized_loss(&logits, &target, &PenaltyWeights::ZERO).unwrap();
        assert_eq!(loss, ce);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn parse_weights() {
        let w = PenaltyWeights::parse("0.5, 0.25,0,1").unwrap();
        assert_eq!(w.w_pm, 0.25);
        assert_eq!(w.w_s, 1.0);
        assert!(PenaltyWeights::parse("1,2,3").is_err());
        assert!(PenaltyWeights::parse("1,2,3,-1").is_err());
    }

    proptest! {
        #[test]
        fn penalty_bounds_hold(
            pred in proptest::collection::vec(0u32..8, 0..6),
            target in proptest::collection::vec(0u32..8, 1..6),
            we in 0.0f64..2.0, wp in 0.0f64..2.0, ws in 0.0f64..2.0, wl in 0.0f64..2.0,
        ) {
            let w = PenaltyWeights { w_em: we, w_pm: wp, w_sm: ws, w_s: wl };
            let p = penalty_factor(&pred, &target, &w);
            prop_assert!(p >= 1.0 - 1e-12);
            prop_assert!(p <= 1.0 + w.sum() + 1e-12);
        }
    }
}
