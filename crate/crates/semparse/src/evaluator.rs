//! Exact-match evaluation of predicted logical forms.
//!
//! A prediction is correct iff its canonical serialization equals the gold
//! form. This is stricter than execution-based comparison against a query
//! database, so absolute numbers are expected to sit at or below
//! execution-based ones.

use crate::error::Error;
use crate::logic::{trees_equal, MeaningTree};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalResult {
    pub total: usize,
    /// instances for which the parser produced any tree
    pub parsed: usize,
    pub correct: usize,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.total)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.parsed)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.total)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores predictions against gold trees; a `None` prediction (no parse)
/// counts against recall only.
pub fn evaluate(preds: &[Option<MeaningTree>], golds: &[MeaningTree]) -> Result<EvalResult> {
    if preds.len() != golds.len() {
        return Err(Error::Data(format!(
            "length mismatch: {} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let mut parsed = 0;
    let mut correct = 0;
    for (p, g) in preds.iter().zip(golds) {
        if let Some(p) = p {
            parsed += 1;
            if trees_equal(p, g) {
                correct += 1;
            }
        }
    }
    Ok(EvalResult {
        total: golds.len(),
        parsed,
        correct,
    })
}
