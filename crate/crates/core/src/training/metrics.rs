use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::Label;
use crate::numeric::Tensor;

/// Arg-max class of a probability pair; an exact tie goes to deceptive.
pub fn predict_label(pair: &[f64]) -> usize {
    if pair[0] >= pair[1] {
        Label::Deceptive.index()
    } else {
        Label::Truthful.index()
    }
}

pub fn predictions(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| predict_label(probs.row(r)))
        .collect()
}

/// Binary classification scores with deceptive as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

fn f1_score(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f1)
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Result<Self> {
        let total = tp + fp + fn_ + tn;
        if total == 0 {
            return Err(Error::Data("cannot score an empty set".into()));
        }
        let (precision, recall, f1) = f1_score(tp, fp, fn_);
        let (_, _, f1_truthful) = f1_score(tn, fn_, fp);
        Ok(Self {
            accuracy: (tp + tn) as f64 / total as f64,
            precision,
            recall,
            f1,
            macro_f1: (f1 + f1_truthful) / 2.0,
            tp,
            fp,
            fn_,
            tn,
        })
    }

    pub fn from_predictions(predicted: &[usize], labels: &[usize]) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} predictions for {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        let positive = Label::Deceptive.index();
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &y) in predicted.iter().zip(labels) {
            Label::from_index(y)?;
            match (p == positive, y == positive) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Self::from_counts(tp, fp, fn_, tn)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Mean and sample standard deviation of fold scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvSummary {
    pub folds: Vec<Metrics>,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub mean_f1: f64,
    pub sd_f1: f64,
}

impl CvSummary {
    pub fn new(folds: Vec<Metrics>) -> Self {
        let stats = |xs: Vec<f64>| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let sd = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (mean, sd)
        };
        let (mean_accuracy, sd_accuracy) = stats(folds.iter().map(|m| m.accuracy).collect());
        let (mean_f1, sd_f1) = stats(folds.iter().map(|m| m.f1).collect());
        Self {
            folds,
            mean_accuracy,
            sd_accuracy,
            mean_f1,
            sd_f1,
        }
    }
}
