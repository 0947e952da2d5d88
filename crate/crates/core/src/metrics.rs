//! Accuracy / macro-F1 evaluation and model-based conditional entropy and KL.

use std::io::Write;

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::losses::PROB_FLOOR;
use crate::model::{argmax, ClassifierParams, ForwardPass};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    pub n_examples: usize,
}

pub const EVAL_CSV_HEADER: [&str; 3] = ["n_examples", "accuracy", "macro_f1"];

impl EvalReport {
    /// Scores from parallel prediction/gold sequences. Zero-division rates are 0.
    pub fn from_predictions(predicted: &[usize], gold: &[usize], num_classes: usize) -> Result<Self> {
        if predicted.len() != gold.len() || gold.is_empty() {
            return Err(Error::validation("predictions and gold labels must be equal-length and non-empty"));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&p, &g) in predicted.iter().zip(gold) {
            if p >= num_classes || g >= num_classes {
                return Err(Error::validation(format!("class index out of range for C={num_classes}")));
            }
            confusion[g][p] += 1;
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class: Vec<ClassScores> = (0..num_classes)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted_c: usize = (0..num_classes).map(|g| confusion[g][c]).sum();
                let support: usize = confusion[c].iter().sum();
                let precision = ratio(tp, predicted_c);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassScores {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        Ok(EvalReport {
            accuracy: correct as f64 / gold.len() as f64,
            macro_f1: per_class.iter().map(|s| s.f1).sum::<f64>() / num_classes as f64,
            per_class,
            n_examples: gold.len(),
        })
    }

    pub fn csv_row(&self) -> [String; 3] {
        [self.n_examples.to_string(), self.accuracy.to_string(), self.macro_f1.to_string()]
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(EVAL_CSV_HEADER)?;
        out.write_record(self.csv_row())?;
        out.flush()?;
        Ok(())
    }
}

pub fn predict_all(params: &ClassifierParams, dataset: &Dataset) -> Result<Vec<usize>> {
    params.check_compatible(dataset)?;
    let mut fwd = ForwardPass::default();
    dataset
        .examples()
        .iter()
        .map(|ex| {
            params.forward_into(&ex.features, &mut fwd)?;
            Ok(argmax(&fwd.probs))
        })
        .collect()
}

pub fn evaluate(params: &ClassifierParams, dataset: &Dataset) -> Result<EvalReport> {
    let predicted = predict_all(params, dataset)?;
    let gold: Vec<usize> = dataset.labels().collect();
    EvalReport::from_predictions(&predicted, &gold, dataset.num_classes())
}

/// Mean predictive entropy of the model over the reference inputs.
pub fn model_conditional_entropy(params: &ClassifierParams, reference: &Dataset) -> Result<f64> {
    params.check_compatible(reference)?;
    let mut fwd = ForwardPass::default();
    let mut total = 0.0;
    for ex in reference.examples() {
        params.forward_into(&ex.features, &mut fwd)?;
        total += fwd
            .probs
            .iter()
            .zip(&fwd.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| -p * l)
            .sum::<f64>();
    }
    Ok(total / reference.len() as f64)
}

/// Mean KL(num || den) between the two models' predictive distributions over
/// the reference inputs, with den probabilities floored.
pub fn model_conditional_kl(params_num: &ClassifierParams, params_den: &ClassifierParams, reference: &Dataset) -> Result<f64> {
    params_num.check_compatible(reference)?;
    params_den.check_compatible(reference)?;
    let mut a = ForwardPass::default();
    let mut b = ForwardPass::default();
    let mut total = 0.0;
    for ex in reference.examples() {
        params_num.forward_into(&ex.features, &mut a)?;
        params_den.forward_into(&ex.features, &mut b)?;
        for c in 0..a.probs.len() {
            let p = a.probs[c];
            if p > 0.0 {
                let den_log = if b.probs[c] >= PROB_FLOOR { b.log_probs[c] } else { PROB_FLOOR.ln() };
                total += p * (a.log_probs[c] - den_log);
            }
        }
    }
    Ok(total / reference.len() as f64)
}
