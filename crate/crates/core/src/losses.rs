//! Cross-entropy, weighted cross-entropy and the weight functions that plug
//! into it: focal, static importance (quality / diversity) and dynamic
//! importance (quality / current model).

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::corpus::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::{ClassifierParams, ForwardPass};

pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-4;
pub const DEFAULT_WEIGHT_CAP: f64 = 100.0;
/// Smallest probability allowed inside a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[inline]
pub fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Ce,
    Focal { gamma: f64 },
    Imp,
    Dimp,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Focal { .. } => "focal",
            LossKind::Imp => "imp",
            LossKind::Dimp => "dimp",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Focal { gamma } => write!(f, "focal:{gamma}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// `ce`, `imp`, `dimp`, `focal` (gamma 2) or `focal:<gamma>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "ce" => Ok(LossKind::Ce),
            "imp" => Ok(LossKind::Imp),
            "dimp" => Ok(LossKind::Dimp),
            "focal" => Ok(LossKind::Focal { gamma: 2.0 }),
            _ => {
                let gamma = s
                    .strip_prefix("focal:")
                    .and_then(|g| g.parse::<f64>().ok())
                    .filter(|g| *g >= 0.0 && g.is_finite())
                    .ok_or_else(|| Error::validation(format!("unknown loss kind {s:?}")))?;
                Ok(LossKind::Focal { gamma })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightProvenance {
    Uniform,
    Focal,
    Imp,
    DimpQualityNumerators,
}

impl WeightProvenance {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightProvenance::Uniform => "uniform",
            WeightProvenance::Focal => "focal",
            WeightProvenance::Imp => "imp",
            WeightProvenance::DimpQualityNumerators => "dimp_quality_numerators",
        }
    }
}

impl FromStr for WeightProvenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightProvenance::Uniform),
            "focal" => Ok(WeightProvenance::Focal),
            "imp" => Ok(WeightProvenance::Imp),
            "dimp_quality_numerators" => Ok(WeightProvenance::DimpQualityNumerators),
            other => Err(Error::validation(format!("unknown weight provenance {other:?}"))),
        }
    }
}

/// Per-example loss weights aligned by index to a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    weights: Vec<f64>,
    provenance: WeightProvenance,
}

impl WeightTable {
    pub fn new(weights: Vec<f64>, provenance: WeightProvenance) -> Result<Self> {
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::validation(format!("weight {i} = {w} is negative or non-finite")));
        }
        Ok(WeightTable { weights, provenance })
    }

    pub fn uniform(n: usize) -> Self {
        WeightTable {
            weights: vec![1.0; n],
            provenance: WeightProvenance::Uniform,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn provenance(&self) -> WeightProvenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["index", "weight", "provenance"])?;
        for (i, v) in self.weights.iter().enumerate() {
            out.write_record([i.to_string(), v.to_string(), self.provenance.as_str().to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut weights = Vec::new();
        let mut provenance = None;
        for (k, row) in rdr.records().enumerate() {
            let row = row?;
            let line = k + 2;
            let bad = |m: String| Error::Parse { line, message: m };
            if row.len() != 3 {
                return Err(bad(format!("expected 3 columns, found {}", row.len())));
            }
            let index: usize = row[0].parse().map_err(|_| bad(format!("bad index {:?}", &row[0])))?;
            if index != weights.len() {
                return Err(bad(format!("expected index {}, found {index}", weights.len())));
            }
            let weight: f64 = row[1].parse().map_err(|_| bad(format!("bad weight {:?}", &row[1])))?;
            let p: WeightProvenance = row[2].parse().map_err(|e: Error| bad(e.to_string()))?;
            if provenance.is_some_and(|q| q != p) {
                return Err(bad("mixed provenance in one table".into()));
            }
            provenance = Some(p);
            weights.push(weight);
        }
        WeightTable::new(weights, provenance.unwrap_or(WeightProvenance::Uniform))
    }
}

fn true_label_log_probs(params: &ClassifierParams, dataset: &Dataset) -> Result<Vec<f64>> {
    params.check_compatible(dataset)?;
    let mut fwd = ForwardPass::default();
    dataset
        .examples()
        .iter()
        .map(|ex| {
            params.forward_into(&ex.features, &mut fwd)?;
            Ok(fwd.log_probs[ex.label].max(PROB_FLOOR.ln()))
        })
        .collect()
}

/// `-(1/M) sum_i log p(y_i | x_i)`.
pub fn ce_loss(params: &ClassifierParams, dataset: &Dataset) -> Result<f64> {
    let logs = true_label_log_probs(params, dataset)?;
    Ok(-logs.iter().sum::<f64>() / logs.len() as f64)
}

/// `-(1/N) sum_i w_i log p(y_i | x_i)`.
pub fn wce_loss(params: &ClassifierParams, dataset: &Dataset, weights: &WeightTable) -> Result<f64> {
    if weights.len() != dataset.len() {
        return Err(Error::validation(format!(
            "weight table has {} entries for {} examples",
            weights.len(),
            dataset.len()
        )));
    }
    let logs = true_label_log_probs(params, dataset)?;
    let total: f64 = logs.iter().zip(weights.weights()).map(|(l, w)| w * l).sum();
    Ok(-total / logs.len() as f64)
}

/// `(1 - p_true)^gamma`.
pub fn focal_weight(p_true: f64, gamma: f64) -> Result<f64> {
    if !(p_true > 0.0 && p_true <= 1.0) {
        return Err(Error::validation(format!("focal weight needs p in (0, 1], got {p_true}")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::validation(format!("focal gamma must be >= 0, got {gamma}")));
    }
    Ok((1.0 - p_true).powf(gamma))
}

#[inline]
fn clamped_ratio(numerator: f64, denominator: f64, floor: f64, cap: f64) -> f64 {
    let w = numerator / denominator.max(floor);
    if w.is_nan() {
        // 0 / 0 only happens on the unclamped path with a zero floor.
        return 0.0;
    }
    w.clamp(0.0, cap)
}

/// Static importance weight: quality-checker probability over
/// diversity-checker probability of the given label, floored and capped.
pub fn imp_weight(quality: f64, diversity: f64, floor: f64, cap: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&quality) && (0.0..=1.0).contains(&diversity));
    clamped_ratio(quality, diversity, floor, cap)
}

/// Dynamic importance weight: quality-checker probability over the current
/// model's probability of the given label.
pub fn dimp_weight(quality: f64, model_prob: f64, floor: f64, cap: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&quality) && (0.0..=1.0).contains(&model_prob));
    clamped_ratio(quality, model_prob, floor, cap)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerBound {
    /// Unclamped dynamic-importance loss.
    pub lhs: f64,
    /// Distilled cross-entropy (factor 2) plus the entropy-style regularizer.
    pub rhs: f64,
}

impl LowerBound {
    pub fn holds(&self, tolerance: f64) -> bool {
        self.lhs >= self.rhs - tolerance
    }
}

/// Both sides of the dynamic-importance lower bound from the true-label
/// model probabilities and quality scores of one batch:
///
/// ```text
/// lhs = -(1/N) sum q_i / p_i log p_i
/// rhs = -(2/N) sum q_i log p_i + (1/N) sum p_i log p_i
/// ```
pub fn lower_bound_terms(p_true: &[f64], quality: &[f64]) -> Result<LowerBound> {
    if p_true.len() != quality.len() || p_true.is_empty() {
        return Err(Error::validation("lower bound needs equal, non-empty probability and quality lists"));
    }
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for (&p, &q) in p_true.iter().zip(quality) {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::numeric(format!("model probability {p} outside (0, 1]")));
        }
        let lp = p.ln();
        lhs -= q / p * lp;
        rhs += -2.0 * q * lp + p * lp;
    }
    let n = p_true.len() as f64;
    Ok(LowerBound { lhs: lhs / n, rhs: rhs / n })
}

pub fn dimp_lower_bound(params: &ClassifierParams, batch: &[Example], quality_scores: &[f64]) -> Result<LowerBound> {
    if batch.len() != quality_scores.len() {
        return Err(Error::validation("quality scores not aligned with batch"));
    }
    let mut fwd = ForwardPass::default();
    let mut p_true = Vec::with_capacity(batch.len());
    for ex in batch {
        params.forward_into(&ex.features, &mut fwd)?;
        p_true.push(fwd.probs[ex.label]);
    }
    lower_bound_terms(&p_true, quality_scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SparseVec;
    use crate::model::{Architecture, Dense};

    /// Linear model on a one-hot feature whose true-label probability is `p`
    /// (two classes, logit gap ln(p / (1-p))).
    fn two_example_setup(p: [f64; 2]) -> (ClassifierParams, Dataset) {
        let mut w = vec![0.0; 4];
        for (i, &pi) in p.iter().enumerate() {
            w[i * 2] = (pi / (1.0 - pi)).ln();
        }
        let params = ClassifierParams::from_layers(
            Architecture::Linear,
            vec![Dense {
                inputs: 2,
                outputs: 2,
                weights: w,
                bias: vec![0.0; 2],
            }],
        )
        .unwrap();
        let ex = |i: usize| Example::new(SparseVec::from_pairs([(i, 1.0)]), 0);
        (params, Dataset::new(vec![ex(0), ex(1)], 2, 2).unwrap())
    }

    #[test]
    fn ce_loss_values() {
        let (params, ds) = two_example_setup([0.8, 0.4]);
        // -(ln 0.8 + ln 0.4) / 2, evaluated by hand.
        assert!((ce_loss(&params, &ds).unwrap() - 0.569_717_141_594_182_4).abs() < 1e-12);
        let zero = ClassifierParams::zeros(Architecture::Linear, 2, 2);
        assert!((ce_loss(&zero, &ds).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ce_loss_zero_when_certain() {
        let mut p = ClassifierParams::zeros(Architecture::Linear, 2, 2);
        p.layers_mut()[0].bias[0] = 800.0;
        let ds = Dataset::new(vec![Example::new(SparseVec::default(), 0)], 2, 2).unwrap();
        assert_eq!(ce_loss(&p, &ds).unwrap(), 0.0);
    }

    #[test]
    fn wce_loss_values() {
        let (params, ds) = two_example_setup([0.8, 0.4]);
        let ce = ce_loss(&params, &ds).unwrap();
        assert_eq!(wce_loss(&params, &ds, &WeightTable::uniform(2)).unwrap(), ce);
        let zeros = WeightTable::new(vec![0.0, 0.0], WeightProvenance::Imp).unwrap();
        assert_eq!(wce_loss(&params, &ds, &zeros).unwrap(), 0.0);
        let w = WeightTable::new(vec![2.0, 0.0], WeightProvenance::Imp).unwrap();
        assert!((wce_loss(&params, &ds, &w).unwrap() - 0.223_143_551_314_209_7).abs() < 1e-12);
        assert!(wce_loss(&params, &ds, &WeightTable::uniform(3)).is_err());
    }

    #[test]
    fn focal_weight_values() {
        assert_eq!(focal_weight(1.0, 3.0).unwrap(), 0.0);
        assert_eq!(focal_weight(0.5, 2.0).unwrap(), 0.25);
        for p in [1e-9, 0.3, 0.999, 1.0] {
            assert_eq!(focal_weight(p, 0.0).unwrap(), 1.0);
        }
        assert!(focal_weight(0.0, 2.0).is_err());
        assert!(focal_weight(1.5, 2.0).is_err());
    }

    #[test]
    fn importance_weights() {
        assert_eq!(imp_weight(0.7, 0.7, 1e-4, 100.0), 1.0);
        assert_eq!(imp_weight(0.9, 0.45, 1e-4, 100.0), 2.0);
        assert_eq!(imp_weight(0.5, 1e-9, 1e-4, 100.0), 100.0);
        assert_eq!(imp_weight(0.005, 1e-9, 1e-4, 100.0), 50.0);
        assert_eq!(dimp_weight(0.4, 0.4, 1e-4, 100.0), 1.0);
        assert!((dimp_weight(0.9, 0.3, 1e-4, 100.0) - 3.0).abs() < 1e-15);
        assert!((dimp_weight(0.9, 1.0 / 3.0, 1e-4, 100.0) - 2.7).abs() < 1e-12);
        assert_eq!(dimp_weight(0.0, 0.0, 0.0, f64::INFINITY), 0.0);
    }

    #[test]
    fn lower_bound_single_example() {
        let lb = lower_bound_terms(&[0.5], &[1.0]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((lb.lhs - 2.0 * ln2).abs() < 1e-12);
        assert!((lb.rhs - 1.5 * ln2).abs() < 1e-12);
        assert!(lb.holds(0.0));
        assert!(matches!(lower_bound_terms(&[0.0], &[1.0]), Err(Error::Numeric { .. })));
    }

    #[test]
    fn lower_bound_zero_quality() {
        let p = [0.2, 0.7, 0.05];
        let lb = lower_bound_terms(&p, &[0.0; 3]).unwrap();
        assert_eq!(lb.lhs, 0.0);
        assert!(lb.rhs <= 0.0);
        assert!(lb.holds(0.0));
    }

    #[test]
    fn weight_table_csv_round_trip() {
        let t = WeightTable::new(vec![0.1, 2.5, 1.0 / 3.0, 100.0], WeightProvenance::Imp).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(WeightTable::read_csv(buf.as_slice()).unwrap(), t);
        assert!(WeightTable::new(vec![-1.0], WeightProvenance::Imp).is_err());
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("focal:0".parse::<LossKind>().unwrap(), LossKind::Focal { gamma: 0.0 });
        assert_eq!("dimp".parse::<LossKind>().unwrap(), LossKind::Dimp);
        assert!("focal:-1".parse::<LossKind>().is_err());
        assert!("mse".parse::<LossKind>().is_err());
    }
}
