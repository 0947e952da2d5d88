//! Quality and diversity checkers, and the weight providers the trainer asks
//! for per-batch loss weights.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::losses::{dimp_weight, focal_weight, imp_weight, LossKind, WeightProvenance, WeightTable, PROB_FLOOR};
use crate::model::{train, ClassifierParams, ForwardPass, TrainConfig};

/// Checkers train for five epochs unless configured otherwise.
pub const DEFAULT_CHECKER_EPOCHS: usize = 5;

/// Source of per-example loss weights during training.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightProvider {
    Uniform,
    /// `(1 - p)^gamma` from the current forward pass.
    Focal { gamma: f64 },
    /// A fixed table (importance weights), identical at every step.
    Precomputed(WeightTable),
    /// Constant quality numerators over the current model's probability.
    DynamicQuality { quality: Vec<f64>, floor: f64, cap: f64 },
}

impl WeightProvider {
    pub fn kind_name(&self) -> &'static str {
        match self {
            WeightProvider::Uniform => "uniform",
            WeightProvider::Focal { .. } => "focal",
            WeightProvider::Precomputed(_) => "precomputed",
            WeightProvider::DynamicQuality { .. } => "dynamic_quality",
        }
    }

    /// Errors unless the provider fits `loss` and is aligned to `dataset`.
    pub fn check(&self, dataset: &Dataset, loss: LossKind) -> Result<()> {
        let consistent = match (self, loss) {
            (WeightProvider::Uniform, LossKind::Ce) => true,
            (WeightProvider::Focal { gamma }, LossKind::Focal { gamma: g }) => *gamma == g,
            (WeightProvider::Precomputed(_), LossKind::Imp) => true,
            (WeightProvider::DynamicQuality { .. }, LossKind::Dimp) => true,
            _ => false,
        };
        if !consistent {
            return Err(Error::validation(format!(
                "{} weight provider cannot drive {loss} training",
                self.kind_name()
            )));
        }
        let aligned = match self {
            WeightProvider::Precomputed(t) => Some(t.len()),
            WeightProvider::DynamicQuality { quality, .. } => Some(quality.len()),
            _ => None,
        };
        if let Some(len) = aligned {
            if len != dataset.len() {
                return Err(Error::validation(format!(
                    "weight provider covers {len} examples, training set has {}",
                    dataset.len()
                )));
            }
        }
        Ok(())
    }

    /// Fill `out` with weights for the examples at `indices`, given each
    /// example's true-label probability under the current parameters.
    pub fn batch_weights(&self, indices: &[usize], p_true: &[f64], out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        match self {
            WeightProvider::Uniform => out.extend(std::iter::repeat_n(1.0, indices.len())),
            WeightProvider::Focal { gamma } => {
                for &p in p_true {
                    out.push(focal_weight(p.clamp(PROB_FLOOR, 1.0), *gamma)?);
                }
            }
            WeightProvider::Precomputed(table) => out.extend(indices.iter().map(|&i| table.weights()[i])),
            WeightProvider::DynamicQuality { quality, floor, cap } => {
                out.extend(indices.iter().zip(p_true).map(|(&i, &p)| dimp_weight(quality[i], p, *floor, *cap)));
            }
        }
        Ok(())
    }
}

fn checker_config(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        loss: LossKind::Ce,
        ..config.clone()
    }
}

/// Default checker settings: five CE epochs, otherwise the trainer defaults.
pub fn default_checker_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: DEFAULT_CHECKER_EPOCHS,
        seed,
        ..Default::default()
    }
}

/// CE-trained classifier on the small target-distribution set. The loss kind
/// in `config` is ignored.
pub fn fit_quality_checker(small_real: &Dataset, config: &TrainConfig) -> Result<ClassifierParams> {
    let (params, _) = train(small_real, &checker_config(config), &WeightProvider::Uniform)?;
    Ok(params)
}

/// CE-trained classifier on the full source-distribution (synthetic) set.
pub fn fit_diversity_checker(synthetic: &Dataset, config: &TrainConfig) -> Result<ClassifierParams> {
    let (params, _) = train(synthetic, &checker_config(config), &WeightProvider::Uniform)?;
    Ok(params)
}

/// Each example's probability of its own label under `checker`, in order.
pub fn score_dataset(checker: &ClassifierParams, dataset: &Dataset) -> Result<Vec<f64>> {
    checker.check_compatible(dataset)?;
    dataset
        .examples()
        .par_iter()
        .map_init(ForwardPass::default, |fwd, ex| {
            checker.forward_into(&ex.features, fwd)?;
            Ok(fwd.probs[ex.label])
        })
        .collect()
}

fn check_unit_interval(name: &str, scores: &[f64]) -> Result<()> {
    match scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
        Some(i) => Err(Error::validation(format!("{name} score {i} = {} outside [0, 1]", scores[i]))),
        None => Ok(()),
    }
}

pub fn imp_weight_table(quality: &[f64], diversity: &[f64], floor: f64, cap: f64) -> Result<WeightTable> {
    if quality.len() != diversity.len() {
        return Err(Error::validation(format!(
            "{} quality scores but {} diversity scores",
            quality.len(),
            diversity.len()
        )));
    }
    check_unit_interval("quality", quality)?;
    check_unit_interval("diversity", diversity)?;
    let weights = quality
        .iter()
        .zip(diversity)
        .map(|(&q, &d)| imp_weight(q, d, floor, cap))
        .collect();
    WeightTable::new(weights, WeightProvenance::Imp)
}

pub fn make_imp_provider(quality: &[f64], diversity: &[f64], floor: f64, cap: f64) -> Result<WeightProvider> {
    Ok(WeightProvider::Precomputed(imp_weight_table(quality, diversity, floor, cap)?))
}

pub fn make_dimp_provider(quality: &[f64], floor: f64, cap: f64) -> Result<WeightProvider> {
    check_unit_interval("quality", quality)?;
    Ok(WeightProvider::DynamicQuality {
        quality: quality.to_vec(),
        floor,
        cap,
    })
}

/// One row of a score/weight CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub index: usize,
    pub label: usize,
    pub quality: f64,
    /// Diversity-checker probability, or the model probability snapshot.
    pub diversity: f64,
    pub weight: f64,
}

pub const SCORE_HEADER: [&str; 5] = ["index", "label", "quality", "diversity", "weight"];

pub fn write_scores(rows: &[ScoreRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SCORE_HEADER)?;
    for r in rows {
        out.write_record([
            r.index.to_string(),
            r.label.to_string(),
            r.quality.to_string(),
            r.diversity.to_string(),
            r.weight.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scores(r: impl Read) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let field = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("bad {} column", SCORE_HEADER[j]),
                })
        };
        rows.push(ScoreRow {
            index: field(0)? as usize,
            label: field(1)? as usize,
            quality: field(2)?,
            diversity: field(3)?,
            weight: field(4)?,
        });
    }
    Ok(rows)
}
