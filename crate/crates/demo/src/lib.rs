//! WebAssembly bindings for the static demo page. Every export returns a JSON
//! string so the page needs no generated type glue beyond plain strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dimp_core::experiment::{noise_study_seed, run_cell, CheckerSettings, NoiseGroup, NoiseStudyConfig, PreparedData};
use dimp_core::losses::{dimp_weight, focal_weight, lower_bound_terms, LossKind};
use dimp_core::model::TrainConfig;
use dimp_core::synthworld::{make_world, true_conditional_kl, KlDirection, WorldSpec};

fn to_json(value: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curves {
    p: Vec<f64>,
    ratio_weight: Vec<f64>,
    focal_weight: Vec<f64>,
    bound_lhs: Vec<f64>,
    bound_rhs: Vec<f64>,
}

/// Per-example weights and lower-bound terms as the model probability of the
/// label sweeps (0, 1] at a fixed quality score.
#[wasm_bindgen]
pub fn weight_curves(quality: f64, gamma: f64, floor: f64, cap: f64, points: usize) -> Result<String, String> {
    if !(0.0..=1.0).contains(&quality) {
        return Err(format!("quality must lie in [0, 1], got {quality}"));
    }
    if !(floor > 0.0 && floor < cap) || !(gamma >= 0.0) || points < 2 {
        return Err("need 0 < floor < cap, gamma >= 0 and at least 2 points".into());
    }
    let p: Vec<f64> = (1..=points).map(|i| i as f64 / points as f64).collect();
    let mut curves = Curves {
        p: p.clone(),
        ratio_weight: Vec::with_capacity(points),
        focal_weight: Vec::with_capacity(points),
        bound_lhs: Vec::with_capacity(points),
        bound_rhs: Vec::with_capacity(points),
    };
    for &pi in &p {
        curves.ratio_weight.push(dimp_weight(quality, pi, floor, cap));
        curves.focal_weight.push(focal_weight(pi, gamma).map_err(|e| e.to_string())?);
        let b = lower_bound_terms(&[pi], &[quality]).map_err(|e| e.to_string())?;
        curves.bound_lhs.push(b.lhs);
        curves.bound_rhs.push(b.rhs);
    }
    to_json(&curves)
}

#[derive(Serialize)]
struct LossRow {
    loss: String,
    exact_p_ce: f64,
    accuracy: f64,
    macro_f1: f64,
    epoch_loss: Vec<f64>,
}

#[derive(Serialize)]
struct Comparison {
    kl_p_q: f64,
    rows: Vec<LossRow>,
}

/// Trains CE, IMP and DIMP on Q-samples of one world and scores each by its
/// exact cross-entropy under P.
#[wasm_bindgen]
pub fn compare_losses(
    label_shift: f64,
    covariate_shift: f64,
    train_n: usize,
    epochs: usize,
    seed: u64,
) -> Result<String, String> {
    let spec = WorldSpec {
        label_shift,
        covariate_shift,
        seed,
        ..Default::default()
    };
    let world = make_world(&spec).map_err(|e| e.to_string())?;
    let kl_p_q = true_conditional_kl(&world, KlDirection::PQ).map_err(|e| e.to_string())?;
    let data = PreparedData::from_world(world, train_n, 300, 1000, seed).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs,
        ..Default::default()
    };
    let checker = CheckerSettings {
        epochs: 20,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for loss in [LossKind::Ce, LossKind::Imp, LossKind::Dimp] {
        let cell = run_cell(&data, loss, &cfg, &checker, 64, seed).map_err(|e| e.to_string())?;
        rows.push(LossRow {
            loss: loss.to_string(),
            exact_p_ce: cell.exact_p_ce.unwrap_or(f64::NAN),
            accuracy: cell.eval.accuracy,
            macro_f1: cell.eval.macro_f1,
            epoch_loss: cell.history.epochs.iter().map(|e| e.loss).collect(),
        });
    }
    to_json(&Comparison { kl_p_q, rows })
}

#[derive(Serialize)]
struct GroupRow {
    group: &'static str,
    n: usize,
    quality: f64,
    diversity: f64,
    imp_weight: f64,
    dimp_weight_by_epoch: Vec<f64>,
}

/// Mean checker scores and weights for the original, label-swapped and
/// duplicated thirds of a noisy training set.
#[wasm_bindgen]
pub fn noise_groups(seed: u64, epochs: usize, clean_only: bool) -> Result<String, String> {
    let defaults = NoiseStudyConfig::default();
    let cfg = NoiseStudyConfig {
        losses: vec![LossKind::Dimp],
        clean_only,
        train: TrainConfig {
            epochs,
            ..defaults.train.clone()
        },
        seeds: vec![seed],
        ..defaults
    };
    let result = noise_study_seed(&cfg, seed).map_err(|e| e.to_string())?;
    let rows: Vec<GroupRow> = NoiseGroup::ALL
        .iter()
        .filter_map(|g| {
            let m = result.groups.get(g)?;
            Some(GroupRow {
                group: g.as_str(),
                n: m.n,
                quality: m.quality,
                diversity: m.diversity,
                imp_weight: m.imp_weight,
                dimp_weight_by_epoch: (0..epochs)
                    .filter_map(|e| result.dimp_series.get(&(*g, e)).map(|v| v.0))
                    .collect(),
            })
        })
        .collect();
    to_json(&rows)
}
