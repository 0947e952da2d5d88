//! End-to-end pipelines: per-(loss, seed) training cells with a four-phase
//! timing breakdown and cost counters, the dataset scoring (pruning) mode and
//! the label-swap / duplication noise study.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use crate::clock::Stopwatch;

use rayon::prelude::*;

use crate::checkers::{
    fit_diversity_checker, fit_quality_checker, imp_weight_table, make_dimp_provider, score_dataset, write_scores, ScoreRow,
    WeightProvider, DEFAULT_CHECKER_EPOCHS,
};
use crate::corpus::{load_dataset, split, Dataset, Format, LoadOptions};
use crate::error::{Error, Result};
use crate::losses::{LossKind, WeightProvenance, WeightTable};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{train, write_checkpoint, ClassifierParams, TrainConfig, TrainHistory, Trainer};
use crate::seeding::derive_seed;
use crate::synthworld::{exact_expected_ce, make_world, sample, JointWorld, Which, WorldSpec};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const REPORT_COLUMNS: [&str; 18] = [
    "schema_version",
    "loss",
    "seed",
    "status",
    "n_test",
    "accuracy",
    "macro_f1",
    "final_train_loss",
    "exact_p_ce",
    "checker_fits",
    "scoring_passes",
    "scoring_forward_passes",
    "build_qc",
    "build_dc",
    "precalculate_weights",
    "training",
    "total",
    "history_path",
];

/// Columns that vary with wall-clock time and are excluded from reproducibility checks.
pub const TIMING_COLUMNS: [&str; 5] = ["build_qc", "build_dc", "precalculate_weights", "training", "total"];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckerSettings {
    pub epochs: usize,
    /// Defaults to the trained model's learning rate.
    pub learning_rate: Option<f64>,
    /// `None` follows the trained model's architecture.
    pub hidden_units: Option<Option<usize>>,
}

impl Default for CheckerSettings {
    fn default() -> Self {
        CheckerSettings {
            epochs: DEFAULT_CHECKER_EPOCHS,
            learning_rate: None,
            hidden_units: None,
        }
    }
}

impl CheckerSettings {
    pub fn train_config(&self, model: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate.unwrap_or(model.learning_rate),
            hidden_units: self.hidden_units.unwrap_or(model.hidden_units),
            loss: LossKind::Ce,
            seed,
            ..model.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    World {
        spec: WorldSpec,
        train_n: usize,
        small_real_n: usize,
        test_n: usize,
    },
    Files {
        train: PathBuf,
        small_real: PathBuf,
        test: Option<PathBuf>,
        format: Option<Format>,
        options: LoadOptions,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub losses: Vec<LossKind>,
    /// Template; each repetition overrides the seed and loss kind.
    pub train: TrainConfig,
    pub checker: CheckerSettings,
    /// Chunk size for the weight precalculation pass.
    pub precalc_batch_size: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Run independent cells on the rayon pool (timings then share CPUs).
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::World {
                spec: WorldSpec::default(),
                train_n: 5000,
                small_real_n: 300,
                test_n: 2000,
            },
            losses: vec![LossKind::Ce, LossKind::Imp, LossKind::Dimp],
            train: TrainConfig::default(),
            checker: CheckerSettings::default(),
            precalc_batch_size: 64,
            seeds: vec![1],
            output_dir: PathBuf::from("out"),
            parallel: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::validation(format!("bad value {value:?} for {key}")))
}

fn parse_optional_usize(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim() {
        "" | "none" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

/// Comma-separated seeds; `a..b` expands to the inclusive range.
pub fn parse_seed_list(value: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (parse_value("seeds", a)?, parse_value("seeds", b)?);
                if a > b {
                    return Err(Error::validation(format!("empty seed range {part:?}")));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(parse_value("seeds", part)?),
        }
    }
    Ok(seeds)
}

impl ExperimentConfig {
    /// Parse `key = value` lines (`#` comments) on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: k + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut world = WorldSpec::default();
        let (mut train_n, mut small_n, mut test_n) = (5000usize, 300usize, 2000usize);
        let mut files: BTreeMap<&str, PathBuf> = BTreeMap::new();
        let mut format = None;
        let mut options = LoadOptions::default();
        let mut focal_gamma = 2.0;
        let mut losses_raw: Option<String> = None;

        for (key, value) in pairs {
            match key {
                "world.k" => world.k = parse_value(key, value)?,
                "world.c" => world.c = parse_value(key, value)?,
                "world.d" => world.d = parse_value(key, value)?,
                "world.nnz" => world.nnz = parse_optional_usize(key, value)?,
                "world.covariate_shift" => world.covariate_shift = parse_value(key, value)?,
                "world.label_shift" => world.label_shift = parse_value(key, value)?,
                "world.seed" => world.seed = parse_value(key, value)?,
                "train_n" => train_n = parse_value(key, value)?,
                "small_real_n" => small_n = parse_value(key, value)?,
                "test_n" => test_n = parse_value(key, value)?,
                "train_path" | "small_real_path" | "test_path" => {
                    files.insert(key, PathBuf::from(value));
                }
                "format" => format = Some(value.parse()?),
                "num_classes" => options.num_classes = parse_optional_usize(key, value)?,
                "feature_dim" => options.feature_dim = parse_optional_usize(key, value)?,
                "losses" => losses_raw = Some(value.to_string()),
                "focal_gamma" => focal_gamma = parse_value(key, value)?,
                "learning_rate" => cfg.train.learning_rate = parse_value(key, value)?,
                "epochs" => cfg.train.epochs = parse_value(key, value)?,
                "batch_size" => cfg.train.batch_size = parse_value(key, value)?,
                "weight_floor" => cfg.train.weight_floor = parse_value(key, value)?,
                "weight_cap" => cfg.train.weight_cap = parse_value(key, value)?,
                "normalize_batch_weights" => cfg.train.normalize_batch_weights = parse_value(key, value)?,
                "hidden_units" => cfg.train.hidden_units = parse_optional_usize(key, value)?,
                "checker_epochs" => cfg.checker.epochs = parse_value(key, value)?,
                "checker_learning_rate" => cfg.checker.learning_rate = Some(parse_value(key, value)?),
                "checker_hidden_units" => cfg.checker.hidden_units = Some(parse_optional_usize(key, value)?),
                "precalc_batch_size" => cfg.precalc_batch_size = parse_value(key, value)?,
                "seeds" => cfg.seeds = parse_seed_list(value)?,
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "parallel" => cfg.parallel = parse_value(key, value)?,
                other => return Err(Error::validation(format!("unknown config key {other:?}"))),
            }
        }

        if let Some(raw) = losses_raw {
            cfg.losses = raw
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| match s.trim() {
                    "focal" => Ok(LossKind::Focal { gamma: focal_gamma }),
                    other => other.parse(),
                })
                .collect::<Result<_>>()?;
        }
        cfg.data = if files.is_empty() {
            DataSource::World {
                spec: world,
                train_n,
                small_real_n: small_n,
                test_n,
            }
        } else {
            let take = |k: &str| files.get(k).cloned();
            DataSource::Files {
                train: take("train_path").ok_or_else(|| Error::validation("train_path is required with file inputs"))?,
                small_real: take("small_real_path")
                    .ok_or_else(|| Error::validation("small_real_path is required with file inputs"))?,
                test: take("test_path"),
                format,
                options,
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() {
            return Err(Error::validation("at least one loss kind is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("at least one seed is required"));
        }
        let mut names: Vec<String> = self.losses.iter().map(|l| l.to_string()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.losses.len() {
            return Err(Error::validation("loss kinds must be distinct"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::validation("repetition seeds must be distinct"));
        }
        if self.precalc_batch_size == 0 || self.checker.epochs == 0 {
            return Err(Error::validation("precalc_batch_size and checker_epochs must be positive"));
        }
        self.train.validate()?;
        if let DataSource::World { spec, train_n, small_real_n, test_n } = &self.data {
            spec.validate()?;
            if *train_n == 0 || *small_real_n == 0 || *test_n == 0 {
                return Err(Error::validation("sample sizes must be positive"));
            }
        }
        Ok(())
    }
}

/// Train / small-real / test sets for one repetition.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub small_real: Dataset,
    pub test: Dataset,
    pub world: Option<JointWorld>,
}

impl PreparedData {
    /// Train on Q, small-real and test on P, all seeded from `seed`.
    pub fn from_world(world: JointWorld, train_n: usize, small_real_n: usize, test_n: usize, seed: u64) -> Result<Self> {
        Ok(PreparedData {
            train: sample(&world, Which::Q, train_n, derive_seed(seed, 1))?,
            small_real: sample(&world, Which::P, small_real_n, derive_seed(seed, 2))?,
            test: sample(&world, Which::P, test_n, derive_seed(seed, 3))?,
            world: Some(world),
        })
    }
}

fn load_files(data: &DataSource) -> Result<Option<PreparedData>> {
    let DataSource::Files {
        train,
        small_real,
        test,
        format,
        options,
    } = data
    else {
        return Ok(None);
    };
    let load = |p: &Path| load_dataset(p, format.unwrap_or_else(|| Format::from_path(p)), *options);
    let train_ds = load(train)?;
    // Pin C and d to the training set so every file shares the feature space.
    let pinned = LoadOptions {
        num_classes: Some(train_ds.num_classes()),
        feature_dim: Some(train_ds.feature_dim()),
    };
    let load_pinned = |p: &Path| load_dataset(p, format.unwrap_or_else(|| Format::from_path(p)), pinned);
    let small = load_pinned(small_real)?;
    let test_ds = match test {
        Some(p) => load_pinned(p)?,
        None => small.clone(),
    };
    Ok(Some(PreparedData {
        train: train_ds,
        small_real: small,
        test: test_ds,
        world: None,
    }))
}

/// Wall-clock seconds per pipeline phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTiming {
    pub build_qc: f64,
    pub build_dc: f64,
    pub precalculate_weights: f64,
    pub training: f64,
    pub total: f64,
}

impl PhaseTiming {
    pub fn component_sum(&self) -> f64 {
        self.build_qc + self.build_dc + self.precalculate_weights + self.training
    }
}

/// Work done on the training set beyond the model's own training run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostCounters {
    pub checker_fits: usize,
    /// Full passes over the training set to score it with a checker.
    pub scoring_passes: usize,
    pub scoring_forward_passes: usize,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub loss: LossKind,
    pub seed: u64,
    pub params: ClassifierParams,
    pub history: TrainHistory,
    pub eval: EvalReport,
    pub exact_p_ce: Option<f64>,
    pub timing: PhaseTiming,
    pub counters: CostCounters,
    pub weights: Option<WeightTable>,
    pub scores: Option<Vec<ScoreRow>>,
}

fn score_counted(checker: &ClassifierParams, ds: &Dataset, chunk: usize, counters: &mut CostCounters) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for block in idx.chunks(chunk) {
        out.extend(score_dataset(checker, &ds.subset(block)?)?);
    }
    counters.scoring_passes += 1;
    counters.scoring_forward_passes += ds.len();
    Ok(out)
}

/// One training cell. Phases follow the loss kind: CE and focal train
/// directly; IMP builds both checkers and a static table; DIMP builds the
/// quality checker and caches its scores.
pub fn run_cell(
    data: &PreparedData,
    loss: LossKind,
    template: &TrainConfig,
    checker: &CheckerSettings,
    precalc_batch_size: usize,
    seed: u64,
) -> Result<CellOutcome> {
    let cfg = TrainConfig {
        loss,
        seed,
        ..template.clone()
    };
    cfg.validate()?;
    let checker_cfg = checker.train_config(&cfg, derive_seed(seed, 0xc4ec));
    let mut timing = PhaseTiming::default();
    let mut counters = CostCounters::default();
    let mut weights = None;
    let mut scores = None;
    let train_ds = &data.train;
    let started = Stopwatch::start();

    let provider = match loss {
        LossKind::Ce => WeightProvider::Uniform,
        LossKind::Focal { gamma } => WeightProvider::Focal { gamma },
        LossKind::Imp => {
            let t = Stopwatch::start();
            let qc = fit_quality_checker(&data.small_real, &checker_cfg)?;
            counters.checker_fits += 1;
            timing.build_qc = t.seconds();

            let t = Stopwatch::start();
            let dc = fit_diversity_checker(train_ds, &checker_cfg)?;
            counters.checker_fits += 1;
            timing.build_dc = t.seconds();

            let t = Stopwatch::start();
            let quality = score_counted(&qc, train_ds, precalc_batch_size, &mut counters)?;
            let diversity = score_counted(&dc, train_ds, precalc_batch_size, &mut counters)?;
            let table = imp_weight_table(&quality, &diversity, cfg.weight_floor, cfg.weight_cap)?;
            scores = Some(score_rows(train_ds, &quality, &diversity, table.weights()));
            weights = Some(table.clone());
            timing.precalculate_weights = t.seconds();
            WeightProvider::Precomputed(table)
        }
        LossKind::Dimp => {
            let t = Stopwatch::start();
            let qc = fit_quality_checker(&data.small_real, &checker_cfg)?;
            counters.checker_fits += 1;
            timing.build_qc = t.seconds();

            let t = Stopwatch::start();
            let quality = score_counted(&qc, train_ds, precalc_batch_size, &mut counters)?;
            let provider = make_dimp_provider(&quality, cfg.weight_floor, cfg.weight_cap)?;
            weights = Some(WeightTable::new(quality, WeightProvenance::DimpQualityNumerators)?);
            timing.precalculate_weights = t.seconds();
            provider
        }
    };

    let t = Stopwatch::start();
    let (params, history) = Trainer::new(train_ds, &cfg, &provider).held_out(&data.test).run()?;
    timing.training = t.seconds();
    timing.total = started.seconds();

    let eval = evaluate(&params, &data.test)?;
    let exact_p_ce = match &data.world {
        Some(w) => Some(exact_expected_ce(w, Which::P, &params)?),
        None => None,
    };
    Ok(CellOutcome {
        loss,
        seed,
        params,
        history,
        eval,
        exact_p_ce,
        timing,
        counters,
        weights,
        scores,
    })
}

fn score_rows(ds: &Dataset, quality: &[f64], diversity: &[f64], weights: &[f64]) -> Vec<ScoreRow> {
    (0..ds.len())
        .map(|i| ScoreRow {
            index: i,
            label: ds.get(i).label,
            quality: quality[i],
            diversity: diversity[i],
            weight: weights[i],
        })
        .collect()
}

#[derive(Debug)]
pub struct CellReport {
    pub loss: LossKind,
    pub seed: u64,
    pub outcome: std::result::Result<CellOutcome, String>,
    pub history_path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub cells: Vec<CellReport>,
    pub report_path: PathBuf,
}

impl ExperimentReport {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.outcome.is_ok())
    }
}

/// Write `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| Error::File {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    let tmp = path.with_extension("tmp");
    let io = |source| Error::File {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn write_cell_artifacts(dir: &Path, cell: &CellOutcome) -> Result<PathBuf> {
    write_atomic(&dir.join("params.jsonl"), &to_bytes(|b| write_checkpoint(&cell.params, b))?)?;
    let history_path = dir.join("history.csv");
    write_atomic(&history_path, &to_bytes(|b| cell.history.write_csv(b))?)?;
    write_atomic(&dir.join("eval.csv"), &to_bytes(|b| cell.eval.write_csv(b))?)?;
    if let Some(w) = &cell.weights {
        write_atomic(&dir.join("weights.csv"), &to_bytes(|b| w.write_csv(b))?)?;
    }
    if let Some(s) = &cell.scores {
        write_atomic(&dir.join("scores.csv"), &to_bytes(|b| write_scores(s, b))?)?;
    }
    Ok(history_path)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_row(cell: &CellReport, output_dir: &Path) -> Vec<String> {
    let history = cell
        .history_path
        .as_ref()
        .map(|p| p.strip_prefix(output_dir).unwrap_or(p).display().to_string())
        .unwrap_or_default();
    let mut row = vec![REPORT_SCHEMA_VERSION.to_string(), cell.loss.to_string(), cell.seed.to_string()];
    match &cell.outcome {
        Ok(c) => {
            row.extend([
                "ok".to_string(),
                c.eval.n_examples.to_string(),
                c.eval.accuracy.to_string(),
                c.eval.macro_f1.to_string(),
                fmt_opt(c.history.final_loss()),
                fmt_opt(c.exact_p_ce),
                c.counters.checker_fits.to_string(),
                c.counters.scoring_passes.to_string(),
                c.counters.scoring_forward_passes.to_string(),
                c.timing.build_qc.to_string(),
                c.timing.build_dc.to_string(),
                c.timing.precalculate_weights.to_string(),
                c.timing.training.to_string(),
                c.timing.total.to_string(),
            ]);
        }
        Err(msg) => {
            row.push(format!("error: {msg}"));
            row.extend(std::iter::repeat_n(String::new(), 13));
        }
    }
    row.push(history);
    row
}

/// Runs every (loss, seed) cell, writing artifacts under the output directory.
/// A failing cell is recorded in the report and does not stop the others.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let files = load_files(&config.data)?;
    let world = match &config.data {
        DataSource::World { spec, .. } => Some(make_world(spec)?),
        DataSource::Files { .. } => None,
    };
    if let Some(w) = &world {
        write_atomic(&config.output_dir.join("world.jsonl"), &to_bytes(|b| w.write_jsonl(b))?)?;
    }

    let prepare = |seed: u64| -> Result<PreparedData> {
        match (&config.data, &files, &world) {
            (DataSource::World { train_n, small_real_n, test_n, .. }, _, Some(w)) => {
                PreparedData::from_world(w.clone(), *train_n, *small_real_n, *test_n, seed)
            }
            (_, Some(f), _) => Ok(f.clone()),
            _ => unreachable!("data source resolved above"),
        }
    };

    let jobs: Vec<(u64, LossKind)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.losses.iter().map(move |&l| (s, l)))
        .collect();
    let run_one = |&(seed, loss): &(u64, LossKind)| -> CellReport {
        let outcome = prepare(seed)
            .and_then(|data| run_cell(&data, loss, &config.train, &config.checker, config.precalc_batch_size, seed))
            .and_then(|cell| {
                let dir = config.output_dir.join("cells").join(format!("{}_seed{}", loss.to_string().replace(':', "-"), seed));
                let history = write_cell_artifacts(&dir, &cell)?;
                Ok((cell, history))
            });
        match outcome {
            Ok((cell, history)) => CellReport {
                loss,
                seed,
                outcome: Ok(cell),
                history_path: Some(history),
            },
            Err(e) => CellReport {
                loss,
                seed,
                outcome: Err(e.to_string()),
                history_path: None,
            },
        }
    };
    let cells: Vec<CellReport> = if config.parallel {
        jobs.par_iter().map(run_one).collect()
    } else {
        jobs.iter().map(run_one).collect()
    };

    let mut buf = Vec::new();
    {
        let mut out = csv::Writer::from_writer(&mut buf);
        out.write_record(REPORT_COLUMNS)?;
        for c in &cells {
            out.write_record(report_row(c, &config.output_dir))?;
        }
        out.flush()?;
    }
    let report_path = config.output_dir.join("report.csv");
    write_atomic(&report_path, &buf)?;
    Ok(ExperimentReport { cells, report_path })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Imp,
    /// Quality over a CE model fit on the training set, taken as one snapshot.
    DimpStatic,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imp" => Ok(ScoreMode::Imp),
            "dimp_static" | "dimp-static" => Ok(ScoreMode::DimpStatic),
            other => Err(Error::validation(format!("unknown score mode {other:?}"))),
        }
    }
}

/// Scores every training example and returns rows sorted by descending
/// weight (ties by index).
pub fn score_examples(
    train_ds: &Dataset,
    small_real: &Dataset,
    mode: ScoreMode,
    model: &TrainConfig,
    checker: &CheckerSettings,
) -> Result<Vec<ScoreRow>> {
    if train_ds.num_classes() != small_real.num_classes() || train_ds.feature_dim() != small_real.feature_dim() {
        return Err(Error::validation(format!(
            "training set (C={}, d={}) and small real set (C={}, d={}) are incompatible",
            train_ds.num_classes(),
            train_ds.feature_dim(),
            small_real.num_classes(),
            small_real.feature_dim()
        )));
    }
    let checker_cfg = checker.train_config(model, derive_seed(model.seed, 0xc4ec));
    let qc = fit_quality_checker(small_real, &checker_cfg)?;
    let denominator = match mode {
        ScoreMode::Imp => fit_diversity_checker(train_ds, &checker_cfg)?,
        ScoreMode::DimpStatic => {
            let cfg = TrainConfig {
                loss: LossKind::Ce,
                ..model.clone()
            };
            train(train_ds, &cfg, &WeightProvider::Uniform)?.0
        }
    };
    let quality = score_dataset(&qc, train_ds)?;
    let diversity = score_dataset(&denominator, train_ds)?;
    let table = imp_weight_table(&quality, &diversity, model.weight_floor, model.weight_cap)?;
    let mut rows = score_rows(train_ds, &quality, &diversity, table.weights());
    rows.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.index.cmp(&b.index)));
    Ok(rows)
}

pub fn score_command(
    train_path: &Path,
    small_real_path: &Path,
    mode: ScoreMode,
    options: LoadOptions,
    model: &TrainConfig,
    checker: &CheckerSettings,
    out: impl Write,
) -> Result<Vec<ScoreRow>> {
    let train_ds = load_dataset(train_path, Format::from_path(train_path), options)?;
    let pinned = LoadOptions {
        num_classes: options.num_classes,
        feature_dim: Some(train_ds.feature_dim()),
    };
    let small = load_dataset(small_real_path, Format::from_path(small_real_path), pinned)?;
    let rows = score_examples(&train_ds, &small, mode, model, checker)?;
    write_scores(&rows, out)?;
    Ok(rows)
}

/// Which third of the noisy training set an example came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NoiseGroup {
    Original,
    Swapped,
    Duplicated,
}

impl NoiseGroup {
    pub const ALL: [NoiseGroup; 3] = [NoiseGroup::Original, NoiseGroup::Swapped, NoiseGroup::Duplicated];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseGroup::Original => "original",
            NoiseGroup::Swapped => "swapped",
            NoiseGroup::Duplicated => "duplicated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStudyConfig {
    /// Template; each study seed replaces `world.seed`.
    pub world: WorldSpec,
    pub train_n: usize,
    pub small_real_n: usize,
    pub test_n: usize,
    pub train: TrainConfig,
    pub checker: CheckerSettings,
    pub losses: Vec<LossKind>,
    /// Skip the noise injection; every example stays in the original group.
    pub clean_only: bool,
    pub seeds: Vec<u64>,
}

impl Default for NoiseStudyConfig {
    fn default() -> Self {
        NoiseStudyConfig {
            world: WorldSpec {
                k: 64,
                d: 96,
                nnz: Some(12),
                label_shift: 0.0,
                ..Default::default()
            },
            train_n: 192,
            small_real_n: 300,
            test_n: 2000,
            train: TrainConfig::default(),
            checker: CheckerSettings {
                epochs: 30,
                ..Default::default()
            },
            losses: vec![LossKind::Ce, LossKind::Focal { gamma: 2.0 }, LossKind::Imp, LossKind::Dimp],
            clean_only: false,
            seeds: (1..=20).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GroupMeans {
    pub n: usize,
    pub quality: f64,
    pub diversity: f64,
    pub imp_weight: f64,
}

#[derive(Debug, Clone)]
pub struct NoiseSeedResult {
    pub seed: u64,
    pub groups: BTreeMap<NoiseGroup, GroupMeans>,
    /// (group, epoch) -> (mean DIMP weight, mean model probability of the label).
    pub dimp_series: BTreeMap<(NoiseGroup, usize), (f64, f64)>,
    pub evals: Vec<(LossKind, EvalReport)>,
}

/// Clean P-samples split in thirds: kept, label-swapped, duplicated.
pub fn build_noisy_set(clean: &Dataset, seed: u64, clean_only: bool) -> Result<(Dataset, Vec<NoiseGroup>)> {
    if clean_only {
        return Ok((clean.clone(), vec![NoiseGroup::Original; clean.len()]));
    }
    let third = 1.0 / 3.0;
    let parts = split(clean, &[third, third, 1.0 - 2.0 * third], seed)?;
    let swapped = crate::synthworld::inject_label_swap(&parts[1], 1.0, seed)?;
    let duplicated = crate::synthworld::inject_duplicates(&parts[2], 1.0, seed)?;
    let mut groups = vec![NoiseGroup::Original; parts[0].len()];
    groups.extend(std::iter::repeat_n(NoiseGroup::Swapped, swapped.len()));
    groups.extend(std::iter::repeat_n(NoiseGroup::Duplicated, duplicated.len()));
    let noisy = parts[0].concat(&swapped)?.concat(&duplicated)?;
    Ok((noisy, groups))
}

pub fn noise_study_seed(cfg: &NoiseStudyConfig, seed: u64) -> Result<NoiseSeedResult> {
    let world = make_world(&WorldSpec { seed, ..cfg.world })?;
    let clean = sample(&world, Which::P, cfg.train_n, derive_seed(seed, 11))?;
    let small_real = sample(&world, Which::P, cfg.small_real_n, derive_seed(seed, 12))?;
    let test = sample(&world, Which::P, cfg.test_n, derive_seed(seed, 13))?;
    let (noisy, groups) = build_noisy_set(&clean, seed, cfg.clean_only)?;

    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let checker_cfg = cfg.checker.train_config(&train_cfg, derive_seed(seed, 0xc4ec));
    let qc = fit_quality_checker(&small_real, &checker_cfg)?;
    let dc = fit_diversity_checker(&noisy, &checker_cfg)?;
    let quality = score_dataset(&qc, &noisy)?;
    let diversity = score_dataset(&dc, &noisy)?;
    let table = imp_weight_table(&quality, &diversity, train_cfg.weight_floor, train_cfg.weight_cap)?;

    let mut sums: BTreeMap<NoiseGroup, GroupMeans> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        let e = sums.entry(*g).or_default();
        e.n += 1;
        e.quality += quality[i];
        e.diversity += diversity[i];
        e.imp_weight += table.weights()[i];
    }
    for m in sums.values_mut() {
        let n = m.n as f64;
        m.quality /= n;
        m.diversity /= n;
        m.imp_weight /= n;
    }

    let mut evals = Vec::new();
    let mut series_sums: BTreeMap<(NoiseGroup, usize), (f64, f64, usize)> = BTreeMap::new();
    for &loss in &cfg.losses {
        let cfg_l = TrainConfig {
            loss,
            ..train_cfg.clone()
        };
        let provider = match loss {
            LossKind::Ce => WeightProvider::Uniform,
            LossKind::Focal { gamma } => WeightProvider::Focal { gamma },
            LossKind::Imp => WeightProvider::Precomputed(table.clone()),
            LossKind::Dimp => make_dimp_provider(&quality, cfg_l.weight_floor, cfg_l.weight_cap)?,
        };
        let mut trainer = Trainer::new(&noisy, &cfg_l, &provider);
        if loss == LossKind::Dimp {
            let groups = &groups;
            let series = &mut series_sums;
            trainer = trainer.observe(move |rec| {
                for (k, &i) in rec.indices.iter().enumerate() {
                    let e = series.entry((groups[i], rec.epoch)).or_insert((0.0, 0.0, 0));
                    e.0 += rec.weights[k];
                    e.1 += rec.p_true[k];
                    e.2 += 1;
                }
            });
        }
        let (params, _) = trainer.run()?;
        evals.push((loss, evaluate(&params, &test)?));
    }
    let dimp_series = series_sums
        .into_iter()
        .map(|(k, (w, p, n))| (k, (w / n as f64, p / n as f64)))
        .collect();
    Ok(NoiseSeedResult {
        seed,
        groups: sums,
        dimp_series,
        evals,
    })
}

#[derive(Debug)]
pub struct NoiseStudyReport {
    /// One entry per study seed; a failed seed keeps its number and message.
    pub seeds: Vec<std::result::Result<NoiseSeedResult, (u64, String)>>,
}

impl NoiseStudyReport {
    pub fn all_ok(&self) -> bool {
        self.seeds.iter().all(|s| s.is_ok())
    }

    pub fn write_summary(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["seed", "group", "n", "mean_quality", "mean_diversity", "mean_imp_weight"])?;
        for r in self.seeds.iter().flatten() {
            for (g, m) in &r.groups {
                out.write_record([
                    r.seed.to_string(),
                    g.as_str().to_string(),
                    m.n.to_string(),
                    m.quality.to_string(),
                    m.diversity.to_string(),
                    m.imp_weight.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_evals(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["seed", "loss", "status", "accuracy", "macro_f1"])?;
        for s in &self.seeds {
            match s {
                Ok(r) => {
                    for (loss, e) in &r.evals {
                        out.write_record([
                            r.seed.to_string(),
                            loss.to_string(),
                            "ok".into(),
                            e.accuracy.to_string(),
                            e.macro_f1.to_string(),
                        ])?;
                    }
                }
                Err((seed, msg)) => out.write_record([&seed.to_string(), "", &format!("error: {msg}"), "", ""])?,
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Tidy per-epoch DIMP series averaged over seeds: `group,epoch,quantity,value`.
    pub fn write_plot_data(&self, w: impl Write) -> Result<()> {
        let mut acc: BTreeMap<(NoiseGroup, usize), (f64, f64, usize)> = BTreeMap::new();
        for r in self.seeds.iter().flatten() {
            for (k, (wt, p)) in &r.dimp_series {
                let e = acc.entry(*k).or_insert((0.0, 0.0, 0));
                e.0 += wt;
                e.1 += p;
                e.2 += 1;
            }
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["group", "epoch", "quantity", "value"])?;
        for ((g, epoch), (wt, p, n)) in acc {
            let n = n as f64;
            out.write_record([g.as_str(), &epoch.to_string(), "dimp_weight", &(wt / n).to_string()])?;
            out.write_record([g.as_str(), &epoch.to_string(), "dimp_model_prob", &(p / n).to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn noise_study(cfg: &NoiseStudyConfig) -> Result<NoiseStudyReport> {
    cfg.train.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::validation("noise study needs at least one seed"));
    }
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&s| noise_study_seed(cfg, s).map_err(|e| (s, e.to_string())))
        .collect();
    Ok(NoiseStudyReport { seeds })
}

pub fn noise_study_command(cfg: &NoiseStudyConfig, output_dir: &Path) -> Result<NoiseStudyReport> {
    let report = noise_study(cfg)?;
    write_atomic(&output_dir.join("summary.csv"), &to_bytes(|b| report.write_summary(b))?)?;
    write_atomic(&output_dir.join("evals.csv"), &to_bytes(|b| report.write_evals(b))?)?;
    write_atomic(&output_dir.join("plot_data.csv"), &to_bytes(|b| report.write_plot_data(b))?)?;
    Ok(report)
}
