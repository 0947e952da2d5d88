use std::fs::{self, File};
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dimp_core::corpus::{load_dataset, Format, LoadOptions};
use dimp_core::experiment::{
    noise_study_command, parse_seed_list, run_experiment, score_command, write_atomic, CheckerSettings, ExperimentConfig,
    NoiseStudyConfig, ScoreMode,
};
use dimp_core::losses::LossKind;
use dimp_core::metrics::evaluate;
use dimp_core::model::{read_checkpoint, TrainConfig};
use dimp_core::synthworld::{make_world, sample, JointWorld, Which, WorldSpec};
use dimp_core::Error;

#[derive(Parser)]
#[command(name = "dimp", version, about = "Importance-weighted training on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (loss, seed) cell of an experiment config.
    Run {
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Rank training examples by weight.
    Score {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        small_real: PathBuf,
        #[arg(long, value_enum, default_value = "imp")]
        mode: ModeArg,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
    /// Label-swap and duplication study on seeded worlds.
    NoiseStudy {
        #[command(flatten)]
        world: StudyWorldArgs,
        #[arg(long, default_value_t = 192)]
        train_n: usize,
        #[arg(long, default_value_t = 300)]
        small_real_n: usize,
        #[arg(long, default_value_t = 2000)]
        test_n: usize,
        #[arg(long, default_value = "1..20")]
        seeds: String,
        #[arg(long, default_value = "ce,focal:2,imp,dimp")]
        losses: String,
        /// Train on clean samples only (control run).
        #[arg(long)]
        clean_only: bool,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
    /// Build a finite (P, Q) world and write it as jsonl.
    MakeWorld {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "world.jsonl")]
        output: PathBuf,
    },
    /// Draw a labelled dataset from a world file.
    Sample {
        #[arg(long)]
        world: PathBuf,
        #[arg(long, value_enum)]
        which: WhichArg,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and write one EvalReport row.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct WorldArgs {
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    c: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long)]
    nnz: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    covariate_shift: f64,
    #[arg(long, default_value_t = 0.5)]
    label_shift: f64,
}

/// World flags for the noise study. Unset flags keep the study's own world.
#[derive(Args)]
struct StudyWorldArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    nnz: Option<usize>,
    #[arg(long)]
    covariate_shift: Option<f64>,
    #[arg(long)]
    label_shift: Option<f64>,
}

impl StudyWorldArgs {
    fn apply(&self, base: WorldSpec) -> WorldSpec {
        WorldSpec {
            k: self.k.unwrap_or(base.k),
            c: self.c.unwrap_or(base.c),
            d: self.d.unwrap_or(base.d),
            nnz: self.nnz.or(base.nnz),
            covariate_shift: self.covariate_shift.unwrap_or(base.covariate_shift),
            label_shift: self.label_shift.unwrap_or(base.label_shift),
            ..base
        }
    }
}

impl WorldArgs {
    fn spec(&self, seed: u64) -> WorldSpec {
        WorldSpec {
            k: self.k,
            c: self.c,
            d: self.d,
            nnz: self.nnz,
            covariate_shift: self.covariate_shift,
            label_shift: self.label_shift,
            seed,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden_units: Option<usize>,
    #[arg(long)]
    checker_epochs: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, mut cfg: TrainConfig, checker: &mut CheckerSettings) -> TrainConfig {
        if let Some(h) = self.hidden_units {
            cfg = TrainConfig {
                seed: cfg.seed,
                ..TrainConfig::one_hidden(h)
            };
        }
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.learning_rate = self.learning_rate.unwrap_or(cfg.learning_rate);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        if let Some(e) = self.checker_epochs {
            checker.epochs = e;
        }
        cfg
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Imp,
    DimpStatic,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    P,
    Q,
}

/// Exit status: config problems are 2, everything else that fails is 1.
fn status_for(err: &Error) -> u8 {
    match err {
        Error::Validation(_) | Error::Parse { .. } | Error::EmptyDataset | Error::File { .. } | Error::Json(_) | Error::Csv(_) => 2,
        _ => 1,
    }
}

fn fail(err: Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(status_for(&err))
}

fn config_fail(err: Error) -> ExitCode {
    eprintln!("config error: {err}");
    ExitCode::from(2)
}

fn config_from(config: Option<&Path>, overrides: &[String], output_dir: Option<PathBuf>) -> dimp_core::Result<ExperimentConfig> {
    let mut text = match config {
        Some(p) => fs::read_to_string(p).map_err(|source| Error::File {
            path: p.to_path_buf(),
            source,
        })?,
        None => String::new(),
    };
    for o in overrides {
        if !o.contains('=') {
            return Err(Error::validation(format!("override {o:?} is not KEY=VALUE")));
        }
        text.push('\n');
        text.push_str(o);
    }
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            overrides,
            output_dir,
        } => {
            let cfg = match config_from(config.as_deref(), &overrides, output_dir) {
                Ok(c) => c,
                Err(e) => return config_fail(e),
            };
            match run_experiment(&cfg) {
                Ok(report) => {
                    for cell in report.cells.iter() {
                        if let Err(msg) = &cell.outcome {
                            eprintln!("cell {} seed {} failed: {msg}", cell.loss, cell.seed);
                        }
                    }
                    println!("{}", report.report_path.display());
                    if report.all_ok() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Score {
            train,
            small_real,
            mode,
            num_classes,
            feature_dim,
            seed,
            model,
            output_dir,
        } => {
            let mut checker = CheckerSettings::default();
            let cfg = model.apply(TrainConfig::default().with_seed(seed), &mut checker);
            let mode = match mode {
                ModeArg::Imp => ScoreMode::Imp,
                ModeArg::DimpStatic => ScoreMode::DimpStatic,
            };
            let options = LoadOptions {
                num_classes,
                feature_dim,
            };
            let mut buf = Vec::new();
            let result = score_command(&train, &small_real, mode, options, &cfg, &checker, &mut buf)
                .and_then(|_| write_atomic(&output_dir.join("scores.csv"), &buf));
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Command::NoiseStudy {
            world,
            train_n,
            small_real_n,
            test_n,
            seeds,
            losses,
            clean_only,
            model,
            output_dir,
        } => {
            let build = || -> dimp_core::Result<NoiseStudyConfig> {
                let defaults = NoiseStudyConfig::default();
                let mut checker = defaults.checker.clone();
                let train = model.apply(defaults.train.clone(), &mut checker);
                let losses = losses
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse::<LossKind>())
                    .collect::<dimp_core::Result<Vec<_>>>()?;
                let cfg = NoiseStudyConfig {
                    world: world.apply(defaults.world.clone()),
                    train_n,
                    small_real_n,
                    test_n,
                    train,
                    checker,
                    losses,
                    clean_only,
                    seeds: parse_seed_list(&seeds)?,
                };
                cfg.world.validate()?;
                Ok(cfg)
            };
            let cfg = match build() {
                Ok(c) => c,
                Err(e) => return config_fail(e),
            };
            match noise_study_command(&cfg, &output_dir) {
                Ok(r) if r.all_ok() => ExitCode::SUCCESS,
                Ok(_) => ExitCode::from(1),
                Err(e) => fail(e),
            }
        }
        Command::MakeWorld { world, seed, output } => {
            let result = make_world(&world.spec(seed)).and_then(|w| {
                let mut buf = Vec::new();
                w.write_jsonl(&mut buf)?;
                write_atomic(&output, &buf)
            });
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Command::Sample {
            world,
            which,
            n,
            seed,
            output,
        } => {
            let which = match which {
                WhichArg::P => Which::P,
                WhichArg::Q => Which::Q,
            };
            let result = File::open(&world)
                .map_err(|source| Error::File {
                    path: world.clone(),
                    source,
                })
                .and_then(|f| JointWorld::read_jsonl(BufReader::new(f)))
                .and_then(|w| sample(&w, which, n, seed))
                .and_then(|ds| {
                    let mut buf = Vec::new();
                    ds.write_jsonl(&mut buf)?;
                    write_atomic(&output, &buf)
                });
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Command::Eval { params, data, output } => {
            let result = (|| {
                let file = File::open(&params).map_err(|source| Error::File {
                    path: params.clone(),
                    source,
                })?;
                let p = read_checkpoint(BufReader::new(file))?;
                let ds = load_dataset(
                    &data,
                    Format::from_path(&data),
                    LoadOptions {
                        num_classes: Some(p.num_classes()),
                        feature_dim: Some(p.feature_dim()),
                    },
                )?;
                let report = evaluate(&p, &ds)?;
                let mut buf = Vec::new();
                report.write_csv(&mut buf)?;
                match &output {
                    Some(path) => write_atomic(path, &buf),
                    None => {
                        use std::io::Write;
                        io::stdout().write_all(&buf)?;
                        Ok(())
                    }
                }
            })();
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
    }
}
