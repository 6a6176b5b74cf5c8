//! Command-line pipeline: `gen-data`, `train`, `eval`, `rollout`,
//! `interpret`, `compare`. Each command resolves a [`RunConfig`] from an
//! optional TOML file plus flags, and writes it next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datasets::{self, DataError, Dataset, Variant};
use crate::evals::{self, EvalError, EffectErrorSummary, OraclePredictor};
use crate::interpret::{self, InterpretError};
use crate::models::{Architecture, ModelCheckpoint, ModelError};
use crate::training::{self, checkpoint_name, TrainConfig, TrainError};

pub const RESOLVED_CONFIG: &str = "run_config.toml";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Train(TrainError::NonFinite { .. }) => 3,
            CliError::Train(TrainError::Config(_)) => 1,
            CliError::Eval(EvalError::Argument(_)) => 1,
            _ => 2,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub variant: Variant,
    /// Total samples; the variant's desk-scale count when absent.
    pub count: Option<usize>,
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            variant: Variant::TwoObjects,
            count: None,
            dir: PathBuf::from("data/2obj"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub scenes: usize,
    pub actions: usize,
    pub objects: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            actions: 8,
            objects: 2,
        }
    }
}

/// Fully resolved settings for one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub architectures: Vec<Architecture>,
    pub datasets: Vec<DataConfig>,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
    pub checkpoint_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs"),
            architectures: Architecture::ALL.to_vec(),
            datasets: vec![DataConfig::default()],
            train: TrainConfig::default(),
            rollout: RolloutConfig::default(),
            checkpoint_dir: PathBuf::from("runs/checkpoints"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Writes the resolved config into `dir`.
    pub fn record(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()).map_err(io(&path))
    }

    fn apply(&mut self, o: &Common) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out {
            self.output_dir = d.clone();
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.architectures.is_empty() {
            return Err(CliError::Usage("no architectures selected".into()));
        }
        if self.datasets.is_empty() {
            return Err(CliError::Usage("no datasets selected".into()));
        }
        if self.rollout.scenes == 0 || self.rollout.actions == 0 {
            return Err(CliError::Usage("rollout scenes and actions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "reldeepsym", version, about = "Relational symbol learning from pick-and-place effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// Architectures, comma separated (relational, attentive, deepsym).
    #[arg(long, value_delimiter = ',')]
    pub arch: Vec<Architecture>,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset with its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// 2obj, 3obj, 4obj or mixed.
        #[arg(long)]
        variant: Option<Variant>,
        /// Total sample count (desk-scale default per variant).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train models; writes `{arch}_{dataset}_{seed}.ckpt` and logs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Effect error of checkpoints on a dataset's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint files.
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
    },
    /// Multi-step prediction error against the simulator.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        actions: Option<usize>,
        #[arg(long)]
        objects: Option<usize>,
    },
    /// Symbol and relation activation tables for a checkpoint.
    Interpret {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Effect-error table over architectures and seeds with Welch tests.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Dataset directories.
        #[arg(long, value_delimiter = ',')]
        data: Vec<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
        /// Directory holding (or receiving) checkpoints.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Train checkpoints that do not exist yet.
        #[arg(long)]
        train_missing: bool,
        /// Seeds trained concurrently when training on demand.
        #[arg(long, default_value_t = 1)]
        parallel_seeds: usize,
    },
}

fn base_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(common);
    Ok(cfg)
}

fn apply_train(cfg: &mut RunConfig, f: &TrainFlags) {
    if !f.arch.is_empty() {
        cfg.architectures = f.arch.clone();
    }
    if !f.seeds.is_empty() {
        cfg.train.seeds = f.seeds.clone();
    }
    let t = &mut cfg.train;
    t.epochs = f.epochs.unwrap_or(t.epochs);
    t.batch_size = f.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = f.lr.unwrap_or(t.learning_rate);
    t.tau = f.tau.unwrap_or(t.tau);
    t.eval_every = f.eval_every.unwrap_or(t.eval_every);
}

fn data_dirs(cfg: &mut RunConfig, dirs: &[PathBuf]) -> Result<Vec<Dataset>, CliError> {
    if !dirs.is_empty() {
        cfg.datasets = dirs
            .iter()
            .map(|d| DataConfig {
                dir: d.clone(),
                ..DataConfig::default()
            })
            .collect();
    }
    let mut out = Vec::new();
    for d in &mut cfg.datasets {
        let ds = Dataset::load(&d.dir)?;
        d.variant = ds.manifest.variant;
        d.count = Some(ds.manifest.total);
        out.push(ds);
    }
    Ok(out)
}

/// Runs one parsed command; returns the text printed on success.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::GenData { common, variant, count } => {
            let mut cfg = base_config(&common)?;
            let d = cfg.datasets.first_mut().ok_or_else(|| CliError::Usage("no dataset configured".into()))?;
            if let Some(v) = variant {
                d.variant = v;
            }
            if count.is_some() {
                d.count = count;
            }
            if let Some(o) = &common.out {
                d.dir = o.clone();
            }
            let d = d.clone();
            let total = d.count.unwrap_or(d.variant.desk_count());
            let ds = datasets::generate(d.variant, total, cfg.seed, &d.dir)?;
            cfg.output_dir = d.dir.clone();
            cfg.record(&d.dir)?;
            let c = ds.manifest.counts;
            Ok(format!(
                "{}: {} samples ({} train / {} val / {} test) in {}\n",
                d.variant,
                ds.manifest.total,
                c.train,
                c.val,
                c.test,
                d.dir.display()
            ))
        }
        Command::Train { common, data, flags } => {
            let mut cfg = base_config(&common)?;
            apply_train(&mut cfg, &flags);
            let dirs: Vec<PathBuf> = data.into_iter().collect();
            let sets = data_dirs(&mut cfg, &dirs)?;
            cfg.validate()?;
            let out_dir = cfg.output_dir.clone();
            cfg.record(&out_dir)?;
            let mut report = String::new();
            for ds in &sets {
                for &arch in &cfg.architectures {
                    let tc = TrainConfig { arch, ..cfg.train.clone() };
                    tc.validate()?;
                    for &seed in &tc.seeds {
                        let a = training::train_to_dir(&tc, ds, ds.manifest.variant.as_str(), seed, &out_dir)?;
                        let _ = writeln!(
                            report,
                            "{}: best val {:.6} at epoch {}",
                            a.checkpoint.display(),
                            a.outcome.best_val_loss,
                            a.outcome.best_epoch
                        );
                    }
                }
            }
            Ok(report)
        }
        Command::Eval { common, data, checkpoints } => {
            let mut cfg = base_config(&common)?;
            let dirs: Vec<PathBuf> = data.into_iter().collect();
            let sets = data_dirs(&mut cfg, &dirs)?;
            let ds = &sets[0];
            let test = ds.splits()?.test;
            let mut table = String::from("dataset,architecture,seed,metric,value\n");
            for p in &checkpoints {
                let ck = ModelCheckpoint::load(p)?;
                let e = evals::effect_error(&ck, &test)?;
                let _ = writeln!(table, "{},{},{},effect_error,{e}", ds.manifest.variant, ck.config.arch, ck.seed);
            }
            write_output(&cfg, "effect_error.csv", &table)?;
            Ok(table)
        }
        Command::Rollout { common, checkpoints, scenes, actions, objects } => {
            let mut cfg = base_config(&common)?;
            let r = &mut cfg.rollout;
            r.scenes = scenes.unwrap_or(r.scenes);
            r.actions = actions.unwrap_or(r.actions);
            r.objects = objects.unwrap_or(r.objects);
            cfg.validate()?;
            let loaded = checkpoints
                .iter()
                .map(|p| ModelCheckpoint::load(p).map(|c| (label(p), c)))
                .collect::<Result<Vec<_>, _>>()?;
            let r = &cfg.rollout;
            let episodes = evals::rollout_episodes(r.objects, r.scenes, r.actions, cfg.seed)?;
            let mut curves = vec![evals::error_curve("oracle", &mut OraclePredictor, &episodes)?];
            for (name, ck) in &loaded {
                curves.push(evals::error_curve(name, &mut evals::ModelPredictor(ck), &episodes)?);
            }
            let table = evals::curve_table(&curves);
            write_output(&cfg, "rollout_error.csv", &table)?;
            Ok(table)
        }
        Command::Interpret { common, data, checkpoint } => {
            let mut cfg = base_config(&common)?;
            let dirs: Vec<PathBuf> = data.into_iter().collect();
            let sets = data_dirs(&mut cfg, &dirs)?;
            let test = sets[0].splits()?.test;
            let ck = ModelCheckpoint::load(&checkpoint)?;
            let symbols = interpret::symbol_report(&ck, &test)?;
            let relations = match interpret::relation_report(&ck, &test) {
                Ok(r) => Some(r),
                Err(InterpretError::Unsupported(_)) => None,
                Err(e) => return Err(e.into()),
            };
            cfg.record(&cfg.output_dir)?;
            interpret::write_reports(&cfg.output_dir, &symbols, relations.as_ref())?;
            let mut out = format!("{} objects over {} codes\n", symbols.total, symbols.codes.len());
            for code in symbols.codes.keys() {
                if let Some((kind, p)) = symbols.kind_purity(code) {
                    let _ = writeln!(out, "{code}: {} activations, {:.1}% {}", symbols.count(code), 100.0 * p, kind.as_str());
                }
            }
            if let Some(r) = &relations {
                let _ = writeln!(out, "population dy std {:.3}", r.population_dy_std);
                for (h, s) in r.dy_spread().iter().enumerate() {
                    let _ = writeln!(out, "head {h}: {} pairs, dy std {}", r.heads[h].len(), s.map_or("-".into(), |v| format!("{v:.3}")));
                }
            }
            Ok(out)
        }
        Command::Compare { common, data, flags, checkpoints, train_missing, parallel_seeds } => {
            let mut cfg = base_config(&common)?;
            apply_train(&mut cfg, &flags);
            if let Some(c) = checkpoints {
                cfg.checkpoint_dir = c;
            }
            let sets = data_dirs(&mut cfg, &data)?;
            cfg.validate()?;
            if parallel_seeds == 0 {
                return Err(CliError::Usage("--parallel-seeds must be at least 1".into()));
            }
            let out = compare(&cfg, &sets, train_missing, parallel_seeds)?;
            write_output(&cfg, "compare.csv", &out)?;
            Ok(out)
        }
    }
}

fn label(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn write_output(cfg: &RunConfig, name: &str, body: &str) -> Result<(), CliError> {
    cfg.record(&cfg.output_dir)?;
    let path = cfg.output_dir.join(name);
    fs::write(&path, body).map_err(io(&path))
}

/// Ensures a checkpoint per (dataset, architecture, seed), training missing
/// ones when allowed, then tabulates test effect errors and pairwise Welch
/// tests.
pub fn compare(cfg: &RunConfig, sets: &[Dataset], train_missing: bool, parallel: usize) -> Result<String, CliError> {
    let dir = &cfg.checkpoint_dir;
    let mut summaries = Vec::new();
    for ds in sets {
        let name = ds.manifest.variant.as_str();
        for &arch in &cfg.architectures {
            let tc = TrainConfig { arch, ..cfg.train.clone() };
            tc.validate()?;
            let path = |seed| dir.join(format!("{}.ckpt", checkpoint_name(arch, name, seed)));
            let missing: Vec<u64> = tc.seeds.iter().copied().filter(|&s| !path(s).exists()).collect();
            if !missing.is_empty() && !train_missing {
                return Err(CliError::Usage(format!(
                    "missing checkpoint {} (pass --train-missing to train it)",
                    path(missing[0]).display()
                )));
            }
            let tc = &tc;
            for chunk in missing.chunks(parallel) {
                std::thread::scope(|s| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|&seed| s.spawn(move || training::train_to_dir(&tc, ds, name, seed, dir).map(|_| ())))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("training thread panicked"))
                        .collect::<Result<Vec<_>, _>>()
                })?;
            }
            let test = ds.splits()?.test;
            let mut per_seed = Vec::new();
            for &seed in &tc.seeds {
                let ck = ModelCheckpoint::load(&path(seed))?;
                per_seed.push((seed, evals::effect_error(&ck, &test)?));
            }
            summaries.push(EffectErrorSummary::new(name, arch, per_seed)?);
        }
    }
    Ok(compare_table(&summaries)?)
}

/// Results rows followed by `dataset,architecture_a,architecture_b,t,df,p`
/// rows for every architecture pair.
pub fn compare_table(summaries: &[EffectErrorSummary]) -> Result<String, EvalError> {
    let mut out = evals::results_table(summaries);
    out.push_str("\ndataset,architecture_a,architecture_b,t,df,p\n");
    for (i, a) in summaries.iter().enumerate() {
        for b in summaries[i + 1..].iter().filter(|b| b.dataset == a.dataset) {
            let w = evals::welch_t(&a.values(), &b.values())?;
            let _ = writeln!(out, "{},{},{},{},{},{}", a.dataset, a.arch, b.arch, w.t, w.df, w.p);
        }
    }
    Ok(out)
}
