//! Training harness: Adam, global-norm clipping, multi-seed runs with
//! hard-mode validation and best-checkpoint retention.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{self, load_batches, ordered_batches, Batch, DataError, SampleRecord};
use crate::gradcore::{GradError, Gradients, Graph, ParameterSet};
use crate::models::{self, Architecture, ModelCheckpoint, ModelConfig, ModelError, Mode, NoNoise};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("non-finite loss for seed {seed} at epoch {epoch}, batch {batch} (loss {loss}); gradient norms: {}", format_norms(.grad_norms))]
    NonFinite {
        seed: u64,
        epoch: usize,
        batch: usize,
        loss: f64,
        grad_norms: Vec<(String, f64)>,
    },
}

fn format_norms(norms: &[(String, f64)]) -> String {
    norms
        .iter()
        .map(|(p, n)| format!("{p}={n:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seeds: Vec<u64>,
    pub tau: f64,
    pub straight_through: bool,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Relational,
            epochs: 300,
            batch_size: 128,
            learning_rate: 1e-4,
            clip_norm: 10.0,
            seeds: vec![1, 2, 3],
            tau: 1.0,
            straight_through: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        Ok(())
    }

    /// Model configuration for this run; `n_max` sizes the DeepSym baseline.
    pub fn model_config(&self, n_max: usize) -> ModelConfig {
        ModelConfig {
            tau: self.tau,
            straight_through: self.straight_through,
            ..ModelConfig::new(self.arch).with_n_max(n_max)
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<(), GradError> {
        for (path, g) in grads.iter() {
            let n = params.get(path)?.numel();
            if g.len() != n {
                return Err(GradError::Dimension(format!(
                    "{path}: {} gradient values for {n} parameters",
                    g.len()
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        let (b1, b2) = (self.beta1, self.beta2);
        for (path, g) in grads.iter() {
            let m = self.m.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let p = params.get_mut(path)?.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_by_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean soft-mode loss over the epoch's training samples.
    pub train_loss: f64,
    /// Hard-mode validation loss, on evaluation epochs.
    pub val_loss: Option<f64>,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Parameters at the epoch with the lowest validation loss.
    pub best: ModelCheckpoint,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameters after the last epoch.
    pub last: ModelCheckpoint,
    pub log: Vec<EpochLog>,
}

/// Independent random streams per seed: initialisation uses the seed
/// itself, shuffling and Gumbel noise get their own streams.
fn shuffle_seed(seed: u64) -> u64 {
    seed ^ 0x5348_5546_464c_4500
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x4e4f_4953_45);
    rng
}

/// Mean per-sample loss of `ckpt` over `records` in hard mode.
pub fn evaluate_loss(ckpt: &ModelCheckpoint, records: &[SampleRecord], batch_size: usize) -> Result<f64, TrainError> {
    if records.is_empty() {
        return Err(TrainError::Config("evaluation split is empty".into()));
    }
    let mut total = 0.0;
    for b in ordered_batches(records, batch_size)? {
        let mut g = Graph::inference();
        let out = models::forward(&mut g, ckpt, &b, Mode::Hard, &mut NoNoise)?;
        let l = models::loss(&mut g, out.effects, &b)?;
        total += g.scalar_value(l)? * b.size as f64;
    }
    Ok(total / records.len() as f64)
}

fn group_norms(grads: &Gradients) -> Vec<(String, f64)> {
    grads
        .iter()
        .map(|(p, g)| (p.clone(), g.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect()
}

/// Trains one seed. `on_epoch` sees every log line as it is produced.
pub fn train_seed(
    cfg: &TrainConfig,
    model: &ModelConfig,
    train: &[SampleRecord],
    val: &[SampleRecord],
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<SeedOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("train and validation splits must be non-empty".into()));
    }
    let mut ckpt = ModelCheckpoint::new(model.clone(), seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = noise_rng(seed);
    let mut best: Option<(ModelCheckpoint, usize, f64)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut norm_max: f64 = 0.0;
        let mut batches = 0usize;
        let shuffle = shuffle_seed(seed).wrapping_add(epoch as u64);
        for (bi, b) in load_batches(train, cfg.batch_size, shuffle)?.enumerate() {
            let (l, mut grads) = loss_and_grads(&ckpt, &b, &mut rng)?;
            if !l.is_finite() || grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
                return Err(TrainError::NonFinite {
                    seed,
                    epoch,
                    batch: bi,
                    loss: l,
                    grad_norms: group_norms(&grads),
                });
            }
            let norm = clip_by_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut ckpt.params, &grads)?;
            loss_sum += l * b.size as f64;
            norm_sum += norm;
            norm_max = norm_max.max(norm);
            batches += 1;
        }
        let val_loss = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let v = evaluate_loss(&ckpt, val, cfg.batch_size)?;
            if !v.is_finite() {
                return Err(TrainError::NonFinite {
                    seed,
                    epoch,
                    batch: batches,
                    loss: v,
                    grad_norms: Vec::new(),
                });
            }
            if best.as_ref().is_none_or(|(_, _, b)| v < *b) {
                best = Some((ckpt.clone(), epoch, v));
            }
            Some(v)
        } else {
            None
        };
        let line = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            grad_norm_mean: norm_sum / batches as f64,
            grad_norm_max: norm_max,
        };
        on_epoch(&line);
        log.push(line);
    }
    let (best, best_epoch, best_val_loss) = best.expect("last epoch is always evaluated");
    Ok(SeedOutcome {
        seed,
        best,
        best_epoch,
        best_val_loss,
        last: ckpt,
        log,
    })
}

/// Soft-mode loss and parameter gradients on one batch.
pub fn loss_and_grads(
    ckpt: &ModelCheckpoint,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients), TrainError> {
    let mut g = Graph::new();
    let out = models::forward(&mut g, ckpt, batch, Mode::Soft, rng)?;
    let l = models::loss(&mut g, out.effects, batch)?;
    let value = g.scalar_value(l)?;
    let grads = g.backward(l, &ckpt.params)?;
    Ok((value, grads))
}

/// `{arch}_{dataset}_{seed}`.
pub fn checkpoint_name(arch: Architecture, dataset: &str, seed: u64) -> String {
    format!("{arch}_{dataset}_{seed}")
}

/// Files written for one seed.
#[derive(Clone, Debug)]
pub struct SeedArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub outcome: SeedOutcome,
}

/// Trains one seed and writes `{name}.ckpt` (best validation parameters)
/// and `{name}.log.jsonl` into `out_dir`.
pub fn train_to_dir(
    cfg: &TrainConfig,
    dataset: &datasets::Dataset,
    dataset_name: &str,
    seed: u64,
    out_dir: &Path,
) -> Result<SeedArtifacts, TrainError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let splits = dataset.splits()?;
    let model = cfg.model_config(dataset.manifest.variant.max_objects());
    let name = checkpoint_name(cfg.arch, dataset_name, seed);
    let log_path = out_dir.join(format!("{name}.log.jsonl"));
    let mut log_file = fs::File::create(&log_path).map_err(io(&log_path))?;
    let mut write_err = None;
    let outcome = train_seed(cfg, &model, &splits.train, &splits.val, seed, |line| {
        let mut s = serde_json::to_string(line).expect("log lines serialise");
        s.push('\n');
        if let Err(e) = log_file.write_all(s.as_bytes()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io(&log_path)(e));
    }
    let ckpt_path = out_dir.join(format!("{name}.ckpt"));
    outcome.best.save(&ckpt_path)?;
    Ok(SeedArtifacts {
        checkpoint: ckpt_path,
        log: log_path,
        outcome,
    })
}
