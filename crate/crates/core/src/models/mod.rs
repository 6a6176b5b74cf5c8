//! Effect predictors sharing one interface: per-object features, a discrete
//! action and a padding mask in; per-object 6-dimensional effects out.
//!
//! * [`Architecture::Relational`]: object symbols and binary relation heads
//!   are computed in parallel from raw features, fused by an aggregation
//!   step and decoded per object.
//! * [`Architecture::Attentive`]: softmax self-attention over object symbols.
//! * [`Architecture::DeepSym`]: one fixed-width encoder/decoder over the
//!   whole scene, objects ordered grasped, target, rest.

mod attentive;
mod checkpoint;
mod deepsym;
mod gumbel;
mod relational;

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Batch;
use crate::gradcore::{GradError, Graph, Var};

pub use checkpoint::ModelCheckpoint;
pub use deepsym::scene_order;
pub use gumbel::{gumbel_noise, gumbel_sigmoid, gumbel_sigmoid_values, GumbelConfig, Mode};
pub use relational::{aggregate, attention_logits, attention_weights, encode};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("scene has {n} objects but the model holds at most {n_max}")]
    Capacity { n: usize, n_max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Relational,
    DeepSym,
    Attentive,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::Relational,
        Architecture::Attentive,
        Architecture::DeepSym,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Relational => "relational",
            Architecture::DeepSym => "deepsym",
            Architecture::Attentive => "attentive",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ModelError::Contract(format!("unknown architecture {s:?}")))
    }
}

pub const FEATURE_DIM: usize = 6;
pub const ACTION_DIM: usize = 6;
pub const EFFECT_DIM: usize = 6;

/// Architecture descriptor; stored verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Bits per object symbol.
    pub d_z: usize,
    /// Relation / attention heads.
    pub heads: usize,
    /// Hidden width of every MLP.
    pub hidden: usize,
    /// Query/key width.
    pub key_dim: usize,
    /// Output width of the per-head aggregation MLP.
    pub agg_width: usize,
    /// Object capacity of the DeepSym baseline.
    pub n_max: usize,
    pub tau: f64,
    /// Hard forward values with relaxed gradients during training.
    pub straight_through: bool,
}

impl ModelConfig {
    pub fn new(arch: Architecture) -> Self {
        Self {
            arch,
            d_z: 4,
            heads: 4,
            hidden: 128,
            key_dim: 128,
            agg_width: 128,
            n_max: 4,
            tau: 1.0,
            straight_through: false,
        }
    }

    pub fn with_n_max(mut self, n_max: usize) -> Self {
        self.n_max = n_max;
        self
    }

    /// Same architecture at a reduced width (used by exhaustive gradient checks).
    pub fn narrow(arch: Architecture, width: usize) -> Self {
        Self {
            hidden: width,
            key_dim: width,
            agg_width: width,
            ..Self::new(arch)
        }
    }

    pub fn gumbel(&self, mode: Mode) -> GumbelConfig {
        GumbelConfig {
            tau: self.tau,
            mode,
            straight_through: self.straight_through,
        }
    }
}

/// Graph handles produced by one forward pass. Row order always matches the
/// batch (`[size * n_pad, ...]`).
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[rows, 6]` predicted effects.
    pub effects: Var,
    /// `[rows, d_z]` object symbols (relational, attentive).
    pub symbols: Option<Var>,
    /// Per head `[size, n_pad, n_pad]` binary relations (relational).
    pub relations: Vec<Var>,
    /// Per head `[size, n_pad, n_pad]` softmax weights (attentive).
    pub attention: Vec<Var>,
    /// `[size, d_z * n_max]` scene code (DeepSym).
    pub scene_code: Option<Var>,
}

/// Runs the checkpoint's architecture on `batch`.
pub fn forward<R: Rng + ?Sized>(
    g: &mut Graph,
    ckpt: &ModelCheckpoint,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput, ModelError> {
    if batch.size == 0 {
        return Err(ModelError::Contract("empty batch".into()));
    }
    match ckpt.config.arch {
        Architecture::Relational => relational::forward(g, ckpt, batch, mode, rng),
        Architecture::Attentive => attentive::forward(g, ckpt, batch, mode, rng),
        Architecture::DeepSym => deepsym::forward(g, ckpt, batch, mode, rng),
    }
}

pub fn relational_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    ckpt: &ModelCheckpoint,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput, ModelError> {
    expect_arch(ckpt, Architecture::Relational)?;
    forward(g, ckpt, batch, mode, rng)
}

pub fn attentive_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    ckpt: &ModelCheckpoint,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput, ModelError> {
    expect_arch(ckpt, Architecture::Attentive)?;
    forward(g, ckpt, batch, mode, rng)
}

pub fn deepsym_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    ckpt: &ModelCheckpoint,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput, ModelError> {
    expect_arch(ckpt, Architecture::DeepSym)?;
    forward(g, ckpt, batch, mode, rng)
}

fn expect_arch(ckpt: &ModelCheckpoint, arch: Architecture) -> Result<(), ModelError> {
    if ckpt.config.arch != arch {
        return Err(ModelError::Contract(format!(
            "expected a {arch} checkpoint, found {}",
            ckpt.config.arch
        )));
    }
    Ok(())
}

/// Masked squared error summed over objects and dimensions, averaged over
/// the samples in the batch.
pub fn loss(g: &mut Graph, predicted: Var, batch: &Batch) -> Result<Var, ModelError> {
    if batch.size == 0 {
        return Err(ModelError::Contract("loss of an empty batch".into()));
    }
    let target = g.input(vec![batch.rows(), EFFECT_DIM], batch.effects.clone())?;
    let mask: Vec<f64> = batch
        .mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, EFFECT_DIM))
        .collect();
    let mask = g.input(vec![batch.rows(), EFFECT_DIM], mask)?;
    let diff = g.sub(predicted, target)?;
    let sq = g.square(diff);
    let masked = g.mul(sq, mask)?;
    let total = g.sum(masked);
    Ok(g.scale(total, 1.0 / batch.size as f64))
}

/// Hard-mode effects for every row of `batch`, `[rows * 6]`.
pub fn predict(ckpt: &ModelCheckpoint, batch: &Batch) -> Result<Vec<f64>, ModelError> {
    let mut g = Graph::inference();
    let out = forward(&mut g, ckpt, batch, Mode::Hard, &mut NoNoise)?;
    Ok(g.value(out.effects).to_vec())
}

/// Random source for hard mode, which never samples.
pub struct NoNoise;

impl rand::RngCore for NoNoise {
    fn next_u32(&mut self) -> u32 {
        unreachable!("hard mode draws no noise")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("hard mode draws no noise")
    }

    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("hard mode draws no noise")
    }
}

/// Object rows repeated action vectors, `[rows, 6]`.
pub(crate) fn action_rows(g: &mut Graph, batch: &Batch) -> Result<Var, GradError> {
    let mut data = Vec::with_capacity(batch.rows() * ACTION_DIM);
    for s in 0..batch.size {
        let a = &batch.actions[s * ACTION_DIM..(s + 1) * ACTION_DIM];
        for _ in 0..batch.n_pad {
            data.extend_from_slice(a);
        }
    }
    g.input(vec![batch.rows(), ACTION_DIM], data)
}

/// `[size, n_pad, n_pad]` mask with 1 where both objects are real.
pub(crate) fn pair_mask(batch: &Batch) -> Vec<f64> {
    let n = batch.n_pad;
    let mut out = Vec::with_capacity(batch.size * n * n);
    for s in 0..batch.size {
        let m = &batch.mask[s * n..(s + 1) * n];
        for i in 0..n {
            for l in 0..n {
                out.push(m[i] * m[l]);
            }
        }
    }
    out
}

/// Orders each sample's real objects lexicographically by feature row, so
/// that any permutation of the input reaches the same arithmetic.
///
/// Returns the reordered batch and, per sample, the canonical position of
/// every original object.
pub(crate) fn canonicalize(batch: &Batch) -> (Batch, Vec<Vec<usize>>) {
    let n = batch.n_pad;
    let mut out = batch.clone();
    let mut positions = Vec::with_capacity(batch.size);
    for s in 0..batch.size {
        let count = batch.counts[s];
        let mut order: Vec<usize> = (0..count).collect();
        order.sort_by(|&a, &b| {
            let ra = batch.feature_row(s, a);
            let rb = batch.feature_row(s, b);
            ra.iter()
                .zip(rb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        });
        let mut pos: Vec<usize> = (0..n).collect();
        for (c, &orig) in order.iter().enumerate() {
            pos[orig] = c;
            let dst = (s * n + c) * 6;
            let src = (s * n + orig) * 6;
            out.features[dst..dst + 6].copy_from_slice(&batch.features[src..src + 6]);
            out.effects[dst..dst + 6].copy_from_slice(&batch.effects[src..src + 6]);
        }
        let (gr, tg) = batch.roles[s];
        out.roles[s] = (pos[gr], pos[tg]);
        positions.push(pos);
    }
    (out, positions)
}

/// Maps canonical-order rows `[size * n_pad, width]` back to batch order.
pub(crate) fn uncanonical_rows(
    g: &mut Graph,
    v: Var,
    positions: &[Vec<usize>],
    n: usize,
) -> Result<Var, GradError> {
    let index = positions
        .iter()
        .enumerate()
        .flat_map(|(s, pos)| pos.iter().map(move |&p| Some(s * n + p)))
        .collect();
    g.gather_rows(v, index)
}

/// Maps canonical-order `[size, n, n]` matrices back to batch order.
pub(crate) fn uncanonical_pairs(
    g: &mut Graph,
    v: Var,
    positions: &[Vec<usize>],
    n: usize,
) -> Result<Var, GradError> {
    let mut index = Vec::with_capacity(positions.len() * n * n);
    for (s, pos) in positions.iter().enumerate() {
        for i in 0..n {
            for l in 0..n {
                index.push(Some(s * n * n + pos[i] * n + pos[l]));
            }
        }
    }
    g.gather(v, vec![positions.len(), n, n], index)
}
