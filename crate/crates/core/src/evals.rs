//! Effect error, Welch's t-test and multi-step rollout.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datasets::{ordered_batches, Batch, DataError, SampleRecord};
use crate::models::{predict, Architecture, ModelCheckpoint, ModelError};
use crate::simenv::{self, relative_features, ActionSpec, SimError, WorldState};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0}")]
    Empty(String),
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Batch size used for evaluation passes; results do not depend on it.
const EVAL_BATCH: usize = 256;

/// Post-pick height (cm) above which an object is treated as carried
/// during rollout. Carried blocks sit at the carry clearance plus half
/// their height; resting blocks never reach it.
pub const PICKED_HEIGHT: f64 = simenv::CARRY_CLEARANCE;

/// Mean over samples and real objects of the summed absolute error over
/// the six effect dimensions. `predicted` is laid out like `batch.effects`.
pub fn batch_effect_error(predicted: &[f64], batch: &Batch) -> (f64, usize) {
    let mut total = 0.0;
    let mut objects = 0;
    for s in 0..batch.size {
        for i in 0..batch.counts[s] {
            let r = (s * batch.n_pad + i) * 6;
            total += (0..6)
                .map(|d| (predicted[r + d] - batch.effects[r + d]).abs())
                .sum::<f64>();
            objects += 1;
        }
    }
    (total, objects)
}

/// Hard-mode effect error (cm) of `ckpt` over `records`.
pub fn effect_error(ckpt: &ModelCheckpoint, records: &[SampleRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("effect error of an empty split".into()));
    }
    let mut total = 0.0;
    let mut objects = 0;
    for b in ordered_batches(records, EVAL_BATCH)? {
        let p = predict(ckpt, &b)?;
        let (t, o) = batch_effect_error(&p, &b);
        total += t;
        objects += o;
    }
    Ok(total / objects as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t-test.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult, EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::Argument("welch_t needs at least two values per sample".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EvalError::Argument("welch_t samples must be finite".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            WelchResult { t: 0.0, df: f64::INFINITY, p: 1.0 }
        } else {
            WelchResult {
                t: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
                df: f64::INFINITY,
                p: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| EvalError::Argument(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchResult { t, df, p })
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectErrorSummary {
    pub dataset: String,
    pub arch: Architecture,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

impl EffectErrorSummary {
    pub fn new(dataset: &str, arch: Architecture, per_seed: Vec<(u64, f64)>) -> Result<Self, EvalError> {
        if per_seed.len() < 2 {
            return Err(EvalError::Argument("a summary needs at least two seeds".into()));
        }
        let values: Vec<f64> = per_seed.iter().map(|&(_, v)| v).collect();
        let (mean, var) = mean_var(&values);
        Ok(Self {
            dataset: dataset.to_string(),
            arch,
            per_seed,
            mean,
            std: var.sqrt(),
        })
    }

    pub fn values(&self) -> Vec<f64> {
        self.per_seed.iter().map(|&(_, v)| v).collect()
    }
}

/// `dataset,architecture,seed,metric,value` rows.
pub fn results_table(summaries: &[EffectErrorSummary]) -> String {
    let mut out = String::from("dataset,architecture,seed,metric,value\n");
    for s in summaries {
        for (seed, v) in &s.per_seed {
            let _ = writeln!(out, "{},{},{seed},effect_error,{v}", s.dataset, s.arch);
        }
        let _ = writeln!(out, "{},{},all,effect_error_mean,{}", s.dataset, s.arch, s.mean);
        let _ = writeln!(out, "{},{},all,effect_error_std,{}", s.dataset, s.arch, s.std);
    }
    out
}

/// Anything that maps a state and an action to per-object effects.
pub trait EffectPredictor {
    fn predict_effects(&mut self, state: &WorldState, action: &ActionSpec) -> Result<Vec<[f64; 6]>, EvalError>;
}

/// A checkpoint in hard mode.
pub struct ModelPredictor<'a>(pub &'a ModelCheckpoint);

impl EffectPredictor for ModelPredictor<'_> {
    fn predict_effects(&mut self, state: &WorldState, action: &ActionSpec) -> Result<Vec<[f64; 6]>, EvalError> {
        let features = relative_features(state, action);
        let batch = Batch::single(&features, action.one_hot()?, (action.grasp_index, action.target_index));
        let p = predict(self.0, &batch)?;
        Ok(p.chunks(6).map(|c| c.try_into().expect("6-wide rows")).collect())
    }
}

/// The simulator itself.
pub struct OraclePredictor;

impl EffectPredictor for OraclePredictor {
    fn predict_effects(&mut self, state: &WorldState, action: &ActionSpec) -> Result<Vec<[f64; 6]>, EvalError> {
        Ok(simenv::execute(state, action)?.1.per_object)
    }
}

/// Predicts no motion at all.
pub struct ZeroPredictor;

impl EffectPredictor for ZeroPredictor {
    fn predict_effects(&mut self, state: &WorldState, _action: &ActionSpec) -> Result<Vec<[f64; 6]>, EvalError> {
        Ok(vec![[0.0; 6]; state.blocks.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub initial: WorldState,
    pub actions: Vec<ActionSpec>,
    /// Per step, predicted absolute object positions after the action.
    pub predicted: Vec<Vec<[f64; 3]>>,
    /// Per step, simulator positions after the action.
    pub truth: Vec<Vec<[f64; 3]>>,
    /// Per step, mean per-object Euclidean distance between the two.
    pub errors: Vec<f64>,
}

fn positions(state: &WorldState) -> Vec<[f64; 3]> {
    state.blocks.iter().map(|b| b.pos).collect()
}

/// Mean per-object Euclidean distance.
pub fn position_error(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .sum();
    total / a.len() as f64
}

/// Applies predicted effects to `state`. Objects whose predicted height
/// after the pick phase exceeds [`PICKED_HEIGHT`] are also carried to the release point
/// (target x plus the release offset, target y).
pub fn apply_effects(state: &WorldState, action: &ActionSpec, effects: &[[f64; 6]]) -> WorldState {
    let target = state.blocks[action.target_index].pos;
    let mut next = state.clone();
    for (b, e) in next.blocks.iter_mut().zip(effects) {
        let picked = b.pos[2] + e[2] > PICKED_HEIGHT;
        // Translating to the release point replaces x/y exactly, which is
        // the same as adding (x_t + off - x, y_t - y) without rounding.
        let (x, y) = if picked {
            (target[0] + action.release_offset, target[1])
        } else {
            (b.pos[0], b.pos[1])
        };
        b.pos = [x + e[0] + e[3], y + e[1] + e[4], b.pos[2] + e[2] + e[5]];
    }
    next
}

/// Rolls `actions` forward from `initial`, feeding predictions back into
/// the state, with the simulator advanced alongside.
pub fn rollout<P: EffectPredictor + ?Sized>(
    predictor: &mut P,
    initial: &WorldState,
    actions: &[ActionSpec],
) -> Result<RolloutTrace, EvalError> {
    let mut pred = initial.clone();
    let mut truth = initial.clone();
    let mut trace = RolloutTrace {
        initial: initial.clone(),
        actions: actions.to_vec(),
        predicted: Vec::with_capacity(actions.len()),
        truth: Vec::with_capacity(actions.len()),
        errors: Vec::with_capacity(actions.len()),
    };
    for a in actions {
        let effects = predictor.predict_effects(&pred, a)?;
        pred = apply_effects(&pred, a, &effects);
        truth = simenv::execute(&truth, a)?.0;
        let (p, t) = (positions(&pred), positions(&truth));
        trace.errors.push(position_error(&p, &t));
        trace.predicted.push(p);
        trace.truth.push(t);
    }
    Ok(trace)
}

/// Seeded scenes with random index-based action sequences, shared by every
/// predictor in a comparison.
pub fn rollout_episodes(
    n_objects: usize,
    n_scenes: usize,
    n_actions: usize,
    seed: u64,
) -> Result<Vec<(WorldState, Vec<ActionSpec>)>, EvalError> {
    (0..n_scenes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let scene = simenv::spawn_scene(n_objects, &mut rng)?;
            let actions = (0..n_actions).map(|_| ActionSpec::random(n_objects, &mut rng)).collect();
            Ok((scene, actions))
        })
        .collect()
}

/// Mean and standard deviation of rollout error per horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub label: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ErrorCurve {
    /// Horizons at which the mean error drops below the previous one.
    pub fn inversions(&self) -> usize {
        self.mean.windows(2).filter(|w| w[1] < w[0]).count()
    }
}

pub fn error_curve<P: EffectPredictor + ?Sized>(
    label: &str,
    predictor: &mut P,
    episodes: &[(WorldState, Vec<ActionSpec>)],
) -> Result<ErrorCurve, EvalError> {
    let horizon = episodes.first().map_or(0, |e| e.1.len());
    if episodes.is_empty() || horizon == 0 {
        return Err(EvalError::Empty("no rollout episodes".into()));
    }
    let mut errs = vec![Vec::with_capacity(episodes.len()); horizon];
    for (scene, actions) in episodes {
        let trace = rollout(predictor, scene, actions)?;
        for (k, e) in trace.errors.into_iter().enumerate() {
            errs[k].push(e);
        }
    }
    let n = episodes.len() as f64;
    let mean: Vec<f64> = errs.iter().map(|e| e.iter().sum::<f64>() / n).collect();
    let std = errs
        .iter()
        .zip(&mean)
        .map(|(e, m)| (e.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    Ok(ErrorCurve {
        label: label.to_string(),
        mean,
        std,
    })
}

/// Error curves for every checkpoint over the same episodes.
pub fn error_vs_actions(
    ckpts: &[(String, &ModelCheckpoint)],
    n_objects: usize,
    n_actions_max: usize,
    n_scenes: usize,
    seed: u64,
) -> Result<Vec<ErrorCurve>, EvalError> {
    let episodes = rollout_episodes(n_objects, n_scenes, n_actions_max, seed)?;
    ckpts
        .iter()
        .map(|(label, c)| error_curve(label, &mut ModelPredictor(c), &episodes))
        .collect()
}

/// `horizon,architecture,mean,std` rows.
pub fn curve_table(curves: &[ErrorCurve]) -> String {
    let mut out = String::from("horizon,architecture,mean,std\n");
    for c in curves {
        for (k, (m, s)) in c.mean.iter().zip(&c.std).enumerate() {
            let _ = writeln!(out, "{},{},{m},{s}", k + 1, c.label);
        }
    }
    out
}
