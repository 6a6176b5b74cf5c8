use rand::Rng;

use super::{
    gumbel_sigmoid, ForwardOutput, ModelCheckpoint, ModelConfig, ModelError, Mode, ACTION_DIM,
    EFFECT_DIM, FEATURE_DIM,
};
use crate::datasets::Batch;
use crate::gradcore::{init_mlp, mlp_forward, Activation, GradError, Graph, LayerSpec, ParameterSet};

fn encoder_spec(cfg: &ModelConfig) -> LayerSpec {
    LayerSpec::two_hidden(FEATURE_DIM * cfg.n_max, cfg.hidden, cfg.d_z * cfg.n_max)
}

fn decoder_spec(cfg: &ModelConfig) -> LayerSpec {
    LayerSpec::two_hidden(cfg.d_z * cfg.n_max + ACTION_DIM, cfg.hidden, EFFECT_DIM * cfg.n_max)
}

pub(crate) fn init_params(params: &mut ParameterSet, cfg: &ModelConfig) -> Result<(), GradError> {
    init_mlp(params, "encoder", &encoder_spec(cfg))?;
    init_mlp(params, "decoder", &decoder_spec(cfg))
}

/// Slot order for one sample: grasped object, then the release target (when
/// distinct), then the rest by planar distance to the grasped object with
/// ties broken by x, then y.
pub fn scene_order(batch: &Batch, sample: usize) -> Vec<usize> {
    let (grasped, target) = batch.roles[sample];
    let origin = batch.feature_row(sample, grasped);
    let (ox, oy) = (origin[2], origin[3]);
    let key = |i: usize| {
        let r = batch.feature_row(sample, i);
        ((r[2] - ox).hypot(r[3] - oy), r[2], r[3])
    };
    let mut order = vec![grasped];
    if target != grasped {
        order.push(target);
    }
    let mut rest: Vec<usize> = (0..batch.counts[sample])
        .filter(|&i| i != grasped && i != target)
        .collect();
    rest.sort_by(|&a, &b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.total_cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.total_cmp(&kb.2))
            .then(a.cmp(&b))
    });
    order.extend(rest);
    order
}

pub(crate) fn forward<R: Rng + ?Sized>(
    g: &mut Graph,
    ckpt: &ModelCheckpoint,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput, ModelError> {
    let cfg = &ckpt.config;
    let params = &ckpt.params;
    let (size, n, n_max) = (batch.size, batch.n_pad, cfg.n_max);
    if let Some(&worst) = batch.counts.iter().max().filter(|&&c| c > n_max) {
        return Err(ModelError::Capacity { n: worst, n_max });
    }
    let orders: Vec<Vec<usize>> = (0..size).map(|s| scene_order(batch, s)).collect();

    // Slot-major scene vectors; empty slots stay zero.
    let mut scene = vec![0.0; size * n_max * FEATURE_DIM];
    for (s, order) in orders.iter().enumerate() {
        for (slot, &obj) in order.iter().enumerate() {
            let dst = (s * n_max + slot) * FEATURE_DIM;
            scene[dst..dst + FEATURE_DIM].copy_from_slice(batch.feature_row(s, obj));
        }
    }
    let x = g.input(vec![size, n_max * FEATURE_DIM], scene)?;
    let logits = mlp_forward(g, params, "encoder", x, &encoder_spec(cfg), Activation::Identity)?;
    let code = gumbel_sigmoid(g, logits, &cfg.gumbel(mode), rng)?;
    let a = g.input(vec![size, ACTION_DIM], batch.actions.clone())?;
    let h = g.concat_cols(&[code, a])?;
    let out = mlp_forward(g, params, "decoder", h, &decoder_spec(cfg), Activation::Identity)?;

    // Back to batch rows; padded rows read as zero.
    let mut index = vec![None; size * n * EFFECT_DIM];
    for (s, order) in orders.iter().enumerate() {
        for (slot, &obj) in order.iter().enumerate() {
            for d in 0..EFFECT_DIM {
                index[(s * n + obj) * EFFECT_DIM + d] =
                    Some((s * n_max + slot) * EFFECT_DIM + d);
            }
        }
    }
    let effects = g.gather(out, vec![size * n, EFFECT_DIM], index)?;
    Ok(ForwardOutput {
        effects,
        symbols: None,
        relations: Vec::new(),
        attention: Vec::new(),
        scene_code: Some(code),
    })
}
