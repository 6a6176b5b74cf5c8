use rand::Rng;

use super::relational::{encode, encoder_spec, linear};
use super::{
    action_rows, canonicalize, pair_mask, uncanonical_pairs, uncanonical_rows, ForwardOutput,
    ModelCheckpoint, ModelConfig, ModelError, Mode, ACTION_DIM, EFFECT_DIM, FEATURE_DIM,
};
use crate::datasets::Batch;
use crate::gradcore::{init_mlp, mlp_forward, Activation, GradError, Graph, LayerSpec, ParameterSet};

fn decoder_spec(cfg: &ModelConfig) -> LayerSpec {
    LayerSpec::two_hidden(cfg.heads * cfg.key_dim + ACTION_DIM, cfg.hidden, EFFECT_DIM)
}

pub(crate) fn init_params(params: &mut ParameterSet, cfg: &ModelConfig) -> Result<(), GradError> {
    init_mlp(params, "encoder", &encoder_spec(cfg))?;
    for j in 0..cfg.heads {
        for role in ["query", "key", "value"] {
            params.init_linear(&format!("attention.{role}.{j}"), cfg.d_z, cfg.key_dim)?;
        }
    }
    init_mlp(params, "decoder", &decoder_spec(cfg))
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
    let (canon, positions) = canonicalize(batch);
    let (size, n, d) = (batch.size, batch.n_pad, cfg.key_dim);
    let x = g.input(vec![canon.rows(), FEATURE_DIM], canon.features.clone())?;
    let z = encode(g, params, cfg, x, mode, rng)?;
    let mask: Vec<bool> = pair_mask(&canon).into_iter().map(|m| m > 0.0).collect();
    let scale = 1.0 / (d as f64).sqrt();

    let mut heads = Vec::with_capacity(cfg.heads + 1);
    let mut weights = Vec::with_capacity(cfg.heads);
    for j in 0..cfg.heads {
        let q = linear(g, params, &format!("attention.query.{j}"), z)?;
        let k = linear(g, params, &format!("attention.key.{j}"), z)?;
        let v = linear(g, params, &format!("attention.value.{j}"), z)?;
        let q = g.reshape(q, vec![size, n, d])?;
        let k = g.reshape(k, vec![size, n, d])?;
        let v = g.reshape(v, vec![size, n, d])?;
        let qk = g.batch_matmul(q, k, true)?;
        let logits = g.scale(qk, scale);
        let a = g.softmax_last(logits, Some(&mask))?;
        let h = g.batch_matmul(a, v, false)?;
        heads.push(g.reshape(h, vec![size * n, d])?);
        weights.push(a);
    }
    heads.push(action_rows(g, &canon)?);
    let h = g.concat_cols(&heads)?;
    let effects = mlp_forward(g, params, "decoder", h, &decoder_spec(cfg), Activation::Identity)?;

    let effects = uncanonical_rows(g, effects, &positions, n)?;
    let symbols = uncanonical_rows(g, z, &positions, n)?;
    let attention = weights
        .into_iter()
        .map(|a| uncanonical_pairs(g, a, &positions, n))
        .collect::<Result<_, _>>()?;
    Ok(ForwardOutput {
        effects,
        symbols: Some(symbols),
        relations: Vec::new(),
        attention,
        scene_code: None,
    })
}
