use rand::Rng;

use super::{
    action_rows, canonicalize, gumbel_sigmoid, pair_mask, uncanonical_pairs, uncanonical_rows,
    ForwardOutput, ModelCheckpoint, ModelConfig, ModelError, Mode, EFFECT_DIM, FEATURE_DIM,
};
use crate::datasets::Batch;
use crate::gradcore::{init_mlp, mlp_forward, Activation, GradError, Graph, LayerSpec, ParameterSet, Var};

pub(crate) fn encoder_spec(cfg: &ModelConfig) -> LayerSpec {
    LayerSpec::two_hidden(FEATURE_DIM, cfg.hidden, cfg.d_z)
}

fn trunk_spec(cfg: &ModelConfig) -> LayerSpec {
    LayerSpec::new([FEATURE_DIM, cfg.hidden, cfg.hidden])
}

fn aggregate_spec(cfg: &ModelConfig) -> LayerSpec {
    LayerSpec::two_hidden(cfg.d_z + super::ACTION_DIM, cfg.hidden, cfg.agg_width)
}

fn decoder_spec(cfg: &ModelConfig) -> LayerSpec {
    LayerSpec::two_hidden(cfg.heads * cfg.agg_width, cfg.hidden, EFFECT_DIM)
}

pub(crate) fn init_params(params: &mut ParameterSet, cfg: &ModelConfig) -> Result<(), GradError> {
    init_mlp(params, "encoder", &encoder_spec(cfg))?;
    init_mlp(params, "attention.trunk", &trunk_spec(cfg))?;
    for j in 0..cfg.heads {
        params.init_linear(&format!("attention.query.{j}"), cfg.hidden, cfg.key_dim)?;
        params.init_linear(&format!("attention.key.{j}"), cfg.hidden, cfg.key_dim)?;
        init_mlp(params, &format!("aggregate.{j}"), &aggregate_spec(cfg))?;
    }
    init_mlp(params, "decoder", &decoder_spec(cfg))
}

pub(crate) fn linear(g: &mut Graph, params: &ParameterSet, prefix: &str, x: Var) -> Result<Var, GradError> {
    let w = g.param(params, &format!("{prefix}.weight"))?;
    let b = g.param(params, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Object symbols `[rows, d_z]` from feature rows `[rows, 6]`.
pub fn encode<R: Rng + ?Sized>(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    features: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, ModelError> {
    let logits = mlp_forward(g, params, "encoder", features, &encoder_spec(cfg), Activation::Identity)?;
    gumbel_sigmoid(g, logits, &cfg.gumbel(mode), rng)
}

/// Scaled query-key products per head, `[size, n, n]`, before discretisation.
pub fn attention_logits(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    features: Var,
    size: usize,
    n: usize,
) -> Result<Vec<Var>, ModelError> {
    let trunk = mlp_forward(g, params, "attention.trunk", features, &trunk_spec(cfg), Activation::Relu)?;
    let scale = 1.0 / (cfg.key_dim as f64).sqrt();
    let mut out = Vec::with_capacity(cfg.heads);
    for j in 0..cfg.heads {
        let q = linear(g, params, &format!("attention.query.{j}"), trunk)?;
        let k = linear(g, params, &format!("attention.key.{j}"), trunk)?;
        let q = g.reshape(q, vec![size, n, cfg.key_dim])?;
        let k = g.reshape(k, vec![size, n, cfg.key_dim])?;
        let qk = g.batch_matmul(q, k, true)?;
        out.push(g.scale(qk, scale));
    }
    Ok(out)
}

/// Binary relation matrices per head, `[size, n, n]`, zero on padded rows
/// and columns.
pub fn attention_weights<R: Rng + ?Sized>(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    features: Var,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Var>, ModelError> {
    let (size, n) = (batch.size, batch.n_pad);
    let logits = attention_logits(g, params, cfg, features, size, n)?;
    let mask = g.input(vec![size, n, n], pair_mask(batch))?;
    let mut out = Vec::with_capacity(logits.len());
    for l in logits {
        let a = gumbel_sigmoid(g, l, &cfg.gumbel(mode), rng)?;
        out.push(g.mul(a, mask)?);
    }
    Ok(out)
}

/// Fuses symbols `[size * n, d_z]` with the action rows and the relation
/// heads: head `j` contributes `A_j * mlp_j([z, a])`; heads are concatenated.
pub fn aggregate(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    symbols: Var,
    relations: &[Var],
    actions: Var,
) -> Result<Var, ModelError> {
    let (size, n) = match g.shape(*relations.first().ok_or_else(|| {
        ModelError::Contract("aggregation needs at least one relation head".into())
    })?) {
        [s, n, n2] if n == n2 => (*s, *n),
        s => return Err(GradError::Dimension(format!("relation shape {s:?}")).into()),
    };
    if g.shape(symbols).first() != Some(&(size * n)) {
        return Err(GradError::Dimension(format!(
            "symbols {:?} for relations over {n} objects x {size} samples",
            g.shape(symbols)
        ))
        .into());
    }
    let zbar = g.concat_cols(&[symbols, actions])?;
    let mut heads = Vec::with_capacity(relations.len());
    for (j, &a) in relations.iter().enumerate() {
        let m = mlp_forward(g, params, &format!("aggregate.{j}"), zbar, &aggregate_spec(cfg), Activation::Identity)?;
        let m = g.reshape(m, vec![size, n, cfg.agg_width])?;
        let h = g.batch_matmul(a, m, false)?;
        heads.push(g.reshape(h, vec![size * n, cfg.agg_width])?);
    }
    Ok(g.concat_cols(&heads)?)
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
    let n = batch.n_pad;
    let x = g.input(vec![canon.rows(), FEATURE_DIM], canon.features.clone())?;
    let z = encode(g, params, cfg, x, mode, rng)?;
    let relations = attention_weights(g, params, cfg, x, &canon, mode, rng)?;
    let actions = action_rows(g, &canon)?;
    let h = aggregate(g, params, cfg, z, &relations, actions)?;
    let effects = mlp_forward(g, params, "decoder", h, &decoder_spec(cfg), Activation::Identity)?;

    let effects = uncanonical_rows(g, effects, &positions, n)?;
    let symbols = uncanonical_rows(g, z, &positions, n)?;
    let relations = relations
        .into_iter()
        .map(|a| uncanonical_pairs(g, a, &positions, n))
        .collect::<Result<_, _>>()?;
    Ok(ForwardOutput {
        effects,
        symbols: Some(symbols),
        relations,
        attention: Vec::new(),
        scene_code: None,
    })
}
