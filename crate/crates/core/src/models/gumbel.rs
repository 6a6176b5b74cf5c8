use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::gradcore::{sigmoid, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Relaxed sample `sigmoid((logit + g1 - g2) / tau)`.
    Soft,
    /// Deterministic `1[logit > 0]`.
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelConfig {
    pub tau: f64,
    pub mode: Mode,
    pub straight_through: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            mode: Mode::Soft,
            straight_through: false,
        }
    }
}

/// Difference of two independent standard Gumbel draws per element.
pub fn gumbel_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let mut draw = || {
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        -(-u.ln()).ln()
    };
    (0..len).map(|_| draw() - draw()).collect()
}

fn check_tau(cfg: &GumbelConfig) -> Result<(), ModelError> {
    if cfg.tau > 0.0 && cfg.tau.is_finite() {
        Ok(())
    } else {
        Err(ModelError::Contract(format!(
            "temperature must be positive, got {}",
            cfg.tau
        )))
    }
}

/// Gumbel-sigmoid on graph values. Hard mode is refused on a graph that
/// records gradients.
pub fn gumbel_sigmoid<R: Rng + ?Sized>(
    g: &mut Graph,
    logits: Var,
    cfg: &GumbelConfig,
    rng: &mut R,
) -> Result<Var, ModelError> {
    check_tau(cfg)?;
    match cfg.mode {
        Mode::Hard => {
            if g.grad_enabled() {
                return Err(ModelError::Contract(
                    "hard-threshold Gumbel-sigmoid inside a gradient pass".into(),
                ));
            }
            let bits = g
                .value(logits)
                .iter()
                .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                .collect();
            let shape = g.shape(logits).to_vec();
            Ok(g.input(shape, bits)?)
        }
        Mode::Soft => {
            let noise = gumbel_noise(g.value(logits).len(), rng);
            let soft = g.gumbel_sigmoid(logits, &noise, cfg.tau)?;
            if !cfg.straight_through {
                return Ok(soft);
            }
            let hard = g
                .value(soft)
                .iter()
                .map(|&s| if s > 0.5 { 1.0 } else { 0.0 })
                .collect();
            Ok(g.straight_through(soft, hard)?)
        }
    }
}

/// Gumbel-sigmoid on plain values.
pub fn gumbel_sigmoid_values<R: Rng + ?Sized>(
    logits: &[f64],
    cfg: &GumbelConfig,
    rng: &mut R,
) -> Result<Vec<f64>, ModelError> {
    check_tau(cfg)?;
    Ok(match cfg.mode {
        Mode::Hard => logits
            .iter()
            .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
            .collect(),
        Mode::Soft => {
            let noise = gumbel_noise(logits.len(), rng);
            logits
                .iter()
                .zip(noise)
                .map(|(&x, n)| sigmoid((x + n) / cfg.tau))
                .collect()
        }
    })
}
