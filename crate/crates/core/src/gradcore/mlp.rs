use super::{GradError, Graph, ParameterSet, Var};

/// Layer widths `(d_in, hidden.., d_out)`; ReLU follows every hidden layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub dims: Vec<usize>,
}

impl LayerSpec {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Self { dims: dims.into() }
    }

    /// `d_in -> hidden -> hidden -> d_out`.
    pub fn two_hidden(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self::new([d_in, hidden, hidden, d_out])
    }

    pub fn d_in(&self) -> usize {
        self.dims[0]
    }

    pub fn d_out(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

pub fn init_mlp(params: &mut ParameterSet, prefix: &str, spec: &LayerSpec) -> Result<(), GradError> {
    for (i, w) in spec.dims.windows(2).enumerate() {
        params.init_linear(&format!("{prefix}.{i}"), w[0], w[1])?;
    }
    Ok(())
}

/// Applies the MLP under `prefix` to every row of `x` (`[n, d_in]`).
pub fn mlp_forward(
    g: &mut Graph,
    params: &ParameterSet,
    prefix: &str,
    x: Var,
    spec: &LayerSpec,
    final_activation: Activation,
) -> Result<Var, GradError> {
    match g.shape(x) {
        [_, d] if *d == spec.d_in() => {}
        s => {
            return Err(GradError::Dimension(format!(
                "{prefix} expects width {}, input has shape {s:?}",
                spec.d_in()
            )))
        }
    }
    let mut h = x;
    let layers = spec.num_layers();
    for i in 0..layers {
        let w = g.param(params, &format!("{prefix}.{i}.weight"))?;
        let b = g.param(params, &format!("{prefix}.{i}.bias"))?;
        h = g.matmul(h, w)?;
        h = g.add_bias(h, b)?;
        if i + 1 < layers || final_activation == Activation::Relu {
            h = g.relu(h);
        }
    }
    Ok(h)
}
