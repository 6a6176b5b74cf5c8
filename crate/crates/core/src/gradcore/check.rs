use super::{GradError, Graph, ParameterSet, Var};

/// Gradients smaller than this are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub path: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Analytic-vs-numeric comparison for every parameter path.
///
/// The per-element error is `|analytic - numeric| / max(|analytic|, |numeric|, ERROR_FLOOR)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Central-difference check of every scalar in `params`.
pub fn grad_check<F>(params: &ParameterSet, eps: f64, f: F) -> Result<GradCheckReport, GradError>
where
    F: FnMut(&mut Graph, &ParameterSet) -> Result<Var, GradError>,
{
    grad_check_sampled(params, eps, usize::MAX, f)
}

/// Like [`grad_check`] but probes at most `max_per_tensor` evenly spaced
/// entries of each parameter tensor.
pub fn grad_check_sampled<F>(
    params: &ParameterSet,
    eps: f64,
    max_per_tensor: usize,
    mut f: F,
) -> Result<GradCheckReport, GradError>
where
    F: FnMut(&mut Graph, &ParameterSet) -> Result<Var, GradError>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let analytic = g.backward(loss, params)?;

    let mut eval = |p: &ParameterSet| -> Result<f64, GradError> {
        let mut g = Graph::new();
        let l = f(&mut g, p)?;
        g.scalar_value(l)
    };

    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    let paths: Vec<String> = params.paths().map(str::to_string).collect();
    for path in paths {
        let numel = params.get(&path)?.numel();
        let grad = analytic.get(&path).unwrap_or(&[]).to_vec();
        let stride = numel.div_ceil(max_per_tensor.max(1)).max(1);
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        for i in (0..numel).step_by(stride) {
            let orig = work.get(&path)?.data()[i];
            work.get_mut(&path)?.data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(&path)?.data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(&path)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            max_rel = max_rel.max(relative_error(grad[i], numeric));
            checked += 1;
        }
        report.entries.push(GradCheckEntry {
            path,
            checked,
            max_rel_error: max_rel,
        });
    }
    Ok(report)
}
