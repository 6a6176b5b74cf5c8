//! Tape of eagerly evaluated tensor operations with reverse-mode gradients.
//!
//! Every op computes its value when it is recorded. `backward` then walks the
//! tape once in reverse, accumulating gradients only for nodes that depend on
//! a parameter.

use std::collections::HashMap;

use super::tensor::{Gradients, ParameterSet, Tensor};
use super::GradError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        p: usize,
        n: usize,
        trans_b: bool,
    },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    GumbelSigmoid { input: Var, tau: f64 },
    StraightThrough(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    GatherRows { input: Var, index: Vec<Option<usize>> },
    Gather { input: Var, index: Vec<Option<usize>> },
    SoftmaxLast(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// `c = a * b + beta * c` for row-major `c[m, n]` with arbitrary operand strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices that cover the strided m*k, k*n and m*n extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    /// A graph that supports `backward`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph for evaluation only; `backward` is refused.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape matches value")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64, GradError> {
        match self.value(v) {
            [x] => Ok(*x),
            other => Err(GradError::Contract(format!(
                "expected a scalar, found {} values",
                other.len()
            ))),
        }
    }

    /// Records a constant (never differentiated) tensor.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, GradError> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    /// Records a free leaf that is differentiated when `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Binds the parameter `path` from `params`, reusing the node if it was
    /// already bound on this graph.
    pub fn param(&mut self, params: &ParameterSet, path: &str) -> Result<Var, GradError> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let t = params.get(path)?;
        let v = self.leaf(t);
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k, n) = match (dims2(&sa), dims2(&sb)) {
            (Some((m, k)), Some((k2, n))) if k == k2 => (m, k, n),
            _ => {
                return Err(GradError::Dimension(format!(
                    "matmul of {sa:?} by {sb:?}"
                )))
            }
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), k, 1, self.value(b), n, 1, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[batch, m, p]` by `[batch, p, n]`, or by the
    /// transpose of `[batch, n, p]` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, GradError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || GradError::Dimension(format!("batch_matmul of {sa:?} by {sb:?}"));
        let (batch, m, p) = match sa[..] {
            [bt, m, p] => (bt, m, p),
            _ => return Err(err()),
        };
        let n = match (&sb[..], trans_b) {
            (&[bt, p2, n], false) if bt == batch && p2 == p => n,
            (&[bt, n, p2], true) if bt == batch && p2 == p => n,
            _ => return Err(err()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                let a_i = &av[i * m * p..];
                let b_i = &bv[i * p * n..];
                let (rsb, csb) = if trans_b { (1, p) } else { (n, 1) };
                gemm(m, p, n, a_i, p, 1, b_i, rsb, csb, 0.0, &mut out[i * m * n..]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                p,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// Adds a `[c]` bias to every row of an `[r, c]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, GradError> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        let c = match (dims2(&sx), &sb[..]) {
            (Some((_, c)), [cb]) if c == *cb => c,
            _ => {
                return Err(GradError::Dimension(format!(
                    "bias {sb:?} for input {sx:?}"
                )))
            }
        };
        let bv = self.value(bias).to_vec();
        let out: Vec<f64> = self
            .value(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(&bv).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(sx, out, Op::AddBias(x, bias), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>, GradError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(GradError::Dimension(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// `sigmoid((x + noise) / tau)`, kept strictly inside `(0, 1)`.
    pub fn gumbel_sigmoid(&mut self, x: Var, noise: &[f64], tau: f64) -> Result<Var, GradError> {
        if noise.len() != self.value(x).len() {
            return Err(GradError::Dimension(format!(
                "{} noise values for input {:?}",
                noise.len(),
                self.shape(x)
            )));
        }
        const HI: f64 = 1.0 - f64::EPSILON / 2.0;
        let out = self
            .value(x)
            .iter()
            .zip(noise)
            .map(|(&v, &g)| sigmoid((v + g) / tau).clamp(f64::MIN_POSITIVE, HI))
            .collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::GumbelSigmoid { input: x, tau }, rg))
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<f64>) -> Result<Var, GradError> {
        if hard.len() != self.value(soft).len() {
            return Err(GradError::Dimension("straight-through value length".into()));
        }
        let rg = self.rg(soft);
        let shape = self.shape(soft).to_vec();
        Ok(self.push(shape, hard, Op::StraightThrough(soft), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    /// Concatenates 2-D matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let rows = match shapes.first().and_then(|s| dims2(s)) {
            Some((r, _)) => r,
            None => return Err(GradError::Dimension(format!("concat of {shapes:?}"))),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for s in &shapes {
            match dims2(s) {
                Some((r, c)) if r == rows => widths.push(c),
                _ => return Err(GradError::Dimension(format!("concat of {shapes:?}"))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, GradError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(GradError::Dimension(format!(
                "reshape of {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// Builds a matrix whose row `r` is input row `index[r]`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Result<Var, GradError> {
        let (rows, cols) = dims2(self.shape(a))
            .ok_or_else(|| GradError::Dimension(format!("gather_rows of {:?}", self.shape(a))))?;
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= rows) {
            return Err(GradError::Dimension(format!(
                "row {bad} out of range for {rows} rows"
            )));
        }
        let src = self.value(a);
        let mut out = vec![0.0; index.len() * cols];
        for (r, idx) in index.iter().enumerate() {
            if let Some(i) = idx {
                out[r * cols..(r + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            vec![index.len(), cols],
            out,
            Op::GatherRows { input: a, index },
            rg,
        ))
    }

    /// Element gather over flattened data: `out[k] = a[index[k]]`, or 0 for `None`.
    pub fn gather(
        &mut self,
        a: Var,
        shape: Vec<usize>,
        index: Vec<Option<usize>>,
    ) -> Result<Var, GradError> {
        let len = self.value(a).len();
        if shape.iter().product::<usize>() != index.len() {
            return Err(GradError::Dimension(format!(
                "gather of {} indices into shape {shape:?}",
                index.len()
            )));
        }
        if index.iter().flatten().any(|&i| i >= len) {
            return Err(GradError::Dimension(format!("gather index out of range for {len} values")));
        }
        let src = self.value(a);
        let out = index.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Gather { input: a, index }, rg))
    }

    /// Softmax over the last axis. Entries with `mask == false` get weight 0;
    /// a fully masked row is all zeros.
    pub fn softmax_last(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| GradError::Dimension("softmax of a scalar".into()))?;
        let x = self.value(a);
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(GradError::Dimension("softmax mask length".into()));
            }
        }
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let mut out = vec![0.0; x.len()];
        for (r, row) in x.chunks(width.max(1)).enumerate() {
            let base = r * width;
            let max = (0..width)
                .filter(|&j| keep(base + j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..width {
                if keep(base + j) {
                    let e = (row[j] - max).exp();
                    out[base + j] = e;
                    total += e;
                }
            }
            for v in &mut out[base..base + width] {
                *v /= total;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::SoftmaxLast(a), rg))
    }

    /// Reverse pass from a scalar `loss`. Returns one gradient per node that
    /// depends on a differentiable leaf.
    fn backward_nodes(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>, GradError> {
        if !self.grad_enabled {
            return Err(GradError::Contract(
                "backward called on an inference graph".into(),
            ));
        }
        if self.value(loss).len() != 1 || !self.shape(loss).iter().all(|&d| d == 1) {
            return Err(GradError::Contract(format!(
                "loss must be a scalar, found shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.len();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a)).unwrap();
                let n = node.shape[1];
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, &mut |ga| gemm(m, n, k, g, n, 1, bv, 1, n, 1.0, ga));
                acc(*b, &mut |gb| gemm(k, m, n, av, 1, k, g, n, 1, 1.0, gb));
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                p,
                n,
                trans_b,
            } => {
                let (batch, m, p, n) = (*batch, *m, *p, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, &mut |ga| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..];
                        let bi = &bv[i * p * n..];
                        let out = &mut ga[i * m * p..];
                        if *trans_b {
                            // dA = G[m,n] * B[n,p]
                            gemm(m, n, p, gi, n, 1, bi, p, 1, 1.0, out);
                        } else {
                            // dA = G[m,n] * B[p,n]^T
                            gemm(m, n, p, gi, n, 1, bi, 1, n, 1.0, out);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..];
                        let ai = &av[i * m * p..];
                        let out = &mut gb[i * p * n..];
                        if *trans_b {
                            // dB[n,p] = G^T[n,m] * A[m,p]
                            gemm(n, m, p, gi, 1, n, ai, p, 1, 1.0, out);
                        } else {
                            // dB[p,n] = A^T[p,m] * G[m,n]
                            gemm(p, m, n, ai, 1, p, gi, n, 1, 1.0, out);
                        }
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let c = node.shape[1];
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    for row in g.chunks(c.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, &mut |ga| {
                    for ((o, d), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += d * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, d), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += d * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(o, d)| *o += d * c);
            }),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((o, d), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *o += d;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for ((o, d), s) in ga.iter_mut().zip(g).zip(y) {
                        *o += d * s * (1.0 - s);
                    }
                });
            }
            Op::GumbelSigmoid { input, tau } => {
                let y = &node.value;
                acc(*input, &mut |ga| {
                    for ((o, d), s) in ga.iter_mut().zip(g).zip(y) {
                        *o += d * s * (1.0 - s) / tau;
                    }
                });
            }
            Op::StraightThrough(soft) => acc(*soft, &mut |ga| add_into(ga, g)),
            Op::Square(a) => {
                let x = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((o, d), xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += 2.0 * d * xi;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    acc(*p, &mut |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::GatherRows { input, index } => {
                let cols = node.shape[1];
                acc(*input, &mut |ga| {
                    for (r, idx) in index.iter().enumerate() {
                        if let Some(i) = idx {
                            add_into(
                                &mut ga[i * cols..(i + 1) * cols],
                                &g[r * cols..(r + 1) * cols],
                            );
                        }
                    }
                });
            }
            Op::Gather { input, index } => acc(*input, &mut |ga| {
                for (d, idx) in g.iter().zip(index) {
                    if let Some(i) = idx {
                        ga[*i] += d;
                    }
                }
            }),
            Op::SoftmaxLast(a) => {
                let width = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for ((gr, yr), dr) in ga
                        .chunks_mut(width)
                        .zip(y.chunks(width))
                        .zip(g.chunks(width))
                    {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((o, yi), di) in gr.iter_mut().zip(yr).zip(dr) {
                            *o += yi * (di - dot);
                        }
                    }
                });
            }
        }
    }

    /// Gradient of `loss` with respect to an arbitrary leaf.
    pub fn grad_of(&self, loss: Var, leaf: Var) -> Result<Vec<f64>, GradError> {
        let mut grads = self.backward_nodes(loss)?;
        Ok(grads[leaf.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.value(leaf).len()]))
    }

    /// Gradients of `loss` for every tensor in `params`. Parameters that were
    /// never bound or do not reach the loss get zeros.
    pub fn backward(&self, loss: Var, params: &ParameterSet) -> Result<Gradients, GradError> {
        let mut grads = self.backward_nodes(loss)?;
        let mut out = Gradients::new();
        for (path, t) in params.iter() {
            let g = self
                .params
                .get(path)
                .and_then(|v| grads.get_mut(v.0).and_then(Option::take))
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            out.insert(path.clone(), g);
        }
        Ok(out)
    }

    /// Like [`Graph::backward`], but stores each gradient on its tensor.
    pub fn backward_into(&self, loss: Var, params: &mut ParameterSet) -> Result<(), GradError> {
        let grads = self.backward(loss, params)?;
        for (path, g) in grads.iter() {
            params.get_mut(path)?.set_grad(g.clone())?;
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut g = Graph::new();
        let i2 = g.constant(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let row = g.constant(t(vec![1, 2], vec![1.0, 0.0]));
        let col = g.constant(t(vec![2, 1], vec![5.0, 7.0]));
        let s = g.matmul(row, col).unwrap();
        assert_eq!(g.value(s), &[5.0]);
        assert_eq!(g.shape(s), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut params = ParameterSet::new(0);
        params
            .insert("theta", t(vec![3], vec![0.5, -2.0, 3.0]))
            .unwrap();
        let mut g = Graph::new();
        let th = g.param(&params, "theta").unwrap();
        let s = g.sum(th);
        let grads = g.backward(s, &params).unwrap();
        assert_eq!(grads.get("theta").unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let th = g.param(&params, "theta").unwrap();
        let sq = g.square(th);
        let s = g.sum(sq);
        g.backward_into(s, &mut params).unwrap();
        assert_eq!(params.get("theta").unwrap().grad().unwrap(), &[1.0, -4.0, 6.0]);
    }

    #[test]
    fn unreachable_parameters_get_zero_gradient() {
        let mut params = ParameterSet::new(0);
        params.insert("used", t(vec![2], vec![1.0, 2.0])).unwrap();
        params.insert("unused", t(vec![2], vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let u = g.param(&params, "used").unwrap();
        let s = g.sum(u);
        let grads = g.backward(s, &params).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut params = ParameterSet::new(0);
        params.insert("w", t(vec![2], vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&params, "w").unwrap();
        assert!(matches!(
            g.backward(w, &params),
            Err(GradError::Contract(_))
        ));
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let params = ParameterSet::new(0);
        let mut g = Graph::inference();
        let c = g.constant(Tensor::scalar(1.0));
        assert!(g.backward(c, &params).is_err());
    }

    #[test]
    fn masked_softmax_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![2, 3], vec![1.0, 2.0, 3.0, 0.5, 0.5, 9.0]));
        let mask = [true, true, true, true, true, false];
        let s = g.softmax_last(x, Some(&mask)).unwrap();
        let v = g.value(s);
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] - 0.5).abs() < 1e-12 && v[5] == 0.0);
    }

    #[test]
    fn gather_rows_with_padding() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.gather_rows(x, vec![Some(1), None, Some(0)]).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        assert!(g.gather_rows(x, vec![Some(2)]).is_err());
    }
}
