//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1 × 1`. Operations are recorded
//! on a [`Tape`] in evaluation order, so walking the node list backwards is a
//! valid topological order for [`Tape::backward`].
//!
//! Trainable parameters live in a [`ParamSet`] outside the tape. A tape
//! references them through [`Tape::param`] and hands the accumulated
//! gradients back with [`Tape::accumulate_param_grads`].

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

use super::{Adjacency, DiffError, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Handle to a parameter in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A recorded value, with its gradient once `backward` has run.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub value: Matrix,
    pub grad: Option<Matrix>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

/// User-defined differentiable operation.
///
/// `backward` returns one optional gradient per input, shaped like the input.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix, DiffError>;
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad_output: &Matrix) -> Vec<Option<Matrix>>;
}

/// Row-compressed copy of a sparse input, kept for the weight gradient.
struct Sparse {
    rows: Vec<Vec<(usize, f64)>>,
}

struct AttentionCache {
    heads: usize,
    width: usize,
    slope: f64,
    adjacency: Rc<Adjacency>,
    /// Per head, per node, softmax weights aligned with `adjacency.neighbors(i)`.
    alpha: Vec<Vec<Vec<f64>>>,
    /// Matching pre-activation scores.
    pre: Vec<Vec<Vec<f64>>>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMulT { input: Var, weight: Var, sparse: Option<Sparse> },
    AddRow { input: Var, bias: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu { input: Var, slope: f64 },
    Sigmoid(Var),
    Sum(Var),
    MeanHeads { input: Var, heads: usize },
    BceWithLogits { logits: Var, targets: Vec<(usize, f64)> },
    Attention { features: Var, attention: Var, cache: Box<AttentionCache> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Inputs sparser than this use the row-compressed matmul path.
const SPARSE_DENSITY: f64 = 0.25;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].tensor.value
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].tensor.grad.as_ref()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[(0, 0)]
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            tensor: Tensor {
                value,
                grad: None,
                requires_grad,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.values[id.0].clone(), true, Op::Param(id))
    }

    /// `input · weightᵀ` for `input: n × in`, `weight: out × in`.
    pub fn matmul_t(&mut self, input: Var, weight: Var) -> Result<Var, DiffError> {
        let (x, w) = (self.value(input), self.value(weight));
        if x.ncols() != w.ncols() {
            return Err(DiffError::ShapeMismatch {
                op: "matmul_t",
                expected: vec![x.nrows(), w.ncols()],
                found: vec![x.nrows(), x.ncols()],
            });
        }
        let nnz = x.iter().filter(|&&a| a != 0.0).count();
        let (value, sparse) = if (nnz as f64) < SPARSE_DENSITY * x.len() as f64 {
            let rows: Vec<Vec<(usize, f64)>> = x
                .outer_iter()
                .map(|r| r.iter().enumerate().filter(|(_, &a)| a != 0.0).map(|(k, &a)| (k, a)).collect())
                .collect();
            let wt = w.t().as_standard_layout().into_owned();
            let mut out = Array2::zeros((x.nrows(), w.nrows()));
            for (i, row) in rows.iter().enumerate() {
                let mut o = out.row_mut(i);
                for &(k, a) in row {
                    o.scaled_add(a, &wt.row(k));
                }
            }
            (out, Some(Sparse { rows }))
        } else {
            (x.dot(&w.t()), None)
        };
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(value, rg, Op::MatMulT { input, weight, sparse }))
    }

    /// Adds a `1 × m` row to every row of an `n × m` input.
    pub fn add_row(&mut self, input: Var, bias: Var) -> Result<Var, DiffError> {
        let (x, b) = (self.value(input), self.value(bias));
        if b.nrows() != 1 || b.ncols() != x.ncols() {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                expected: vec![1, x.ncols()],
                found: vec![b.nrows(), b.ncols()],
            });
        }
        let value = x + b;
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(value, rg, Op::AddRow { input, bias }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.value(a).dim(), self.value(b).dim());
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op,
                expected: vec![sa.0, sa.1],
                found: vec![sb.0, sb.1],
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, rg, Op::Scale(a, factor))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let value = self.value(input).mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(input);
        self.push(value, rg, Op::LeakyRelu { input, slope })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).mapv(sigmoid);
        let rg = self.rg(input);
        self.push(value, rg, Op::Sigmoid(input))
    }

    /// Sum of all elements, as a `1 × 1` node.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(input).sum());
        let rg = self.rg(input);
        self.push(value, rg, Op::Sum(input))
    }

    /// Averages `heads` equal-width column blocks.
    pub fn mean_heads(&mut self, input: Var, heads: usize) -> Result<Var, DiffError> {
        let x = self.value(input);
        if heads == 0 || x.ncols() % heads != 0 {
            return Err(DiffError::ShapeMismatch {
                op: "mean_heads",
                expected: vec![x.nrows(), heads],
                found: vec![x.nrows(), x.ncols()],
            });
        }
        let width = x.ncols() / heads;
        let mut value = Array2::zeros((x.nrows(), width));
        for h in 0..heads {
            value += &x.slice(ndarray::s![.., h * width..(h + 1) * width]);
        }
        value /= heads as f64;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::MeanHeads { input, heads }))
    }

    /// Mean binary cross-entropy of `sigmoid(logits[row, 0])` against each
    /// `(row, target)` pair. Computed from logits for numerical stability.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<(usize, f64)>) -> Result<Var, DiffError> {
        let z = self.value(logits);
        if z.ncols() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "bce_with_logits",
                expected: vec![z.nrows(), 1],
                found: vec![z.nrows(), z.ncols()],
            });
        }
        if let Some(&(row, _)) = targets.iter().find(|(r, _)| *r >= z.nrows()) {
            return Err(DiffError::IndexOutOfRange {
                op: "bce_with_logits",
                index: row,
                len: z.nrows(),
            });
        }
        let n = targets.len().max(1) as f64;
        let total: f64 = targets
            .iter()
            .map(|&(r, y)| {
                let x = z[(r, 0)];
                x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(Array2::from_elem((1, 1), total / n), rg, Op::BceWithLogits { logits, targets }))
    }

    /// Multi-head graph attention aggregation.
    ///
    /// `features` holds the already-projected node features `W h`, `N × (heads·width)`,
    /// head-major. `attention` is `heads × 2·width`: the first half scores the
    /// receiving node, the second half the neighbour. For each head,
    /// `out_i = Σ_j softmax_j(leaky(a_l·z_i + a_r·z_j)) z_j` over `j ∈ N(i)`.
    pub fn graph_attention(
        &mut self,
        features: Var,
        attention: Var,
        adjacency: Rc<Adjacency>,
        heads: usize,
        slope: f64,
    ) -> Result<Var, DiffError> {
        let z = self.value(features);
        let a = self.value(attention);
        let n = z.nrows();
        if adjacency.len() != n {
            return Err(DiffError::ShapeMismatch {
                op: "graph_attention",
                expected: vec![adjacency.len()],
                found: vec![n],
            });
        }
        if heads == 0 || z.ncols() % heads != 0 || a.nrows() != heads || a.ncols() * heads != 2 * z.ncols() {
            return Err(DiffError::ShapeMismatch {
                op: "graph_attention",
                expected: vec![heads, 2 * z.ncols() / heads.max(1)],
                found: vec![a.nrows(), a.ncols()],
            });
        }
        let width = z.ncols() / heads;
        let mut out = Array2::zeros((n, heads * width));
        let mut alpha_all = Vec::with_capacity(heads);
        let mut pre_all = Vec::with_capacity(heads);
        for h in 0..heads {
            let zh = z.slice(ndarray::s![.., h * width..(h + 1) * width]);
            let al = a.slice(ndarray::s![h, ..width]);
            let ar = a.slice(ndarray::s![h, width..]);
            let sl = zh.dot(&al);
            let sr = zh.dot(&ar);
            let mut alpha_h = Vec::with_capacity(n);
            let mut pre_h = Vec::with_capacity(n);
            for i in 0..n {
                let nb = adjacency.neighbors(i);
                let pre: Vec<f64> = nb
                    .iter()
                    .map(|&j| {
                        let e = sl[i] + sr[j];
                        if e > 0.0 {
                            e
                        } else {
                            slope * e
                        }
                    })
                    .collect();
                let m = pre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut w: Vec<f64> = pre.iter().map(|&e| (e - m).exp()).collect();
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= total);
                let mut o = out.slice_mut(ndarray::s![i, h * width..(h + 1) * width]);
                for (&j, &wj) in nb.iter().zip(&w) {
                    o.scaled_add(wj, &zh.row(j));
                }
                alpha_h.push(w);
                pre_h.push(pre);
            }
            alpha_all.push(alpha_h);
            pre_all.push(pre_h);
        }
        let rg = self.rg(features) || self.rg(attention);
        let cache = Box::new(AttentionCache {
            heads,
            width,
            slope,
            adjacency,
            alpha: alpha_all,
            pre: pre_all,
        });
        Ok(self.push(out, rg, Op::Attention { features, attention, cache }))
    }

    /// Softmax attention weights of the most recent `graph_attention` node
    /// `v`, per head and node, aligned with the adjacency lists.
    pub fn attention_weights(&self, v: Var) -> Option<&Vec<Vec<Vec<f64>>>> {
        match &self.nodes[v.0].op {
            Op::Attention { cache, .. } => Some(&cache.alpha),
            _ => None,
        }
    }

    pub fn custom(&mut self, mut op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var, DiffError> {
        let values: Vec<&Matrix> = inputs.iter().map(|v| self.value(*v)).collect();
        let value = op.forward(&values)?;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(value, rg, Op::Custom { inputs: inputs.to_vec(), op }))
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
        self.backward_done = false;
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        let shape = self.value(loss).dim();
        if shape != (1, 1) {
            return Err(DiffError::NotScalar {
                found: vec![shape.0, shape.1],
            });
        }
        self.backward_done = true;
        self.nodes[loss.0].tensor.grad = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].tensor.grad.take() else {
                continue;
            };
            if self.nodes[idx].tensor.requires_grad {
                let contributions = self.local_grads(idx, &g);
                for (target, contribution) in contributions {
                    if self.rg(target) {
                        accumulate(&mut self.nodes[target.0].tensor.grad, contribution);
                    }
                }
            }
            self.nodes[idx].tensor.grad = Some(g);
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Matrix) -> Vec<(Var, Matrix)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMulT { input, weight, sparse } => {
                let mut out = Vec::with_capacity(2);
                if self.rg(*input) {
                    out.push((*input, g.dot(self.value(*weight))));
                }
                if self.rg(*weight) {
                    let dw = match sparse {
                        Some(sp) => {
                            let (nin, nout) = (self.value(*input).ncols(), g.ncols());
                            let mut dwt = Array2::<f64>::zeros((nin, nout));
                            for (i, row) in sp.rows.iter().enumerate() {
                                let gi = g.row(i);
                                for &(k, a) in row {
                                    dwt.row_mut(k).scaled_add(a, &gi);
                                }
                            }
                            dwt.reversed_axes().as_standard_layout().into_owned()
                        }
                        None => g.t().dot(self.value(*input)),
                    };
                    out.push((*weight, dw));
                }
                out
            }
            Op::AddRow { input, bias } => {
                vec![(*input, g.clone()), (*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![(*a, g * self.value(*b)), (*b, g * self.value(*a))],
            Op::Scale(a, f) => vec![(*a, g * *f)],
            Op::LeakyRelu { input, slope } => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*input)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= slope
                    }
                });
                vec![(*input, d)]
            }
            Op::Sigmoid(input) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.tensor.value).for_each(|d, &s| *d *= s * (1.0 - s));
                vec![(*input, d)]
            }
            Op::Sum(input) => {
                let dim = self.value(*input).dim();
                vec![(*input, Array2::from_elem(dim, g[(0, 0)]))]
            }
            Op::MeanHeads { input, heads } => {
                let x = self.value(*input);
                let width = x.ncols() / heads;
                let mut d = Array2::zeros(x.dim());
                let scaled = g / *heads as f64;
                for h in 0..*heads {
                    d.slice_mut(ndarray::s![.., h * width..(h + 1) * width]).assign(&scaled);
                }
                vec![(*input, d)]
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let n = targets.len().max(1) as f64;
                let mut d = Array2::zeros(z.dim());
                for &(r, y) in targets {
                    d[(r, 0)] += g[(0, 0)] * (sigmoid(z[(r, 0)]) - y) / n;
                }
                vec![(*logits, d)]
            }
            Op::Attention {
                features,
                attention,
                cache,
            } => self.attention_grads(*features, *attention, cache, g),
            Op::Custom { inputs, op } => {
                let values: Vec<&Matrix> = inputs.iter().map(|v| self.value(*v)).collect();
                op.backward(&values, &node.tensor.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(d, v)| d.map(|d| (*v, d)))
                    .collect()
            }
        }
    }

    fn attention_grads(&self, features: Var, attention: Var, cache: &AttentionCache, g: &Matrix) -> Vec<(Var, Matrix)> {
        let z = self.value(features);
        let a = self.value(attention);
        let (heads, width, slope) = (cache.heads, cache.width, cache.slope);
        let n = z.nrows();
        let mut dz = Array2::<f64>::zeros(z.dim());
        let mut da = Array2::<f64>::zeros(a.dim());
        for h in 0..heads {
            let cols = ndarray::s![.., h * width..(h + 1) * width];
            let zh = z.slice(cols);
            let gh = g.slice(cols);
            let mut ds_left = vec![0.0; n];
            let mut ds_right = vec![0.0; n];
            {
                let mut dzh = dz.slice_mut(cols);
                for i in 0..n {
                    let nb = cache.adjacency.neighbors(i);
                    let alpha = &cache.alpha[h][i];
                    let pre = &cache.pre[h][i];
                    let gi = gh.row(i);
                    let dalpha: Vec<f64> = nb.iter().map(|&j| gi.dot(&zh.row(j))).collect();
                    let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
                    for (k, &j) in nb.iter().enumerate() {
                        dzh.row_mut(j).scaled_add(alpha[k], &gi);
                        let de = alpha[k] * (dalpha[k] - mean);
                        let dpre = if pre[k] > 0.0 { de } else { slope * de };
                        ds_left[i] += dpre;
                        ds_right[j] += dpre;
                    }
                }
                let al = a.slice(ndarray::s![h, ..width]);
                let ar = a.slice(ndarray::s![h, width..]);
                for i in 0..n {
                    let mut row = dzh.row_mut(i);
                    row.scaled_add(ds_left[i], &al);
                    row.scaled_add(ds_right[i], &ar);
                }
            }
            let mut dal = Array2::<f64>::zeros((1, width));
            let mut dar = Array2::<f64>::zeros((1, width));
            for i in 0..n {
                dal.row_mut(0).scaled_add(ds_left[i], &zh.row(i));
                dar.row_mut(0).scaled_add(ds_right[i], &zh.row(i));
            }
            da.slice_mut(ndarray::s![h, ..width]).assign(&dal.row(0));
            da.slice_mut(ndarray::s![h, width..]).assign(&dar.row(0));
        }
        vec![(features, dz), (attention, da)]
    }

    /// Adds the gradients of every parameter node into `params`.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.tensor.grad) {
                params.grads[id.0] += g;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, contribution: Matrix) {
    match slot {
        Some(existing) => *existing += &contribution,
        None => *slot = Some(contribution),
    }
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where `f64` rounding would saturate.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Named trainable matrices with gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.grads.push(Array2::zeros(value.dim()));
        self.values.push(value);
        self.names.push(name.into());
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Matrix], &[Matrix]) {
        (&mut self.values, &self.grads)
    }
}
