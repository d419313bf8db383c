//! Dense 2-D tensors with tape-based reverse-mode differentiation.
//!
//! The op set is deliberately small: exactly the kernels the dual message
//! passing model needs (matrix products, ReLU, row softmax, concatenation,
//! row gather/scatter, pairwise attention, cross-entropy) plus an SGD
//! stepper over a named parameter store. Everything is `f64` and
//! single-threaded per tape; distinct tapes may run on distinct threads.
//!
//! Gradients are checked against central finite differences in the test
//! suite; see [`gradcheck`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// A dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{}x{} tensor needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged row lengths".into()));
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    /// Single-element 1x1 tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::filled(1, 1, value)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "expected scalar, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Serialize for Tensor {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TensorRepr {
            shape: [self.rows, self.cols],
            data: self.data.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = TensorRepr::deserialize(deserializer)?;
        Tensor::from_vec(repr.shape[0], repr.shape[1], repr.data)
            .map_err(|e| D::Error::custom(e.to_string()))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    /// Broadcast-add a 1xC row to every row of an RxC tensor.
    AddRow(Var, Var),
    /// Elementwise `k * x + c`; only the slope matters for gradients.
    Affine(Var, f64),
    MulElem(Var, Var),
    Relu(Var),
    SoftmaxRow(Var),
    ConcatCols(Var, Var),
    /// Multiply row i of the input by the scalar in row i of an Rx1 tensor.
    ScaleRows(Var, Var),
    GatherRows(Var, Vec<usize>),
    /// Row r of the input is added into output row `groups[r]`.
    ScatterSumRows(Var, Vec<usize>),
    /// As ScatterSumRows but averaged per group; empty groups stay zero.
    ScatterMeanRows(Var, Vec<usize>, usize),
    /// Rowwise two-way softmax: out_r = exp(a_r) / (exp(a_r) + exp(b_r)).
    PairSoftmax(Var, Var),
    /// Mean of -log p[target] over rows of a probability matrix.
    CrossEntropyMean(Var, Vec<usize>),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

/// Records a computation so gradients can be propagated backwards.
///
/// One tape per forward pass; parameters are bound by name so their
/// gradients can be harvested into a [`ParamStore`] afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value entered the tape");
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a constant input; rejects non-finite values.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite constant".into()));
        }
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Bind a named parameter from `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.tensor(name)?.clone();
        let var = self.push(value, Op::Leaf, true);
        self.bindings.push((name.to_string(), var));
        Ok(var)
    }

    /// Names of all parameters bound so far (ablation wiring is traced
    /// through this).
    pub fn bound_params(&self) -> Vec<String> {
        let mut names: Vec<String> = self.bindings.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a bound parameter by name, if it participated in the
    /// last backward pass.
    pub fn param_grad(&self, name: &str) -> Option<&Tensor> {
        self.bindings
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, var)| self.grad(*var))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                ar, ac, br, bc
            )));
        }
        let value = matmul_values(self.value(a), self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape("add with different shapes".into()));
        }
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x += y;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = self.value(a).shape();
        if self.value(row).shape() != (1, ac) {
            return Err(Error::Shape("add_row bias must be 1 x cols".into()));
        }
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x += self.nodes[row.0].value.data()[i % cols];
        }
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(value, Op::AddRow(a, row), needs))
    }

    /// Elementwise `k * x + c`.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let mut value = self.value(a).clone();
        for x in value.data_mut() {
            *x = k * *x + c;
        }
        let needs = self.needs(a);
        self.push(value, Op::Affine(a, k), needs)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape("mul_elem with different shapes".into()));
        }
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MulElem(a, b), needs))
    }

    /// Elementwise max(0, x); the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for x in value.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    /// Rowwise softmax with max-subtraction.
    pub fn softmax_row(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Tensor::zeros(src.rows(), src.cols());
        for i in 0..src.rows() {
            let row = src.row(i);
            let out = softmax_slice(row);
            let start = i * src.cols();
            value.data_mut()[start..start + src.cols()].copy_from_slice(&out);
        }
        let needs = self.needs(a);
        self.push(value, Op::SoftmaxRow(a), needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ar != br {
            return Err(Error::Shape(format!(
                "concat_cols rows {} vs {}",
                ar, br
            )));
        }
        let mut value = Tensor::zeros(ar, ac + bc);
        for i in 0..ar {
            let start = i * (ac + bc);
            value.data_mut()[start..start + ac].copy_from_slice(self.value(a).row(i));
            let brow: Vec<f64> = self.value(b).row(i).to_vec();
            value.data_mut()[start + ac..start + ac + bc].copy_from_slice(&brow);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatCols(a, b), needs))
    }

    /// Scale row i of `a` by the scalar in row i of `s` (s is Rx1).
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ar, _) = self.value(a).shape();
        if self.value(s).shape() != (ar, 1) {
            return Err(Error::Shape("scale_rows needs an Rx1 scale".into()));
        }
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x *= self.nodes[s.0].value.data()[i / cols];
        }
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(value, Op::ScaleRows(a, s), needs))
    }

    /// Output row r = input row `indices[r]`.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= ar) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {} out of {} rows",
                bad, ar
            )));
        }
        let mut value = Tensor::zeros(indices.len(), ac);
        for (r, &src) in indices.iter().enumerate() {
            let row: Vec<f64> = self.value(a).row(src).to_vec();
            value.data_mut()[r * ac..(r + 1) * ac].copy_from_slice(&row);
        }
        let needs = self.needs(a);
        Ok(self.push(value, Op::GatherRows(a, indices), needs))
    }

    /// Sum input rows into `n_groups` output rows keyed by `groups[r]`.
    pub fn scatter_sum_rows(&mut self, a: Var, groups: Vec<usize>, n_groups: usize) -> Result<Var> {
        self.scatter_rows(a, groups, n_groups, false)
    }

    /// Average input rows per group; groups with no rows stay zero.
    pub fn scatter_mean_rows(
        &mut self,
        a: Var,
        groups: Vec<usize>,
        n_groups: usize,
    ) -> Result<Var> {
        self.scatter_rows(a, groups, n_groups, true)
    }

    fn scatter_rows(
        &mut self,
        a: Var,
        groups: Vec<usize>,
        n_groups: usize,
        mean: bool,
    ) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        if groups.len() != ar {
            return Err(Error::Shape("scatter groups must cover every row".into()));
        }
        if let Some(&bad) = groups.iter().find(|&&g| g >= n_groups) {
            return Err(Error::InvalidArgument(format!(
                "scatter group {} out of {}",
                bad, n_groups
            )));
        }
        let mut value = Tensor::zeros(n_groups, ac);
        let mut counts = vec![0usize; n_groups];
        for (r, &g) in groups.iter().enumerate() {
            counts[g] += 1;
            let start = g * ac;
            for c in 0..ac {
                value.data_mut()[start + c] += self.value(a).get(r, c);
            }
        }
        if mean {
            for (g, &count) in counts.iter().enumerate() {
                if count > 0 {
                    let inv = 1.0 / count as f64;
                    for c in 0..ac {
                        value.data_mut()[g * ac + c] *= inv;
                    }
                }
            }
        }
        let needs = self.needs(a);
        let op = if mean {
            Op::ScatterMeanRows(a, groups, n_groups)
        } else {
            Op::ScatterSumRows(a, groups)
        };
        Ok(self.push(value, op, needs))
    }

    /// Rowwise two-way softmax `exp(a) / (exp(a) + exp(b))` with
    /// max-subtraction; inputs are Rx1 score columns.
    pub fn pair_softmax(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        if shape != self.value(b).shape() || shape.1 != 1 {
            return Err(Error::Shape("pair_softmax needs matching Rx1 scores".into()));
        }
        let mut value = Tensor::zeros(shape.0, 1);
        for r in 0..shape.0 {
            let sa = self.value(a).get(r, 0);
            let sb = self.value(b).get(r, 0);
            value.set(r, 0, pair_softmax_scalar(sa, sb));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::PairSoftmax(a, b), needs))
    }

    /// Mean of `-log p[target]` over the rows of a probability matrix.
    /// Probabilities are clamped at [`LOG_CLAMP`] before the log.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(probs).shape();
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "{} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        if rows == 0 {
            return Err(Error::InvalidArgument("cross_entropy on zero rows".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::InvalidArgument(format!(
                "target class {} out of {}",
                bad, cols
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total -= self.value(probs).get(r, t).max(LOG_CLAMP).ln();
        }
        let value = Tensor::scalar(total / rows as f64);
        let needs = self.needs(probs);
        Ok(self.push(value, Op::CrossEntropyMean(probs, targets.to_vec()), needs))
    }

    /// Sum of every element, as a 1x1 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let needs = self.needs(a);
        self.push(value, Op::SumAll(a), needs)
    }

    /// Propagate gradients from a scalar loss back through the tape.
    ///
    /// Node gradients are queryable through [`Tape::grad`] afterwards;
    /// repeated calls overwrite node gradients (use
    /// [`Tape::accumulate_grads`] to fold parameter gradients into a
    /// store, which accumulates across calls).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.needs_grad { g } else { None };
        }
        Ok(())
    }

    /// Add the gradients of every bound parameter into `store`.
    pub fn accumulate_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (name, var) in &self.bindings {
            if let Some(g) = self.grad(*var) {
                store.add_to_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor, tape: &Tape| {
            if !tape.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => {
                    for (x, d) in g.data_mut().iter_mut().zip(delta.data()) {
                        *x += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    let delta = matmul_nt(gy, &self.nodes[b.0].value);
                    acc(grads, *a, delta, self);
                }
                if self.needs(*b) {
                    let delta = matmul_tn(&self.nodes[a.0].value, gy);
                    acc(grads, *b, delta, self);
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, gy.clone(), self);
                acc(grads, *b, gy.clone(), self);
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, gy.clone(), self);
                if self.needs(*row) {
                    let mut delta = Tensor::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        for c in 0..gy.cols() {
                            delta.data_mut()[c] += gy.get(r, c);
                        }
                    }
                    acc(grads, *row, delta, self);
                }
            }
            Op::Affine(a, k) => {
                let mut delta = gy.clone();
                for x in delta.data_mut() {
                    *x *= k;
                }
                acc(grads, *a, delta, self);
            }
            Op::MulElem(a, b) => {
                if self.needs(*a) {
                    let mut delta = gy.clone();
                    for (x, y) in delta.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                        *x *= y;
                    }
                    acc(grads, *a, delta, self);
                }
                if self.needs(*b) {
                    let mut delta = gy.clone();
                    for (x, y) in delta.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *x *= y;
                    }
                    acc(grads, *b, delta, self);
                }
            }
            Op::Relu(a) => {
                let mut delta = gy.clone();
                for (x, inp) in delta.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                    if *inp <= 0.0 {
                        *x = 0.0;
                    }
                }
                acc(grads, *a, delta, self);
            }
            Op::SoftmaxRow(a) => {
                let y = &self.nodes[i].value;
                let mut delta = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = (0..y.cols()).map(|c| gy.get(r, c) * y.get(r, c)).sum();
                    for c in 0..y.cols() {
                        delta.set(r, c, y.get(r, c) * (gy.get(r, c) - dot));
                    }
                }
                acc(grads, *a, delta, self);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.nodes[a.0].value.cols();
                let bc = self.nodes[b.0].value.cols();
                if self.needs(*a) {
                    let mut delta = Tensor::zeros(gy.rows(), ac);
                    for r in 0..gy.rows() {
                        for c in 0..ac {
                            delta.set(r, c, gy.get(r, c));
                        }
                    }
                    acc(grads, *a, delta, self);
                }
                if self.needs(*b) {
                    let mut delta = Tensor::zeros(gy.rows(), bc);
                    for r in 0..gy.rows() {
                        for c in 0..bc {
                            delta.set(r, c, gy.get(r, ac + c));
                        }
                    }
                    acc(grads, *b, delta, self);
                }
            }
            Op::ScaleRows(a, s) => {
                if self.needs(*a) {
                    let mut delta = gy.clone();
                    let cols = delta.cols();
                    for (idx, x) in delta.data_mut().iter_mut().enumerate() {
                        *x *= self.nodes[s.0].value.data()[idx / cols];
                    }
                    acc(grads, *a, delta, self);
                }
                if self.needs(*s) {
                    let av = &self.nodes[a.0].value;
                    let mut delta = Tensor::zeros(av.rows(), 1);
                    for r in 0..av.rows() {
                        let dot: f64 = (0..av.cols()).map(|c| gy.get(r, c) * av.get(r, c)).sum();
                        delta.set(r, 0, dot);
                    }
                    acc(grads, *s, delta, self);
                }
            }
            Op::GatherRows(a, indices) => {
                let av = &self.nodes[a.0].value;
                let mut delta = Tensor::zeros(av.rows(), av.cols());
                for (r, &src) in indices.iter().enumerate() {
                    for c in 0..av.cols() {
                        let v = delta.get(src, c) + gy.get(r, c);
                        delta.set(src, c, v);
                    }
                }
                acc(grads, *a, delta, self);
            }
            Op::ScatterSumRows(a, groups) => {
                let av = &self.nodes[a.0].value;
                let mut delta = Tensor::zeros(av.rows(), av.cols());
                for (r, &g) in groups.iter().enumerate() {
                    for c in 0..av.cols() {
                        delta.set(r, c, gy.get(g, c));
                    }
                }
                acc(grads, *a, delta, self);
            }
            Op::ScatterMeanRows(a, groups, n_groups) => {
                let av = &self.nodes[a.0].value;
                let mut counts = vec![0usize; *n_groups];
                for &g in groups {
                    counts[g] += 1;
                }
                let mut delta = Tensor::zeros(av.rows(), av.cols());
                for (r, &g) in groups.iter().enumerate() {
                    let inv = 1.0 / counts[g] as f64;
                    for c in 0..av.cols() {
                        delta.set(r, c, gy.get(g, c) * inv);
                    }
                }
                acc(grads, *a, delta, self);
            }
            Op::PairSoftmax(a, b) => {
                let y = &self.nodes[i].value;
                let mut da = Tensor::zeros(y.rows(), 1);
                for r in 0..y.rows() {
                    let v = y.get(r, 0);
                    da.set(r, 0, gy.get(r, 0) * v * (1.0 - v));
                }
                if self.needs(*b) {
                    let mut db = da.clone();
                    for x in db.data_mut() {
                        *x = -*x;
                    }
                    acc(grads, *b, db, self);
                }
                acc(grads, *a, da, self);
            }
            Op::CrossEntropyMean(probs, targets) => {
                let pv = &self.nodes[probs.0].value;
                let scale = gy.data()[0] / targets.len() as f64;
                let mut delta = Tensor::zeros(pv.rows(), pv.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let p = pv.get(r, t);
                    if p > LOG_CLAMP {
                        delta.set(r, t, -scale / p);
                    }
                }
                acc(grads, *probs, delta, self);
            }
            Op::SumAll(a) => {
                let av = &self.nodes[a.0].value;
                let delta = Tensor::filled(av.rows(), av.cols(), gy.data()[0]);
                acc(grads, *a, delta, self);
            }
        }
    }
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac) = a.shape();
    let bc = b.cols();
    let mut out = Tensor::zeros(ar, bc);
    for i in 0..ar {
        for k in 0..ac {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data_mut()[i * bc..(i + 1) * bc];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a . b^T`
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac) = a.shape();
    let br = b.rows();
    debug_assert_eq!(ac, b.cols());
    let mut out = Tensor::zeros(ar, br);
    for i in 0..ar {
        for j in 0..br {
            let mut sum = 0.0;
            for (x, y) in a.row(i).iter().zip(b.row(j)) {
                sum += x * y;
            }
            out.set(i, j, sum);
        }
    }
    out
}

/// `a^T . b`
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac) = a.shape();
    let bc = b.cols();
    debug_assert_eq!(ar, b.rows());
    let mut out = Tensor::zeros(ac, bc);
    for k in 0..ar {
        for i in 0..ac {
            let aki = a.get(k, i);
            if aki == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data_mut()[i * bc..(i + 1) * bc];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    out
}

/// Stable softmax of a slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `exp(a) / (exp(a) + exp(b))` with max-subtraction.
pub fn pair_softmax_scalar(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    ea / (ea + eb)
}

struct Param {
    value: Tensor,
    grad: Tensor,
}

/// Named learnable parameters with accumulated gradients.
///
/// Initialization of each parameter is a pure function of
/// `(name, shape, seed)`: weights draw uniformly from
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases start at zero.
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Param>,
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> ParamStore {
        ParamStore {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    /// Add a weight matrix with fan-in scaled uniform init.
    pub fn add_weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let bound = 1.0 / (rows as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::from_vec(rows, cols, data)?)
    }

    /// Add a zero-initialized parameter (biases).
    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(rows, cols))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    /// Overwrite a parameter's value; the shape is fixed at creation.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if param.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} is {:?}, got {:?}",
                param.value.shape(),
                value.shape()
            )));
        }
        param.value = value;
        Ok(())
    }

    /// Nudge one entry in place (finite-difference probes).
    pub fn nudge(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        param.value.data_mut()[index] += delta;
        Ok(())
    }

    pub fn add_to_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if param.grad.shape() != delta.shape() {
            return Err(Error::Shape(format!("gradient shape for {name}")));
        }
        for (g, d) in param.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, k: f64) {
        for param in self.params.values_mut() {
            for g in param.grad.data_mut() {
                *g *= k;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for param in self.params.values_mut() {
            for g in param.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.values().all(|p| p.grad.is_finite())
    }

    /// `p <- p - lr * grad` for every parameter, then zero the grads.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for param in self.params.values_mut() {
            for (v, g) in param.value.data_mut().iter_mut().zip(param.grad.data()) {
                *v -= lr * g;
            }
        }
        self.zero_grads();
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let params: BTreeMap<&String, &Tensor> =
            self.params.iter().map(|(k, p)| (k, &p.value)).collect();
        serde_json::json!({ "seed": self.seed, "params": params })
    }

    /// Parse the `{"seed":..,"params":{..}}` layout; rejects length/shape
    /// inconsistencies via the tensor deserializer.
    pub fn from_json(value: &serde_json::Value) -> Result<ParamStore> {
        #[derive(Deserialize)]
        struct Repr {
            seed: u64,
            params: BTreeMap<String, Tensor>,
        }
        let repr: Repr = serde_json::from_value(value.clone())?;
        let mut store = ParamStore::new(repr.seed);
        for (name, tensor) in repr.params {
            store.insert(&name, tensor)?;
        }
        Ok(store)
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        let mut params = BTreeMap::new();
        for (k, p) in &self.params {
            params.insert(
                k.clone(),
                Param {
                    value: p.value.clone(),
                    grad: p.grad.clone(),
                },
            );
        }
        ParamStore {
            seed: self.seed,
            params,
        }
    }
}

/// Finite-difference oracles. These re-evaluate a closed-form loss and
/// never touch the tape's backward pass, so they stay independent of the
/// gradients they are used to check.
pub mod gradcheck {
    use super::{ParamStore, Result, Tensor};

    /// Central finite difference of `eval` with respect to one entry of a
    /// named parameter.
    pub fn central_diff(
        store: &mut ParamStore,
        name: &str,
        index: usize,
        h: f64,
        eval: &mut dyn FnMut(&ParamStore) -> Result<f64>,
    ) -> Result<f64> {
        store.nudge(name, index, h)?;
        let plus = eval(store)?;
        store.nudge(name, index, -2.0 * h)?;
        let minus = eval(store)?;
        store.nudge(name, index, h)?;
        Ok((plus - minus) / (2.0 * h))
    }

    /// Full finite-difference gradient for a named parameter.
    pub fn central_diff_grad(
        store: &mut ParamStore,
        name: &str,
        h: f64,
        eval: &mut dyn FnMut(&ParamStore) -> Result<f64>,
    ) -> Result<Tensor> {
        let (rows, cols) = store.tensor(name)?.shape();
        let mut grad = Tensor::zeros(rows, cols);
        for i in 0..rows * cols {
            grad.data_mut()[i] = central_diff(store, name, i, h, eval)?;
        }
        Ok(grad)
    }

    /// Relative error with a floor so near-zero gradients compare sanely.
    pub fn rel_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }
}
