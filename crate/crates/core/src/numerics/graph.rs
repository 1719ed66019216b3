//! Dynamically recorded computation graph with reverse-mode gradients.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every operation appends a node; [`Graph::backward`] walks the nodes in
//! reverse creation order, which is a valid topological order by construction.

use std::collections::BTreeMap;

use super::params::EMPTY_STORE;
use super::tensor::{matmul_into, matmul_t_into, matmul_tn_into};
use super::{gelu, gelu_grad, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f32 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBias(Var, Var),
    Gelu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f32>,
        rstd: Vec<f32>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Sum(Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradients of trainable parameters, masked to their trainable rows.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient with respect to any node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    match t.rank() {
        0 => (1, 1),
        1 => (1, t.shape()[0]),
        _ => (t.rows(), t.cols()),
    }
}

impl Graph<'static> {
    /// A graph with no parameters, for pure tensor computations.
    pub fn standalone() -> Self {
        Graph::new(&EMPTY_STORE)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => &self.params.get(*id).value,
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.params.expect_id(name)?;
        Ok(self.param(id))
    }

    /// Matrix product. Rank-1 operands act as a row (left) or column (right).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = mat_dims(ta);
        let (k2, m) = if tb.rank() == 1 {
            (tb.shape()[0], 1)
        } else {
            mat_dims(tb)
        };
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul shape mismatch {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
        let shape = match (ta.rank(), tb.rank()) {
            (1, 1) => vec![],
            (1, _) => vec![m],
            (_, 1) => vec![n],
            _ => vec![n, m],
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a·bᵀ` for matrices `a: [n×k]`, `b: [m×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = mat_dims(ta);
        let (m, k2) = mat_dims(tb);
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul_t shape mismatch {:?} x {:?}ᵀ",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; n * m];
        matmul_t_into(ta.data(), tb.data(), &mut out, n, k, m);
        let shape = if ta.rank() == 1 { vec![m] } else { vec![n, m] };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(Op::MatMulT(a, b), out))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::invalid(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(a, c), out)
    }

    /// Adds the vector `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tb.len() != tx.cols() {
            return Err(Error::invalid(format!(
                "bias {:?} does not match rows of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Gelu(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.tanh()).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Tanh(a), out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_row_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Adds `-inf`-equivalent masking above the diagonal, so row `i` only
    /// attends to columns `0..=i`. Implemented as a constant additive mask.
    pub fn causal_mask(&mut self, scores: Var) -> Result<Var> {
        let t = self.value(scores);
        let (n, m) = mat_dims(t);
        let mut mask = vec![0.0f32; n * m];
        for i in 0..n {
            for j in (i + 1)..m {
                mask[i * m + j] = -1e9;
            }
        }
        let mask = self.input(Tensor::new(t.shape().to_vec(), mask)?);
        self.add(scores, mask)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(Error::invalid("layer_norm gain/bias width mismatch"));
        }
        let mut normed = vec![0.0f32; tx.len()];
        let mut rstd = Vec::with_capacity(tx.rows());
        let mut out = vec![0.0f32; tx.len()];
        for (r, row) in tx.data().chunks(c).enumerate() {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = (1.0 / (var + LAYER_NORM_EPS as f64).sqrt()) as f32;
            rstd.push(rs);
            for j in 0..c {
                let nv = (row[j] - mean as f32) * rs;
                normed[r * c + j] = nv;
                out[r * c + j] = nv * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            out,
        ))
    }

    /// Selects rows of a matrix (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, c) = mat_dims(t);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= n {
                return Err(Error::invalid(format!("row {i} out of range for {n} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), c], data)?;
        Ok(self.push(Op::GatherRows(table, indices.to_vec()), out))
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_rows of nothing"));
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::invalid("concat_rows width mismatch"));
            }
            rows += mat_dims(t).0;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = mat_dims(t);
        if start + len > n {
            return Err(Error::invalid(format!("rows {start}..{} out of {n}", start + len)));
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        Ok(self.push(Op::SliceRows(x, start), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_f64() as f32;
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mse(&mut self, prediction: Var, target: Var) -> Result<Var> {
        let v = super::mse_loss(self.value(prediction), self.value(target))?;
        Ok(self.push(Op::Mse(prediction, target), Tensor::scalar(v as f32)))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = super::cross_entropy(self.value(logits), targets)?;
        Ok(self.push(
            Op::CrossEntropy(logits, targets.to_vec()),
            Tensor::scalar(v as f32),
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        lt.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Op::Param(id) = node.op else { continue };
            let Some(g) = &grads[i] else { continue };
            let p = self.params.get(id);
            let Some(span) = p.trainable_span() else { continue };
            let entry = params
                .entry(id)
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let dst: &mut Tensor = entry;
            for j in span {
                dst.data_mut()[j] += g.data()[j];
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = mat_dims(ta);
                let m = if tb.rank() == 1 { 1 } else { tb.cols() };
                let mut da = vec![0.0; n * k];
                matmul_t_into(gd, tb.data(), &mut da, n, m, k);
                let mut db = vec![0.0; k * m];
                matmul_tn_into(ta.data(), gd, &mut db, n, k, m);
                accumulate(grads, *a, ta.shape(), &da);
                accumulate(grads, *b, tb.shape(), &db);
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = mat_dims(ta);
                let m = mat_dims(tb).0;
                let mut da = vec![0.0; n * k];
                matmul_into(gd, tb.data(), &mut da, n, m, k);
                let mut db = vec![0.0; m * k];
                matmul_tn_into(gd, ta.data(), &mut db, n, m, k);
                accumulate(grads, *a, ta.shape(), &da);
                accumulate(grads, *b, tb.shape(), &db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), gd);
                accumulate(grads, *b, g.shape(), gd);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.shape(), gd);
                let neg: Vec<f32> = gd.iter().map(|v| -v).collect();
                accumulate(grads, *b, g.shape(), &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da: Vec<f32> = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db: Vec<f32> = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, g.shape(), &da);
                accumulate(grads, *b, g.shape(), &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f32> = gd.iter().map(|v| v * c).collect();
                accumulate(grads, *a, g.shape(), &da);
            }
            Op::AddBias(x, b) => {
                accumulate(grads, *x, g.shape(), gd);
                let c = g.cols();
                let mut db = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *b, self.value(*b).shape(), &db);
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let da: Vec<f32> = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                accumulate(grads, *a, g.shape(), &da);
            }
            Op::Tanh(a) => {
                let y = self.value(Var(i));
                let da: Vec<f32> = gd
                    .iter()
                    .zip(y.data())
                    .map(|(g, &y)| g * (1.0 - y * y))
                    .collect();
                accumulate(grads, *a, g.shape(), &da);
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(Var(i));
                let c = y.cols();
                let mut da = vec![0.0; y.len()];
                for ((drow, yrow), grow) in da.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(&y, &g)| y as f64 * g as f64).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot as f32);
                    }
                }
                accumulate(grads, *a, y.shape(), &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let tg = self.value(*gain);
                let c = tg.len();
                let mut dx = vec![0.0; normed.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for r in 0..rstd.len() {
                    let grow = &gd[r * c..(r + 1) * c];
                    let nrow = &normed[r * c..(r + 1) * c];
                    let mut mean_dn = 0.0f64;
                    let mut mean_dn_n = 0.0f64;
                    for j in 0..c {
                        dg[j] += grow[j] * nrow[j];
                        db[j] += grow[j];
                        let dn = (grow[j] * tg.data()[j]) as f64;
                        mean_dn += dn;
                        mean_dn_n += dn * nrow[j] as f64;
                    }
                    mean_dn /= c as f64;
                    mean_dn_n /= c as f64;
                    for j in 0..c {
                        let dn = (grow[j] * tg.data()[j]) as f64;
                        dx[r * c + j] =
                            (rstd[r] as f64 * (dn - mean_dn - nrow[j] as f64 * mean_dn_n)) as f32;
                    }
                }
                accumulate(grads, *x, self.value(*x).shape(), &dx);
                accumulate(grads, *gain, tg.shape(), &dg);
                accumulate(grads, *bias, self.value(*bias).shape(), &db);
            }
            Op::GatherRows(table, idx) => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut dt = vec![0.0; tt.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dt[src * c + j] += gd[r * c + j];
                    }
                }
                accumulate(grads, *table, tt.shape(), &dt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.len();
                    accumulate(grads, p, tp.shape(), &gd[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                accumulate(grads, *x, tx.shape(), &dx);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let da = vec![gd[0]; ta.len()];
                accumulate(grads, *a, ta.shape(), &da);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = 2.0 * gd[0] / ta.len() as f32;
                let da: Vec<f32> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                let db: Vec<f32> = da.iter().map(|v| -v).collect();
                accumulate(grads, *a, ta.shape(), &da);
                accumulate(grads, *b, tb.shape(), &db);
            }
            Op::CrossEntropy(logits, targets) => {
                let tl = self.value(*logits);
                let (t, v) = mat_dims(tl);
                let scale = gd[0] as f64 / t as f64;
                let mut dl = vec![0.0f32; tl.len()];
                for r in 0..t {
                    let row = &tl.data()[r * v..(r + 1) * v];
                    let probs = softmax_f64(row.iter().map(|&x| x as f64));
                    for j in 0..v {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        dl[r * v + j] = ((probs[j] - onehot) * scale) as f32;
                    }
                }
                accumulate(grads, *logits, tl.shape(), &dl);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: &[f32]) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("gradient shape"));
        }
    }
}

fn softmax_row_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut denom = 0.0f64;
    for v in row.iter_mut() {
        let e = ((*v - max) as f64).exp();
        denom += e;
        *v = e as f32;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / denom) as f32;
    }
}

pub(crate) fn softmax_f64(values: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.map(|v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}
