use super::{
    gelu_grad, log_sum_exp, matmul_a_bt_acc, matmul_at_b_acc, sigmoid, softmax_in_place,
    transpose_raw, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Row {
        x: Var,
        index: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropyLogits {
        logits: Var,
        target: usize,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
}

/// Records a computation as a DAG of nodes in creation order.
///
/// Every op only references earlier nodes, so walking the node list
/// backwards is a reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that reaches it.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Option<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// `(param_id, gradient)` for every parameter leaf that influenced the loss.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.params
            .iter()
            .zip(&self.grads)
            .filter_map(|(p, g)| Some((p.as_ref().copied()?, g.as_deref()?)))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf tagged with `id`, reported by [`Gradients::params`].
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a bias vector `[n]` to every row of `x[..., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.last_dim() {
            return Err(shape_err("add_row", xv, bv));
        }
        let n = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (r, b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax();
        self.push(value, Op::Softmax(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).sigmoid();
        self.push(value, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).gelu();
        self.push(value, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.push(value, Op::Relu(a))
    }

    /// Natural log; the caller keeps inputs positive.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    /// Normalizes each row of `x` over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != n || bv.numel() != n {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            let (mean, inv_std) = row_stats(row, eps);
            for ((r, g), b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *r = (*r - mean) * inv_std * g + b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        ))
    }

    /// Gathers rows of `table[V×d]` by id into `[len(ids)×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = (tv.shape()[0], tv.last_dim());
        if tv.shape().len() != 2 {
            return Err(Error::contract("embedding table must be rank 2"));
        }
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup needs at least one id"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Input {
                    position: pos,
                    msg: format!("id {id} out of range for table of {vocab} rows"),
                });
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let m = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.shape()[0] != m {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.shape()[0], xv.last_dim());
        if xv.shape().len() != 2 || len == 0 || start + len > n {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} out of range for shape {:?}",
                start + len,
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.data()[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    /// Row `index` of a rank-2 tensor as `[1×n]`.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let data = self.value(x).row(index)?;
        let value = Tensor::new(vec![1, data.len()], data)?;
        Ok(self.push(value, Op::Row { x, index }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// `-log softmax(logits)[target]` for a single logit row.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.leading() != 1 {
            return Err(Error::contract(
                "cross_entropy_logits expects one row of logits",
            ));
        }
        if target >= lv.numel() {
            return Err(Error::Input {
                position: target,
                msg: format!("target class out of range for {} classes", lv.numel()),
            });
        }
        let loss = log_sum_exp(lv.data()) - lv.data()[target];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLogits { logits, target },
        ))
    }

    /// Mean over labels of binary cross-entropy on logits.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() {
            return Err(Error::Shape {
                op: "bce_logits",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = total / targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.apply_rule(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            params: self.nodes.iter().map(|n| n.param).collect(),
        })
    }

    fn apply_rule(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                matmul_a_bt_acc(g, bv.data(), m, p, k, acc(&mut grads[a.0], m * k));
                matmul_at_b_acc(av.data(), g, m, k, p, acc(&mut grads[b.0], k * p));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    for (d, x) in acc(&mut grads[v.0], g.len()).iter_mut().zip(g) {
                        *d += x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                for (d, s) in acc(&mut grads[x.0], g.len()).iter_mut().zip(g) {
                    *d += s;
                }
                let n = out.last_dim();
                let gb = acc(&mut grads[bias.0], n);
                for row in g.chunks(n) {
                    for (d, s) in gb.iter_mut().zip(row) {
                        *d += s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for (j, d) in acc(&mut grads[a.0], g.len()).iter_mut().enumerate() {
                    *d += g[j] * bv[j];
                }
                for (j, d) in acc(&mut grads[b.0], g.len()).iter_mut().enumerate() {
                    *d += g[j] * av[j];
                }
            }
            Op::Scale(a, c) => {
                for (d, s) in acc(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                    *d += s * c;
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let gt = transpose_raw(g, m, n);
                for (d, s) in acc(&mut grads[a.0], g.len()).iter_mut().zip(gt) {
                    *d += s;
                }
            }
            Op::Reshape(a) => {
                for (d, s) in acc(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Softmax(a) => {
                let n = out.last_dim();
                let ga = acc(&mut grads[a.0], g.len());
                for ((y, gy), d) in out.data().chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        d[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc(&mut grads[a.0], g.len());
                for ((d, &y), s) in ga.iter_mut().zip(out.data()).zip(g) {
                    *d += s * y * (1.0 - y);
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let ga = acc(&mut grads[a.0], g.len());
                for ((d, &x), s) in ga.iter_mut().zip(xv).zip(g) {
                    *d += s * gelu_grad(x);
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let ga = acc(&mut grads[a.0], g.len());
                for ((d, &x), s) in ga.iter_mut().zip(xv).zip(g) {
                    if x > 0.0 {
                        *d += s;
                    }
                }
            }
            Op::Log(a) => {
                let xv = self.value(*a).data();
                let ga = acc(&mut grads[a.0], g.len());
                for ((d, &x), s) in ga.iter_mut().zip(xv).zip(g) {
                    *d += s / x;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let n = out.last_dim();
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                let mut gx = vec![0.0; xv.len()];
                for ((row, gy), dx) in xv.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let (mean, inv_std) = row_stats(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|&r| (r - mean) * inv_std).collect();
                    let mut mean_gh = 0.0;
                    let mut mean_gh_xh = 0.0;
                    for j in 0..n {
                        gg[j] += gy[j] * xhat[j];
                        gb[j] += gy[j];
                        let gh = gy[j] * gam[j];
                        mean_gh += gh;
                        mean_gh_xh += gh * xhat[j];
                    }
                    mean_gh /= n as f64;
                    mean_gh_xh /= n as f64;
                    for j in 0..n {
                        let gh = gy[j] * gam[j];
                        dx[j] = inv_std * (gh - mean_gh - xhat[j] * mean_gh_xh);
                    }
                }
                for (slot, part) in [(x, gx), (gamma, gg), (beta, gb)] {
                    let len = part.len();
                    for (d, s) in acc(&mut grads[slot.0], len).iter_mut().zip(part) {
                        *d += s;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.last_dim();
                let gt = acc(&mut grads[table.0], tv.numel());
                for (row, &id) in g.chunks(d).zip(ids) {
                    for (t, s) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *t += s;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    let gp = acc(&mut grads[p.0], m * w);
                    for i in 0..m {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + offset + j];
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let len = out.shape()[1];
                let gx = acc(&mut grads[x.0], m * n);
                for i in 0..m {
                    for j in 0..len {
                        gx[i * n + start + j] += g[i * len + j];
                    }
                }
            }
            Op::Row { x, index } => {
                let xv = self.value(*x);
                let n = xv.last_dim();
                let gx = acc(&mut grads[x.0], xv.numel());
                for (d, s) in gx[index * n..(index + 1) * n].iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).numel();
                for d in acc(&mut grads[a.0], len).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let len = self.value(*a).numel();
                let s = g[0] / len as f64;
                for d in acc(&mut grads[a.0], len).iter_mut() {
                    *d += s;
                }
            }
            Op::CrossEntropyLogits { logits, target } => {
                let mut p = self.value(*logits).data().to_vec();
                softmax_in_place(&mut p);
                p[*target] -= 1.0;
                let len = p.len();
                for (d, s) in acc(&mut grads[logits.0], len).iter_mut().zip(p) {
                    *d += g[0] * s;
                }
            }
            Op::BceLogits { logits, targets } => {
                let xv = self.value(*logits).data();
                let k = targets.len() as f64;
                let gl = acc(&mut grads[logits.0], xv.len());
                for ((d, &x), &t) in gl.iter_mut().zip(xv).zip(targets) {
                    *d += g[0] * (sigmoid(x) - t) / k;
                }
            }
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
