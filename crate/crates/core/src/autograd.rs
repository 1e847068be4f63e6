//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Parameters enter the tape through
//! [`Tape::param`]; a parameter that is never bound has no node and therefore
//! never receives a gradient. Sparse skill routing relies on this: inactive
//! skill modules are simply never bound.

use std::collections::HashMap;

use crate::error::{contract, Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{gemm, gemm_rows, softmax_in_place, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        w: Var,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    MeanOf {
        xs: Vec<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Gather { .. } => "gather",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::MeanOf { .. } => "mean_of",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Number of recorded nodes whose operation has the given name
    /// (`"matmul"`, `"attention"`, ...). Used as an op-count probe.
    pub fn op_count(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    /// Parameters currently bound to this tape.
    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bound.keys().copied()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is not a parameter (inputs, constants).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Binds a stored parameter as a leaf. Binding the same parameter twice
    /// returns the same node, so fan-out accumulates on one leaf.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(Op::Leaf, store.value(id).clone());
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        v
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; the leading dimensions of `a` are
    /// treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 2 || bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), k, 1, bv.data(), n, 1, 0.0, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    /// `x[..., d] + bias[d]`, the only broadcasting add.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || xv.last_dim() != bv.len() {
            return Err(Error::Shape {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let d = bv.len();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBias { x, bias }, out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(Op::Scale { x, factor }, out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(Op::Relu { x }, out)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).last_dim() == 0 {
            return Err(contract("softmax over an empty dimension"));
        }
        let out = crate::tensor::softmax_lastdim(self.value(x));
        Ok(self.push(Op::Softmax { x }, out))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(contract("layer_norm eps must be positive"));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
        ))
    }

    /// Selects trailing-dimension rows of `x`; output is `[rows.len(), d]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.last_dim());
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(contract(format!("gather_rows: row {r} out of range {n}")));
            }
            out.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    /// Places row `i` of `x[m, d]` at row `rows[i]` of a zero `[n, d]` output.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], n: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if xv.rows() != rows.len() {
            return Err(Error::Shape {
                op: "scatter_rows",
                left: xv.shape().to_vec(),
                right: vec![rows.len()],
            });
        }
        let mut out = vec![0.0; n * d];
        for (i, &r) in rows.iter().enumerate() {
            if r >= n {
                return Err(contract(format!("scatter_rows: row {r} out of range {n}")));
            }
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    /// Gathers elements of `x` by flat index into a tensor of `shape`.
    pub fn gather(&mut self, x: Var, index: &[usize], shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Shape {
                op: "gather",
                left: shape,
                right: vec![index.len()],
            });
        }
        let mut out = Vec::with_capacity(index.len());
        for &i in index {
            match xv.data().get(i) {
                Some(&v) => out.push(v),
                None => return Err(contract(format!("gather: index {i} out of range"))),
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            value,
        ))
    }

    /// Multiplies trailing-dimension row `i` of `x` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rows() != wv.len() {
            return Err(Error::Shape {
                op: "scale_rows",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        let d = xv.last_dim();
        let mut out = xv.clone();
        for (row, s) in out.data_mut().chunks_mut(d).zip(wv.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(Op::ScaleRows { x, w }, out))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, value))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| contract("mean_of needs at least one input"))?;
        for &x in &xs[1..] {
            self.same_shape("mean_of", first, x)?;
        }
        let mut acc = vec![0.0; self.value(first).len()];
        for &x in xs {
            for (a, v) in acc.iter_mut().zip(self.value(x).data()) {
                *a += v;
            }
        }
        let inv = 1.0 / xs.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        let value = Tensor::new(self.shape(first).to_vec(), acc)?;
        Ok(self.push(Op::MeanOf { xs: xs.to_vec() }, value))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[b, t, d]` with `d` divisible by `heads`;
    /// `key_mask[b * t]` marks real (attendable) positions. A query whose
    /// keys are all masked yields a zero output row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || heads == 0 || shape[2] % heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                left: shape,
                right: vec![heads],
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if key_mask.len() != b * t {
            return Err(Error::Shape {
                op: "attention",
                left: shape,
                right: vec![key_mask.len()],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; b * heads * t * t];
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            let mask = &key_mask[bi * t..(bi + 1) * t];
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let base = bi * t * d;
            for h in 0..heads {
                let off = base + h * dh;
                let p = &mut probs[(bi * heads + h) * t * t..][..t * t];
                // Scores Q·Kᵀ, then masked row softmax.
                gemm(t, dh, t, &qd[off..], d, 1, &kd[off..], 1, d, 0.0, p);
                for row in p.chunks_mut(t) {
                    for (s, &m) in row.iter_mut().zip(mask) {
                        *s = if m { *s * scale } else { f64::NEG_INFINITY };
                    }
                    softmax_in_place(row);
                }
                gemm_rows(t, t, dh, p, t, 1, &vd[off..], d, 1, 0.0, &mut out[off..], d);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            value,
        ))
    }

    /// Attention weights saved by an `attention` node, laid out as
    /// `[b, heads, t_query, t_key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let c = lv.shape()[1];
        for (index, &target) in targets.iter().enumerate() {
            if target >= c {
                return Err(Error::Label {
                    index,
                    target,
                    classes: c,
                });
            }
        }
        if targets.is_empty() {
            return Err(contract("cross_entropy over an empty batch"));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &target) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[target];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        loss /= targets.len() as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Runs the backward pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
                // dA = dC · Bᵀ
                gemm(m, n, k, g, n, 1, bv.data(), 1, n, 1.0, self.acc(*a, grads));
                // dB = Aᵀ · dC
                gemm(k, m, n, av.data(), 1, k, g, n, 1, 1.0, self.acc(*b, grads));
            }
            Op::Add { a, b } => {
                for x in [*a, *b] {
                    add_into(self.acc(x, grads), g);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = self.acc(*a, grads);
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                    *o += gi * y;
                }
                let gb = self.acc(*b, grads);
                for ((o, gi), x) in gb.iter_mut().zip(g).zip(av) {
                    *o += gi * x;
                }
            }
            Op::AddBias { x, bias } => {
                add_into(self.acc(*x, grads), g);
                let d = self.value(*bias).len();
                let gb = self.acc(*bias, grads);
                for row in g.chunks(d) {
                    add_into(gb, row);
                }
            }
            Op::Scale { x, factor } => {
                for (o, gi) in self.acc(*x, grads).iter_mut().zip(g) {
                    *o += factor * gi;
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                for ((o, gi), xi) in self.acc(*x, grads).iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let gx = self.acc(*x, grads);
                for ((gr, yr), ox) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        ox[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data().to_vec();
                let d = gam.len();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let gx = self.acc(*x, grads);
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    let ox = &mut gx[r * d..(r + 1) * d];
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        ox[j] += is * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                    }
                }
                add_into(self.acc(*gamma, grads), &dgamma);
                add_into(self.acc(*beta, grads), &dbeta);
            }
            Op::GatherRows { x, rows } => {
                let d = node.value.last_dim();
                let gx = self.acc(*x, grads);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut gx[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                }
            }
            Op::ScatterRows { x, rows } => {
                let d = node.value.last_dim();
                let gx = self.acc(*x, grads);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut gx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::Gather { x, index } => {
                let gx = self.acc(*x, grads);
                for (gi, &i) in g.iter().zip(index) {
                    gx[i] += gi;
                }
            }
            Op::ScaleRows { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w).data();
                let d = xv.last_dim();
                let gx = self.acc(*x, grads);
                for ((ox, gr), s) in gx.chunks_mut(d).zip(g.chunks(d)).zip(wv) {
                    for (o, gi) in ox.iter_mut().zip(gr) {
                        *o += gi * s;
                    }
                }
                let gw = self.acc(*w, grads);
                for (r, o) in gw.iter_mut().enumerate() {
                    *o += g[r * d..(r + 1) * d]
                        .iter()
                        .zip(xv.row(r))
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            }
            Op::Reshape { x } => add_into(self.acc(*x, grads), g),
            Op::Sum { x } => {
                let s = g[0];
                self.acc(*x, grads).iter_mut().for_each(|o| *o += s);
            }
            Op::MeanOf { xs } => {
                let inv = 1.0 / xs.len() as f64;
                for &x in xs {
                    for (o, gi) in self.acc(x, grads).iter_mut().zip(g) {
                        *o += inv * gi;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let shape = node.value.shape();
                let (b, t, d) = (shape[0], shape[1], shape[2]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut gq = vec![0.0; b * t * d];
                let mut gk = vec![0.0; b * t * d];
                let mut gv = vec![0.0; b * t * d];
                let mut ds = vec![0.0; t * t];
                for bi in 0..b {
                    let base = bi * t * d;
                    for h in 0..*heads {
                        let off = base + h * dh;
                        let p = &probs[(bi * heads + h) * t * t..][..t * t];
                        // dP = G·Vᵀ
                        gemm(t, dh, t, &g[off..], d, 1, &vd[off..], 1, d, 0.0, &mut ds);
                        // dV += Pᵀ·G
                        gemm_rows(t, t, dh, p, 1, t, &g[off..], d, 1, 1.0, &mut gv[off..], d);
                        for (dsr, pr) in ds.chunks_mut(t).zip(p.chunks(t)) {
                            let dot: f64 = dsr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (x, &pj) in dsr.iter_mut().zip(pr) {
                                *x = pj * (*x - dot) * scale;
                            }
                        }
                        // dQ += dS·K, dK += dSᵀ·Q
                        gemm_rows(
                            t,
                            t,
                            dh,
                            &ds,
                            t,
                            1,
                            &kd[off..],
                            d,
                            1,
                            1.0,
                            &mut gq[off..],
                            d,
                        );
                        gemm_rows(
                            t,
                            t,
                            dh,
                            &ds,
                            1,
                            t,
                            &qd[off..],
                            d,
                            1,
                            1.0,
                            &mut gk[off..],
                            d,
                        );
                    }
                }
                add_into(self.acc(*q, grads), &gq);
                add_into(self.acc(*k, grads), &gk);
                add_into(self.acc(*v, grads), &gv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = probs.len() / targets.len();
                let s = g[0] / targets.len() as f64;
                let gl = self.acc(*logits, grads);
                for (r, &target) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == target { 1.0 } else { 0.0 };
                        gl[r * c + j] += s * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf, `None` if the leaf was unreachable
    /// from the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(tape.shape(v).to_vec(), g.clone()).ok()
    }

    /// Gradient of a bound parameter, `None` when the parameter was not bound
    /// or not reachable.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.grads[v.0].as_deref())
    }

    /// Every bound parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|(p, v)| self.grads[v.0].as_deref().map(|g| (*p, g)))
    }
}

/// Central-difference gradient of `f` at `at`.
pub fn finite_diff_grad<F>(mut f: F, at: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(contract("finite_diff_grad eps must be positive"));
    }
    let mut probe = at.clone();
    let mut grad = Tensor::zeros(at.shape());
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both are
/// exactly zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check<F>(inputs: &[Tensor], build: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut worst: f64 = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(&tape, vars[i])
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            let numeric = finite_diff_grad(
                |probe| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| t.leaf(if j == i { probe.clone() } else { x.clone() }))
                        .collect();
                    let l = build(&mut t, &vs)?;
                    t.value(l).item()
                },
                input,
                1e-5,
            )
            .unwrap();
            worst = worst.max(relative_error(&analytic, &numeric));
        }
        worst
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::eye(2));
        let b = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.leaf(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap());
        let q = tape.leaf(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap());
        let r = tape.matmul(p, q).unwrap();
        assert_eq!(tape.value(r).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let err = check(&[a, b], |t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum(c))
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::from_rows(&[&[0.0, 0.0]]).unwrap());
        let loss = tape.cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 2f64.ln()).abs() < 1e-15);

        let l = tape.leaf(Tensor::from_rows(&[&[30.0, -30.0]]).unwrap());
        let loss = tape.cross_entropy(l, &[0]).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-20);

        let err = tape.cross_entropy(l, &[2]).unwrap_err();
        assert!(matches!(
            err,
            Error::Label {
                index: 0,
                target: 2,
                classes: 2
            }
        ));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let err = check(&[logits], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]));
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![5.0; 4]));
        let g = tape.leaf(Tensor::full(&[4], 1.0));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let g0 = tape.leaf(Tensor::zeros(&[4]));
        let beta = tape.leaf(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]));
        let y = tape.layer_norm(x, g0, beta, 1e-5).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(y).row(r), &[1.0, -2.0, 0.5, 3.0]);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let g = Tensor::randn(&[5], 1.0, &mut rng);
        let b = Tensor::randn(&[5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let err = check(&[x, g, b, w], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let z = t.mul(y, v[3])?;
            Ok(t.sum(z))
        });
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_of_linear_map_gradient_is_replicated_input() {
        // loss = sum(x · W) with x [1,3], W [3,2]: dW[i][j] = x[i].
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
        let w = tape.leaf(Tensor::zeros(&[3, 2]));
        let unused = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(
            grads.wrt(&tape, w).unwrap().data(),
            &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]
        );
        assert!(grads.wrt(&tape, unused).is_none());
    }

    #[test]
    fn fan_out_gradients_add() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, 3.0]));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let loss = tape.sum(z); // 2 x²
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(&tape, x).unwrap().data(), &[8.0, 12.0]);
    }

    #[test]
    fn finite_diff_examples() {
        let at = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let g = finite_diff_grad(|x| Ok(x.data().iter().sum()), &at, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let g = finite_diff_grad(
            |x| Ok(0.5 * x.data().iter().map(|v| v * v).sum::<f64>()),
            &at,
            1e-5,
        )
        .unwrap();
        assert!(g.max_abs_diff(&at) < 1e-8);
        assert!(finite_diff_grad(|_| Ok(0.0), &at, 0.0).is_err());
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let bias = Tensor::randn(&[3], 1.0, &mut rng);
        let s = Tensor::randn(&[2], 1.0, &mut rng);
        let err = check(&[x, w, bias, s], |t, v| {
            let a = t.add_bias(v[0], v[2])?;
            let r = t.relu(a);
            let sm = t.softmax(r)?;
            let m = t.mul(sm, v[1])?;
            let rows = t.gather_rows(m, &[3, 1])?;
            let scaled = t.scale_rows(rows, v[3])?;
            let back = t.scatter_rows(scaled, &[0, 2], 4)?;
            let mixed = t.mean_of(&[back, v[1]])?;
            let picked = t.gather(mixed, &[0, 5, 7, 11], vec![2, 2])?;
            let re = t.reshape(picked, vec![4])?;
            let sc = t.scale(re, -1.5);
            Ok(t.sum(sc))
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn attention_gradient_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let v = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let mask = [true, true, false, true, true, true];
        let err = check(&[q, k, v, w], |t, vs| {
            let a = t.attention(vs[0], vs[1], vs[2], 2, &mask)?;
            let m = t.mul(a, vs[3])?;
            Ok(t.sum(m))
        });
        assert!(err <= 1e-6, "{err}");
    }
}
