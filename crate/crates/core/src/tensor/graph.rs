//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] borrows a [`ParameterSet`] and records every operation as a
//! node. [`Graph::backward`] walks the tape in reverse and accumulates
//! parameter gradients into a [`GradStore`].

use super::kernels::{
    cross_entropy_label_smoothed, gemm_acc, gemm_at_acc, gemm_bt_acc, layer_norm_row,
    softmax_in_place,
};
use super::{ParameterSet, RandomSource, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Payload<'p, F> {
    Owned(Vec<F>),
    Borrowed(&'p [F]),
}

enum Op<F> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Dropout(Var, Vec<F>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    /// Gradient of the mean loss w.r.t. the logits, precomputed in the forward pass.
    CrossEntropy(Var, Vec<F>),
    Sum(Vec<Var>),
}

struct Node<'p, F> {
    rows: usize,
    cols: usize,
    value: Payload<'p, F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Per-parameter gradient accumulator, indexed like the borrowed [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct GradStore<F> {
    grads: Vec<Option<Vec<F>>>,
    wanted: Vec<bool>,
}

impl<F: Scalar> GradStore<F> {
    /// Accumulates gradients for every parameter.
    pub fn all(params: &ParameterSet<F>) -> Self {
        Self::select(params, |_| true)
    }

    /// Accumulates gradients only for parameters whose name passes `wanted`.
    pub fn select(params: &ParameterSet<F>, wanted: impl Fn(&str) -> bool) -> Self {
        Self {
            grads: vec![None; params.len()],
            wanted: params.names().map(wanted).collect(),
        }
    }

    pub fn wants(&self, id: usize) -> bool {
        self.wanted[id]
    }

    pub fn get(&self, id: usize) -> Option<&[F]> {
        self.grads[id].as_deref()
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut Vec<F>> {
        self.grads[id].as_mut()
    }

    pub fn take(&mut self, id: usize) -> Option<Vec<F>> {
        self.grads[id].take()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn clear(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn scale(&mut self, s: F) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    fn add(&mut self, id: usize, len: usize, delta: &[F]) {
        let slot = self.grads[id].get_or_insert_with(|| vec![F::zero(); len]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s = *s + *d;
        }
    }

    /// Adds `delta` into the gradient of parameter `id`, allocating it if needed.
    pub fn accumulate(&mut self, id: usize, len: usize, delta: &[F]) {
        self.add(id, len, delta);
    }

    /// Dense gradients laid out like `params`; untouched entries are zero.
    pub fn to_parameter_set(&self, params: &ParameterSet<F>) -> ParameterSet<F> {
        let mut out = params.zeros_like();
        for id in 0..params.len() {
            if let Some(g) = &self.grads[id] {
                out.by_index_mut(id).values_mut().copy_from_slice(g);
            }
        }
        out
    }
}

pub struct Graph<'p, F> {
    params: &'p ParameterSet<F>,
    nodes: Vec<Node<'p, F>>,
    param_vars: Vec<Option<Var>>,
    record: bool,
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// A graph that records what it needs for [`Graph::backward`].
    pub fn new(params: &'p ParameterSet<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            record: true,
        }
    }

    /// A forward-only graph; [`Graph::backward`] is unavailable.
    pub fn inference(params: &'p ParameterSet<F>) -> Self {
        Self {
            record: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParameterSet<F> {
        self.params
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[F] {
        match &self.nodes[v.0].value {
            Payload::Owned(x) => x,
            Payload::Borrowed(x) => x,
        }
    }

    /// The single value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let (r, c) = self.shape(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("node shape is consistent")
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op<F>, parents: &[Var]) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = self.record && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Input };
        self.nodes.push(Node {
            rows,
            cols,
            value: Payload::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input matrix.
    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<F>) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(Error::dim(format!(
                "input of {} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Ok(self.push(rows, cols, values, Op::Input, &[]))
    }

    /// Leaf for a named parameter, viewed as a matrix (vectors become one row).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Lookup(name.to_string()))?;
        if let Some(v) = self.param_vars[id] {
            return Ok(v);
        }
        let t = self.params.by_index(id);
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: Payload::Borrowed(t.values()),
            op: Op::Param(id),
            needs_grad: self.record,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::dim(format!("matmul_bt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_bt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(r, c, out, Op::Add(a, b), &[a, b]))
    }

    /// Adds the single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (1, c) {
            return Err(Error::dim(format!(
                "broadcast row {:?} onto {r}x{c}",
                self.shape(b)
            )));
        }
        let bias = self.value(b);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(r, c, out, Op::AddRow(a, b), &[a, b]))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.max(F::zero())).collect();
        self.push(r, c, out, Op::Relu(a), &[a])
    }

    /// Inverted dropout: kept entries are scaled by `1/(1−p)`. Rate 0 returns `a` itself.
    pub fn dropout(&mut self, a: Var, p: F, rng: &mut RandomSource) -> Result<Var> {
        if p < F::zero() || p >= F::one() {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == F::zero() {
            return Ok(a);
        }
        let (r, c) = self.shape(a);
        let keep = F::one() / (F::one() - p);
        let p64 = p.as_f64();
        let mask: Vec<F> = (0..r * c)
            .map(|_| if rng.unit() < p64 { F::zero() } else { keep })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        Ok(self.push(r, c, out, Op::Dropout(a, mask), &[a]))
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::dim(format!(
                "layer_norm width {c} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let mut out = vec![F::zero(); r * c];
        let mut inv_std = Vec::with_capacity(r);
        {
            let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
            for i in 0..r {
                inv_std.push(layer_norm_row(
                    &xv[i * c..(i + 1) * c],
                    g,
                    b,
                    eps,
                    &mut out[i * c..(i + 1) * c],
                ));
            }
        }
        let xhat = if self.record {
            let xv = self.value(x);
            let mut xhat = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let mean = row.iter().copied().sum::<F>() / F::of_usize(c);
                xhat.extend(row.iter().map(|&v| (v - mean) * inv_std[i]));
            }
            xhat
        } else {
            Vec::new()
        };
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(r, c, out, op, &[x, gain, bias]))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` gets `-inf`
    /// before normalization and exactly zero weight after.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            if causal {
                for v in row.iter_mut().skip(i + 1) {
                    *v = F::neg_infinity();
                }
            }
            softmax_in_place(row);
        }
        self.push(r, c, out, Op::Softmax(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c || len == 0 {
            return Err(Error::dim(format!(
                "columns {start}..{} of width {c}",
                start + len
            )));
        }
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(r, len, out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::dim("concat of nothing"))?;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::dim("concat_cols row counts differ"));
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Selects rows of `table` by id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Index { index: id, size: r });
            }
            out.extend_from_slice(&self.value(table)[id * c..(id + 1) * c]);
        }
        if ids.is_empty() {
            return Err(Error::Length("gather of zero rows".into()));
        }
        Ok(self.push(ids.len(), c, out, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Mean over rows of the label-smoothed cross-entropy of each logits row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], eps_ls: F) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::dim(format!(
                "{} targets for {r} rows",
                targets.len()
            )));
        }
        let inv_n = F::one() / F::of_usize(r);
        let mut loss = F::zero();
        let mut grad = if self.record {
            Vec::with_capacity(r * c)
        } else {
            Vec::new()
        };
        for (i, &t) in targets.iter().enumerate() {
            let row = &self.value(logits)[i * c..(i + 1) * c];
            let (l, g) = cross_entropy_label_smoothed(row, t, eps_ls)?;
            loss = loss + l;
            if self.record {
                grad.extend(g.into_iter().map(|v| v * inv_n));
            }
        }
        Ok(self.push(
            1,
            1,
            vec![loss * inv_n],
            Op::CrossEntropy(logits, grad),
            &[logits],
        ))
    }

    /// Sum of 1×1 nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.iter().any(|&p| self.shape(p) != (1, 1)) {
            return Err(Error::dim("sum_scalars expects 1x1 nodes"));
        }
        let s = parts.iter().map(|&p| self.scalar(p)).sum();
        Ok(self.push(1, 1, vec![s], Op::Sum(parts.to_vec()), parts))
    }

    /// Accumulates d(loss)/d(param) into `store` for every parameter it wants.
    pub fn backward(&self, loss: Var, store: &mut GradStore<F>) -> Result<()> {
        if !self.record {
            return Err(Error::State("backward on an inference graph".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::dim("backward expects a 1x1 loss"));
        }
        if store.len() != self.params.len() {
            return Err(Error::dim(
                "gradient store does not match the parameter set",
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    if store.wants(*id) {
                        store.add(*id, r * c, &dy);
                    }
                }
                Op::MatMul(a, b) => {
                    let k = self.shape(*a).1;
                    if self.nodes[a.0].needs_grad {
                        let ga = self.grad_slot(&mut grads, *a);
                        gemm_bt_acc(&dy, self.value(*b), ga, r, c, k);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = self.grad_slot(&mut grads, *b);
                        gemm_at_acc(self.value(*a), &dy, gb, r, k, c);
                    }
                }
                Op::MatMulBt(a, b) => {
                    // y = a·bᵀ with a: r×k, b: c×k.
                    let k = self.shape(*a).1;
                    if self.nodes[a.0].needs_grad {
                        let ga = self.grad_slot(&mut grads, *a);
                        gemm_acc(&dy, self.value(*b), ga, r, c, k);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = self.grad_slot(&mut grads, *b);
                        gemm_at_acc(&dy, self.value(*a), gb, r, c, k);
                    }
                }
                Op::Add(a, b) => {
                    for p in [a, b] {
                        if self.nodes[p.0].needs_grad {
                            add_into(self.grad_slot(&mut grads, *p), &dy);
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        add_into(self.grad_slot(&mut grads, *a), &dy);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = self.grad_slot(&mut grads, *b);
                        for row in dy.chunks(c) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = self.grad_slot(&mut grads, *a);
                    for (g, &d) in ga.iter_mut().zip(&dy) {
                        *g = *g + d * *s;
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = self.grad_slot(&mut grads, *a);
                    for ((g, &d), &xv) in ga.iter_mut().zip(&dy).zip(x) {
                        if xv > F::zero() {
                            *g = *g + d;
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    let ga = self.grad_slot(&mut grads, *a);
                    for ((g, &d), &m) in ga.iter_mut().zip(&dy).zip(mask) {
                        *g = *g + d * m;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    if self.nodes[gain.0].needs_grad {
                        let gg = self.grad_slot(&mut grads, *gain);
                        for (drow, xrow) in dy.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                gg[j] = gg[j] + drow[j] * xrow[j];
                            }
                        }
                    }
                    if self.nodes[bias.0].needs_grad {
                        let gb = self.grad_slot(&mut grads, *bias);
                        for drow in dy.chunks(c) {
                            add_into(gb, drow);
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let gx = self.grad_slot(&mut grads, *x);
                        let n = F::of_usize(c);
                        let mut dxhat = vec![F::zero(); c];
                        for i in 0..r {
                            let drow = &dy[i * c..(i + 1) * c];
                            let xrow = &xhat[i * c..(i + 1) * c];
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for j in 0..c {
                                dxhat[j] = drow[j] * gv[j];
                                s1 = s1 + dxhat[j];
                                s2 = s2 + dxhat[j] * xrow[j];
                            }
                            let k = inv_std[i] / n;
                            let out = &mut gx[i * c..(i + 1) * c];
                            for j in 0..c {
                                out[j] = out[j] + k * (n * dxhat[j] - s1 - xrow[j] * s2);
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(idx));
                    let ga = self.grad_slot(&mut grads, *a);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let dr = &dy[i * c..(i + 1) * c];
                        let dot: F = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + yr[j] * (dr[j] - dot);
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let pc = self.shape(*a).1;
                    let ga = self.grad_slot(&mut grads, *a);
                    for i in 0..r {
                        add_into(
                            &mut ga[i * pc + start..i * pc + start + c],
                            &dy[i * c..(i + 1) * c],
                        );
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        if self.nodes[p.0].needs_grad {
                            let gp = self.grad_slot(&mut grads, p);
                            for i in 0..r {
                                add_into(
                                    &mut gp[i * pc..(i + 1) * pc],
                                    &dy[i * c + offset..i * c + offset + pc],
                                );
                            }
                        }
                        offset += pc;
                    }
                }
                Op::Gather(table, ids) => {
                    let gt = self.grad_slot(&mut grads, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * c..(id + 1) * c], &dy[i * c..(i + 1) * c]);
                    }
                }
                Op::CrossEntropy(logits, g) => {
                    let up = dy[0];
                    let gl = self.grad_slot(&mut grads, *logits);
                    for (o, &v) in gl.iter_mut().zip(g) {
                        *o = *o + up * v;
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        if self.nodes[p.0].needs_grad {
                            let gp = self.grad_slot(&mut grads, p);
                            gp[0] = gp[0] + dy[0];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> &'g mut Vec<F> {
        let n = &self.nodes[v.0];
        grads[v.0].get_or_insert_with(|| vec![F::zero(); n.rows * n.cols])
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    fn random_params(shapes: &[(&str, usize, usize)], seed: u64) -> ParameterSet<f64> {
        let mut rng = RandomSource::new(seed);
        let mut p = ParameterSet::new();
        for &(name, r, c) in shapes {
            let vals = (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
            p.insert(name, Tensor::new(vec![r, c], vals).unwrap())
                .unwrap();
        }
        p
    }

    /// Runs `build` for value and gradient, then checks against central differences.
    fn check<B>(params: &ParameterSet<f64>, build: B) -> f64
    where
        B: Fn(&mut Graph<'_, f64>) -> Result<Var>,
    {
        let mut g = Graph::new(params);
        let loss = build(&mut g).unwrap();
        let mut store = GradStore::all(params);
        g.backward(loss, &mut store).unwrap();
        let analytic = store.to_parameter_set(params);
        let value = |p: &ParameterSet<f64>| {
            let mut g = Graph::inference(p);
            let l = build(&mut g)?;
            Ok(g.scalar(l))
        };
        finite_difference_check(value, &analytic, params, 1e-5)
            .unwrap()
            .max_rel_error
    }

    /// Reduces any matrix to a scalar with fixed random row and column weights.
    fn project(g: &mut Graph<'_, f64>, v: Var) -> Result<Var> {
        let (r, c) = g.shape(v);
        let mut rng = RandomSource::new(7);
        let col: Vec<f64> = (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let row: Vec<f64> = (0..r).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let col = g.input(c, 1, col)?;
        let row = g.input(1, r, row)?;
        let vc = g.matmul(v, col)?;
        g.matmul(row, vc)
    }

    #[test]
    fn matmul_gradients() {
        let p = random_params(&[("a", 3, 4), ("b", 4, 2)], 1);
        let err = check(&p, |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            let y = g.matmul(a, b)?;
            project(g, y)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_bt_softmax_gradients() {
        let p = random_params(&[("a", 3, 4), ("b", 3, 4)], 2);
        for causal in [false, true] {
            let err = check(&p, |g| {
                let (a, b) = (g.param("a")?, g.param("b")?);
                let s = g.matmul_bt(a, b)?;
                let s = g.scale(s, 0.5);
                let y = g.softmax_rows(s, causal);
                project(g, y)
            });
            assert!(err < 1e-6, "causal={causal}: {err}");
        }
    }

    #[test]
    fn layer_norm_relu_bias_gradients() {
        let p = random_params(&[("x", 3, 5), ("g", 1, 5), ("b", 1, 5), ("w", 5, 5)], 3);
        let err = check(&p, |g| {
            let (x, gain, bias, w) = (g.param("x")?, g.param("g")?, g.param("b")?, g.param("w")?);
            let n = g.layer_norm(x, gain, bias, 1e-6)?;
            let h = g.affine(n, w, bias)?;
            let h = g.relu(h);
            project(g, h)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn slice_concat_gather_cross_entropy_gradients() {
        let p = random_params(&[("t", 6, 4), ("w", 4, 6)], 4);
        let err = check(&p, |g| {
            let (t, w) = (g.param("t")?, g.param("w")?);
            let x = g.gather(t, &[1, 4, 1, 0])?;
            let left = g.slice_cols(x, 0, 2)?;
            let right = g.slice_cols(x, 2, 2)?;
            let x = g.concat_cols(&[right, left])?;
            let x2 = g.add(x, x)?;
            let logits = g.matmul(x2, w)?;
            let l1 = g.cross_entropy(logits, &[0, 5, 2, 3], 0.1)?;
            let l2 = g.cross_entropy(logits, &[1, 1, 1, 1], 0.0)?;
            g.sum_scalars(&[l1, l2])
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_masks_repeat() {
        let p = random_params(&[("x", 4, 8)], 5);
        let mut g = Graph::new(&p);
        let x = g.param("x").unwrap();
        let mut rng = RandomSource::new(9);
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);

        let run = |seed| {
            let mut g = Graph::new(&p);
            let x = g.param("x").unwrap();
            let mut rng = RandomSource::new(seed);
            let y = g.dropout(x, 0.5, &mut rng).unwrap();
            g.value(y).to_vec()
        };
        let a = run(11);
        assert_eq!(a, run(11));
        assert!(a.contains(&0.0));
        // Survivors are scaled by 1/(1-p).
        let x = p.get("x").unwrap().values();
        for (y, x) in a.iter().zip(x) {
            assert!(*y == 0.0 || (*y - 2.0 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_softmax_rows_are_normalized_with_exact_zeros() {
        let p = random_params(&[("s", 5, 5)], 6);
        let mut g = Graph::inference(&p);
        let s = g.param("s").unwrap();
        let y = g.softmax_rows(s, true);
        let v = g.value(y);
        for i in 0..5 {
            let row = &v[i * 5..(i + 1) * 5];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&w| w == 0.0));
        }
    }

    #[test]
    fn shape_errors() {
        let p = random_params(&[("a", 2, 3), ("b", 4, 2)], 8);
        let mut g = Graph::new(&p);
        let (a, b) = (g.param("a").unwrap(), g.param("b").unwrap());
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
        assert!(matches!(g.gather(a, &[2]), Err(Error::Index { .. })));
        assert!(matches!(g.param("nope"), Err(Error::Lookup(_))));
    }
}
