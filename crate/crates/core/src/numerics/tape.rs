//! Wengert-list reverse-mode autodiff.
//!
//! Every operation appends a node holding its output value and the ids of its
//! inputs, so the node list is topologically ordered by construction. The
//! backward pass walks that list once in reverse, summing gradient
//! contributions into each input.

use crate::error::{AdeError, Result};

use super::kernels::{axpy, dot, matmul_acc, transpose};
use super::tensor::{broadcast_index_map, broadcast_shape};
use super::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<T>,
    },
    Silu(Var),
    Rope {
        x: Var,
        theta_base: f64,
    },
    AttnScores {
        q: Var,
        k: Var,
        scale: T,
    },
    SoftmaxCausal(Var),
    AttnMix {
        probs: Var,
        v: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the `requires_grad` leaves that
/// reach it. Leaves without a path to the loss have no entry.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AdeError {
    AdeError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Flattened `[batch, t, heads, head_dim]` view of a rank ≥ 3 tensor.
fn heads_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(shape_err(op, shape, &[]));
    }
    let r = shape.len();
    let batch = shape[..r - 3].iter().product();
    Ok((batch, shape[r - 3], shape[r - 2], shape[r - 1]))
}

/// cos/sin tables indexed `[pos * half + i]`.
fn rope_tables<T: Scalar>(t: usize, head_dim: usize, theta_base: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(t * half);
    let mut sin = Vec::with_capacity(t * half);
    for pos in 0..t {
        for i in 0..half {
            let freq = theta_base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(T::lit(angle.cos()));
            sin.push(T::lit(angle.sin()));
        }
    }
    (cos, sin)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn binary_broadcast(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).map_err(|_| shape_err(op_name, &sa, &sb))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(&sa, &out_shape);
            let mb = broadcast_index_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Tensor::new(out_shape, data)
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_broadcast(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product with trailing-dimension broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_broadcast(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let src = self.value(a);
        let value =
            Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v * factor).collect()).expect("same shape");
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// `a[..×k] · b[k×n] → [..×n]`; leading dimensions of `a` are treated as
    /// rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", &s, &[]));
        }
        let data = transpose(s[0], s[1], self.value(a).data());
        let value = Tensor::new(vec![s[1], s[0]], data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Row lookup: `out[..., :] = table[ids[...], :]`, output shaped
    /// `lead_shape ++ [d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], lead_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || lead_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("gather_rows", &ts, lead_shape));
        }
        let (rows, d) = (ts[0], ts[1]);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(AdeError::Data {
                    position: pos,
                    reason: format!("token id {id} outside vocabulary of {rows}"),
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let mut shape = lead_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// `y = x / sqrt(mean(x²) + eps) ⊙ weight` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let d = *sx.last().ok_or_else(|| shape_err("rmsnorm", &sx, &sw))?;
        if sw != [d] {
            return Err(shape_err("rmsnorm", &sx, &sw));
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(AdeError::config("rmsnorm_eps", "must be non-negative"));
        }
        let eps = T::lit(eps);
        let xs = self.value(x).data();
        let w = self.value(weight).data();
        let rows = xs.len() / d;
        let mut out = Vec::with_capacity(xs.len());
        let mut inv_rms = Vec::with_capacity(rows);
        let dn = T::lit(d as f64);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(w).map(|(&v, &g)| v * inv * g));
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::RmsNorm { x, weight, inv_rms }, &[x, weight]))
    }

    /// `silu(z) = z · sigmoid(z)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&z| z / (T::one() + (-z).exp())).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Silu(x), &[x])
    }

    /// Rotary embedding on a `[.., t, heads, head_dim]` tensor: adjacent pairs
    /// `(2i, 2i+1)` at position `p` rotate by `p · theta_base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, theta_base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, t, heads, hd) = heads_layout(&shape, "rope")?;
        if hd % 2 != 0 {
            return Err(AdeError::config(
                "head_dim",
                format!("rope needs an even head dimension, got {hd}"),
            ));
        }
        let (cos, sin) = rope_tables::<T>(t, hd, theta_base);
        let mut data = self.value(x).data().to_vec();
        rotate_pairs(&mut data, batch, t, heads, hd, &cos, &sin, false);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Rope { x, theta_base }, &[x]))
    }

    /// Causal attention logits: `q, k: [.., t, h, dh] → [.., h, t, t]`,
    /// `s[h,i,j] = scale · ⟨q[i,h], k[j,h]⟩` for `j ≤ i`, zero above the
    /// diagonal.
    pub fn attention_scores(&mut self, q: Var, k: Var, scale: T) -> Result<Var> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq != sk {
            return Err(shape_err("attention_scores", &sq, &sk));
        }
        let (batch, t, heads, hd) = heads_layout(&sq, "attention_scores")?;
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![T::zero(); batch * heads * t * t];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..t {
                    let qi = &qd[((b * t + i) * heads + h) * hd..][..hd];
                    let row = &mut out[((b * heads + h) * t + i) * t..][..t];
                    for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                        let kj = &kd[((b * t + j) * heads + h) * hd..][..hd];
                        *slot = dot(qi, kj) * scale;
                    }
                }
            }
        }
        let mut shape = sq[..sq.len() - 3].to_vec();
        shape.extend([heads, t, t]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::AttnScores { q, k, scale }, &[q, k]))
    }

    /// Row softmax over `[.., t, t]` with positions `j > i` forced to zero
    /// probability. Max-subtracted for stability.
    pub fn softmax_causal(&mut self, scores: Var) -> Result<Var> {
        let shape = self.shape(scores).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(shape_err("softmax_causal", &shape, &[]));
        }
        let t = shape[r - 1];
        let src = self.value(scores).data();
        let mut out = vec![T::zero(); src.len()];
        for (row_idx, (row, out_row)) in src.chunks(t).zip(out.chunks_mut(t)).enumerate() {
            let i = row_idx % t;
            let visible = &row[..=i];
            let max = visible.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for (o, &v) in out_row.iter_mut().zip(visible) {
                *o = (v - max).exp();
                total = total + *o;
            }
            for o in out_row[..=i].iter_mut() {
                *o = *o / total;
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SoftmaxCausal(scores), &[scores]))
    }

    /// `probs: [.., h, t, t]`, `v: [.., t, h, dh] → [.., t, h, dh]`.
    pub fn attention_mix(&mut self, probs: Var, v: Var) -> Result<Var> {
        let (sp, sv) = (self.shape(probs).to_vec(), self.shape(v).to_vec());
        let (batch, t, heads, hd) = heads_layout(&sv, "attention_mix")?;
        let mut expect = sv[..sv.len() - 3].to_vec();
        expect.extend([heads, t, t]);
        if sp != expect {
            return Err(shape_err("attention_mix", &sp, &sv));
        }
        let (pd, vd) = (self.value(probs).data(), self.value(v).data());
        let mut out = vec![T::zero(); vd.len()];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..t {
                    let prow = &pd[((b * heads + h) * t + i) * t..][..t];
                    let o = &mut out[((b * t + i) * heads + h) * hd..][..hd];
                    for (j, &p) in prow.iter().enumerate().take(i + 1) {
                        axpy(p, &vd[((b * t + j) * heads + h) * hd..][..hd], o);
                    }
                }
            }
        }
        let value = Tensor::new(sv, out)?;
        Ok(self.push(value, Op::AttnMix { probs, v }, &[probs, v]))
    }

    /// Mean negative log-softmax of `logits[.., V]` at `targets`, one target
    /// per row. Uses log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().ok_or_else(|| shape_err("cross_entropy", &shape, &[]))?;
        let src = self.value(logits).data();
        let rows = src.len() / vocab.max(1);
        if rows != targets.len() || rows == 0 {
            return Err(shape_err("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some((pos, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= vocab) {
            return Err(AdeError::Data {
                position: pos,
                reason: format!("target {t} outside vocabulary of {vocab}"),
            });
        }
        let mut probs = vec![T::zero(); src.len()];
        let mut total = 0.0f64;
        for (r, (row, prow)) in src.chunks(vocab).zip(probs.chunks_mut(vocab)).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp();
                z = z + *p;
            }
            for p in prow.iter_mut() {
                *p = *p / z;
            }
            let lse = max + z.ln();
            total += (lse - row[targets[r]]).as_f64();
        }
        let loss = T::lit(total / rows as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| AdeError::usage("backward: loss is not on this tape"))?;
        if node.value.numel() != 1 {
            return Err(AdeError::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !node.needs_grad {
            return Ok(Gradients { grads: out });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                out[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backward_node(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, g: Vec<T>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sum a gradient of `out_shape` down onto `in_shape`.
    fn reduce_to(&self, g: &[T], in_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
        if in_shape == out_shape {
            return g.to_vec();
        }
        let map = broadcast_index_map(in_shape, out_shape);
        let mut acc = vec![T::zero(); in_shape.iter().product()];
        for (&i, &v) in map.iter().zip(g) {
            acc[i] = acc[i] + v;
        }
        acc
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        let r = self.reduce_to(g, self.shape(v), out_shape);
                        self.accumulate(grads, v, r);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.requires_grad(v) {
                        continue;
                    }
                    let od = self.value(other).data();
                    let prod: Vec<T> = if self.shape(other) == out_shape {
                        g.iter().zip(od).map(|(&x, &y)| x * y).collect()
                    } else {
                        let map = broadcast_index_map(self.shape(other), out_shape);
                        g.iter().zip(&map).map(|(&x, &j)| x * od[j]).collect()
                    };
                    let r = self.reduce_to(&prod, self.shape(v), out_shape);
                    self.accumulate(grads, v, r);
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *f).collect());
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, vec![g[0]; self.value(*a).numel()]);
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).numel() / k.max(1);
                if self.requires_grad(*a) {
                    let bt = transpose(k, n, self.value(*b).data());
                    let mut da = vec![T::zero(); m * k];
                    matmul_acc(m, n, k, g, &bt, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let at = transpose(m, k, self.value(*a).data());
                    let mut db = vec![T::zero(); k * n];
                    matmul_acc(k, m, n, &at, g, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                self.accumulate(grads, *a, transpose(s[1], s[0], g));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.to_vec());
            }
            Op::Gather { table, ids } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut dt = vec![T::zero(); ts[0] * d];
                for (pos, &id) in ids.iter().enumerate() {
                    axpy(T::one(), &g[pos * d..(pos + 1) * d], &mut dt[id * d..(id + 1) * d]);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let xs = self.value(*x).data();
                let w = self.value(*weight).data();
                let d = w.len();
                let dn = T::lit(d as f64);
                if self.requires_grad(*weight) {
                    let mut dw = vec![T::zero(); d];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xs[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            dw[j] = dw[j] + gr[j] * row[j] * inv;
                        }
                    }
                    self.accumulate(grads, *weight, dw);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); xs.len()];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xs[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut proj = T::zero();
                        for j in 0..d {
                            proj = proj + gr[j] * w[j] * row[j] * inv;
                        }
                        let proj = proj / dn;
                        for j in 0..d {
                            dx[r * d + j] = inv * (gr[j] * w[j] - row[j] * inv * proj);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Silu(a) => {
                let xs = self.value(*a).data();
                let dx = xs
                    .iter()
                    .zip(g)
                    .map(|(&z, &gv)| {
                        let s = T::one() / (T::one() + (-z).exp());
                        gv * s * (T::one() + z * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Rope { x, theta_base } => {
                let (batch, t, heads, hd) = heads_layout(out_shape, "rope")?;
                let (cos, sin) = rope_tables::<T>(t, hd, *theta_base);
                let mut dx = g.to_vec();
                rotate_pairs(&mut dx, batch, t, heads, hd, &cos, &sin, true);
                self.accumulate(grads, *x, dx);
            }
            Op::AttnScores { q, k, scale } => {
                let (batch, t, heads, hd) = heads_layout(self.shape(*q), "attention_scores")?;
                let (qd, kd) = (self.value(*q).data(), self.value(*k).data());
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                for b in 0..batch {
                    for h in 0..heads {
                        for i in 0..t {
                            let grow = &g[((b * heads + h) * t + i) * t..][..t];
                            let qoff = ((b * t + i) * heads + h) * hd;
                            for (j, &gs) in grow.iter().enumerate().take(i + 1) {
                                let koff = ((b * t + j) * heads + h) * hd;
                                let c = gs * *scale;
                                axpy(c, &kd[koff..koff + hd], &mut dq[qoff..qoff + hd]);
                                axpy(c, &qd[qoff..qoff + hd], &mut dk[koff..koff + hd]);
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
            }
            Op::SoftmaxCausal(s) => {
                let t = *out_shape.last().unwrap();
                let p = node.value.data();
                let mut ds = vec![T::zero(); p.len()];
                for (row_idx, ((prow, grow), drow)) in p.chunks(t).zip(g.chunks(t)).zip(ds.chunks_mut(t)).enumerate() {
                    let i = row_idx % t;
                    let inner = dot(&prow[..=i], &grow[..=i]);
                    for j in 0..=i {
                        drow[j] = prow[j] * (grow[j] - inner);
                    }
                }
                self.accumulate(grads, *s, ds);
            }
            Op::AttnMix { probs, v } => {
                let (batch, t, heads, hd) = heads_layout(self.shape(*v), "attention_mix")?;
                let (pd, vd) = (self.value(*probs).data(), self.value(*v).data());
                let mut dp = vec![T::zero(); pd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                for b in 0..batch {
                    for h in 0..heads {
                        for i in 0..t {
                            let poff = ((b * heads + h) * t + i) * t;
                            let goff = ((b * t + i) * heads + h) * hd;
                            let gi = &g[goff..goff + hd];
                            for j in 0..=i {
                                let voff = ((b * t + j) * heads + h) * hd;
                                dp[poff + j] = dot(gi, &vd[voff..voff + hd]);
                                axpy(pd[poff + j], gi, &mut dv[voff..voff + hd]);
                            }
                        }
                    }
                }
                self.accumulate(grads, *probs, dp);
                self.accumulate(grads, *v, dv);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = *self.shape(*logits).last().unwrap();
                let scale = g[0] / T::lit(targets.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * vocab + t] = dl[r * vocab + t] - scale;
                }
                self.accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn rotate_pairs<T: Scalar>(
    data: &mut [T],
    batch: usize,
    t: usize,
    heads: usize,
    hd: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let half = hd / 2;
    for b in 0..batch {
        for pos in 0..t {
            let c = &cos[pos * half..(pos + 1) * half];
            let s = &sin[pos * half..(pos + 1) * half];
            for h in 0..heads {
                let v = &mut data[((b * t + pos) * heads + h) * hd..][..hd];
                for i in 0..half {
                    let (x0, x1) = (v[2 * i], v[2 * i + 1]);
                    let sn = if inverse { -s[i] } else { s[i] };
                    v[2 * i] = x0 * c[i] - x1 * sn;
                    v[2 * i + 1] = x0 * sn + x1 * c[i];
                }
            }
        }
    }
}
