use std::rc::Rc;

use super::kernels::{self, gemm_acc, gemm_strided, Strided};
use super::{check_shape, strides, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Add { a: Var, b: Var },
    AddTrailing { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Reshape { a: Var },
    Gather { a: Var, index: Rc<[usize]> },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize> },
    Softmax { a: Var, outer: usize, dim: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Sum { a: Var },
    MeanAxis { a: Var, outer: usize, dim: usize, inner: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records operations in execution order so that [`Tape::backward`] can
/// replay them in reverse.
///
/// Gradient slots are zero-filled when a tensor requiring gradients enters the
/// tape and `backward` adds into them. A tape supports a single `backward`
/// call; a second call is rejected with [`Error::Contract`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<T: Float>(op: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(pos) => Err(Error::numeric(op, format!("non-finite output at flat index {pos}"))),
    }
}

/// Flat source offsets for `permute(shape, perm)`.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let steps: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    if n == 0 {
        return index;
    }
    let rank = out_shape.len();
    let (inner, inner_step) = match rank {
        0 => (1, 0),
        _ => (out_shape[rank - 1], steps[rank - 1]),
    };
    let outer_rank = rank.saturating_sub(1);
    let mut counter = vec![0usize; outer_rank];
    let mut base = 0usize;
    for _ in 0..n / inner {
        index.extend((0..inner).map(|j| base + j * inner_step));
        for ax in (0..outer_rank).rev() {
            counter[ax] += 1;
            base += steps[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            base -= steps[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    index
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated for `v`, if it requires one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Records a tensor as an input. Its `requires_grad` flag is honoured and
    /// its gradient slot is reset to zero.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        tensor.set_requires_grad(rg);
        self.nodes.push(Node { value: tensor, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable input (gradient slot enabled).
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad())
    }

    /// Records an input that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        ensure_finite(op_name, &data)?;
        let mut value = Tensor::from_parts_unchecked(shape, data);
        if inputs.iter().any(|&v| self.rg(v)) {
            value.set_requires_grad(true);
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with the same leading extents
    /// as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if !shared_b && lead_a != lead_b {
            return Err(mismatch());
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            if shared_b {
                gemm_acc(ad, bd, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    gemm_acc(
                        &ad[i * m * k..(i + 1) * m * k],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        self.push("matmul", shape, out, Op::MatMul { a, b, batch, m, k, n, shared_b }, &[a, b])
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add { a, b }, &[a, b])
    }

    /// `a + b` where `b`'s shape equals the trailing extents of `a`'s shape
    /// (bias vectors, attention biases and masks).
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(
                "add_trailing",
                format!("{sb:?} is not a trailing shape of {sa:?}"),
            ));
        }
        let bd = self.data(b);
        let out = self
            .data(a)
            .chunks(bd.len())
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let shape = sa.to_vec();
        self.push("add_trailing", shape, out, Op::AddTrailing { a, b }, &[a, b])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale { a, factor }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape, "reshape")?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            ));
        }
        let out = self.data(a).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a }, &[a])
    }

    /// `out[i] = a[index[i]]`, shaped as `shape`. Gradients scatter-add back.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        check_shape(shape, "gather")?;
        let n = self.value(a).len();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim(
                "gather",
                format!("index of length {} cannot fill {shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather", format!("index {bad} out of range for {n} values")));
        }
        let src = self.data(a);
        let out = index.iter().map(|&i| src[i]).collect();
        self.push("gather", shape.to_vec(), out, Op::Gather { a, index }, &[a])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let index: Rc<[usize]> = permute_index(&shape, perm).into();
        self.gather(a, index, &out_shape)
    }

    /// Slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("narrow", format!("[{start}, {start}+{len}) on axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, index.into(), &out_shape)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} does not fit {base:?} on axis {axis}")));
            }
            let inner: usize = s[axis..].iter().product();
            widths.push(inner);
        }
        let outer: usize = base[..axis].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        self.push("concat", shape, out, Op::Concat { parts: parts.to_vec(), outer, widths }, parts)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let out = kernels::softmax(self.data(a), outer, dim, inner);
        self.push("softmax", shape, out, Op::Softmax { a, outer, dim, inner }, &[a])
    }

    /// Layer normalization over the last axis with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must be [{d}] for input {shape:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (y, xhat, rstd) =
            kernels::layer_norm(self.data(x), self.data(gain), self.data(bias), d, T::of(eps));
        self.push("layer_norm", shape, y, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, out, Op::Gelu { a }, &[a])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { a }, &[a])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.mean_axis(flat, 0)
    }

    /// Mean along `axis`; the axis is removed (a rank-1 input yields `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("mean_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let inv = T::one() / T::of(dim as f64);
        let src = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> =
            shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push("mean_axis", out_shape, out, Op::MeanAxis { a, outer, dim, inner }, &[a])
    }

    /// Mean cross-entropy of `[N, C]` logits against integer class labels,
    /// computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("cross_entropy", format!("logits must be [N, C], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::Contract(format!("{} labels for {n} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let z = self.data(logits);
        let probs = kernels::softmax(z, n, c, 1);
        let mut total = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(row[0], T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[l];
        }
        let loss = total / T::of(n as f64);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push("cross_entropy", vec![1], vec![loss], op, &[logits])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Adds `d loss / d t` into the gradient slot of every tensor reachable
    /// from `loss` that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward() already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0].value.grad_mut() {
            g[0] += T::one();
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let gout = self.nodes[i].value.take_grad().expect("grad slot");
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.apply_rule(i, &op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].value.put_grad(Some(gout));
        }
        Ok(())
    }

    /// Runs `f(input_grad, nodes)` if `v` requires a gradient.
    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.rg(v) {
            return;
        }
        let mut g = self.nodes[v.0].value.take_grad().expect("grad slot");
        f(&mut g, &self.nodes);
        self.nodes[v.0].value.put_grad(Some(g));
    }

    fn apply_rule(&mut self, out: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                // dA = dC * B^T
                self.accumulate(a, |ga, nodes| {
                    let bd = nodes[b.0].value.data();
                    if shared_b {
                        gemm_strided(batch * m, n, k, Strided::row_major(g, n), Strided::transposed(bd, n), ga);
                    } else {
                        for i in 0..batch {
                            let bt = Strided::transposed(&bd[i * k * n..(i + 1) * k * n], n);
                            let gi = Strided::row_major(&g[i * m * n..(i + 1) * m * n], n);
                            gemm_strided(m, n, k, gi, bt, &mut ga[i * m * k..(i + 1) * m * k]);
                        }
                    }
                });
                // dB = A^T * dC
                self.accumulate(b, |gb, nodes| {
                    let ad = nodes[a.0].value.data();
                    if shared_b {
                        gemm_strided(k, batch * m, n, Strided::transposed(ad, k), Strided::row_major(g, n), gb);
                    } else {
                        for i in 0..batch {
                            let at = Strided::transposed(&ad[i * m * k..(i + 1) * m * k], k);
                            let gi = Strided::row_major(&g[i * m * n..(i + 1) * m * n], n);
                            gemm_strided(k, m, n, at, gi, &mut gb[i * k * n..(i + 1) * k * n]);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    self.accumulate(v, |gv, _| gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
            }
            Op::AddTrailing { a, b } => {
                self.accumulate(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.accumulate(b, |gb, _| {
                    for row in g.chunks(gb.len()) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Mul { a, b } => {
                self.accumulate(a, |ga, nodes| {
                    let bd = nodes[b.0].value.data();
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gy * bv;
                    }
                });
                self.accumulate(b, |gb, nodes| {
                    let ad = nodes[a.0].value.data();
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gy * av;
                    }
                });
            }
            Op::Scale { a, factor } => {
                self.accumulate(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * factor));
            }
            Op::Reshape { a } => {
                self.accumulate(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Gather { a, ref index } => {
                self.accumulate(a, |ga, _| {
                    for (&i, &y) in index.iter().zip(g) {
                        ga[i] += y;
                    }
                });
            }
            Op::Concat { ref parts, outer, ref widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    self.accumulate(p, |gp, _| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            gp[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                    });
                    offset += w;
                }
            }
            Op::Softmax { a, outer, dim, inner } => {
                self.accumulate(a, |ga, nodes| {
                    let y = nodes[out].value.data();
                    kernels::softmax_backward(y, g, ga, outer, dim, inner);
                });
            }
            Op::LayerNorm { x, gain, bias, ref xhat, ref rstd } => {
                let d = xhat.len() / rstd.len();
                let inv_d = T::one() / T::of(d as f64);
                self.accumulate(x, |gx, nodes| {
                    let gain_d = nodes[gain.0].value.data();
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gy[j] * gain_d[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dxh = gy[j] * gain_d[j];
                            gx[r * d + j] += rs * (dxh - m1 - xh[j] * m2);
                        }
                    }
                });
                self.accumulate(gain, |gg, _| {
                    for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                });
                self.accumulate(bias, |gb, _| {
                    for gy in g.chunks(d) {
                        gb.iter_mut().zip(gy).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Gelu { a } => {
                self.accumulate(a, |ga, nodes| {
                    let xs = nodes[a.0].value.data();
                    for ((x, &gy), &xv) in ga.iter_mut().zip(g).zip(xs) {
                        *x += gy * kernels::gelu_grad(xv);
                    }
                });
            }
            Op::Sum { a } => {
                self.accumulate(a, |ga, _| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::MeanAxis { a, outer, dim, inner } => {
                let inv = T::one() / T::of(dim as f64);
                self.accumulate(a, |ga, _| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            let row = &mut ga[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            row.iter_mut().zip(src).for_each(|(x, &y)| *x += y * inv);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, ref labels, ref probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let s = g[0] / T::of(n as f64);
                self.accumulate(logits, |gl, _| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let t = if j == l { T::one() } else { T::zero() };
                            gl[i * c + j] += s * (probs[i * c + j] - t);
                        }
                    }
                });
            }
        }
    }
}
