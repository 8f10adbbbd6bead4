use super::{gemm, gemm_nt, gemm_tn, permute_data, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, rows: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Slice { a: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Sum { a: Var, axis: usize },
    Mean { a: Var, axis: usize },
    SumAll { a: Var },
    Expand { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SigmoidXent { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, so
/// `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Split `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(shape_err("matmul", sa, sb));
        }
        let n = sb[1];
        let rows = self.value(a).numel() / k;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; rows * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, rows, k, n);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, rows, k, n }, &[a, b]))
    }

    /// Batched `a[g, m, k] · b[g, k, n] -> [g, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, g, m, k, n }, &[a, b]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::Shape(format!("permute: {axes:?} is not a permutation of the axes of {shape:?}")));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), shape, axes);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Permute { a, axes: axes.to_vec() }, &[a]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!("slice [{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::Shape(format!("concat axis {axis} for {base_shape:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rank = s.len() == base_shape.len();
            if !same_rank || s.iter().zip(&base_shape).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(shape_err("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// `b` must have the same shape as `a` or a trailing suffix of it.
    fn check_suffix(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    /// Elementwise sum; `b` broadcasts over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add", a, b)?;
        let bd = self.value(b).data();
        let m = bd.len();
        let data: Vec<f64> = self.value(a).data().iter().enumerate().map(|(i, &x)| x + bd[i % m]).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product; `b` broadcasts over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul", a, b)?;
        let bd = self.value(b).data();
        let m = bd.len();
        let data: Vec<f64> = self.value(a).data().iter().enumerate().map(|(i, &x)| x * bd[i % m]).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale { a, s }, &[a])
    }

    fn reduce_axis(&self, a: Var, axis: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        Ok((out, drop_axis(shape, axis)))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (data, shape) = self.reduce_axis(a, axis)?;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Sum { a, axis }, &[a]))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (data, shape) = self.reduce_axis(a, axis)?;
        let n = self.shape(a)[axis] as f64;
        let value = Tensor::new(shape, data.into_iter().map(|x| x / n).collect())?;
        Ok(self.push(value, Op::Mean { a, axis }, &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a }, &[a])
    }

    /// Tile `a` along a new leading axis of length `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::Shape("expand to zero copies".into()));
        }
        let src = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(n * src.numel());
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Expand { a }, &[a]))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { a, axis }, &[a]))
    }

    /// Layer normalisation over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} vs last dim {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * std_normal_cdf(x));
        self.push(value, Op::Gelu { a }, &[a])
    }

    /// Mean softmax cross-entropy of `logits[b, c]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape(format!("softmax_cross_entropy: logits {shape:?} vs {} labels", labels.len())));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Shape(format!("label {bad} out of range for {c} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(value, Op::SoftmaxXent { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Sigmoid (multi-label) cross-entropy: per-example sum over classes,
    /// averaged over the batch.
    pub fn sigmoid_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape != targets.shape() {
            return Err(shape_err("sigmoid_cross_entropy", shape, targets.shape()));
        }
        let b = shape[0];
        let z = self.value(logits).data();
        let loss: f64 =
            z.iter().zip(targets.data()).map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()).sum();
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(value, Op::SigmoidXent { logits, targets: targets.data().to_vec() }, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("loss {loss:?} is not on this tape")));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, rows, k, n } => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |ga| gemm_nt(g, db, ga, rows, n, k));
                acc(b, &mut |gb| gemm_tn(da, g, gb, rows, k, n));
            }
            &Op::BatchMatMul { a, b, g: batches, m, k, n } => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |ga| {
                    for i in 0..batches {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &db[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..batches {
                        gemm_tn(
                            &da[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                acc(*a, &mut |ga| add_into(ga, &back));
            }
            &Op::Reshape { a } => acc(a, &mut |ga| add_into(ga, g)),
            &Op::Slice { a, axis, start } => {
                let in_shape = self.shape(a);
                let (outer, n, inner) = axis_split(in_shape, axis);
                let len = node.value.shape()[axis];
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        let dst = &mut ga[o * n * inner + start * inner..o * n * inner + (start + len) * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            add_into(&mut gv[o * n * inner..(o + 1) * n * inner], src);
                        }
                    });
                    offset += n;
                }
            }
            &Op::Add { a, b } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| {
                    let m = gb.len();
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % m] += x;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let m = db.len();
                acc(a, &mut |ga| {
                    for (i, (o, &x)) in ga.iter_mut().zip(g).enumerate() {
                        *o += x * db[i % m];
                    }
                });
                acc(b, &mut |gb| {
                    for (i, (&x, &y)) in g.iter().zip(da).enumerate() {
                        gb[i % m] += x * y;
                    }
                });
            }
            &Op::Scale { a, s } => acc(a, &mut |ga| {
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o += s * x;
                }
            }),
            &Op::Sum { a, axis } | &Op::Mean { a, axis } => {
                let (outer, n, inner) = axis_split(self.shape(a), axis);
                let factor = match node.op {
                    Op::Mean { .. } => 1.0 / n as f64,
                    _ => 1.0,
                };
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, &x) in dst.iter_mut().zip(src) {
                                *d += factor * x;
                            }
                        }
                    }
                });
            }
            &Op::SumAll { a } => acc(a, &mut |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            &Op::Expand { a } => acc(a, &mut |ga| {
                let m = ga.len();
                for (i, &x) in g.iter().enumerate() {
                    ga[i % m] += x;
                }
            }),
            &Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), axis);
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = *node.value.shape().last().unwrap();
                let gv = self.value(*gain).data();
                acc(*x, &mut |gx| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += is * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (i, (&x, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += x * h;
                    }
                });
                acc(*bias, &mut |gb| {
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % d] += x;
                    }
                });
            }
            &Op::Gelu { a } => {
                let src = self.value(a).data();
                acc(a, &mut |ga| {
                    for ((o, &x), &gv) in ga.iter_mut().zip(src).zip(g) {
                        *o += gv * (std_normal_cdf(x) + x * std_normal_pdf(x));
                    }
                });
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let s = g[0] / b as f64;
                acc(*logits, &mut |gl| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::SigmoidXent { logits, targets } => {
                let b = self.shape(*logits)[0];
                let z = self.value(*logits).data();
                let s = g[0] / b as f64;
                acc(*logits, &mut |gl| {
                    for ((o, &zv), &t) in gl.iter_mut().zip(z).zip(targets) {
                        let sig = 1.0 / (1.0 + (-zv).exp());
                        *o += s * (sig - t);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
