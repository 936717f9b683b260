use super::kernels::{self, ConvDims};
use super::{invalid, numel, Real, Result, Tensor, TensorError, BN_EPS, BN_MOMENTUM};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Running per-channel mean and variance of a batch norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Real> RunningStats<T> {
    /// Placeholder stats that reject eval-mode use until a train-mode pass
    /// has updated them.
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            initialized: false,
            ..Self::standard(channels)
        }
    }

    /// Mean 0, variance 1, usable in eval mode immediately.
    pub fn standard(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `new = (1 - momentum) * old + momentum * batch`, with the unbiased
    /// batch variance.
    fn update(&mut self, mean: &[T], biased_var: &[T], count: usize) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = T::of(count as f64 / (count as f64 - 1.0));
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * mean[c];
            self.var[c] = keep * self.var[c] + m * biased_var[c] * unbias;
        }
        self.initialized = true;
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var, Option<Vec<usize>>),
    Sub(Var, Var, Option<Vec<usize>>),
    Mul(Var, Var, Option<Vec<usize>>),
    Scale(Var, T),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, T, T),
    SmoothL1(Var),
    Sum(Var),
    Mean(Var, Vec<usize>, usize),
    Linear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        dims: (usize, usize, usize),
        train: bool,
    },
    SwapLast2(Var),
    Reshape(Var),
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of differentiable operations. Nodes are appended in
/// execution order, so inputs always precede their consumers.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
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

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, op_name: &'static str, op: Op<T>, shape: Vec<usize>, data: Vec<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !data.iter().all(|v| v.is_finite()) {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            if inputs_finite {
                return Err(TensorError::NonFinite { op: op_name });
            }
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn map_unary(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let shape = src.shape().to_vec();
        self.push(name, op, shape, data, &[a])
    }

    fn broadcast_plan(&self, op: &'static str, a: Var, b: Var) -> Result<Option<Vec<usize>>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(None);
        }
        let compatible = sa.len() == sb.len() && sa.iter().zip(sb).all(|(&x, &y)| y == x || y == 1);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(Some(kernels::broadcast_map(sa, sb)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: fn(Var, Var, Option<Vec<usize>>) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let plan = self.broadcast_plan(name, a, b)?;
        let (xa, xb) = (self.data(a), self.data(b));
        let data: Vec<T> = match &plan {
            None => xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect(),
            Some(map) => xa.iter().zip(map).map(|(&p, &j)| f(p, xb[j])).collect(),
        };
        let shape = self.shape(a).to_vec();
        self.push(name, make(a, b, plan), shape, data, &[a, b])
    }

    /// `a + b`; `b` may broadcast along axes where its extent is 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |p, q| p - q)
    }

    /// Hadamard product; `b` may broadcast along axes where its extent is 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("elementwise_mul", a, b, Op::Mul, |p, q| p * q)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let k = T::of(k);
        self.map_unary("scale", a, Op::Scale(a, k), |v| v * k)
    }

    /// `a + k` elementwise.
    pub fn shift(&mut self, a: Var, k: f64) -> Result<Var> {
        let k = T::of(k);
        self.map_unary("shift", a, Op::Shift(a), |v| v + k)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary("relu", a, Op::Relu(a), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map_unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map_unary("exp", a, Op::Exp(a), |v| v.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if cfg!(debug_assertions) {
            if let Some(&bad) = self.data(a).iter().find(|&&v| !(v > T::zero())) {
                return Err(TensorError::LogDomain(bad.as_f64()));
            }
        }
        self.map_unary("log", a, Op::Log(a), |v| v.ln())
    }

    /// Clips into `[lo, hi]`; the gradient passes only inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.map_unary("clamp", a, Op::Clamp(a, lo, hi), |v| v.max(lo).min(hi))
    }

    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.map_unary("smooth_l1", a, Op::SmoothL1(a), |v| {
            let m = v.abs();
            if m < T::one() {
                T::of(0.5) * v * v
            } else {
                m - T::of(0.5)
            }
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum::<T>();
        self.push("sum", Op::Sum(a), Vec::new(), vec![s], &[a])
    }

    /// Mean over `axes`, which are removed from the output shape.
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&x| x >= shape.len()) {
            return Err(invalid("mean", format!("bad axes {axes:?} for shape {shape:?}")));
        }
        let (out_shape, map) = kernels::reduce_map(&shape, &sorted);
        let count = numel(&shape) / numel(&out_shape);
        let mut out = vec![T::zero(); numel(&out_shape)];
        for (&v, &j) in self.data(a).iter().zip(&map) {
            out[j] = out[j] + v;
        }
        let denom = T::of(count as f64);
        out.iter_mut().for_each(|v| *v = *v / denom);
        self.push("mean", Op::Mean(a, map, count), out_shape, out, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    /// Affine map over the last axis: `x[..., in] · wᵀ + b`, with
    /// `w: [out, in]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let n_in = *xs.last().ok_or_else(|| invalid("linear", "input must have rank >= 1"))?;
        if ws.len() != 2 || ws[1] != n_in {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let n_out = ws[0];
        if bs != [n_out] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: ws,
                rhs: bs,
            });
        }
        let rows = numel(&xs) / n_in;
        let y = kernels::linear_forward(self.data(x), self.data(w), self.data(b), rows, n_in, n_out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        self.push("linear", Op::Linear { x, w, b, rows, n_in, n_out }, shape, y, &[x, w, b])
    }

    /// Cross-correlation over `[B, C_in, L]` (or `[C_in, L]`) with zero
    /// padding. `w: [C_out, C_in, k]`, `b: [C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() == 2 {
            let x3 = self.reshape(x, vec![1, xs[0], xs[1]])?;
            let y = self.conv1d(x3, w, b, stride, padding)?;
            let ys = self.shape(y)[1..].to_vec();
            return self.reshape(y, ys);
        }
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        if self.shape(b) != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: ws,
                rhs: self.shape(b).to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv1d", "stride must be positive"));
        }
        let (len, kernel) = (xs[2], ws[2]);
        if len + 2 * padding < kernel {
            return Err(invalid(
                "conv1d",
                format!("padded length {} is shorter than kernel {kernel}", len + 2 * padding),
            ));
        }
        let dims = ConvDims {
            batch: xs[0],
            c_in: xs[1],
            len,
            c_out: ws[0],
            kernel,
            stride,
            padding,
            out_len: (len + 2 * padding - kernel) / stride + 1,
        };
        let y = kernels::conv1d_forward(self.data(x), self.data(w), self.data(b), &dims);
        let shape = vec![dims.batch, dims.c_out, dims.out_len];
        self.push("conv1d", Op::Conv1d { x, w, b, dims }, shape, y, &[x, w, b])
    }

    /// Batch normalization of `[B, C, L]` per channel.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(invalid("batchnorm1d", format!("expected [B, C, L], got {xs:?}")));
        }
        let (batch, ch, len) = (xs[0], xs[1], xs[2]);
        for v in [gamma, beta] {
            if self.shape(v) != [ch] {
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm1d",
                    lhs: xs.clone(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        if running.channels() != ch {
            return Err(invalid(
                "batchnorm1d",
                format!("running stats hold {} channels, input has {ch}", running.channels()),
            ));
        }
        let eps = T::of(BN_EPS);
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                if batch * len < 2 {
                    return Err(invalid("batchnorm1d", "train mode needs at least two values per channel"));
                }
                let (mean, var) = kernels::channel_stats(self.data(x), batch, ch, len);
                running.update(&mean, &var, batch * len);
                (mean, var, true)
            }
            BatchNormMode::Eval => {
                if !running.initialized {
                    return Err(TensorError::UninitializedStats);
                }
                (running.mean.clone(), running.var.clone(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(xs.iter().product());
        let mut y = Vec::with_capacity(xhat.capacity());
        for (idx, &v) in self.data(x).iter().enumerate() {
            let c = (idx / len) % ch;
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            y.push(g[c] * h + bt[c]);
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            dims: (batch, ch, len),
            train,
        };
        self.push("batchnorm1d", op, xs, y, &[x, gamma, beta])
    }

    /// Swaps the last two axes.
    pub fn swap_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(invalid("swap_last2", format!("rank {} < 2", s.len())));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.data(a);
        let mut out = Vec::with_capacity(src.len());
        for block in src.chunks(m * n) {
            for j in 0..n {
                for i in 0..m {
                    out.push(block[i * n + j]);
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        self.push("swap_last2", Op::SwapLast2(a), shape, out, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(a).to_vec();
        self.push("reshape", Op::Reshape(a), shape, data, &[a])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid("narrow", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("narrow", Op::Narrow { a, axis, start }, shape, out, &[a])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                out.extend_from_slice(&self.data(p)[o * ext * inner..][..ext * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        self.push(
            "concat",
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
            out,
            parts,
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added into every
    /// reachable leaf that requires them; repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if numel(loss_shape) != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((id, g));
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        for (id, g) in leaf_grads {
            self.nodes[id].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn reduce_to(&self, g: &[T], v: Var, map: &Option<Vec<usize>>) -> Vec<T> {
        match map {
            None => g.to_vec(),
            Some(map) => {
                let mut out = vec![T::zero(); self.nodes[v.0].value.numel()];
                for (&gi, &j) in g.iter().zip(map) {
                    out[j] = out[j] + gi;
                }
                out
            }
        }
    }

    fn propagate(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let out = self.nodes[id].value.data();
        let zip_in = |a: Var, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            self.data(a)
                .iter()
                .zip(out)
                .zip(g)
                .map(|((&x, &y), &gy)| f(x, y, gy))
                .collect()
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b, map) => {
                self.send(adj, *a, g.to_vec());
                if self.wants(*b) {
                    self.send(adj, *b, self.reduce_to(g, *b, map));
                }
            }
            Op::Sub(a, b, map) => {
                self.send(adj, *a, g.to_vec());
                if self.wants(*b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.send(adj, *b, self.reduce_to(&neg, *b, map));
                }
            }
            Op::Mul(a, b, map) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                let b_at = |i: usize| match map {
                    None => xb[i],
                    Some(m) => xb[m[i]],
                };
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(i, &gi)| gi * b_at(i)).collect();
                    self.send(adj, *a, ga);
                }
                if self.wants(*b) {
                    let gb: Vec<T> = g.iter().zip(xa).map(|(&gi, &x)| gi * x).collect();
                    self.send(adj, *b, self.reduce_to(&gb, *b, map));
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.send(adj, *a, g.iter().map(|&v| v * k).collect());
            }
            Op::Shift(a) | Op::Reshape(a) => self.send(adj, *a, g.to_vec()),
            Op::Relu(a) => {
                let ga = zip_in(*a, &|x, _, gy| if x > T::zero() { gy } else { T::zero() });
                self.send(adj, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_in(*a, &|_, y, gy| gy * y * (T::one() - y));
                self.send(adj, *a, ga);
            }
            Op::Exp(a) => {
                let ga = zip_in(*a, &|_, y, gy| gy * y);
                self.send(adj, *a, ga);
            }
            Op::Log(a) => {
                let ga = zip_in(*a, &|x, _, gy| gy / x);
                self.send(adj, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = zip_in(*a, &|x, _, gy| if x >= lo && x <= hi { gy } else { T::zero() });
                self.send(adj, *a, ga);
            }
            Op::SmoothL1(a) => {
                let ga = zip_in(*a, &|x, _, gy| {
                    if x.abs() < T::one() {
                        gy * x
                    } else {
                        gy * x.signum()
                    }
                });
                self.send(adj, *a, ga);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                self.send(adj, *a, vec![g[0]; n]);
            }
            Op::Mean(a, map, count) => {
                let inv = T::one() / T::of(*count as f64);
                self.send(adj, *a, map.iter().map(|&j| g[j] * inv).collect());
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                n_in,
                n_out,
            } => {
                let (dx, dw, db) = kernels::linear_backward(
                    self.data(*x),
                    self.data(*w),
                    g,
                    *rows,
                    *n_in,
                    *n_out,
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    self.send(adj, *x, dx);
                }
                self.send(adj, *w, dw);
                self.send(adj, *b, db);
            }
            Op::Conv1d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv1d_backward(self.data(*x), self.data(*w), g, dims, self.wants(*x));
                if let Some(dx) = dx {
                    self.send(adj, *x, dx);
                }
                self.send(adj, *w, dw);
                self.send(adj, *b, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (batch, ch, len),
                train,
            } => {
                let (batch, ch, len) = (*batch, *ch, *len);
                let gam = self.data(*gamma);
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for (idx, (&gy, &h)) in g.iter().zip(xhat).enumerate() {
                    let c = (idx / len) % ch;
                    dgamma[c] = dgamma[c] + gy * h;
                    dbeta[c] = dbeta[c] + gy;
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::of((batch * len) as f64);
                    for (idx, d) in dx.iter_mut().enumerate() {
                        let c = (idx / len) % ch;
                        let dh = g[idx] * gam[c];
                        *d = if *train {
                            // dgamma/dbeta already hold Σ dy·x̂ and Σ dy per channel.
                            gam[c] * inv_std[c] / m * (m * g[idx] - dbeta[c] - xhat[idx] * dgamma[c])
                        } else {
                            dh * inv_std[c]
                        };
                    }
                    self.send(adj, *x, dx);
                }
                self.send(adj, *gamma, dgamma);
                self.send(adj, *beta, dbeta);
            }
            Op::SwapLast2(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let mut ga = Vec::with_capacity(g.len());
                for block in g.chunks(m * n) {
                    for i in 0..m {
                        for j in 0..n {
                            ga.push(block[j * m + i]);
                        }
                    }
                }
                self.send(adj, *a, ga);
            }
            Op::Narrow { a, axis, start } => {
                let s = self.shape(*a);
                let len = self.nodes[id].value.shape()[*axis];
                let (outer, inner) = outer_inner(s, *axis);
                let mut ga = vec![T::zero(); numel(s)];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                self.send(adj, *a, ga);
            }
            Op::Concat { parts, axis } => {
                let s0 = self.shape(parts[0]);
                let total = self.nodes[id].value.shape()[*axis];
                let (outer, inner) = outer_inner(s0, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[(o * total + offset) * inner..][..ext * inner]);
                        }
                        self.send(adj, p, gp);
                    }
                    offset += ext;
                }
            }
        }
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn hadamard_identity_and_annihilator() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let ones = tape.constant(t(&[3], &[1.0; 3]));
        let y = tape.mul(a, ones).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0]);

        let a = tape.constant(t(&[2], &[2.0, 4.0]));
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.mul(a, z).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0]);
    }

    #[test]
    fn hadamard_broadcast_over_time() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[1, 2], &[2.0, 10.0]));
        let y = tape.mul(a, b).unwrap();
        assert_eq!(tape.data(y), &[2.0, 20.0, 6.0, 40.0, 10.0, 60.0]);
    }

    #[test]
    fn hadamard_rejects_incompatible_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3, 2], &[0.0; 6]));
        let b = tape.constant(t(&[2, 2], &[0.0; 4]));
        match tape.mul(a, b).unwrap_err() {
            TensorError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![3, 2]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.constant(t(&[2, 2, 1], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn conv_strided_windows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv1d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.data(y), &[3.0, 9.0]);
    }

    #[test]
    fn conv_output_length_for_pyramid_step() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 128]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 3]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.conv1d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 64]);
    }

    #[test]
    fn conv_rejects_short_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 2]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 3]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(tape.conv1d(x, w, b, 1, 0).is_err());
    }

    fn bn(x: Tensor<f64>, mode: BatchNormMode, stats: &mut RunningStats<f64>) -> Result<Vec<f64>> {
        let c = x.shape()[1];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(x);
        let g = tape.constant(Tensor::full(vec![c], 1.0));
        let b = tape.constant(Tensor::zeros(vec![c]));
        let y = tape.batchnorm1d(x, g, b, stats, mode)?;
        Ok(tape.data(y).to_vec())
    }

    #[test]
    fn batchnorm_constant_input_centers_to_zero() {
        let mut stats = RunningStats::uninitialized(2);
        let y = bn(Tensor::full(vec![3, 2, 4], 7.5), BatchNormMode::Train, &mut stats).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn batchnorm_two_values() {
        let mut stats = RunningStats::uninitialized(1);
        let y = bn(t(&[2, 1, 1], &[1.0, 3.0]), BatchNormMode::Train, &mut stats).unwrap();
        let expect = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((y[0] + expect).abs() < 1e-12 && (y[1] - expect).abs() < 1e-12);
        // running: 0.9·0 + 0.1·2, 0.9·1 + 0.1·(unbiased var 2)
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        assert!((stats.var[0] - 1.1).abs() < 1e-12);
        assert!(stats.initialized);
    }

    #[test]
    fn batchnorm_eval_rejects_uninitialized_stats() {
        let mut stats = RunningStats::uninitialized(1);
        let err = bn(t(&[2, 1, 1], &[1.0, 3.0]), BatchNormMode::Eval, &mut stats).unwrap_err();
        assert_eq!(err, TensorError::UninitializedStats);
    }

    #[test]
    fn batchnorm_train_needs_two_values() {
        let mut stats = RunningStats::uninitialized(1);
        assert!(bn(t(&[1, 1, 1], &[1.0]), BatchNormMode::Train, &mut stats).is_err());
    }

    #[test]
    fn scalar_activations() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[-2.0, 3.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.data(r), &[0.0, 3.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.data(s), &[0.5]);
        let v = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.mean_all(v).unwrap();
        assert_eq!(tape.data(m), &[2.0]);
    }

    #[test]
    fn log_rejects_non_positive_in_debug() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        let r = tape.log(x);
        if cfg!(debug_assertions) {
            assert_eq!(r.unwrap_err(), TensorError::LogDomain(0.0));
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(vec![2, 3]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(tape.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn narrow_and_concat_are_inverse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 4], &[0., 1., 2., 3., 4., 5., 6., 7.]));
        let l = tape.narrow(x, 1, 0, 1).unwrap();
        let r = tape.narrow(x, 1, 1, 3).unwrap();
        assert_eq!(tape.data(l), &[0., 4.]);
        let y = tape.concat(&[l, r], 1).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn swap_last2_transposes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.swap_last2(x).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.data(y), &[1., 4., 2., 5., 3., 6.]);
    }
}
