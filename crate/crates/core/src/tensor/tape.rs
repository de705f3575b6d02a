//! Wengert-style tape: operations are appended as they execute and the
//! backward pass walks them in exact reverse order.

use super::kernels::{axis_split, check_matmul, gemm, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Threshold below which a slice is treated as having zero norm.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Log(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AddBias(Var, Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L2Normalize(Var, usize),
    GlobalAvgPool(Var),
    /// Input offset chosen for every output element.
    MaxPool2(Var, Vec<usize>),
    Row(Var, usize),
    BroadcastRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it required one.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(!self.consumed, "recording onto a consumed tape");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor {
            shape: self.shape(a).to_vec(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim(format!(
                "scale_by needs a single-element factor, got {:?}",
                self.shape(s)
            )));
        }
        let c = self.value(s).item();
        let out = self.map(a, |x| x * c);
        Ok(self.push(out, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Natural logarithm; inputs must be positive.
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    /// `max(a, floor)`; gradient flows only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.map(a, |x| x.max(floor));
        self.push(out, Op::ClampMin(a, floor), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &src[(o * len + i) * inner..][..inner];
                for (d, s) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let out = Tensor {
            shape: new_shape,
            data: out,
        };
        Ok(self.push(out, Op::SumAxis(a, axis), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = Tensor::new(shape, self.data(a).to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out = permute_tensor(self.value(a), perm);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).len();
        if n < 2 {
            return Err(Error::dim("transpose needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(a, &perm)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_matmul(self.shape(a), self.shape(b))?;
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_t(a, b, false, false)
    }

    /// Batched product with optional per-operand transposition of the last
    /// two axes: `op(a) · op(b)`.
    pub fn bmm_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || {
            Error::dim(format!(
                "bmm needs [B, m, k] x [B, k, n] (transposed: {ta}, {tb}), got {sa:?} x {sb:?}"
            ))
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(bad());
        }
        let bs = sa[0];
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            gemm(m, k, n, &da[i * m * k..], ta, &db[i * k * n..], tb, &mut out[i * m * n..], 0.0);
        }
        let out = Tensor {
            shape: vec![bs, m, n],
            data: out,
        };
        Ok(self.push(out, Op::Bmm { a, b, ta, tb }, &[a, b]))
    }

    /// 2-D cross-correlation of `[B, C, H, W]` with `[F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let (bs, f) = (self.shape(x)[0], self.shape(w)[0]);
        let (patch, npix) = (geom.patch(), geom.out_pixels());
        let img_len = geom.c * geom.h * geom.w;
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; patch * npix] };
        let mut out = vec![0.0; bs * f * npix];
        let (dx, dw) = (self.data(x), self.data(w));
        for b in 0..bs {
            let img = &dx[b * img_len..][..img_len];
            let cols: &[f64] = if geom.is_pointwise() {
                img
            } else {
                geom.im2col(img, &mut col);
                &col
            };
            gemm(f, patch, npix, dw, false, cols, false, &mut out[b * f * npix..], 0.0);
        }
        let out = Tensor {
            shape: vec![bs, f, geom.ho, geom.wo],
            data: out,
        };
        Ok(self.push(out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Adds the vector `b` along `axis` of `x` (e.g. a per-channel bias).
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(b) != [shape[axis]] {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not match axis {axis} of {shape:?}",
                self.shape(b)
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.data(x).to_vec();
        let bias = self.data(b);
        for o in 0..outer {
            for (i, bv) in bias.iter().enumerate().take(len) {
                for v in &mut out[(o * len + i) * inner..][..inner] {
                    *v += bv;
                }
            }
        }
        let out = Tensor { shape, data: out };
        Ok(self.push(out, Op::AddBias(x, b, axis), &[x, b]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let out = softmax_along(self.value(a), axis, false);
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let out = softmax_along(self.value(a), axis, true);
        Ok(self.push(out, Op::LogSoftmax(a, axis), &[a]))
    }

    /// Scales every slice along `axis` to unit L2 norm. Slices with norm
    /// below [`NORM_EPS`] become zeros.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let out = l2_normalize_along(self.value(a), axis);
        Ok(self.push(out, Op::L2Normalize(a, axis), &[a]))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_average_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!("global_average_pool needs [B, C, H, W], got {shape:?}")));
        }
        let hw = shape[2] * shape[3];
        let data = self
            .data(a)
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor {
            shape: vec![shape[0], shape[1]],
            data,
        };
        Ok(self.push(out, Op::GlobalAvgPool(a), &[a]))
    }

    /// Non-overlapping 2×2 mean pooling of `[B, C, H, W]` with even H, W.
    /// 2×2 max pooling with stride 2; ties go to the first element in
    /// row-major order.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 || !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
            return Err(Error::dim(format!("max_pool2 needs [B, C, even H, even W], got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(a);
        let planes = shape[0] * shape[1];
        let mut out = vec![0.0; planes * ho * wo];
        let mut picks = vec![0usize; planes * ho * wo];
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..ho {
                for x in 0..wo {
                    let i = base + 2 * y * w + 2 * x;
                    let mut best = i;
                    for j in [i + 1, i + w, i + w + 1] {
                        if src[j] > src[best] {
                            best = j;
                        }
                    }
                    let o = (p * ho + y) * wo + x;
                    out[o] = src[best];
                    picks[o] = best;
                }
            }
        }
        let out = Tensor {
            shape: vec![shape[0], shape[1], ho, wo],
            data: out,
        };
        Ok(self.push(out, Op::MaxPool2(a, picks), &[a]))
    }

    /// Row `i` of a 2-D value, as a 1-D value.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 || i >= shape[0] {
            return Err(Error::dim(format!("row {i} out of range for {shape:?}")));
        }
        let out = Tensor {
            shape: vec![shape[1]],
            data: self.value(a).row(i).to_vec(),
        };
        Ok(self.push(out, Op::Row(a, i), &[a]))
    }

    /// Stacks a 1-D value `n` times into an `[n, len]` matrix.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 1 || n == 0 {
            return Err(Error::dim(format!("broadcast_rows needs a 1-D value, got {shape:?}")));
        }
        let len = shape[0];
        let src = self.data(a);
        let data = (0..n).flat_map(|_| src.iter().copied()).collect();
        let out = Tensor {
            shape: vec![n, len],
            data,
        };
        Ok(self.push(out, Op::BroadcastRows(a), &[a]))
    }

    /// Back-propagates from the scalar `loss`, consuming the tape.
    ///
    /// Recorded values stay readable afterwards, but the tape accepts no
    /// further backward passes.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract("tape already consumed by a backward pass".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(data) if n.requires_grad => Some(Tensor {
                    shape: n.value.shape.clone(),
                    data,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Accumulates `f(grad_buffer)` into `v` if it needs a gradient.
    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| axpy(d, g, *c)),
            Op::AddScalar(a) => self.acc(grads, *a, |d| axpy(d, g, 1.0)),
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                self.acc(grads, *a, |d| axpy(d, g, c));
                let va = self.data(*a);
                self.acc(grads, *s, |d| {
                    d[0] += g.iter().zip(va).map(|(g, x)| g * x).sum::<f64>();
                });
            }
            Op::Relu(a) => {
                let va = self.data(*a);
                self.acc(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let va = self.data(*a);
                self.acc(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g / x;
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let va = self.data(*a);
                self.acc(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        if *x > *floor {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                self.acc(grads, *a, |d| {
                    for o in 0..outer {
                        let src = &g[o * inner..][..inner];
                        for i in 0..len {
                            axpy(&mut d[(o * len + i) * inner..][..inner], src, 1.0);
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |d| axpy(d, g, 1.0)),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor {
                    shape: out.shape.clone(),
                    data: g.to_vec(),
                };
                let back = permute_tensor(&gt, &inv);
                self.acc(grads, *a, |d| axpy(d, &back.data, 1.0));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.data(*a), self.data(*b));
                // dA = G B^T, dB = A^T G
                self.acc(grads, *a, |d| gemm(m, n, k, g, false, vb, true, d, 1.0));
                self.acc(grads, *b, |d| gemm(k, m, n, va, true, g, false, d, 1.0));
            }
            Op::Bmm { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (bs, m, n) = (out.shape[0], out.shape[1], out.shape[2]);
                let k = self.value(*a).numel() / (bs * m);
                let (va, vb) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for i in 0..bs {
                        let (gi, bi, di) = (&g[i * m * n..], &vb[i * k * n..], &mut d[i * m * k..]);
                        if ta {
                            // A stored k x m: dA = op(B) G^T
                            gemm(k, n, m, bi, tb, gi, true, di, 1.0);
                        } else {
                            // dA = G op(B)^T
                            gemm(m, n, k, gi, false, bi, !tb, di, 1.0);
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..bs {
                        let (gi, ai, di) = (&g[i * m * n..], &va[i * m * k..], &mut d[i * k * n..]);
                        if tb {
                            // B stored n x k: dB = G^T op(A)
                            gemm(n, m, k, gi, true, ai, ta, di, 1.0);
                        } else {
                            // dB = op(A)^T G
                            gemm(k, m, n, ai, !ta, gi, false, di, 1.0);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, geom } => {
                let bs = self.shape(*x)[0];
                let f = self.shape(*w)[0];
                let (patch, npix) = (geom.patch(), geom.out_pixels());
                let img_len = geom.c * geom.h * geom.w;
                let (vx, vw) = (self.data(*x), self.data(*w));
                let pointwise = geom.is_pointwise();
                let mut col = if pointwise { Vec::new() } else { vec![0.0; patch * npix] };
                self.acc(grads, *w, |d| {
                    for b in 0..bs {
                        let img = &vx[b * img_len..][..img_len];
                        let cols: &[f64] = if pointwise {
                            img
                        } else {
                            geom.im2col(img, &mut col);
                            &col
                        };
                        // dW += G_b col^T
                        gemm(f, npix, patch, &g[b * f * npix..], false, cols, true, d, 1.0);
                    }
                });
                self.acc(grads, *x, |d| {
                    for b in 0..bs {
                        let gb = &g[b * f * npix..];
                        if pointwise {
                            gemm(patch, f, npix, vw, true, gb, false, &mut d[b * img_len..], 1.0);
                        } else {
                            // dcol = W^T G_b
                            gemm(patch, f, npix, vw, true, gb, false, &mut col, 0.0);
                            geom.col2im(&col, &mut d[b * img_len..][..img_len]);
                        }
                    }
                });
            }
            Op::AddBias(x, b, axis) => {
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                self.acc(grads, *b, |d| {
                    for o in 0..outer {
                        for (i, dv) in d.iter_mut().enumerate().take(len) {
                            *dv += g[(o * len + i) * inner..][..inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(&out.shape, *axis);
                let y = &out.data;
                self.acc(grads, *a, |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                d[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = axis_split(&out.shape, *axis);
                let y = &out.data;
                self.acc(grads, *a, |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let gsum: f64 = (0..len).map(|i| g[at(i)]).sum();
                            for i in 0..len {
                                d[at(i)] += g[at(i)] - y[at(i)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::L2Normalize(a, axis) => {
                let (outer, len, inner) = axis_split(&out.shape, *axis);
                let (x, y) = (self.data(*a), &out.data);
                self.acc(grads, *a, |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let norm = (0..len).map(|i| x[at(i)] * x[at(i)]).sum::<f64>().sqrt();
                            if norm < NORM_EPS {
                                continue;
                            }
                            let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                d[at(i)] += (g[at(i)] - y[at(i)] * dot) / norm;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let hw = s[2] * s[3];
                self.acc(grads, *a, |d| {
                    for (chunk, gv) in d.chunks_mut(hw).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gv / hw as f64);
                    }
                });
            }
            Op::MaxPool2(a, picks) => {
                self.acc(grads, *a, |d| {
                    for (&src, &gi) in picks.iter().zip(g) {
                        d[src] += gi;
                    }
                });
            }
            Op::Row(a, i) => {
                let cols = self.shape(*a)[1];
                self.acc(grads, *a, |d| axpy(&mut d[i * cols..][..cols], g, 1.0));
            }
            Op::BroadcastRows(a) => {
                let len = self.shape(*a)[0];
                self.acc(grads, *a, |d| {
                    for chunk in g.chunks(len) {
                        axpy(d, chunk, 1.0);
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = &t.shape;
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = Vec::with_capacity(t.data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..t.data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(t.data[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor {
        shape: out_shape,
        data,
    }
}

/// Max-subtracted softmax (or log-softmax) along `axis`.
pub(crate) fn softmax_along(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = axis_split(&t.shape, axis);
    let x = &t.data;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..len).map(|i| (x[at(i)] - max).exp()).sum();
            for i in 0..len {
                let shifted = x[at(i)] - max;
                out[at(i)] = if log {
                    shifted - sum.ln()
                } else {
                    shifted.exp() / sum
                };
            }
        }
    }
    Tensor {
        shape: t.shape.clone(),
        data: out,
    }
}

pub(crate) fn l2_normalize_along(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(&t.shape, axis);
    let x = &t.data;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let norm = (0..len).map(|i| x[at(i)] * x[at(i)]).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                continue;
            }
            for i in 0..len {
                out[at(i)] = x[at(i)] / norm;
            }
        }
    }
    Tensor {
        shape: t.shape.clone(),
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia), tape.value(a));

        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let p = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_shifted() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let b = tape.constant(t(&[2], &[1000.0, 1000.0 + 2f64.ln()]));
        let s = tape.softmax(b, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let n = tape.l2_normalize(a, 1).unwrap();
        let v = tape.value(n).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);

        let u = tape.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let n = tape.l2_normalize(u, 1).unwrap();
        assert_eq!(tape.value(n).data(), &[0.0, 1.0, 0.0]);

        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let n = tape.l2_normalize(z, 1).unwrap();
        assert_eq!(tape.value(n).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_simple_sums() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn conv_identity_and_zero_kernel() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 4, 5], &mut rng);
        let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            eye.data_mut()[c * 3 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(eye);
        let y = tape.conv2d(xv, w, 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);

        let z = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(xv, z, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 4, 5]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 2, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
        let x = Tensor::randn(&[2, 3, 4], &mut rng);
        let p = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[6 + 2], x.data()[(2 * 4) + 1]);
        let back = permute_tensor(&p, &[1, 2, 0]);
        assert_eq!(back, x);
    }
}
