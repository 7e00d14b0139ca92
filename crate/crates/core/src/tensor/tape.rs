use std::collections::HashMap;

use super::gemm::gemm;
use super::{for_each_strided, numel, split_axis, strides, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, groups: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { a: Var, src_strides: Vec<usize> },
    Broadcast { a: Var, src_strides: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    MeanPool2d { a: Var, k: usize },
    GlobalAvgPool(Var),
    Softmax { a: Var, axis: usize },
    LayerNorm { a: Var, gamma: Option<Var>, beta: Option<Var>, axis: usize, xhat: Vec<T>, inv_std: Vec<T> },
    L1Distance(Var, Var),
    Sum(Var),
    Mean(Var),
    SumAxis { a: Var, axis: usize, mean: bool },
    Bce { p: Var, targets: Vec<T>, eps: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Linear { .. } => "linear",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Broadcast { .. } => "broadcast",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::MeanPool2d { .. } => "mean_pool2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L1Distance(..) => "l1_distance",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { mean: false, .. } => "sum_axis",
            Op::SumAxis { mean: true, .. } => "mean_axis",
            Op::Bce { .. } => "binary_cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Gradient per parameter of a [`ParamStore`]; zero for unreachable ones.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// One forward pass worth of recorded operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), params: HashMap::new(), grad_enabled: true, backward_done: false }
    }

    /// A tape that records no backward information (evaluation passes).
    pub fn no_grad() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of the recorded operations in evaluation order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Gradient accumulated on `v` by [`Tape::backward`]; kept for leaves only.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let rg = requires_grad && self.grad_enabled;
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad: rg, op, param: None });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), true, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor { shape: ta.shape().to_vec(), data }
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        Tensor { shape: ta.shape().to_vec(), data: ta.data().iter().map(|&x| f(x)).collect() }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, self.rg(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, self.rg(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, self.rg(&[a, b]), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, self.rg(&[a]), Op::Scale(a, s))
    }

    /// 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, n, k, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let t = Tensor { shape: vec![m, n], data: out };
        Ok(self.push(t, self.rg(&[a, b]), Op::MatMul { a, b, m, k, n }))
    }

    /// Batched product `[g,m,k] x [g,k,n]`, or `[g,m,k] x [g,n,k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if !ok || sa[2] != kb {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let mut out = vec![T::zero(); groups * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for g in 0..groups {
                gemm(
                    m,
                    n,
                    k,
                    &da[g * m * k..(g + 1) * m * k],
                    false,
                    &db[g * k * n..(g + 1) * k * n],
                    trans_b,
                    &mut out[g * m * n..(g + 1) * m * n],
                    false,
                );
            }
        }
        let t = Tensor { shape: vec![groups, m, n], data: out };
        let op = Op::BatchMatMul { a, b, groups, m, k, n, trans_b };
        Ok(self.push(t, self.rg(&[a, b]), op))
    }

    /// Affine map over the last axis: `x [.., in] · w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (inp, out_dim) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("linear", &sw, self.shape(b)));
            }
        }
        let rows = numel(&sx) / inp;
        let mut out = vec![T::zero(); rows * out_dim];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                out[r * out_dim..(r + 1) * out_dim].copy_from_slice(bias);
            }
        }
        gemm(rows, out_dim, inp, self.value(x).data(), false, self.value(w).data(), false, &mut out, true);
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = out_dim;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let op = Op::Linear { x, w, b, rows, inp, out: out_dim };
        Ok(self.push(Tensor { shape, data: out }, self.rg(&inputs), op))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::op("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::op("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(Tensor { shape, data }, rg, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::op("narrow", format!("range {start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor { shape, data }, self.rg(&[a]), Op::Narrow { a, axis, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, self.rg(&[a]), Op::Reshape(a)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::op("permute", format!("axes {axes:?} invalid for {s:?}")));
        }
        let in_strides = strides(&s);
        let shape: Vec<usize> = axes.iter().map(|&x| s[x]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
        let src = self.value(a).data();
        let mut data = vec![T::zero(); src.len()];
        for_each_strided(&shape, &src_strides, |o, i| data[o] = src[i]);
        Ok(self.push(Tensor { shape, data }, self.rg(&[a]), Op::Permute { a, src_strides }))
    }

    /// Explicit broadcast: leading axes may be added, size-1 axes expanded.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() > shape.len() {
            return Err(Error::shape("broadcast", &s, shape));
        }
        let lead = shape.len() - s.len();
        let in_strides = strides(&s);
        let mut src_strides = vec![0; shape.len()];
        for (i, &d) in s.iter().enumerate() {
            if d == shape[lead + i] {
                src_strides[lead + i] = in_strides[i];
            } else if d != 1 {
                return Err(Error::shape("broadcast", &s, shape));
            }
        }
        let src = self.value(a).data();
        let mut data = vec![T::zero(); numel(shape)];
        for_each_strided(shape, &src_strides, |o, i| data[o] = src[i]);
        let t = Tensor { shape: shape.to_vec(), data };
        Ok(self.push(t, self.rg(&[a]), Op::Broadcast { a, src_strides }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(out, self.rg(&[a]), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, self.rg(&[a]), Op::Sigmoid(a))
    }

    /// `x [B,Cin,H,W]`, `w [Cout,Cin,k,k]`, optional `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::op("conv2d", "stride must be positive"));
        }
        let k = sw[2];
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            k,
            stride,
            pad,
            oh: (sx[2] + 2 * pad - k) / stride + 1,
            ow: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let (rows, ncols) = (geom.rows(), geom.cols());
        let mut tmp = vec![T::zero(); geom.cout * ncols];
        gemm(geom.cout, ncols, rows, self.value(w).data(), false, &cols, false, &mut tmp, false);
        let p = geom.oh * geom.ow;
        let mut out = vec![T::zero(); geom.batch * geom.cout * p];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for co in 0..geom.cout {
            let bv = bias.as_ref().map_or(T::zero(), |bb| bb[co]);
            for bi in 0..geom.batch {
                let src = &tmp[co * ncols + bi * p..co * ncols + (bi + 1) * p];
                let dst = &mut out[(bi * geom.cout + co) * p..(bi * geom.cout + co + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let shape = vec![geom.batch, geom.cout, geom.oh, geom.ow];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor { shape, data: out }, rg, Op::Conv2d { x, w, b, geom, cols }))
    }

    /// Non-overlapping `k×k` mean pooling over `[B,C,H,W]`.
    pub fn mean_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(Error::op("mean_pool2d", format!("window {k} does not tile {s:?}")));
        }
        let (oh, ow) = (s[2] / k, s[3] / k);
        let src = self.value(a).data();
        let scale = T::of(1.0 / (k * k) as f64);
        let mut data = vec![T::zero(); s[0] * s[1] * oh * ow];
        for plane in 0..s[0] * s[1] {
            let sp = &src[plane * s[2] * s[3]..(plane + 1) * s[2] * s[3]];
            let dp = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..s[2] {
                for x in 0..s[3] {
                    dp[(y / k) * ow + x / k] += sp[y * s[3] + x];
                }
            }
            dp.iter_mut().for_each(|v| *v *= scale);
        }
        let shape = vec![s[0], s[1], oh, ow];
        Ok(self.push(Tensor { shape, data }, self.rg(&[a]), Op::MeanPool2d { a, k }))
    }

    /// `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::op("global_avg_pool", format!("expected rank 4, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let scale = T::of(1.0 / hw as f64);
        let data = self.value(a).data().chunks(hw).map(|c| c.iter().copied().sum::<T>() * scale).collect();
        let shape = vec![s[0], s[1], 1, 1];
        Ok(self.push(Tensor { shape, data }, self.rg(&[a]), Op::GlobalAvgPool(a)))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::op("softmax", format!("empty or missing axis {axis} in {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let mut data = self.value(a).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for j in 0..len {
                    data[base + j * inner] *= inv;
                }
            }
        }
        Ok(self.push(Tensor { shape: s, data }, self.rg(&[a]), Op::Softmax { a, axis }))
    }

    /// Normalizes along `axis` with population variance; optional affine
    /// `gamma`, `beta` of shape `[shape[axis]]`.
    pub fn layer_norm(&mut self, a: Var, axis: usize, gamma: Option<Var>, beta: Option<Var>, eps: T) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::op("layer_norm", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [len] {
                return Err(Error::shape("layer_norm", &s, self.shape(p)));
            }
        }
        let src = self.value(a).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let n = T::of(len as f64);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mean = T::zero();
                for j in 0..len {
                    mean += src[base + j * inner];
                }
                mean /= n;
                let mut var = T::zero();
                for j in 0..len {
                    let d = src[base + j * inner] - mean;
                    var += d * d;
                }
                var /= n;
                let is = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..len {
                    xhat[base + j * inner] = (src[base + j * inner] - mean) * is;
                }
            }
        }
        let mut data = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let g = gamma.map(|g| self.value(g).data().to_vec());
            let bb = beta.map(|b| self.value(b).data().to_vec());
            for (idx, v) in data.iter_mut().enumerate() {
                let j = (idx / inner) % len;
                if let Some(g) = &g {
                    *v *= g[j];
                }
                if let Some(bb) = &bb {
                    *v += bb[j];
                }
            }
        }
        let mut inputs = vec![a];
        inputs.extend(gamma);
        inputs.extend(beta);
        let rg = self.rg(&inputs);
        let op = Op::LayerNorm { a, gamma, beta, axis, xhat, inv_std };
        Ok(self.push(Tensor { shape: s, data }, rg, op))
    }

    /// `sum |a - b|` as a scalar.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_distance", a, b)?;
        let v = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y).abs()).sum();
        Ok(self.push(Tensor::scalar(v), self.rg(&[a, b]), Op::L1Distance(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(v), self.rg(&[a]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        self.push(Tensor::scalar(v), self.rg(&[a]), Op::Mean(a))
    }

    /// Reduces `axis` to extent 1 (kept), by sum or mean.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::op("reduce_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        if mean {
            let sc = T::of(1.0 / len as f64);
            data.iter_mut().for_each(|v| *v *= sc);
        }
        let mut shape = s;
        shape[axis] = 1;
        Ok(self.push(Tensor { shape, data }, self.rg(&[a]), Op::SumAxis { a, axis, mean }))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets,
    /// with `p` clamped to `[eps, 1 - eps]`.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[T], eps: T) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != targets.len() || targets.is_empty() {
            return Err(Error::shape("binary_cross_entropy", pv.shape(), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::op("binary_cross_entropy", format!("label {bad} is not 0 or 1")));
        }
        let hi = T::one() - eps;
        let mut total = T::zero();
        for (&pi, &y) in pv.data().iter().zip(targets) {
            let pc = pi.max(eps).min(hi);
            total += y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
        }
        let v = -total / T::of(targets.len() as f64);
        let op = Op::Bce { p, targets: targets.to_vec(), eps };
        Ok(self.push(Tensor::scalar(v), self.rg(&[p]), op))
    }

    /// Reverse pass from a one-element `loss`. Allowed once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran on this tape".into()));
        }
        let n = self.value(loss).len();
        if n != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let Tape { nodes, grads, .. } = self;
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            backward_node(nodes, grads, node, &g);
        }
        Ok(())
    }

    /// Parameter gradients after [`Tape::backward`], sized to `store`.
    pub fn gradients(&self, store: &ParamStore<T>) -> Gradients<T> {
        let mut grads: Vec<Vec<T>> = store.ids().map(|id| vec![T::zero(); store.get(id).len()]).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, self.grads[idx].as_ref()) {
                for (d, &v) in grads[pid.0].iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
        Gradients { grads }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (rows, ncols) = (g.rows(), g.cols());
    let p = g.oh * g.ow;
    let mut cols = vec![T::zero(); rows * ncols];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[r * ncols..(r + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.cin + ci) * g.h * g.w..(b * g.cin + ci + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut dst_row[b * p + oy * g.ow..b * p + (oy + 1) * g.ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.cols();
    let p = g.oh * g.ow;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let src_row = &cols[r * ncols..(r + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &mut dx[(b * g.cin + ci) * g.h * g.w..(b * g.cin + ci + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[b * p + oy * g.ow..b * p + (oy + 1) * g.ow];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                plane[iy as usize * g.w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lazily allocated gradient buffer for `v`, or `None` if `v` needs no gradient.
fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backward_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = slot(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] * vb[i];
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for i in 0..d.len() {
                    d[i] += g[i] * va[i];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *s);
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (va, vb) = (val(*a), val(*b));
            if nodes[a.0].requires_grad {
                let mut tmp = vec![T::zero(); m * k];
                gemm(*m, *k, *n, g, false, vb, true, &mut tmp, false);
                add_into(slot(nodes, grads, *a), &tmp);
            }
            if nodes[b.0].requires_grad {
                let mut tmp = vec![T::zero(); k * n];
                gemm(*k, *n, *m, va, true, g, false, &mut tmp, false);
                add_into(slot(nodes, grads, *b), &tmp);
            }
        }
        Op::BatchMatMul { a, b, groups, m, k, n, trans_b } => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (*m, *k, *n);
            if nodes[a.0].requires_grad {
                let mut tmp = vec![T::zero(); groups * m * k];
                for gi in 0..*groups {
                    let gg = &g[gi * m * n..(gi + 1) * m * n];
                    let bb = &vb[gi * k * n..(gi + 1) * k * n];
                    let out = &mut tmp[gi * m * k..(gi + 1) * m * k];
                    // dA = G·B^T, or G·B when B was used transposed
                    gemm(m, k, n, gg, false, bb, !*trans_b, out, false);
                }
                add_into(slot(nodes, grads, *a), &tmp);
            }
            if nodes[b.0].requires_grad {
                let mut tmp = vec![T::zero(); groups * k * n];
                for gi in 0..*groups {
                    let gg = &g[gi * m * n..(gi + 1) * m * n];
                    let aa = &va[gi * m * k..(gi + 1) * m * k];
                    let out = &mut tmp[gi * k * n..(gi + 1) * k * n];
                    if *trans_b {
                        // B is [n,k]: dB = G^T·A
                        gemm(n, k, m, gg, true, aa, false, out, false);
                    } else {
                        gemm(k, n, m, aa, true, gg, false, out, false);
                    }
                }
                add_into(slot(nodes, grads, *b), &tmp);
            }
        }
        Op::Linear { x, w, b, rows, inp, out } => {
            let (vx, vw) = (val(*x), val(*w));
            if nodes[x.0].requires_grad {
                let mut tmp = vec![T::zero(); rows * inp];
                gemm(*rows, *inp, *out, g, false, vw, true, &mut tmp, false);
                add_into(slot(nodes, grads, *x), &tmp);
            }
            if nodes[w.0].requires_grad {
                let mut tmp = vec![T::zero(); inp * out];
                gemm(*inp, *out, *rows, vx, true, g, false, &mut tmp, false);
                add_into(slot(nodes, grads, *w), &tmp);
            }
            if let Some(b) = b {
                if let Some(d) = slot(nodes, grads, *b) {
                    for r in 0..*rows {
                        for (dv, &gv) in d.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                            *dv += gv;
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let (outer, total, inner) = split_axis(shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].value.shape()[*axis];
                if let Some(d) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (dv, &gv) in d[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { a, axis, start } => {
            let full = nodes[a.0].value.shape()[*axis];
            let len = node.value.shape()[*axis];
            let (outer, _, inner) = split_axis(nodes[a.0].value.shape(), *axis);
            if let Some(d) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    let dst = &mut d[(o * full + start) * inner..(o * full + start + len) * inner];
                    for (dv, &gv) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::Reshape(a) => add_into(slot(nodes, grads, *a), g),
        Op::Permute { a, src_strides } | Op::Broadcast { a, src_strides } => {
            let shape = node.value.shape();
            if let Some(d) = slot(nodes, grads, *a) {
                for_each_strided(shape, src_strides, |o, i| d[i] += g[o]);
            }
        }
        Op::Relu(a) => {
            let y = node.value.data();
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    if y[i] > T::zero() {
                        d[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            }
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let (rows, ncols) = (geom.rows(), geom.cols());
            let p = geom.oh * geom.ow;
            // gradient rearranged to [Cout, B*P]
            let mut gt = vec![T::zero(); geom.cout * ncols];
            for bi in 0..geom.batch {
                for co in 0..geom.cout {
                    let src = &g[(bi * geom.cout + co) * p..(bi * geom.cout + co + 1) * p];
                    gt[co * ncols + bi * p..co * ncols + (bi + 1) * p].copy_from_slice(src);
                }
            }
            if let Some(b) = b {
                if let Some(d) = slot(nodes, grads, *b) {
                    for co in 0..geom.cout {
                        d[co] += gt[co * ncols..(co + 1) * ncols].iter().copied().sum::<T>();
                    }
                }
            }
            if nodes[w.0].requires_grad {
                let mut tmp = vec![T::zero(); geom.cout * rows];
                gemm(geom.cout, rows, ncols, &gt, false, cols, true, &mut tmp, false);
                add_into(slot(nodes, grads, *w), &tmp);
            }
            if nodes[x.0].requires_grad {
                let mut dcols = vec![T::zero(); rows * ncols];
                gemm(rows, ncols, geom.cout, val(*w), true, &gt, false, &mut dcols, false);
                if let Some(d) = slot(nodes, grads, *x) {
                    col2im(&dcols, geom, d);
                }
            }
        }
        Op::MeanPool2d { a, k } => {
            let s = nodes[a.0].value.shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h / k, w / k);
            let scale = T::of(1.0 / (k * k) as f64);
            if let Some(d) = slot(nodes, grads, *a) {
                for plane in 0..s[0] * s[1] {
                    for y in 0..h {
                        for x in 0..w {
                            d[plane * h * w + y * w + x] += g[plane * oh * ow + (y / k) * ow + x / k] * scale;
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool(a) => {
            let s = nodes[a.0].value.shape();
            let hw = s[2] * s[3];
            let scale = T::of(1.0 / hw as f64);
            if let Some(d) = slot(nodes, grads, *a) {
                for (plane, chunk) in d.chunks_mut(hw).enumerate() {
                    let gv = g[plane] * scale;
                    chunk.iter_mut().for_each(|v| *v += gv);
                }
            }
        }
        Op::Softmax { a, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            if let Some(d) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = T::zero();
                        for j in 0..len {
                            s += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let at = base + j * inner;
                            d[at] += y[at] * (g[at] - s);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { a, gamma, beta, axis, xhat, inv_std } => {
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            if let Some(bt) = beta {
                if let Some(d) = slot(nodes, grads, *bt) {
                    for (idx, &gv) in g.iter().enumerate() {
                        d[(idx / inner) % len] += gv;
                    }
                }
            }
            let gam = gamma.map(|gm| val(gm).to_vec());
            if let Some(gm) = gamma {
                if let Some(d) = slot(nodes, grads, *gm) {
                    for (idx, &gv) in g.iter().enumerate() {
                        d[(idx / inner) % len] += gv * xhat[idx];
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *a) {
                let n = T::of(len as f64);
                let mut dxhat = vec![T::zero(); len];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let (mut m1, mut m2) = (T::zero(), T::zero());
                        for j in 0..len {
                            let at = base + j * inner;
                            let dv = g[at] * gam.as_ref().map_or(T::one(), |gm| gm[j]);
                            dxhat[j] = dv;
                            m1 += dv;
                            m2 += dv * xhat[at];
                        }
                        m1 /= n;
                        m2 /= n;
                        let is = inv_std[o * inner + i];
                        for j in 0..len {
                            let at = base + j * inner;
                            d[at] += is * (dxhat[j] - m1 - xhat[at] * m2);
                        }
                    }
                }
            }
        }
        Op::L1Distance(a, b) => {
            let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
            let g0 = g[0];
            let sign = |i: usize| {
                let diff = va[i] - vb[i];
                if diff > T::zero() {
                    g0
                } else if diff < T::zero() {
                    -g0
                } else {
                    T::zero()
                }
            };
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    d[i] += sign(i);
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for i in 0..d.len() {
                    d[i] -= sign(i);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                let gv = g[0] / T::of(d.len() as f64);
                d.iter_mut().for_each(|v| *v += gv);
            }
        }
        Op::SumAxis { a, axis, mean } => {
            let (outer, len, inner) = split_axis(nodes[a.0].value.shape(), *axis);
            let sc = if *mean { T::of(1.0 / len as f64) } else { T::one() };
            if let Some(d) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut d[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (dv, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *dv += gv * sc;
                        }
                    }
                }
            }
        }
        Op::Bce { p, targets, eps } => {
            let pv = val(*p).to_vec();
            let scale = g[0] / T::of(targets.len() as f64);
            let hi = T::one() - *eps;
            if let Some(d) = slot(nodes, grads, *p) {
                for i in 0..d.len() {
                    let pi = pv[i];
                    if pi > *eps && pi < hi {
                        d[i] += scale * (pi - targets[i]) / (pi * (T::one() - pi));
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: Option<&mut Vec<T>>, src: &[T]) {
    if let Some(d) = dst {
        d.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
    }
}
