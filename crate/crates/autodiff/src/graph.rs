//! Reverse-mode tape. Every op appends a node holding its forward value;
//! [`Graph::backward`] walks the tape once in reverse.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, ConvPlan};
use crate::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Elu,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(s)
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(s)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, plan: ConvPlan, batch: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, plan: ConvPlan, batch: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy { x: Var, s: Var },
    Act(Var, Activation),
    Prelu { x: Var, slope: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, T)>),
    AbsDiffMean { a: Var, b: Var, weights: Option<Tensor<T>> },
    SqDiffMean { a: Var, b: Var },
    SqDiffSum { a: Var, b: Var },
    TotalVariation(Var),
    SpectralNorm { w: Var, u: Vec<T>, v: Vec<T>, sigma: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar w.r.t. every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// First node holding a non-finite value, in creation order.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes.iter().position(|n| !n.value.all_finite()).map(Var)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn conv_plan(&self, x: Var, w: Var, geom: ConvGeom, transposed: bool) -> Result<(ConvPlan, usize)> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (w0, w1, kh, kw) = self.value(w).dims4()?;
        let op = if transposed { "conv_transpose2d" } else { "conv2d" };
        if cin != if transposed { w0 } else { w1 } {
            return shape_err(op, format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)));
        }
        let plan = if transposed {
            let (Some(ho), Some(wo)) = (geom.transpose_out_size(h, kh), geom.transpose_out_size(wd, kw)) else {
                return arg_err(op, format!("{geom:?} invalid for input {h}x{wd}"));
            };
            // Transposed conv is the data-gradient of a conv mapping [w1,ho,wo] -> [w0,h,wd].
            ConvPlan { cin: w1, h: ho, w: wo, cout: w0, kh, kw, hout: h, wout: wd, geom }
        } else {
            let (Some(ho), Some(wo)) = (geom.out_size(h, kh), geom.out_size(wd, kw)) else {
                return arg_err(op, format!("{geom:?} invalid for input {h}x{wd} kernel {kh}x{kw}"));
            };
            ConvPlan { cin, h, w: wd, cout: w0, kh, kw, hout: ho, wout: wo, geom }
        };
        Ok((plan, n))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return shape_err(op, format!("bias {:?} for {channels} channels", self.shape(b)));
            }
        }
        Ok(())
    }

    /// 2-D convolution. `x: [n,cin,h,w]`, `w: [cout,cin,kh,kw]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (plan, n) = self.conv_plan(x, w, geom, false)?;
        self.check_bias("conv2d", b, plan.cout)?;
        let mut out = vec![T::zero(); n * plan.out_len()];
        kernels::conv_forward(&plan, self.value(x).data(), self.value(w).data(), &mut out);
        if let Some(b) = b {
            kernels::add_channel_bias(&mut out, self.value(b).data(), plan.hout * plan.wout);
        }
        let value = Tensor::new(&[n, plan.cout, plan.hout, plan.wout], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, plan, batch: n }, &ins))
    }

    /// Transposed convolution. `x: [n,cin,h,w]`, `w: [cin,cout,kh,kw]`, `b: [cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (plan, n) = self.conv_plan(x, w, geom, true)?;
        self.check_bias("conv_transpose2d", b, plan.cin)?;
        let mut out = vec![T::zero(); n * plan.in_len()];
        kernels::conv_backward_data(&plan, self.value(x).data(), self.value(w).data(), &mut out);
        if let Some(b) = b {
            kernels::add_channel_bias(&mut out, self.value(b).data(), plan.h * plan.w);
        }
        let value = Tensor::new(&[n, plan.cin, plan.h, plan.w], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, plan, batch: n }, &ins))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    /// `s * x` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err("scale_by", format!("scalar expected, got {:?}", self.shape(s)));
        }
        let c = self.value(s).item();
        let v = self.value(x).map(|e| c * e);
        Ok(self.push(v, Op::ScaleBy { x, s }, &[x, s]))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let v = self.value(x).map(|e| act.apply(e));
        self.push(v, Op::Act(x, act), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Channel-wise PReLU over axis 1; `slope` has one entry per channel
    /// or a single shared entry.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("prelu", format!("rank >= 2 expected, got {shape:?}"));
        }
        let (_, c, inner) = axis_split(&shape, 1);
        let ns = self.value(slope).len();
        if ns != c && ns != 1 {
            return shape_err("prelu", format!("{ns} slopes for {c} channels"));
        }
        let a = self.value(slope).data().to_vec();
        let mut out = self.value(x).clone();
        for (j, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let s = a[if ns == 1 { 0 } else { j % c }];
            chunk.iter_mut().filter(|v| **v <= T::zero()).for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::Prelu { x, slope }, &[x, slope]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return arg_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return arg_err("concat", format!("axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return arg_err("narrow", format!("{start}+{len} on axis {axis} of {shape:?}"));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let value = Tensor::new(&oshape, out)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[n,c,h,w] -> [n,c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = T::lit((h * w) as f64);
        let data = self.value(x).data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / hw).collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// `x·wᵀ + b` with `x: [n,din]`, `w: [dout,din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, din], &[dout, din2]) = (&xs[..], &ws[..]) else {
            return shape_err("linear", format!("{xs:?} x {ws:?}"));
        };
        if din != din2 {
            return shape_err("linear", format!("{xs:?} x {ws:?}"));
        }
        self.check_bias("linear", b, dout)?;
        let mut out = vec![T::zero(); n * dout];
        T::gemm(n, din, dout, T::one(), self.value(x).data(), din, 1, self.value(w).data(), 1, din, T::zero(), &mut out, dout, 1);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(o, &bv)| *o += bv);
            }
        }
        let value = Tensor::new(&[n, dout], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &ins))
    }

    fn bmm_dims(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[ba, a1, a2], &[bb, b1, b2]) = (sa, sb) else {
            return shape_err("batch_matmul", format!("{sa:?} x {sb:?}"));
        };
        let (m, k) = if ta { (a2, a1) } else { (a1, a2) };
        let (k2, n) = if tb { (b2, b1) } else { (b1, b2) };
        if ba != bb || k != k2 {
            return shape_err("batch_matmul", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})"));
        }
        Ok((ba, m, k, n))
    }

    /// Batched `op(a)·op(b)` where `op` optionally transposes the last two axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (batch, m, k, n) = self.bmm_dims(a, b, ta, tb)?;
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
        let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &ad[i * m * k..],
                rsa,
                csa,
                &bd[i * k * n..],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..],
                n,
                1,
            );
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, ta, tb }, &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&len) = shape.last() else {
            return shape_err("softmax", "rank 0");
        };
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(len) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let v = Tensor::scalar(self.value(x).sum() / n);
        self.push(v, Op::Mean(x), &[x])
    }

    /// `Σ c_i · x_i` over one-element tensors, summed in the given order.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return shape_err("weighted_sum", format!("scalar expected, got {:?}", self.shape(v)));
            }
            acc += c * self.value(v).item();
        }
        let ins: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), &ins))
    }

    /// `Σ w·|a-b| / Σ w`; uniform weights when `weights` is `None`.
    pub fn abs_diff_mean(&mut self, a: Var, b: Var, weights: Option<Tensor<T>>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("abs_diff_mean", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let v = match &weights {
            Some(w) => {
                if w.shape() != self.shape(a) {
                    return shape_err("abs_diff_mean", format!("weights {:?}", w.shape()));
                }
                let num: T = ad.iter().zip(bd).zip(w.data()).map(|((&x, &y), &wt)| wt * (x - y).abs()).sum();
                num / w.sum()
            }
            None => {
                let num: T = ad.iter().zip(bd).map(|(&x, &y)| (x - y).abs()).sum();
                num / T::lit(ad.len() as f64)
            }
        };
        Ok(self.push(Tensor::scalar(v), Op::AbsDiffMean { a, b, weights }, &[a, b]))
    }

    fn sq_diff_total(&self, a: Var, b: Var, op: &'static str) -> Result<T> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y) * (x - y)).sum())
    }

    pub fn sq_diff_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.sq_diff_total(a, b, "sq_diff_mean")?;
        let v = s / T::lit(self.value(a).len() as f64);
        Ok(self.push(Tensor::scalar(v), Op::SqDiffMean { a, b }, &[a, b]))
    }

    pub fn sq_diff_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.sq_diff_total(a, b, "sq_diff_sum")?;
        Ok(self.push(Tensor::scalar(s), Op::SqDiffSum { a, b }, &[a, b]))
    }

    /// Mean absolute difference over all horizontal and vertical neighbour
    /// pairs of an NCHW tensor.
    pub fn total_variation(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let pairs = n * c * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
        let mut acc = T::zero();
        for plane in self.value(x).data().chunks(h * w) {
            for y in 0..h {
                for xx in 0..w {
                    let v = plane[y * w + xx];
                    if xx + 1 < w {
                        acc += (plane[y * w + xx + 1] - v).abs();
                    }
                    if y + 1 < h {
                        acc += (plane[(y + 1) * w + xx] - v).abs();
                    }
                }
            }
        }
        let v = if pairs == 0 { T::zero() } else { acc / T::lit(pairs as f64) };
        Ok(self.push(Tensor::scalar(v), Op::TotalVariation(x), &[x]))
    }

    /// `w / σ` with `σ = uᵀ W v`, `W` being `w` flattened to `[rows, rest]`.
    /// `u` and `v` are held constant (power-iteration estimates).
    pub fn spectral_normalize(&mut self, w: Var, u: &[T], v: &[T]) -> Result<Var> {
        let shape = self.shape(w).to_vec();
        let rows = shape[0];
        let cols = self.value(w).len() / rows.max(1);
        if u.len() != rows || v.len() != cols {
            return shape_err("spectral_normalize", format!("u {} v {} for {shape:?}", u.len(), v.len()));
        }
        let wd = self.value(w).data();
        let mut sigma = T::zero();
        for (r, &ur) in u.iter().enumerate() {
            let row = &wd[r * cols..(r + 1) * cols];
            sigma += ur * row.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>();
        }
        if !(sigma.abs() > T::zero()) {
            return arg_err("spectral_normalize", "zero spectral estimate");
        }
        let value = self.value(w).map(|e| e / sigma);
        Ok(self.push(value, Op::SpectralNorm { w, u: u.to_vec(), v: v.to_vec(), sigma }, &[w]))
    }

    /// Gradients of the one-element tensor `loss` w.r.t. all leaves that
    /// require them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (v, dv) in self.input_grads(i, &g)? {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv)?,
                    slot => *slot = Some(dv),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn need(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, plan, batch } => {
                if self.need(*x) {
                    let mut dx = vec![T::zero(); batch * plan.in_len()];
                    kernels::conv_backward_data(plan, g.data(), self.value(*w).data(), &mut dx);
                    out.push((*x, Tensor::new(self.shape(*x), dx)?));
                }
                if self.need(*w) {
                    let dw = kernels::conv_backward_filter(plan, self.value(*x).data(), g.data(), *batch);
                    out.push((*w, Tensor::new(self.shape(*w), dw)?));
                }
                if let Some(b) = b.filter(|b| self.need(*b)) {
                    let db = kernels::channel_sums(g.data(), plan.cout, plan.hout * plan.wout);
                    out.push((b, Tensor::new(&[plan.cout], db)?));
                }
            }
            Op::ConvTranspose2d { x, w, b, plan, batch } => {
                // Roles swap: the upstream gradient is the equivalent conv's input.
                if self.need(*x) {
                    let mut dx = vec![T::zero(); batch * plan.out_len()];
                    kernels::conv_forward(plan, g.data(), self.value(*w).data(), &mut dx);
                    out.push((*x, Tensor::new(self.shape(*x), dx)?));
                }
                if self.need(*w) {
                    let dw = kernels::conv_backward_filter(plan, g.data(), self.value(*x).data(), *batch);
                    out.push((*w, Tensor::new(self.shape(*w), dw)?));
                }
                if let Some(b) = b.filter(|b| self.need(*b)) {
                    let db = kernels::channel_sums(g.data(), plan.cin, plan.h * plan.w);
                    out.push((b, Tensor::new(&[plan.cin], db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|e| -e)));
            }
            Op::Mul(a, b) => {
                if self.need(*a) {
                    out.push((*a, g.zip_map(self.value(*b), |x, y| x * y)?));
                }
                if self.need(*b) {
                    out.push((*b, g.zip_map(self.value(*a), |x, y| x * y)?));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.map(|e| e * *c))),
            Op::ScaleBy { x, s } => {
                let c = self.value(*s).item();
                if self.need(*x) {
                    out.push((*x, g.map(|e| e * c)));
                }
                if self.need(*s) {
                    let ds: T = g.data().iter().zip(self.value(*x).data()).map(|(&a, &b)| a * b).sum();
                    out.push((*s, Tensor::new(self.shape(*s), vec![ds])?));
                }
            }
            Op::Act(x, act) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let d = g.data().iter().zip(xv).zip(yv).map(|((&ge, &xe), &ye)| ge * act.derivative(xe, ye)).collect();
                out.push((*x, Tensor::new(self.shape(*x), d)?));
            }
            Op::Prelu { x, slope } => {
                let shape = self.shape(*x);
                let (_, c, inner) = axis_split(shape, 1);
                let a = self.value(*slope).data();
                let ns = a.len();
                let xv = self.value(*x).data();
                let mut dx = g.clone();
                let mut da = vec![T::zero(); ns];
                for (j, (dchunk, xchunk)) in dx.data_mut().chunks_mut(inner).zip(xv.chunks(inner)).enumerate() {
                    let ci = if ns == 1 { 0 } else { j % c };
                    for (d, &xe) in dchunk.iter_mut().zip(xchunk) {
                        if xe <= T::zero() {
                            da[ci] += *d * xe;
                            *d *= a[ci];
                        }
                    }
                }
                if self.need(*x) {
                    out.push((*x, dx));
                }
                if self.need(*slope) {
                    out.push((*slope, Tensor::new(self.shape(*slope), da)?));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.need(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        out.push((v, Tensor::new(self.shape(v), d)?));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = axis_split(shape, *axis);
                let len = g.shape()[*axis];
                let mut d = Tensor::zeros(shape);
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    d.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, d));
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshape(self.shape(*x))?)),
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = T::lit((h * w) as f64);
                let mut d = Vec::with_capacity(g.len() * h * w);
                for &ge in g.data() {
                    d.extend(std::iter::repeat_n(ge / hw, h * w));
                }
                out.push((*x, Tensor::new(self.shape(*x), d)?));
            }
            Op::Linear { x, w, b } => {
                let [n, din] = self.shape(*x)[..] else { unreachable!() };
                let dout = self.shape(*w)[0];
                if self.need(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(n, dout, din, T::one(), g.data(), dout, 1, self.value(*w).data(), din, 1, T::zero(), &mut dx, din, 1);
                    out.push((*x, Tensor::new(&[n, din], dx)?));
                }
                if self.need(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(dout, n, din, T::one(), g.data(), 1, dout, self.value(*x).data(), din, 1, T::zero(), &mut dw, din, 1);
                    out.push((*w, Tensor::new(&[dout, din], dw)?));
                }
                if let Some(b) = b.filter(|b| self.need(*b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                    out.push((b, Tensor::new(&[dout], db)?));
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (batch, m, k, n) = self.bmm_dims(*a, *b, *ta, *tb)?;
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if self.need(*a) {
                    // dA_eff[m,k] = G[m,n]·B_effᵀ; stored transposed when ta.
                    let (rsb, csb) = if *tb { (k, 1) } else { (1, n) };
                    let (rsc, csc) = if *ta { (1, m) } else { (k, 1) };
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        T::gemm(m, n, k, T::one(), &gd[i * m * n..], n, 1, &bd[i * k * n..], rsb, csb, T::zero(), &mut da[i * m * k..], rsc, csc);
                    }
                    out.push((*a, Tensor::new(self.shape(*a), da)?));
                }
                if self.need(*b) {
                    // dB_eff[k,n] = A_effᵀ·G.
                    let (rsa, csa) = if *ta { (m, 1) } else { (1, k) };
                    let (rsc, csc) = if *tb { (1, k) } else { (n, 1) };
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        T::gemm(k, m, n, T::one(), &ad[i * m * k..], rsa, csa, &gd[i * m * n..], n, 1, T::zero(), &mut db[i * k * n..], rsc, csc);
                    }
                    out.push((*b, Tensor::new(self.shape(*b), db)?));
                }
            }
            Op::Softmax(x) => {
                let len = *self.shape(*x).last().unwrap_or(&1);
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(len).zip(node.value.data().chunks(len)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    drow.iter_mut().zip(yrow).for_each(|(dv, &yv)| *dv = yv * (*dv - dot));
                }
                out.push((*x, d));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x), g.item()))),
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len() as f64);
                out.push((*x, Tensor::full(self.shape(*x), g.item() / n)));
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    out.push((v, Tensor::new(self.shape(v), vec![g.item() * c])?));
                }
            }
            Op::AbsDiffMean { a, b, weights } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let ge = g.item();
                let d: Vec<T> = match weights {
                    Some(w) => {
                        let z = w.sum();
                        ad.iter().zip(bd).zip(w.data()).map(|((&x, &y), &wt)| ge * wt * sign(x - y) / z).collect()
                    }
                    None => {
                        let z = T::lit(ad.len() as f64);
                        ad.iter().zip(bd).map(|(&x, &y)| ge * sign(x - y) / z).collect()
                    }
                };
                let d = Tensor::new(self.shape(*a), d)?;
                if self.need(*b) {
                    out.push((*b, d.map(|e| -e)));
                }
                out.push((*a, d));
            }
            Op::SqDiffMean { a, b } | Op::SqDiffSum { a, b } => {
                let n = match node.op {
                    Op::SqDiffMean { .. } => T::lit(self.value(*a).len() as f64),
                    _ => T::one(),
                };
                let c = T::lit(2.0) * g.item() / n;
                let d = self.value(*a).zip_map(self.value(*b), |x, y| c * (x - y))?;
                if self.need(*b) {
                    out.push((*b, d.map(|e| -e)));
                }
                out.push((*a, d));
            }
            Op::TotalVariation(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let pairs = n * c * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
                let mut d = Tensor::zeros(self.shape(*x));
                if pairs > 0 {
                    let scale = g.item() / T::lit(pairs as f64);
                    for (dp, plane) in d.data_mut().chunks_mut(h * w).zip(self.value(*x).data().chunks(h * w)) {
                        for y in 0..h {
                            for xx in 0..w {
                                let i0 = y * w + xx;
                                if xx + 1 < w {
                                    let s = sign(plane[i0 + 1] - plane[i0]) * scale;
                                    dp[i0 + 1] += s;
                                    dp[i0] -= s;
                                }
                                if y + 1 < h {
                                    let s = sign(plane[i0 + w] - plane[i0]) * scale;
                                    dp[i0 + w] += s;
                                    dp[i0] -= s;
                                }
                            }
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                // d(W/σ) with σ = uᵀWv: (G - <G, W/σ> u vᵀ) / σ
                let wn = node.value.data();
                let inner: T = g.data().iter().zip(wn).map(|(&a, &b)| a * b).sum();
                let cols = v.len();
                let mut d = g.clone();
                for (r, row) in d.data_mut().chunks_mut(cols).enumerate() {
                    for (c, e) in row.iter_mut().enumerate() {
                        *e = (*e - inner * u[r] * v[c]) / *sigma;
                    }
                }
                out.push((*w, d));
            }
        }
        Ok(out)
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
