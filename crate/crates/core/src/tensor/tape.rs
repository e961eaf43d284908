//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom, Padding, PoolGeom};
use super::{Scalar, Tensor};

const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

/// Fused scalar losses of a prediction against a constant target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Dice {
        smooth: f64,
    },
    /// Mean voxel focal loss with focusing exponent `gamma`.
    Focal {
        delta: f64,
        gamma: f64,
    },
    FocalTversky {
        delta: f64,
        gamma: f64,
        smooth: f64,
    },
    Bce,
    /// `mean((x − target)²)`; the target tensor is ignored.
    SquaredError {
        target: f64,
    },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        geom: PoolGeom,
        arg: Vec<u32>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Act {
        x: Var,
        kind: Act,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat {
        a: Var,
        b: Var,
    },
    Gap {
        x: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
    Loss {
        p: Var,
        target: Vec<T>,
        kind: LossKind,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    map: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.map.remove(&v)
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims5(&self, v: Var) -> Result<[usize; 5]> {
        self.nodes[v.0].value.dims5()
    }

    /// 3-D cross-correlation. `w` is `[cout, cin, kd, kh, kw]`, `b` is `[cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], padding: Padding) -> Result<Var> {
        let [n, cin, d, h, wd] = self.dims5(x)?;
        let [cout, wcin, kd, kh, kw] = self.dims5(w)?;
        if wcin != cin {
            return Err(shape_err(format!(
                "conv3d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        self.check_bias(b, cout)?;
        let geom = ConvGeom::conv(n, cin, cout, [d, h, wd], [kd, kh, kw], stride, padding)?;
        let y = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let [od, oh, ow] = geom.output;
        let value = Tensor::new(vec![n, cout, od, oh, ow], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, &inputs))
    }

    /// Adjoint of a `same`-padded [`Tape::conv3d`]. `w` is
    /// `[cin, cout, kd, kh, kw]`; the output extent is `input × stride`.
    pub fn conv3d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3]) -> Result<Var> {
        let [n, cin, d, h, wd] = self.dims5(x)?;
        let [wcin, cout, kd, kh, kw] = self.dims5(w)?;
        if wcin != cin {
            return Err(shape_err(format!(
                "conv3d_transpose: input has {cin} channels, weight expects {wcin}"
            )));
        }
        self.check_bias(b, cout)?;
        let geom = ConvGeom::transpose(n, cin, cout, [d, h, wd], [kd, kh, kw], stride)?;
        let mut y = kernels::conv_backward_data(self.value(x).data(), self.value(w).data(), &geom);
        let [bd, bh, bw] = geom.input;
        let vol = bd * bh * bw;
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, chunk) in y.chunks_mut(vol).enumerate() {
                let bv = bias[i % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(vec![n, cout, bd, bh, bw], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvT { x, w, b, geom }, &inputs))
    }

    fn check_bias(&self, b: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err(format!("bias shape {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        Ok(())
    }

    /// Max-pooling with `-inf` same-padding; ties go to the first voxel in
    /// scan order.
    pub fn maxpool3d(&mut self, x: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let [n, c, d, h, w] = self.dims5(x)?;
        let geom = PoolGeom::new(n, c, [d, h, w], window, stride)?;
        let (y, arg) = kernels::maxpool_forward(self.value(x).data(), &geom);
        let [od, oh, ow] = geom.output;
        let value = Tensor::new(vec![n, c, od, oh, ow], y)?;
        Ok(self.push(value, Op::MaxPool { x, geom, arg }, &[x]))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [n, c, ..] = self.dims5(x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!("instance_norm: affine params must be [{c}]")));
        }
        let (y, xhat, inv_std) = kernels::instance_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            eps,
        );
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Act) -> Var {
        let src = self.value(x);
        let data = match kind {
            Act::Relu => src.data().iter().map(|&v| v.max(T::zero())).collect(),
            Act::LeakyRelu(slope) => {
                let s = T::of(slope);
                src.data()
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { v * s })
                    .collect()
            }
            Act::Sigmoid => src.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.push(value, Op::Act { x, kind }, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let st = T::of(s);
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&v| v * st).collect(),
        };
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// Stacks two 5-D tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, d, h, w] = self.dims5(a)?;
        let [nb, cb, db, hb, wb] = self.dims5(b)?;
        if (n, d, h, w) != (nb, db, hb, wb) {
            return Err(shape_err(format!("concat: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let vol = d * h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * vol);
        for s in 0..n {
            data.extend_from_slice(&av[s * ca * vol..(s + 1) * ca * vol]);
            data.extend_from_slice(&bv[s * cb * vol..(s + 1) * cb * vol]);
        }
        let value = Tensor::new(vec![n, ca + cb, d, h, w], data)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    /// Spatial mean per `(n, c)`, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.dims5(x)?;
        let vol = d * h * w;
        let data = self
            .value(x)
            .data()
            .chunks(vol)
            .map(|ch| T::of(ch.iter().map(|v| v.f64()).sum::<f64>() / vol as f64))
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::Gap { x }, &[x]))
    }

    /// `y = x·wᵀ + b` with `x: [N, C]`, `w: [O, C]`, `b: [O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(shape_err(format!("dense: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, c, o) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * o);
        for s in 0..n {
            for j in 0..o {
                let dot: T = (0..c).map(|i| xv[s * c + i] * wv[j * c + i]).sum();
                data.push(dot + bv[j]);
            }
        }
        let value = Tensor::new(vec![n, o], data)?;
        Ok(self.push(value, Op::Dense { x, w, b }, &[x, w, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.f64()).sum::<f64>();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().map(|v| v.f64()).sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(T::of(s)), Op::Mean(x), &[x])
    }

    /// Scalar loss of prediction `p` against a constant `target` of the same
    /// shape.
    pub fn loss(&mut self, p: Var, target: &Tensor<T>, kind: LossKind) -> Result<Var> {
        let target = if let LossKind::SquaredError { .. } = kind {
            Vec::new()
        } else {
            if target.shape() != self.shape(p) {
                return Err(shape_err(format!(
                    "loss: prediction {:?}, target {:?}",
                    self.shape(p),
                    target.shape()
                )));
            }
            target.data().to_vec()
        };
        let v = loss_value(self.value(p).data(), &target, kind);
        Ok(self.push(Tensor::scalar(T::of(v)), Op::Loss { p, target, kind }, &[p]))
    }

    /// `mean((x − target)²)` for a constant scalar target.
    pub fn squared_error(&mut self, x: Var, target: f64) -> Var {
        let v = loss_value(self.value(x).data(), &[], LossKind::SquaredError { target });
        self.push(
            Tensor::scalar(T::of(v)),
            Op::Loss {
                p: x,
                target: Vec::new(),
                kind: LossKind::SquaredError { target },
            },
            &[x],
        )
    }

    /// Gradients of `loss` for every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_retain(loss, &[])
    }

    /// Like [`Tape::backward`], additionally keeping the gradients of the
    /// intermediate nodes in `retain`.
    pub fn backward_retain(&self, loss: Var, retain: &[Var]) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) || retain.contains(&Var(i)) {
                out.insert(
                    Var(i),
                    Tensor {
                        shape: node.value.shape().to_vec(),
                        data: g.clone(),
                    },
                );
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { map: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, d: Vec<T>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if self.wants(*x) {
                    acc(*x, kernels::conv_backward_data(g, self.value(*w).data(), geom));
                }
                if self.wants(*w) {
                    acc(*w, kernels::conv_backward_weight(self.value(*x).data(), g, geom));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    acc(b, kernels::channel_sums(g, geom.n, geom.cout));
                }
            }
            Op::ConvT { x, w, b, geom } => {
                if self.wants(*x) {
                    acc(*x, kernels::conv_forward(g, self.value(*w).data(), None, geom));
                }
                if self.wants(*w) {
                    acc(*w, kernels::conv_backward_weight(g, self.value(*x).data(), geom));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    acc(b, kernels::channel_sums(g, geom.n, geom.cin));
                }
            }
            Op::MaxPool { x, geom, arg } => {
                if self.wants(*x) {
                    acc(*x, kernels::maxpool_backward(g, arg, geom));
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = node.value.shape();
                let (dx, dg, db) =
                    kernels::instance_norm_backward(g, xhat, inv_std, self.value(*gamma).data(), s[0], s[1]);
                if self.wants(*x) {
                    acc(*x, dx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, dg);
                }
                if self.wants(*beta) {
                    acc(*beta, db);
                }
            }
            Op::Act { x, kind } => {
                let d = match kind {
                    Act::Relu => self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                    Act::LeakyRelu(slope) => {
                        let s = T::of(*slope);
                        self.value(*x)
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * s })
                            .collect()
                    }
                    Act::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| gv * y * (T::one() - y))
                        .collect(),
                };
                acc(*x, d);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect());
                }
            }
            Op::Scale(x, s) => {
                let st = T::of(*s);
                acc(*x, g.iter().map(|&v| v * st).collect());
            }
            Op::Concat { a, b } => {
                let s = self.shape(*a);
                let (n, ca) = (s[0], s[1]);
                let cb = self.shape(*b)[1];
                let vol: usize = s[2..].iter().product();
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for smp in 0..n {
                    let base = smp * (ca + cb) * vol;
                    ga.extend_from_slice(&g[base..base + ca * vol]);
                    gb.extend_from_slice(&g[base + ca * vol..base + (ca + cb) * vol]);
                }
                if self.wants(*a) {
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::Gap { x } => {
                let s = self.shape(*x);
                let vol: usize = s[2..].iter().product();
                let inv = T::of(1.0 / vol as f64);
                let mut d = Vec::with_capacity(s.iter().product());
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv * inv, vol));
                }
                acc(*x, d);
            }
            Op::Dense { x, w, b } => {
                let (n, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * c];
                    for s in 0..n {
                        for j in 0..o {
                            let gj = g[s * o + j];
                            for i in 0..c {
                                dx[s * c + i] += gj * wv[j * c + i];
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * c];
                    for s in 0..n {
                        for j in 0..o {
                            let gj = g[s * o + j];
                            for i in 0..c {
                                dw[j * c + i] += gj * xv[s * c + i];
                            }
                        }
                    }
                    acc(*w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); o];
                    for s in 0..n {
                        for j in 0..o {
                            db[j] += g[s * o + j];
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0] * T::of(1.0 / n.max(1) as f64); n]);
            }
            Op::Loss { p, target, kind } => {
                let d = loss_grad(self.value(*p).data(), target, *kind);
                let g0 = g[0].f64();
                acc(*p, d.into_iter().map(|v| T::of(v * g0)).collect());
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn clamped_ln(v: f64) -> f64 {
    v.max(LOG_FLOOR).ln()
}

fn clamped_ln_grad(v: f64) -> f64 {
    if v > LOG_FLOOR {
        1.0 / v
    } else {
        0.0
    }
}

/// `u^γ` and its derivative, with `0^0 = 1` and a zero derivative at `u = 0`.
fn pow_and_grad(u: f64, gamma: f64) -> (f64, f64) {
    if gamma == 0.0 {
        return (1.0, 0.0);
    }
    let u = u.max(0.0);
    if u == 0.0 {
        return (0.0, 0.0);
    }
    (u.powf(gamma), gamma * u.powf(gamma - 1.0))
}

struct Sums {
    py: f64,
    p: f64,
    y: f64,
}

fn sums<T: Scalar>(p: &[T], y: &[T]) -> Sums {
    let mut s = Sums {
        py: 0.0,
        p: 0.0,
        y: 0.0,
    };
    for (&pi, &yi) in p.iter().zip(y) {
        let (pi, yi) = (pi.f64(), yi.f64());
        s.py += pi * yi;
        s.p += pi;
        s.y += yi;
    }
    s
}

fn tversky_parts(s: &Sums, delta: f64, smooth: f64) -> (f64, f64) {
    let fn_ = s.y - s.py;
    let fp = s.p - s.py;
    (s.py + smooth, s.py + delta * fn_ + (1.0 - delta) * fp + smooth)
}

fn focal_voxel(p: f64, y: f64, delta: f64, gamma: f64) -> f64 {
    let (a, _) = pow_and_grad(1.0 - p, gamma);
    let (b, _) = pow_and_grad(p, gamma);
    -(delta * y * a * clamped_ln(p) + (1.0 - delta) * (1.0 - y) * b * clamped_ln(1.0 - p))
}

fn focal_voxel_grad(p: f64, y: f64, delta: f64, gamma: f64) -> f64 {
    let (a, da) = pow_and_grad(1.0 - p, gamma);
    let (b, db) = pow_and_grad(p, gamma);
    // d/dp of (1−p)^γ·ln p and p^γ·ln(1−p)
    let d_pos = -da * clamped_ln(p) + a * clamped_ln_grad(p);
    let d_neg = db * clamped_ln(1.0 - p) - b * clamped_ln_grad(1.0 - p);
    -(delta * y * d_pos + (1.0 - delta) * (1.0 - y) * d_neg)
}

pub(crate) fn loss_value<T: Scalar>(p: &[T], y: &[T], kind: LossKind) -> f64 {
    let n = p.len().max(1) as f64;
    match kind {
        LossKind::Dice { smooth } => {
            let s = sums(p, y);
            1.0 - (2.0 * s.py + smooth) / (s.p + s.y + smooth)
        }
        LossKind::Focal { delta, gamma } => {
            p.iter()
                .zip(y)
                .map(|(&pi, &yi)| focal_voxel(pi.f64(), yi.f64(), delta, gamma))
                .sum::<f64>()
                / n
        }
        LossKind::FocalTversky { delta, gamma, smooth } => {
            let (num, den) = tversky_parts(&sums(p, y), delta, smooth);
            pow_and_grad(1.0 - num / den, gamma).0
        }
        LossKind::Bce => {
            p.iter()
                .zip(y)
                .map(|(&pi, &yi)| {
                    let (pi, yi) = (pi.f64(), yi.f64());
                    -(yi * clamped_ln(pi) + (1.0 - yi) * clamped_ln(1.0 - pi))
                })
                .sum::<f64>()
                / n
        }
        LossKind::SquaredError { target } => p.iter().map(|&v| (v.f64() - target).powi(2)).sum::<f64>() / n,
    }
}

fn loss_grad<T: Scalar>(p: &[T], y: &[T], kind: LossKind) -> Vec<f64> {
    let n = p.len().max(1) as f64;
    match kind {
        LossKind::Dice { smooth } => {
            let s = sums(p, y);
            let num = 2.0 * s.py + smooth;
            let den = s.p + s.y + smooth;
            y.iter()
                .map(|&yi| -(2.0 * yi.f64() * den - num) / (den * den))
                .collect()
        }
        LossKind::Focal { delta, gamma } => p
            .iter()
            .zip(y)
            .map(|(&pi, &yi)| focal_voxel_grad(pi.f64(), yi.f64(), delta, gamma) / n)
            .collect(),
        LossKind::FocalTversky { delta, gamma, smooth } => {
            let (num, den) = tversky_parts(&sums(p, y), delta, smooth);
            let (_, dl) = pow_and_grad(1.0 - num / den, gamma);
            // dTI/dp_i = (y_i·den − num·(1−δ)) / den²
            y.iter()
                .map(|&yi| -dl * (yi.f64() * den - num * (1.0 - delta)) / (den * den))
                .collect()
        }
        LossKind::Bce => p
            .iter()
            .zip(y)
            .map(|(&pi, &yi)| {
                let (pi, yi) = (pi.f64(), yi.f64());
                -(yi * clamped_ln_grad(pi) - (1.0 - yi) * clamped_ln_grad(1.0 - pi)) / n
            })
            .collect(),
        LossKind::SquaredError { target } => p.iter().map(|&v| 2.0 * (v.f64() - target) / n).collect(),
    }
}
