//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! gradient of that scalar with respect to every node that depends on a leaf
//! created with [`Tape::leaf`]. Constants (see [`Tape::constant`]) never
//! receive gradients, which is how frozen networks are bound.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Tensor>),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Log {
        x: Var,
        clamped: Vec<bool>,
    },
    Sqrt(Var),
    Softmax(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ReflectPad(Var, usize),
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
    Mean(Var),
    SampleMean(Var),
    SampleSum(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    clamp_events: Cell<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// `x * c` where `c` matches `x` or is a per-pixel map broadcast over channels.
fn broadcast_mul(x: &Tensor, c: &Tensor) -> Tensor {
    if x.shape() == c.shape() {
        return x.zip_map(c, |a, b| a * b);
    }
    let (n, ch, h, w) = x.dims4();
    assert_eq!(
        c.shape(),
        &[n, 1, h, w],
        "constant of shape {:?} does not broadcast over {:?}",
        c.shape(),
        x.shape()
    );
    let hw = h * w;
    let mut out = x.clone();
    for (plane, dst) in out.data_mut().chunks_mut(hw).enumerate() {
        let s = plane / ch;
        let m = &c.data()[s * hw..(s + 1) * hw];
        dst.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Trainable input: gradients flow into it.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Fixed input: no gradient is tracked for it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant holding the current value of `v`; cuts the gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push(Tensor::clone(&value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// How many log arguments were clamped to the configured floor.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events.get()
    }

    fn unary(&self, a: Var, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var {
        let value = f(&self.value(a));
        self.push(value, op, self.needs(a))
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).zip_map(&self.value(b), f);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Sum of several same-shaped values.
    pub fn add_all(&self, vars: &[Var]) -> Var {
        let (first, rest) = vars.split_first().expect("add_all of nothing");
        rest.iter().fold(*first, |acc, &v| self.add(acc, v))
    }

    /// Multiplies by a fixed tensor of the same shape, or by an `[N,1,H,W]`
    /// map broadcast over channels.
    pub fn mul_const(&self, a: Var, c: Tensor) -> Var {
        let c = Rc::new(c);
        let value = broadcast_mul(&self.value(a), &c);
        self.push(value, Op::MulConst(a, c), self.needs(a))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x.map(|v| v + s))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x.map(|v| v * s))
    }

    /// `1 - a`.
    pub fn one_minus(&self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.map(|v| v.max(0.0)))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| {
            x.map(|v| if v > 0.0 { v } else { slope * v })
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| x.map(|v| 1.0 / (1.0 + (-v).exp())))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.map(f64::tanh))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.map(f64::abs))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x.map(|v| v * v))
    }

    /// Natural log with arguments below `floor` clamped to `floor`. Clamped
    /// elements get zero gradient and are counted in [`Tape::clamp_events`].
    pub fn log(&self, a: Var, floor: f64) -> Var {
        let x = self.value(a);
        let clamped: Vec<bool> = x.data().iter().map(|&v| !(v >= floor)).collect();
        let hits = clamped.iter().filter(|&&c| c).count();
        self.clamp_events.set(self.clamp_events.get() + hits);
        let value = x.map(|v| if v >= floor { v.ln() } else { floor.ln() });
        self.push(value, Op::Log { x: a, clamped }, self.needs(a))
    }

    /// `sqrt(a + eps)`.
    pub fn sqrt(&self, a: Var, eps: f64) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.map(|v| (v + eps).sqrt()))
    }

    pub fn softmax_channels(&self, a: Var) -> Var {
        self.unary(a, Op::Softmax(a), kernels::softmax_channels)
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = {
            let (xv, wv) = (self.value(x), self.value(w));
            let bv = b.map(|b| self.value(b));
            kernels::conv2d(&xv, &wv, bv.as_deref(), stride, pad)
        };
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        )
    }

    pub fn reflect_pad(&self, a: Var, p: usize) -> Var {
        self.unary(a, Op::ReflectPad(a, p), |x| kernels::reflect_pad(x, p))
    }

    /// Parameter-free instance normalisation.
    pub fn instance_norm(&self, a: Var, eps: f64) -> Var {
        let (value, inv_std) = kernels::instance_norm(&self.value(a), eps);
        self.push(value, Op::InstanceNorm { x: a, inv_std }, self.needs(a))
    }

    pub fn avg_pool2(&self, a: Var) -> Var {
        self.unary(a, Op::AvgPool2(a), kernels::avg_pool2)
    }

    pub fn upsample2(&self, a: Var) -> Var {
        self.unary(a, Op::Upsample2(a), kernels::upsample2)
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let (n, _, h, w) = values[0].dims4();
        let total_c: usize = values.iter().map(|v| v.dims4().1).sum();
        let mut data = Vec::with_capacity(n * total_c * h * w);
        for s in 0..n {
            for v in &values {
                let (vn, c, vh, vw) = v.dims4();
                assert!(vn == n && vh == h && vw == w, "concat shape mismatch");
                data.extend_from_slice(&v.data()[s * c * h * w..(s + 1) * c * h * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(&[n, total_c, h, w], data),
            Op::Concat(parts.to_vec()),
            needs,
        )
    }

    /// Divides a weight by its spectral-norm estimate `sigma = |W^T u|`, with
    /// `W` viewed as `(out, rest)` and `u` held fixed.
    pub fn spectral_normalize(&self, w: Var, u: &[f64]) -> Var {
        let wv = self.value(w);
        let rows = wv.shape()[0];
        let cols = wv.len() / rows;
        assert_eq!(u.len(), rows, "power-iteration vector has wrong length");
        let mut v = vec![0.0; cols];
        for (r, &ur) in u.iter().enumerate() {
            for (c, vc) in v.iter_mut().enumerate() {
                *vc += wv.data()[r * cols + c] * ur;
            }
        }
        let sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= sigma);
        let value = wv.map(|x| x / sigma);
        let needs = self.needs(w);
        self.push(
            value,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v,
                sigma,
            },
            needs,
        )
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&self, a: Var) -> Var {
        self.unary(a, Op::Mean(a), |x| Tensor::scalar(x.mean()))
    }

    /// Per-sample mean over all non-batch axes; shape `[N]`.
    pub fn sample_mean(&self, a: Var) -> Var {
        self.unary(a, Op::SampleMean(a), |x| {
            let n = x.shape()[0];
            let per = x.len() / n;
            Tensor::new(
                &[n],
                x.data()
                    .chunks(per)
                    .map(|c| c.iter().sum::<f64>() / per as f64)
                    .collect(),
            )
        })
    }

    /// Per-sample sum over all non-batch axes; shape `[N]`.
    pub fn sample_sum(&self, a: Var) -> Var {
        self.unary(a, Op::SampleSum(a), |x| {
            let n = x.shape()[0];
            let per = x.len() / n;
            Tensor::new(
                &[n],
                x.data()
                    .chunks(per)
                    .map(|c| c.iter().sum::<f64>())
                    .collect(),
            )
        })
    }

    /// Spatial mean; `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&self, a: Var) -> Var {
        self.unary(a, Op::GlobalAvgPool(a), |x| {
            let (n, c, h, w) = x.dims4();
            let hw = h * w;
            Tensor::new(
                &[n, c, 1, 1],
                x.data()
                    .chunks(hw)
                    .map(|p| p.iter().sum::<f64>() / hw as f64)
                    .collect(),
            )
        })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        self.unary(a, Op::Reshape(a), |x| x.clone().reshape(shape))
    }

    /// Gradients of the one-element `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Borrow of the value behind `v` without cloning the `Rc`.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes: Ref<'_, Vec<Node>> = self.nodes.borrow();
        f(&nodes[v.0].value)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], target: Var, g: Tensor) {
    if !nodes[target.0].needs_grad {
        return;
    }
    match &mut grads[target.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let wants = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |g, y| g * y));
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, g.zip_map(val(*a), |g, x| g * x));
            }
        }
        Op::MulConst(a, c) => accumulate(nodes, grads, *a, broadcast_mul(g, c)),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.map(|v| v * s)),
        Op::Relu(a) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
        ),
        Op::LeakyRelu(a, slope) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { slope * g }),
        ),
        Op::Sigmoid(a) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(&node.value, |g, y| g * y * (1.0 - y)),
        ),
        Op::Tanh(a) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(&node.value, |g, y| g * (1.0 - y * y)),
        ),
        Op::Abs(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |g, x| g * sign(x))),
        Op::Square(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x)),
        Op::Log { x, clamped } => {
            let xv = val(*x);
            let mut out = g.zip_map(xv, |g, x| g / x);
            for (o, &c) in out.data_mut().iter_mut().zip(clamped) {
                if c {
                    *o = 0.0;
                }
            }
            accumulate(nodes, grads, *x, out)
        }
        Op::Sqrt(a) => accumulate(nodes, grads, *a, g.zip_map(&node.value, |g, y| 0.5 * g / y)),
        Op::Softmax(a) => accumulate(
            nodes,
            grads,
            *a,
            kernels::softmax_channels_backward(&node.value, g),
        ),
        Op::Conv {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let (gx, gw, gb) =
                kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad, wants(*x), wants(*w));
            if let Some(gx) = gx {
                accumulate(nodes, grads, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(nodes, grads, *w, gw);
            }
            if let Some(b) = b {
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::ReflectPad(a, p) => accumulate(
            nodes,
            grads,
            *a,
            kernels::reflect_pad_backward(val(*a).shape(), *p, g),
        ),
        Op::InstanceNorm { x, inv_std } => accumulate(
            nodes,
            grads,
            *x,
            kernels::instance_norm_backward(&node.value, inv_std, g),
        ),
        Op::AvgPool2(a) => accumulate(
            nodes,
            grads,
            *a,
            kernels::avg_pool2_backward(val(*a).shape(), g),
        ),
        Op::Upsample2(a) => accumulate(
            nodes,
            grads,
            *a,
            kernels::upsample2_backward(val(*a).shape(), g),
        ),
        Op::Concat(parts) => {
            let (n, total_c, h, w) = node.value.dims4();
            let hw = h * w;
            let mut offset = 0;
            for &p in parts {
                let c = val(p).dims4().1;
                if wants(p) {
                    let mut data = Vec::with_capacity(n * c * hw);
                    for s in 0..n {
                        let start = (s * total_c + offset) * hw;
                        data.extend_from_slice(&g.data()[start..start + c * hw]);
                    }
                    accumulate(nodes, grads, p, Tensor::new(&[n, c, h, w], data));
                }
                offset += c;
            }
        }
        Op::SpectralNorm { w, u, v, sigma } => {
            let wv = val(*w);
            let cols = v.len();
            let dot: f64 = g.data().iter().zip(wv.data()).map(|(a, b)| a * b).sum();
            let coef = dot / (sigma * sigma);
            let mut out = g.map(|x| x / sigma);
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o -= coef * u[i / cols] * v[i % cols];
            }
            accumulate(nodes, grads, *w, out)
        }
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            accumulate(
                nodes,
                grads,
                *a,
                Tensor::full(val(*a).shape(), g.item() / n),
            )
        }
        Op::SampleMean(a) | Op::SampleSum(a) => {
            let x = val(*a);
            let n = x.shape()[0];
            let per = x.len() / n;
            let norm = if matches!(node.op, Op::SampleMean(_)) {
                per as f64
            } else {
                1.0
            };
            let out = Tensor::from_fn(x.shape(), |i| g.data()[i / per] / norm);
            accumulate(nodes, grads, *a, out)
        }
        Op::GlobalAvgPool(a) => {
            let x = val(*a);
            let (_, _, h, w) = x.dims4();
            let hw = h * w;
            let out = Tensor::from_fn(x.shape(), |i| g.data()[i / hw] / hw as f64);
            accumulate(nodes, grads, *a, out)
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.clone().reshape(val(*a).shape())),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
