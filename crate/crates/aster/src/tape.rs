//! Reverse-mode automatic differentiation on dynamic-dimensional `f64` arrays.
//!
//! A [`Tape`] records a computation graph as operations execute; [`Tape::backward`]
//! replays it in reverse to accumulate gradients. Two gate operations control
//! gradient flow without touching forward values:
//!
//! - [`Tape::stop_grad`] — identity forward, multiplies upstream gradients by 0
//! - [`Tape::reverse_grad`] — identity forward, multiplies upstream gradients by -1
//!
//! Parameters enter the graph through [`Tape::param`], which memoizes leaves by
//! name so the same tensor used in several places is a single node. Leaves
//! inserted with `trainable = false` are constants: no gradient is ever
//! computed for them and backward never descends past them.

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Ix2, IxDyn, Slice};
use std::collections::BTreeMap;

/// Handle to a node in a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// `lhs + rhs` where `rhs` broadcasts (right-aligned) to `lhs`'s shape.
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    /// `[n,k] @ [k,m]`.
    Matmul(Var, Var),
    /// `[..,n,k] @ [..,k,m]` with identical leading dimensions.
    BatchMatmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    SumAll(Var),
    /// Softmax over the last axis.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    StopGrad(Var),
    ReverseGrad(Var),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. One per forward pass; drop it to free the graph.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().expect("empty node value")
    }

    /// Constant leaf: no gradient flows into or past it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Gradient-tracked leaf (for tests and ad-hoc differentiation).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Named parameter leaf, memoized per tape. Repeated calls with the same
    /// name return the original node so gradient contributions accumulate.
    pub fn param(&mut self, name: &str, value: &ArrayD<f64>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = (&String, Var)> {
        self.params.iter().map(|(k, &v)| (k, v))
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + b` with `b` broadcast (right-aligned, NumPy rules) to `a`'s shape.
    pub fn add_b(&mut self, a: Var, b: Var) -> Var {
        let bshape = self.shape(b).to_vec();
        let ashape = self.shape(a).to_vec();
        let bview = self.nodes[b.0]
            .value
            .broadcast(IxDyn(&ashape))
            .unwrap_or_else(|| panic!("add_b: cannot broadcast {bshape:?} to {ashape:?}"));
        let value = &self.nodes[a.0].value + &bview;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::AddBroadcast(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value + c;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.ndim(), 2, "matmul: lhs must be 2-d");
        assert_eq!(bv.ndim(), 2, "matmul: rhs must be 2-d");
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul: inner dim mismatch");
        let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
        let value = a2.dot(&b2).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Matmul(a, b), rg)
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let value = batch_matmul_values(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::BatchMatmul(a, b), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = permuted(&self.nodes[a.0].value, axes);
        let rg = self.rg(a);
        self.push(value, Op::Permute(a, axes.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = reshaped(&self.nodes[a.0].value, shape);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let from = self.shape(a).to_vec();
        let value = self.nodes[a.0]
            .value
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("broadcast_to: cannot broadcast {from:?} to {shape:?}"))
            .to_owned();
        let rg = self.rg(a);
        self.push(value, Op::BroadcastTo(a), rg)
    }

    /// Sum of all entries, as a 0-d node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), rg)
    }

    /// Mean of all entries, as a 0-d node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_last_axis(&self.nodes[a.0].value);
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis with affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let f = *self.shape(x).last().expect("layer_norm on 0-d input");
        assert_eq!(self.shape(gamma), &[f], "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), &[f], "layer_norm: beta shape");
        let xv = &self.nodes[x.0].value;
        let (xhat, _) = layer_norm_xhat(xv, eps);
        let gv = self.nodes[gamma.0]
            .value
            .broadcast(xv.raw_dim())
            .unwrap()
            .to_owned();
        let bv = self.nodes[beta.0].value.broadcast(xv.raw_dim()).unwrap();
        let value = &xhat * &gv + &bv;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu_scalar);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid_scalar);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Ln(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.nodes[x.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let rg = self.rg(x);
        self.push(
            value,
            Op::Narrow {
                x,
                axis,
                start,
                len,
            },
            rg,
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        let views: Vec<ArrayViewD<f64>> =
            parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            value,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    /// Identity forward; upstream gradients are scaled by 0 (never propagated).
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::StopGrad(a), false)
    }

    /// Identity forward; upstream gradients are scaled by -1.
    pub fn reverse_grad(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        self.push(value, Op::ReverseGrad(a), rg)
    }

    // ---- backward ----

    /// Reverse-accumulate gradients of `root` (seeded with ones) with respect
    /// to every gradient-tracked node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let mut acc = |v: Var, contrib: ArrayD<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &contrib,
                slot => *slot = Some(contrib),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, g.clone());
                acc(*b, reduce_to_shape(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * &self.nodes[b.0].value);
                acc(*b, g * &self.nodes[a.0].value);
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a, _) => acc(*a, g.clone()),
            Op::Matmul(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                acc(*a, g2.dot(&bv.t()).into_dyn());
                acc(*b, av.t().dot(&g2).into_dyn());
            }
            Op::BatchMatmul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                // dA = g @ B^T, dB = A^T @ g, per batch slice.
                acc(*a, batch_matmul_values(g, &transpose_last_two(bv)));
                acc(*b, batch_matmul_values(&transpose_last_two(av), g));
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0usize; axes.len()];
                for (to, &from) in axes.iter().enumerate() {
                    inverse[from] = to;
                }
                acc(*a, permuted(g, &inverse));
            }
            Op::Reshape(a) => acc(*a, reshaped(g, self.shape(*a))),
            Op::BroadcastTo(a) => acc(*a, reduce_to_shape(g, self.shape(*a))),
            Op::SumAll(a) => {
                let gs = *g.iter().next().expect("empty gradient");
                acc(*a, ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs));
            }
            Op::Softmax(a) => {
                let s = &self.nodes[i].value;
                acc(*a, softmax_backward(s, g));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = &self.nodes[x.0].value;
                let (xhat, inv_std) = layer_norm_xhat(xv, *eps);
                let gv = &self.nodes[gamma.0].value;
                // dbeta = sum over lanes of g; dgamma = sum over lanes of g*xhat
                let f = *xv.shape().last().unwrap();
                let lanes = xv.len() / f;
                let g2 = reshaped(g, &[lanes, f]);
                let xhat2 = reshaped(&xhat, &[lanes, f]);
                if self.nodes[beta.0].requires_grad {
                    acc(*beta, g2.sum_axis(Axis(0)).into_dyn());
                }
                if self.nodes[gamma.0].requires_grad {
                    acc(*gamma, (&g2 * &xhat2).sum_axis(Axis(0)).into_dyn());
                }
                if self.nodes[x.0].requires_grad {
                    let gvb = gv.broadcast(IxDyn(&[lanes, f])).unwrap();
                    let dxhat = &g2 * &gvb;
                    let mean_dxhat = dxhat.mean_axis(Axis(1)).unwrap();
                    let mean_dxhat_xhat = (&dxhat * &xhat2).mean_axis(Axis(1)).unwrap();
                    let inv2 = reshaped(&inv_std, &[lanes]);
                    let mut dx = ArrayD::zeros(IxDyn(&[lanes, f]));
                    for l in 0..lanes {
                        let istd = inv2[[l]];
                        let m1 = mean_dxhat[l];
                        let m2 = mean_dxhat_xhat[l];
                        for k in 0..f {
                            dx[[l, k]] = istd * (dxhat[[l, k]] - m1 - xhat2[[l, k]] * m2);
                        }
                    }
                    acc(*x, reshaped(&dx, xv.shape()));
                }
            }
            Op::Gelu(a) => {
                let deriv = self.nodes[a.0].value.mapv(gelu_deriv_scalar);
                acc(*a, g * &deriv);
            }
            Op::Sigmoid(a) => {
                let s = &self.nodes[i].value;
                acc(*a, g * &(s * &(1.0 - s)));
            }
            Op::Exp(a) => acc(*a, g * &self.nodes[i].value),
            Op::Ln(a) => acc(*a, g / &self.nodes[a.0].value),
            Op::Clamp(a, lo, hi) => {
                let mask = self.nodes[a.0]
                    .value
                    .mapv(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                acc(*a, g * &mask);
            }
            Op::Narrow {
                x,
                axis,
                start,
                len,
            } => {
                let mut dz = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                dz.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                    .assign(g);
                acc(*x, dz);
            }
            Op::Concat { axis, parts } => {
                let mut offset = 0usize;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let piece = g
                        .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                        .to_owned();
                    acc(p, piece);
                    offset += len;
                }
            }
            Op::StopGrad(_) => unreachable!("stop_grad nodes never require gradients"),
            Op::ReverseGrad(a) => acc(*a, -g),
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for a node, if any was accumulated.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node, materializing zeros when none flowed.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> ArrayD<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(tape.value(v).raw_dim()),
        }
    }

    /// Gradient for a named parameter; zeros when none flowed (frozen or unused).
    pub fn by_name(&self, tape: &Tape, name: &str) -> Option<ArrayD<f64>> {
        tape.param_var(name).map(|v| self.get_or_zeros(tape, v))
    }
}

// ---- value kernels ----

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reshaped(arr: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let data = arr.as_standard_layout().to_owned().into_raw_vec_and_offset().0;
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("reshape: element count mismatch")
}

fn permuted(arr: &ArrayD<f64>, axes: &[usize]) -> ArrayD<f64> {
    arr.view()
        .permuted_axes(axes.to_vec())
        .as_standard_layout()
        .to_owned()
}

fn transpose_last_two(arr: &ArrayD<f64>) -> ArrayD<f64> {
    let n = arr.ndim();
    let mut axes: Vec<usize> = (0..n).collect();
    axes.swap(n - 2, n - 1);
    permuted(arr, &axes)
}

/// Sum `grad` down to `target` shape (inverse of right-aligned broadcasting).
fn reduce_to_shape(grad: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for i in 0..target.len() {
        if target[i] == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn batch_matmul_values(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let an = a.ndim();
    let bn = b.ndim();
    assert!(an >= 2 && bn >= 2, "batch_matmul: inputs must be >= 2-d");
    assert_eq!(
        &a.shape()[..an - 2],
        &b.shape()[..bn - 2],
        "batch_matmul: leading dims differ"
    );
    let (n, k) = (a.shape()[an - 2], a.shape()[an - 1]);
    let (k2, m) = (b.shape()[bn - 2], b.shape()[bn - 1]);
    assert_eq!(k, k2, "batch_matmul: inner dim mismatch");
    let lead: usize = a.shape()[..an - 2].iter().product();

    let a3 = reshaped(a, &[lead, n, k]);
    let b3 = reshaped(b, &[lead, k, m]);
    let mut out = ArrayD::zeros(IxDyn(&[lead, n, m]));
    for i in 0..lead {
        let ai = a3
            .index_axis(Axis(0), i)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let bi = b3
            .index_axis(Axis(0), i)
            .into_dimensionality::<Ix2>()
            .unwrap();
        out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
    }
    let mut shape: Vec<usize> = a.shape()[..an - 2].to_vec();
    shape.push(n);
    shape.push(m);
    reshaped(&out, &shape)
}

fn softmax_last_axis(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = x.as_standard_layout().to_owned();
    let f = *x.shape().last().expect("softmax on 0-d input");
    let lanes = x.len() / f;
    let mut flat = reshaped(&out, &[lanes, f]);
    for mut lane in flat.outer_iter_mut() {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    out = reshaped(&flat, x.shape());
    out
}

fn softmax_backward(s: &ArrayD<f64>, g: &ArrayD<f64>) -> ArrayD<f64> {
    let f = *s.shape().last().unwrap();
    let lanes = s.len() / f;
    let s2 = reshaped(s, &[lanes, f]);
    let g2 = reshaped(g, &[lanes, f]);
    let mut out = ArrayD::zeros(IxDyn(&[lanes, f]));
    for l in 0..lanes {
        let mut dot = 0.0;
        for k in 0..f {
            dot += g2[[l, k]] * s2[[l, k]];
        }
        for k in 0..f {
            out[[l, k]] = s2[[l, k]] * (g2[[l, k]] - dot);
        }
    }
    reshaped(&out, s.shape())
}

/// Normalized values and per-lane inverse std for layer norm.
fn layer_norm_xhat(x: &ArrayD<f64>, eps: f64) -> (ArrayD<f64>, ArrayD<f64>) {
    let f = *x.shape().last().unwrap();
    let lanes = x.len() / f;
    let x2 = reshaped(x, &[lanes, f]);
    let mut xhat = ArrayD::zeros(IxDyn(&[lanes, f]));
    let mut inv_std = ArrayD::zeros(IxDyn(&[lanes]));
    for l in 0..lanes {
        let lane = x2.index_axis(Axis(0), l);
        let mean = lane.sum() / f as f64;
        let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[[l]] = istd;
        for k in 0..f {
            xhat[[l, k]] = (x2[[l, k]] - mean) * istd;
        }
    }
    let shape = x.shape().to_vec();
    let lane_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
    (reshaped(&xhat, &shape), reshaped(&inv_std, &lane_shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, ArrayD, IxDyn};

    fn dyn1(v: &[f64]) -> ArrayD<f64> {
        arr1(v).into_dyn()
    }

    #[test]
    fn stop_gate_zeroes_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(dyn1(&[1.0, 2.0, 3.0]));
        let gated = t.stop_grad(x);
        let loss = t.sum_all(gated);
        let grads = t.backward(loss);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get_or_zeros(&t, x), ArrayD::zeros(IxDyn(&[3])));
    }

    #[test]
    fn reverse_gate_negates_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(dyn1(&[1.0, 2.0, 3.0]));
        let gated = t.reverse_grad(x);
        let loss = t.sum_all(gated);
        let grads = t.backward(loss);
        assert_eq!(grads.get(x).unwrap(), &dyn1(&[-1.0, -1.0, -1.0]));
    }

    #[test]
    fn gates_are_identity_in_forward() {
        let mut t = Tape::new();
        let x = t.leaf(dyn1(&[0.5, -2.0]));
        let s = t.stop_grad(x);
        let r = t.reverse_grad(x);
        assert_eq!(t.value(s), t.value(x));
        assert_eq!(t.value(r), t.value(x));
    }

    #[test]
    fn shared_parameter_accumulates_both_paths() {
        let mut t = Tape::new();
        let w = dyn1(&[2.0]);
        let a = t.param("w", &w, true);
        let b = t.param("w", &w, true);
        assert_eq!(a, b);
        let sq = t.mul(a, b); // w^2
        let loss = t.sum_all(sq);
        let grads = t.backward(loss);
        assert_eq!(grads.get(a).unwrap(), &dyn1(&[4.0])); // d(w^2)/dw = 2w
    }

    #[test]
    fn frozen_parameter_receives_no_gradient() {
        let mut t = Tape::new();
        let w = dyn1(&[2.0]);
        let p = t.param("frozen", &w, false);
        let sq = t.mul(p, p);
        let loss = t.sum_all(sq);
        let grads = t.backward(loss);
        assert!(grads.get(p).is_none());
        assert_eq!(grads.by_name(&t, "frozen").unwrap(), ArrayD::zeros(IxDyn(&[1])));
    }

    #[test]
    fn matmul_matches_manual_product() {
        let mut t = Tape::new();
        let a = t.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = t.constant(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let c = t.matmul(a, b);
        assert_eq!(t.value(c), &arr2(&[[19.0, 22.0], [43.0, 50.0]]).into_dyn());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).into_dyn());
        let s = t.softmax(x);
        let v = t.value(s);
        let r0: f64 = (0..3).map(|k| v[[0, k]]).sum();
        let r1: f64 = (0..3).map(|k| v[[1, k]]).sum();
        assert!((r0 - 1.0).abs() < 1e-12 && (r1 - 1.0).abs() < 1e-12);
        assert!((v[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn broadcast_and_reduce_round_trip() {
        let mut t = Tape::new();
        let x = t.leaf(dyn1(&[1.0, 2.0]));
        let wide = t.broadcast_to(x, &[3, 1, 2]);
        let loss = t.sum_all(wide);
        let grads = t.backward(loss);
        assert_eq!(grads.get(x).unwrap(), &dyn1(&[3.0, 3.0]));
    }
}
