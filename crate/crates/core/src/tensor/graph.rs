//! Tape-based reverse-mode differentiation over the fixed operator set of
//! the network, plus the executor abstraction that lets the same model code
//! run either on the recording tape (double precision, differentiable) or
//! eagerly (any precision, intermediates freed as soon as unreferenced).

use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{self, check, OffsetField};
use super::params::ParamStore;
use super::{Scalar, Tensor};
use crate::error::{ensure_contract, Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Scale { x: Var, k: f64 },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ConcatChannels { a: Var, b: Var },
    PixelShuffle { x: Var },
    Gather { src: Var, off: OffsetField },
    Attention { q: Var, ks: Vec<Var> },
    Fuse { att: Var, vs: Vec<Var> },
    MeanAbsDiff { a: Var, b: Var },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`]. Intermediate
/// gradients are consumed as the walk passes them; only leaves keep theirs.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Append-only tape. Every operation records its inputs and forward value;
/// [`Graph::backward`] walks the tape in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv2d_strided(x, w, b, 1)
    }

    /// Stride 2 is used internally to build the reference feature pyramid.
    pub fn conv2d_strided(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        kernels::conv_out_shape(self.shape(x), self.shape(w), stride)?;
        ensure_contract!(
            self.shape(b) == [self.shape(w)[0]],
            "conv2d bias must be [{}], got {:?}",
            self.shape(w)[0],
            self.shape(b)
        );
        let value =
            kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride);
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Op::Conv2d { x, w, b, stride }, value, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        check::slope(slope)?;
        let value = kernels::leaky_relu_forward(self.value(x), slope);
        let rg = self.needs(&[x]);
        Ok(self.push(Op::LeakyRelu { x, slope }, value, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = kernels::sigmoid_forward(self.value(x));
        let rg = self.needs(&[x]);
        self.push(Op::Sigmoid { x }, value, rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = kernels::scale_forward(self.value(x), k);
        let rg = self.needs(&[x]);
        self.push(Op::Scale { x, k }, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check::same_shape(self.shape(a), self.shape(b), "add")?;
        let value = kernels::add_forward(self.value(a), self.value(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check::same_shape(self.shape(a), self.shape(b), "mul")?;
        let value = kernels::mul_forward(self.value(a), self.value(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, value, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        check::concat(self.shape(a), self.shape(b))?;
        let value = kernels::concat_channels_forward(self.value(a), self.value(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::ConcatChannels { a, b }, value, rg))
    }

    pub fn pixel_shuffle(&mut self, x: Var) -> Result<Var> {
        check::pixel_shuffle(self.shape(x))?;
        let value = kernels::pixel_shuffle_forward(self.value(x));
        let rg = self.needs(&[x]);
        Ok(self.push(Op::PixelShuffle { x }, value, rg))
    }

    pub fn gather(&mut self, src: Var, off: &OffsetField) -> Result<Var> {
        check::rank3(self.shape(src), "gather")?;
        off.validate()?;
        let value = kernels::gather_forward(self.value(src), off);
        let rg = self.needs(&[src]);
        Ok(self.push(
            Op::Gather {
                src,
                off: off.clone(),
            },
            value,
            rg,
        ))
    }

    /// Pixel-wise softmax weights over `ks`, shape `[N, H, W]`.
    pub fn attention(&mut self, q: Var, ks: &[Var]) -> Result<Var> {
        let kshapes: Vec<&[usize]> = ks.iter().map(|k| self.shape(*k)).collect();
        check::attention(self.shape(q), &kshapes)?;
        let kvals: Vec<&Tensor> = ks.iter().map(|k| self.value(*k)).collect();
        let value = kernels::attention_forward(self.value(q), &kvals);
        let mut inputs = vec![q];
        inputs.extend_from_slice(ks);
        let rg = self.needs(&inputs);
        Ok(self.push(
            Op::Attention {
                q,
                ks: ks.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Weighted sum of `vs` under an `[N, H, W]` attention stack.
    pub fn fuse(&mut self, att: Var, vs: &[Var]) -> Result<Var> {
        let vshapes: Vec<&[usize]> = vs.iter().map(|v| self.shape(*v)).collect();
        check::fuse(self.shape(att), &vshapes)?;
        let vvals: Vec<&Tensor> = vs.iter().map(|v| self.value(*v)).collect();
        let value = kernels::fuse_forward(self.value(att), &vvals);
        let mut inputs = vec![att];
        inputs.extend_from_slice(vs);
        let rg = self.needs(&inputs);
        Ok(self.push(
            Op::Fuse {
                att,
                vs: vs.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Scalar mean absolute difference, shape `[1]`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        check::same_shape(self.shape(a), self.shape(b), "mean_abs_diff")?;
        ensure_contract!(
            !self.value(a).data().is_empty(),
            "mean_abs_diff over empty tensors"
        );
        let value = kernels::mean_abs_diff_forward(self.value(a), self.value(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MeanAbsDiff { a, b }, value, rg))
    }

    /// Reverse pass from a scalar node, seeded with 1. Returns per-node
    /// gradients; leaves that were created with `requires_grad` keep theirs.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        ensure_contract!(
            lv.len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            lv.shape()
        );
        ensure_contract!(
            lv.data()[0].is_finite(),
            "backward from non-finite loss {}",
            lv.data()[0]
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&[1], 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue; // leaves keep their accumulated gradient
            }
            // Consume the incoming gradient; all consumers sit later on the
            // tape and have already contributed.
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, stride } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                    );
                    self.acc(&mut grads, *x, gx);
                    self.acc(&mut grads, *w, gw);
                    self.acc(&mut grads, *b, gb);
                }
                Op::LeakyRelu { x, slope } => {
                    let gx = kernels::leaky_relu_backward(self.value(*x), &g, *slope);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let gx = kernels::sigmoid_backward(&self.nodes[id].value, &g);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Scale { x, k } => {
                    let gx = kernels::scale_forward(&g, *k);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let ga = kernels::mul_forward(&g, self.value(*b));
                    let gb = kernels::mul_forward(&g, self.value(*a));
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::ConcatChannels { a, b } => {
                    let c1 = self.shape(*a)[0];
                    let (ga, gb) = kernels::concat_channels_backward(c1, &g);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::PixelShuffle { x } => {
                    let gx = kernels::pixel_shuffle_backward(&g);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Gather { src, off } => {
                    let gsrc = kernels::gather_backward(self.shape(*src), off, &g);
                    self.acc(&mut grads, *src, gsrc);
                }
                Op::Attention { q, ks } => {
                    let kvals: Vec<&Tensor> = ks.iter().map(|k| self.value(*k)).collect();
                    let (gq, gks) = kernels::attention_backward(
                        self.value(*q),
                        &kvals,
                        &self.nodes[id].value,
                        &g,
                    );
                    self.acc(&mut grads, *q, gq);
                    for (k, gk) in ks.iter().zip(gks) {
                        self.acc(&mut grads, *k, gk);
                    }
                }
                Op::Fuse { att, vs } => {
                    let vvals: Vec<&Tensor> = vs.iter().map(|v| self.value(*v)).collect();
                    let (gatt, gvs) =
                        kernels::fuse_backward(self.value(*att), &vvals, &g);
                    self.acc(&mut grads, *att, gatt);
                    for (v, gv) in vs.iter().zip(gvs) {
                        self.acc(&mut grads, *v, gv);
                    }
                }
                Op::MeanAbsDiff { a, b } => {
                    let (ga, gb) = kernels::mean_abs_diff_backward(
                        self.value(*a),
                        self.value(*b),
                        g.data()[0],
                    );
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }
}

/// The operator surface the model is written against. One implementation
/// records a differentiable tape, the other evaluates eagerly in the chosen
/// precision. `stride` on `conv2d` is 1 or 2.
pub trait Executor {
    type V: Clone;

    /// Fetches (and memoizes) a named parameter.
    fn param(&mut self, name: &str) -> Result<Self::V>;
    /// Binds an external double-precision input tensor.
    fn input(&mut self, t: &Tensor) -> Result<Self::V>;
    fn zeros(&mut self, shape: &[usize]) -> Self::V;
    fn shape(&self, v: &Self::V) -> Vec<usize>;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, stride: usize)
        -> Result<Self::V>;
    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Result<Self::V>;
    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, k: f64) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn pixel_shuffle(&mut self, x: &Self::V) -> Result<Self::V>;
    fn gather(&mut self, src: &Self::V, off: &OffsetField) -> Result<Self::V>;
    fn attention(&mut self, q: &Self::V, ks: &[Self::V]) -> Result<Self::V>;
    fn fuse(&mut self, att: &Self::V, vs: &[Self::V]) -> Result<Self::V>;
    fn mean_abs_diff(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
}

/// Records the model onto a [`Graph`] in double precision, with parameters
/// bound as differentiable leaves. Dropping the executor releases the tape.
pub struct GraphExec<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> GraphExec<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        GraphExec {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.graph.backward(loss)
    }

    /// Gradients of every parameter the recorded graph touched, by name.
    /// Parameters the loss never saw are simply absent.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        self.bound
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

impl Executor for GraphExec<'_> {
    type V = Var;

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.store.value(name)?.clone();
        let v = self.graph.leaf(value, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn input(&mut self, t: &Tensor) -> Result<Var> {
        t.ensure_finite("graph input")?;
        Ok(self.graph.leaf(t.clone(), false))
    }

    fn zeros(&mut self, shape: &[usize]) -> Var {
        self.graph.leaf(Tensor::zeros(shape), false)
    }

    fn shape(&self, v: &Var) -> Vec<usize> {
        self.graph.shape(*v).to_vec()
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize) -> Result<Var> {
        self.graph.conv2d_strided(*x, *w, *b, stride)
    }

    fn leaky_relu(&mut self, x: &Var, slope: f64) -> Result<Var> {
        self.graph.leaky_relu(*x, slope)
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        Ok(self.graph.sigmoid(*x))
    }

    fn scale(&mut self, x: &Var, k: f64) -> Result<Var> {
        Ok(self.graph.scale(*x, k))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.add(*a, *b)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.mul(*a, *b)
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.concat_channels(*a, *b)
    }

    fn pixel_shuffle(&mut self, x: &Var) -> Result<Var> {
        self.graph.pixel_shuffle(*x)
    }

    fn gather(&mut self, src: &Var, off: &OffsetField) -> Result<Var> {
        self.graph.gather(*src, off)
    }

    fn attention(&mut self, q: &Var, ks: &[Var]) -> Result<Var> {
        self.graph.attention(*q, ks)
    }

    fn fuse(&mut self, att: &Var, vs: &[Var]) -> Result<Var> {
        self.graph.fuse(*att, vs)
    }

    fn mean_abs_diff(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.mean_abs_diff(*a, *b)
    }
}

/// Evaluates immediately in precision `T`. Values are reference-counted; an
/// intermediate's buffer is freed the moment the model code drops its last
/// handle, which keeps the resident set at the true working footprint.
pub struct EagerExec<'a, T: Scalar> {
    store: &'a ParamStore,
    cast: BTreeMap<String, Rc<Tensor<T>>>,
}

impl<'a, T: Scalar> EagerExec<'a, T> {
    pub fn new(store: &'a ParamStore) -> Self {
        EagerExec {
            store,
            cast: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Executor for EagerExec<'_, T> {
    type V = Rc<Tensor<T>>;

    fn param(&mut self, name: &str) -> Result<Self::V> {
        if let Some(v) = self.cast.get(name) {
            return Ok(v.clone());
        }
        let v = Rc::new(self.store.value(name)?.cast::<T>());
        self.cast.insert(name.to_string(), v.clone());
        Ok(v)
    }

    fn input(&mut self, t: &Tensor) -> Result<Self::V> {
        t.ensure_finite("eager input")?;
        Ok(Rc::new(t.cast::<T>()))
    }

    fn zeros(&mut self, shape: &[usize]) -> Self::V {
        Rc::new(Tensor::zeros(shape))
    }

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, stride: usize) -> Result<Self::V> {
        kernels::conv_out_shape(x.shape(), w.shape(), stride)?;
        ensure_contract!(
            b.shape() == [w.shape()[0]],
            "conv2d bias must be [{}], got {:?}",
            w.shape()[0],
            b.shape()
        );
        Ok(Rc::new(kernels::conv2d_forward(x, w, b, stride)))
    }

    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Result<Self::V> {
        check::slope(slope)?;
        Ok(Rc::new(kernels::leaky_relu_forward(x, slope)))
    }

    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(kernels::sigmoid_forward(x)))
    }

    fn scale(&mut self, x: &Self::V, k: f64) -> Result<Self::V> {
        Ok(Rc::new(kernels::scale_forward(x, k)))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        check::same_shape(a.shape(), b.shape(), "add")?;
        Ok(Rc::new(kernels::add_forward(a, b)))
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        check::same_shape(a.shape(), b.shape(), "mul")?;
        Ok(Rc::new(kernels::mul_forward(a, b)))
    }

    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        check::concat(a.shape(), b.shape())?;
        Ok(Rc::new(kernels::concat_channels_forward(a, b)))
    }

    fn pixel_shuffle(&mut self, x: &Self::V) -> Result<Self::V> {
        check::pixel_shuffle(x.shape())?;
        Ok(Rc::new(kernels::pixel_shuffle_forward(x)))
    }

    fn gather(&mut self, src: &Self::V, off: &OffsetField) -> Result<Self::V> {
        check::rank3(src.shape(), "gather")?;
        off.validate()?;
        Ok(Rc::new(kernels::gather_forward(src, off)))
    }

    fn attention(&mut self, q: &Self::V, ks: &[Self::V]) -> Result<Self::V> {
        let kshapes: Vec<&[usize]> = ks.iter().map(|k| k.shape()).collect();
        check::attention(q.shape(), &kshapes)?;
        let kvals: Vec<&Tensor<T>> = ks.iter().map(|k| k.as_ref()).collect();
        Ok(Rc::new(kernels::attention_forward(q, &kvals)))
    }

    fn fuse(&mut self, att: &Self::V, vs: &[Self::V]) -> Result<Self::V> {
        let vshapes: Vec<&[usize]> = vs.iter().map(|v| v.shape()).collect();
        check::fuse(att.shape(), &vshapes)?;
        let vvals: Vec<&Tensor<T>> = vs.iter().map(|v| v.as_ref()).collect();
        Ok(Rc::new(kernels::fuse_forward(att, &vvals)))
    }

    fn mean_abs_diff(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        check::same_shape(a.shape(), b.shape(), "mean_abs_diff")?;
        ensure_contract!(!a.data().is_empty(), "mean_abs_diff over empty tensors");
        Ok(Rc::new(kernels::mean_abs_diff_forward(a, b)))
    }
}

/// Marks the non-finite-loss contract violation for training loops.
pub fn diverged(step: u64, loss: f64) -> Error {
    Error::Diverged {
        step,
        detail: format!("loss became {loss}"),
    }
}
