//! Tape-based reverse-mode differentiation over a fixed op set.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`] walks
//! the nodes in reverse creation order, which is a valid reverse topological
//! order. A tape belongs to one forward/backward pair.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::{self, ChannelSource, NormStats, LAYER_NORM_EPS};
use crate::scalar::Scalar;
use crate::ssm::{self, ScanCache};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Silu(Var),
    Softplus(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<S>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    DwConv {
        x: Var,
        k: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
    },
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    SelectChannels {
        a: Var,
        b: Var,
        map: Rc<[ChannelSource]>,
    },
    Scan {
        x: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d: Option<Var>,
        cache: ScanCache<S>,
    },
    /// Scalar whose gradients with respect to its inputs were computed eagerly.
    Precomputed(Vec<(Var, Tensor<S>)>),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = ops::silu(self.value(x));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = ops::softplus(self.value(x));
        self.push(out, Op::Softplus(x), &[x])
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, stats) =
            ops::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), LAYER_NORM_EPS)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &parents))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::depthwise_conv2d(self.value(x), self.value(k), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, k];
        parents.extend(b);
        Ok(self.push(out, Op::DwConv { x, k, b }, &parents))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(k), b.map(|b| self.value(b)), stride)?;
        let mut parents = vec![x, k];
        parents.extend(b);
        Ok(self.push(out, Op::Conv2d { x, k, b, stride }, &parents))
    }

    /// See [`ops::gather_spatial`].
    pub fn gather_spatial(&mut self, x: Var, index: Rc<[usize]>, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::gather_spatial(self.value(x), &index, out_h, out_w)?;
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    /// See [`ops::select_channels`].
    pub fn select_channels(&mut self, a: Var, b: Var, map: Rc<[ChannelSource]>) -> Result<Var> {
        let out = ops::select_channels(self.value(a), self.value(b), &map)?;
        Ok(self.push(out, Op::SelectChannels { a, b, map }, &[a, b]))
    }

    /// See [`ssm::selective_scan`].
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d: Option<Var>,
    ) -> Result<Var> {
        let (out, cache) = ssm::selective_scan(
            self.value(x),
            self.value(delta),
            self.value(a_log),
            self.value(b),
            self.value(c),
            d.map(|d| self.value(d)),
        )?;
        let mut parents = vec![x, delta, a_log, b, c];
        parents.extend(d);
        Ok(self.push(
            out,
            Op::Scan {
                x,
                delta,
                a_log,
                b,
                c,
                d,
                cache,
            },
            &parents,
        ))
    }

    /// Records a scalar `value` together with its gradients with respect to `inputs`.
    pub fn precomputed_scalar(&mut self, value: S, inputs: Vec<(Var, Tensor<S>)>) -> Result<Var> {
        for (v, g) in &inputs {
            if g.shape() != self.shape(*v) {
                return Err(Error::dim(format!(
                    "precomputed gradient {:?} does not match input {:?}",
                    g.shape(),
                    self.shape(*v)
                )));
            }
        }
        let parents: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        Ok(self.push(Tensor::scalar(value), Op::Precomputed(inputs), &parents))
    }

    /// Reverse-mode pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.shape(root) != Shape::SCALAR {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let mut acc = |v: Var, contrib: Tensor<S>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&contrib).expect("gradient shape"),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-S::one()));
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(val(*b)).expect("shape"));
                acc(*b, g.mul(val(*a)).expect("shape"));
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k)),
            Op::Silu(x) => acc(*x, ops::silu_backward(val(*x), g)),
            Op::Softplus(x) => acc(*x, ops::softplus_backward(val(*x), g)),
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dg, db) = ops::layer_norm_backward(val(*x), val(*gamma), stats, g);
                acc(*x, dx);
                acc(*gamma, dg.reshape(val(*gamma).shape()).expect("shape"));
                acc(*beta, db.reshape(val(*beta).shape()).expect("shape"));
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(val(*x), val(*w), g);
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db.reshape(val(*b).shape()).expect("shape"));
                }
            }
            Op::DwConv { x, k, b } => {
                let (dx, dk, db) = ops::depthwise_conv2d_backward(val(*x), val(*k), g);
                acc(*x, dx);
                acc(*k, dk);
                if let Some(b) = b {
                    acc(*b, db.reshape(val(*b).shape()).expect("shape"));
                }
            }
            Op::Conv2d { x, k, b, stride } => {
                let (dx, dk, db) = ops::conv2d_backward(val(*x), val(*k), g, *stride);
                acc(*x, dx);
                acc(*k, dk);
                if let Some(b) = b {
                    acc(*b, db.reshape(val(*b).shape()).expect("shape"));
                }
            }
            Op::Gather { x, index } => {
                acc(*x, ops::gather_spatial_backward(val(*x).shape(), index, g));
            }
            Op::SelectChannels { a, b, map } => {
                let (da, db) = ops::select_channels_backward(val(*a).shape(), map, g);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Scan {
                x,
                delta,
                a_log,
                b,
                c,
                d,
                cache,
            } => {
                let sg = ssm::selective_scan_backward(
                    val(*x),
                    val(*delta),
                    val(*a_log),
                    val(*b),
                    val(*c),
                    d.map(val),
                    cache,
                    g,
                );
                acc(*x, sg.x);
                acc(*delta, sg.delta);
                acc(*a_log, sg.a_log);
                acc(*b, sg.b);
                acc(*c, sg.c);
                if let (Some(d), Some(dd)) = (d, sg.d_skip) {
                    acc(*d, dd);
                }
            }
            Op::Precomputed(inputs) => {
                let up = g.data()[0];
                for (v, local) in inputs {
                    acc(*v, local.scale(up));
                }
            }
        }
    }
}

/// Gradients of a scalar root with respect to every node of a tape.
pub struct Gradients<S = f32> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Shape>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of `v`; zeros when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Tensor<S> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }
}
