//! Reverse-mode automatic differentiation over a recorded op tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are borrowed
//! from a [`ParamStore`] without copying; asking for the same parameter twice
//! returns the same leaf, so shared weights accumulate a single gradient.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{OncoError, Result};
use crate::nn::kernels::{self, Window3};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How gradients pass through rectifiers during the backward sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReluRule {
    /// Ordinary derivative: pass where the forward activation is positive.
    #[default]
    Standard,
    /// Guided backpropagation: additionally zero negative incoming gradients.
    Guided,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window3,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Concat(Vec<Var>),
    Sub(Var, Var),
    ChannelMask {
        x: Var,
        keep: Vec<bool>,
    },
    Attention {
        e: Var,
        w: Var,
        alpha: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
    Pick {
        x: Var,
        index: usize,
    },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Adds an owned input tensor.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    /// Adds a borrowed input tensor.
    pub fn input_ref(&mut self, t: &'p Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, requires_grad)
    }

    /// Leaf for a named parameter, created once per graph.
    pub fn param(&mut self, store: &'p ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| OncoError::Checkpoint(format!("missing parameter {name}")))?;
        let v = self.push(Cow::Borrowed(t), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, win: Window3) -> Result<Var> {
        let out = kernels::conv3d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &win,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Cow::Owned(out), Op::Conv { x, w, b, win }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Relu(x), rg)
    }

    pub fn max_pool3d(&mut self, x: Var, win: Window3) -> Result<Var> {
        let (out, argmax) = kernels::max_pool3d_forward(self.value(x), &win)?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::MaxPool { x, argmax }, rg))
    }

    /// Concatenates tensors along their leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| OncoError::Shape("concat of nothing".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(OncoError::Shape(format!(
                    "concat: trailing dims {:?} vs {:?}",
                    &t.shape()[1..],
                    tail
                )));
            }
            channels += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![channels];
        shape.extend(tail);
        let out = Tensor::from_vec(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(out), Op::Concat(parts.to_vec()), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Sub(a, b), rg))
    }

    /// Zeroes whole leading-axis channels where `keep` is false.
    pub fn channel_mask(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if t.shape().first() != Some(&keep.len()) {
            return Err(OncoError::Shape(format!(
                "channel mask of {} entries for tensor {:?}",
                keep.len(),
                t.shape()
            )));
        }
        let per = t.len() / keep.len();
        let mut out = t.clone();
        for (c, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            if !keep[c] {
                chunk.fill(T::zero());
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Cow::Owned(out),
            Op::ChannelMask {
                x,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    /// Dot-product soft attention over all voxel positions of `e` (C, ...)
    /// with the score vector `w` (C). Returns the pooled vector (C).
    pub fn attention(&mut self, e: Var, w: Var) -> Result<Var> {
        let (h, alpha) = crate::model::attention::attention_pool(self.value(e), self.value(w))?;
        let rg = self.rg(e) || self.rg(w);
        Ok(self.push(Cow::Owned(h), Op::Attention { e, w, alpha }, rg))
    }

    /// Attention weights recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    /// `w (out, in) * x (in) + b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (out, inp) = match *wt.shape() {
            [o, i] if i == xt.len() && bt.len() == o => (o, i),
            _ => {
                return Err(OncoError::Shape(format!(
                    "linear: weight {:?}, input {:?}, bias {:?}",
                    wt.shape(),
                    xt.shape(),
                    bt.shape()
                )))
            }
        };
        let mut y = bt.clone().reshape(&[out])?;
        T::gemm(
            out,
            inp,
            1,
            T::one(),
            wt.data(),
            (inp as isize, 1),
            xt.data(),
            (1, 1),
            T::one(),
            y.data_mut(),
            (1, 1),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Cow::Owned(y), Op::Linear { x, w, b }, rg))
    }

    /// Inverted dropout with a precomputed keep mask already scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(OncoError::Shape("dropout mask length".into()));
        }
        let mut out = t.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Dropout { x, mask }, rg))
    }

    /// Cross-entropy of a logit vector against a class index; scalar output.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        if target >= z.len() {
            return Err(OncoError::Domain(format!(
                "class index {target} out of range for {} logits",
                z.len()
            )));
        }
        let probs = softmax(z.data());
        let zmax = z.max();
        let lse = zmax + z.data().iter().map(|&v| (v - zmax).exp()).sum::<T>().ln();
        let loss = Tensor::from_vec(&[1], vec![lse - z.data()[target]])?;
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Selects one element as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let v = *t
            .data()
            .get(index)
            .ok_or_else(|| OncoError::Domain(format!("index {index} out of range")))?;
        let rg = self.rg(x);
        Ok(self.push(
            Cow::Owned(Tensor::from_vec(&[1], vec![v])?),
            Op::Pick { x, index },
            rg,
        ))
    }

    /// Back-propagates `seed` (same shape as `root`'s value, or a scalar
    /// broadcast when `root` is a scalar) from `root` to every leaf that
    /// requires a gradient.
    pub fn backward(&self, root: Var, seed: T, rule: ReluRule) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), seed));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, rule, &mut grads)?;
        }

        let params = self
            .params
            .iter()
            .filter_map(|(name, v)| grads[v.0].take().map(|g| (name.clone(), g)))
            .collect();
        Ok(Gradients {
            leaves: grads,
            params,
        })
    }

    fn backward_node(
        &self,
        node: &Node<'p, T>,
        g: &Tensor<T>,
        rule: ReluRule,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
            if !self.rg(v) {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, win } => {
                let cg = kernels::conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    win,
                    self.rg(*x),
                )?;
                if let Some(dx) = cg.input {
                    acc(*x, dx)?;
                }
                acc(*w, cg.weight)?;
                if let Some(b) = b {
                    acc(*b, cg.bias)?;
                }
            }
            Op::Relu(x) => {
                let y = &node.value;
                let dx = Tensor::from_fn(y.shape(), |i| {
                    let gi = g.data()[i];
                    let pass = y.data()[i] > T::zero()
                        && (rule == ReluRule::Standard || gi > T::zero());
                    if pass {
                        gi
                    } else {
                        T::zero()
                    }
                });
                acc(*x, dx)?;
            }
            Op::MaxPool { x, argmax } => {
                let dx = kernels::max_pool3d_backward(self.value(*x).shape(), argmax, g);
                acc(*x, dx)?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = self.value(p).len();
                    let piece = Tensor::from_vec(&shape, g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    acc(p, piece)?;
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.map(|v| -v))?;
            }
            Op::ChannelMask { x, keep } => {
                let per = g.len() / keep.len();
                let mut dx = g.clone();
                for (c, chunk) in dx.data_mut().chunks_mut(per).enumerate() {
                    if !keep[c] {
                        chunk.fill(T::zero());
                    }
                }
                acc(*x, dx)?;
            }
            Op::Attention { e, w, alpha } => {
                let (de, dw) = crate::model::attention::attention_pool_backward(
                    self.value(*e),
                    self.value(*w),
                    alpha,
                    g.data(),
                );
                acc(*e, de)?;
                acc(*w, dw)?;
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (out, inp) = (wt.shape()[0], wt.shape()[1]);
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xt.shape());
                    T::gemm(
                        inp,
                        out,
                        1,
                        T::one(),
                        wt.data(),
                        (1, inp as isize),
                        g.data(),
                        (1, 1),
                        T::zero(),
                        dx.data_mut(),
                        (1, 1),
                    );
                    acc(*x, dx)?;
                }
                let dw = Tensor::from_fn(&[out, inp], |i| g.data()[i / inp] * xt.data()[i % inp]);
                acc(*w, dw)?;
                acc(*b, g.clone().reshape(self.value(*b).shape())?)?;
            }
            Op::Dropout { x, mask } => {
                let dx = Tensor::from_fn(g.shape(), |i| g.data()[i] * mask[i]);
                acc(*x, dx)?;
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let s = g.data()[0];
                // p_t - 1 computed as minus the other classes' mass, which
                // stays nonzero when p_t rounds to one
                let rest: T = (0..probs.len()).filter(|k| k != target).map(|k| probs[k]).sum();
                let dz = Tensor::from_fn(&[probs.len()], |k| if k == *target { -rest * s } else { probs[k] * s });
                acc(*logits, dz.reshape(self.value(*logits).shape())?)?;
            }
            Op::Pick { x, index } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                dx.data_mut()[*index] = g.data()[0];
                acc(*x, dx)?;
            }
        }
        Ok(())
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a non-parameter leaf (e.g. an input volume).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(String, Tensor<T>)> {
        self.params
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}
