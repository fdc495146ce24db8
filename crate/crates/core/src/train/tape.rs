//! Reverse-mode automatic differentiation over the recorded operation graph.
//!
//! A [`Tape`] implements [`Backend`] with node handles as values, so any
//! forward routine written against the backend interface can run unchanged
//! on the tape and be differentiated. Each recorded node stores its output
//! value plus whatever intermediate quantities its adjoint needs (softmax
//! weights, reciprocal standard deviations, spectrogram phases, ...), which
//! keeps the backward sweep free of recomputation.
//!
//! [`Tape::backward`] consumes the tape, so a recorded graph can only be
//! differentiated once; record a fresh tape per optimization step.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::features::{stft_magnitude_vjp, StftPlan};
use crate::graph::{
    dims2, vo_add, vo_conv1d, vo_gated_tanh, vo_instance_norm, vo_leaky_relu, vo_lin_comb,
    vo_log_magnitude, vo_mean_all, vo_mul, vo_pqmf_analysis, vo_relu_affine,
    vo_spectral_convergence, vo_stft_magnitude, vo_tanh, vo_upsample, vo_weight_norm, vo_window,
    Backend,
};
use crate::losses::{logmag_vjp, sc_vjp};
use crate::nn::{
    conv_backward_bias, conv_backward_input, conv_backward_weight, gated_tanh_vjp,
    instance_norm_vjp, leaky_relu_vjp, resample_vjp, tanh_vjp, weight_norm_vjp, ConvGeom,
};
use crate::num::Real;
use crate::pqmf::{pqmf_analysis_vjp, PqmfBank};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
pub type NodeId = usize;

/// Gradients keyed by parameter name, as produced by [`Tape::backward`].
pub type TapeGradients<T> = HashMap<String, Tensor<T>>;

/// One recorded operation together with the caches its adjoint needs.
enum Op<T: Real> {
    /// Named differentiable input; its gradient is reported by name.
    Leaf { name: String },
    /// Input that does not require a gradient.
    Constant,
    /// Placeholder left behind once a node has been processed.
    Freed,
    WeightNorm { v: NodeId, g: NodeId, norms: Vec<T> },
    Conv1d { x: NodeId, w: NodeId, bias: Option<NodeId>, geom: ConvGeom, t_in: usize },
    InstanceNorm { x: NodeId, inv_std: Vec<T> },
    LeakyRelu { x: NodeId, slope: T },
    Tanh { x: NodeId },
    GatedTanh { a: NodeId, b: NodeId, tanh_a: Vec<T>, soft: Vec<T> },
    Upsample { x: NodeId, factor: usize },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Window { x: NodeId, start: usize },
    PqmfAnalysis { x: NodeId, bank: Arc<PqmfBank<T>> },
    StftMagnitude { x: NodeId, plan: Arc<StftPlan<T>>, re: Vec<T>, im: Vec<T> },
    SpectralConvergence { x: NodeId, reference: Arc<Tensor<T>>, diff_norm: T, ref_norm: T },
    LogMagnitude { x: NodeId, reference: Arc<Tensor<T>> },
    MeanAll { x: NodeId },
    ReluAffine { x: NodeId, scale: T, shift: T },
    LinComb { terms: Vec<(T, NodeId)> },
}

struct Node<T: Real> {
    op: Op<T>,
    val: Option<Tensor<T>>,
    grad: Option<Tensor<T>>,
}

/// Operation recorder implementing [`Backend`] with `Value = NodeId`.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    leaf_names: HashSet<String>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), leaf_names: HashSet::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value of a recorded node.
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.nodes
            .get(id)
            .and_then(|n| n.val.as_ref())
            .ok_or_else(|| Error::usage(format!("no live value for tape node {id}")))
    }

    fn push(&mut self, op: Op<T>, val: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, val: Some(val), grad: None });
        self.nodes.len() - 1
    }

    fn val_of(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id].val.as_ref().expect("tape invariant: operand value freed too early")
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<T>) {
        match &mut self.nodes[id].grad {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Run the backward sweep from a scalar root and return the gradient of
    /// the root with respect to every named leaf. Leaves the root does not
    /// reach get exact zero gradients. Consumes the tape: each recorded
    /// graph supports exactly one differentiation.
    pub fn backward(mut self, root: NodeId) -> Result<TapeGradients<T>> {
        if root >= self.nodes.len() {
            return Err(Error::usage(format!("backward root {root} is not a tape node")));
        }
        if !self.nodes[root].val.as_ref().is_some_and(|v| v.is_scalar()) {
            return Err(Error::usage(
                "backward requires a scalar root (reduce the objective first)".to_string(),
            ));
        }
        self.nodes[root].grad = Some(Tensor::scalar(T::one()));

        let mut grads: TapeGradients<T> = HashMap::new();
        for id in (0..=root).rev() {
            let Some(grad) = self.nodes[id].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Freed);
            let own_val = self.nodes[id].val.take();
            // (target node, contribution) pairs produced by this node's adjoint.
            let mut pending: Vec<(NodeId, Tensor<T>)> = Vec::new();
            match op {
                Op::Leaf { name } => {
                    grads.insert(name, grad);
                    continue;
                }
                Op::Constant => continue,
                Op::Freed => unreachable!("tape node processed twice"),
                Op::WeightNorm { v, g, norms } => {
                    let v_val = self.val_of(v);
                    let g_val = self.val_of(g);
                    let rows = v_val.dims()[0];
                    let cols = v_val.numel() / rows;
                    let (dv, dg) = weight_norm_vjp(
                        grad.data(),
                        v_val.data(),
                        g_val.data(),
                        &norms,
                        rows,
                        cols,
                    );
                    pending.push((v, Tensor::from_vec(v_val.dims(), dv)?));
                    pending.push((g, Tensor::from_vec(g_val.dims(), dg)?));
                }
                Op::Conv1d { x, w, bias, geom, t_in } => {
                    let x_val = self.val_of(x);
                    let w_val = self.val_of(w);
                    let dy = grad.data();
                    let dx = conv_backward_input(dy, t_in, w_val.data(), &geom);
                    let dw = conv_backward_weight(x_val.data(), t_in, dy, &geom);
                    pending.push((x, Tensor::from_vec(x_val.dims(), dx)?));
                    pending.push((w, Tensor::from_vec(w_val.dims(), dw)?));
                    if let Some(b) = bias {
                        let db = conv_backward_bias(dy, geom.out_time(t_in), geom.out_channels);
                        pending.push((b, Tensor::from_vec(self.val_of(b).dims(), db)?));
                    }
                }
                Op::InstanceNorm { x, inv_std } => {
                    let y = own_val.as_ref().expect("instance norm output freed before use");
                    let (c, t) = dims2(y)?;
                    let dx = instance_norm_vjp(grad.data(), y.data(), &inv_std, c, t);
                    pending.push((x, Tensor::from_vec(y.dims(), dx)?));
                }
                Op::LeakyRelu { x, slope } => {
                    let x_val = self.val_of(x);
                    let dx = leaky_relu_vjp(grad.data(), x_val.data(), slope);
                    pending.push((x, Tensor::from_vec(x_val.dims(), dx)?));
                }
                Op::Tanh { x } => {
                    let y = own_val.as_ref().expect("tanh output freed before use");
                    let dx = tanh_vjp(grad.data(), y.data());
                    pending.push((x, Tensor::from_vec(y.dims(), dx)?));
                }
                Op::GatedTanh { a, b, tanh_a, soft } => {
                    let (c, t) = dims2(&grad)?;
                    let (da, db) = gated_tanh_vjp(grad.data(), &tanh_a, &soft, c, t);
                    pending.push((a, Tensor::from_vec(grad.dims(), da)?));
                    pending.push((b, Tensor::from_vec(grad.dims(), db)?));
                }
                Op::Upsample { x, factor } => {
                    let x_val = self.val_of(x);
                    let (c, t) = dims2(x_val)?;
                    let dx = resample_vjp(grad.data(), c, t, factor);
                    pending.push((x, Tensor::from_vec(x_val.dims(), dx)?));
                }
                Op::Add { a, b } => {
                    pending.push((a, grad.clone()));
                    pending.push((b, grad));
                }
                Op::Mul { a, b } => {
                    let a_val = self.val_of(a);
                    let b_val = self.val_of(b);
                    let da: Vec<T> = grad
                        .data()
                        .iter()
                        .zip(b_val.data().iter())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    let db: Vec<T> = grad
                        .data()
                        .iter()
                        .zip(a_val.data().iter())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    pending.push((a, Tensor::from_vec(a_val.dims(), da)?));
                    pending.push((b, Tensor::from_vec(b_val.dims(), db)?));
                }
                Op::Window { x, start } => {
                    let x_val = self.val_of(x);
                    let (c, t_in) = dims2(x_val)?;
                    let (gc, len) = dims2(&grad)?;
                    debug_assert_eq!(c, gc);
                    let mut dx = vec![T::zero(); c * t_in];
                    for ch in 0..c {
                        let src = &grad.data()[ch * len..(ch + 1) * len];
                        let dst = &mut dx[ch * t_in + start..ch * t_in + start + len];
                        for (d, &s) in dst.iter_mut().zip(src.iter()) {
                            *d += s;
                        }
                    }
                    pending.push((x, Tensor::from_vec(x_val.dims(), dx)?));
                }
                Op::PqmfAnalysis { x, bank } => {
                    let x_val = self.val_of(x);
                    let (_, len) = dims2(x_val)?;
                    let dx = pqmf_analysis_vjp(grad.data(), len, &bank);
                    pending.push((x, Tensor::from_vec(x_val.dims(), dx)?));
                }
                Op::StftMagnitude { x, plan, re, im } => {
                    let mag = own_val.as_ref().expect("spectrogram freed before use");
                    let x_val = self.val_of(x);
                    let (_, len) = dims2(x_val)?;
                    let dx = stft_magnitude_vjp(&plan, grad.data(), &re, &im, mag.data(), len);
                    pending.push((x, Tensor::from_vec(x_val.dims(), dx)?));
                }
                Op::SpectralConvergence { x, reference, diff_norm, ref_norm } => {
                    let dy = grad.scalar_value()?;
                    let dx = sc_vjp(dy, &reference, self.val_of(x), diff_norm, ref_norm);
                    pending.push((x, dx));
                }
                Op::LogMagnitude { x, reference } => {
                    let dy = grad.scalar_value()?;
                    let dx = logmag_vjp(dy, &reference, self.val_of(x));
                    pending.push((x, dx));
                }
                Op::MeanAll { x } => {
                    let x_val = self.val_of(x);
                    let dy = grad.scalar_value()? / T::from_usize_(x_val.numel());
                    pending.push((x, Tensor::filled(x_val.dims(), dy)));
                }
                Op::ReluAffine { x, scale, shift } => {
                    let x_val = self.val_of(x);
                    let dx: Vec<T> = grad
                        .data()
                        .iter()
                        .zip(x_val.data().iter())
                        .map(
                            |(&d, &v)| {
                                if scale * v + shift > T::zero() {
                                    d * scale
                                } else {
                                    T::zero()
                                }
                            },
                        )
                        .collect();
                    pending.push((x, Tensor::from_vec(x_val.dims(), dx)?));
                }
                Op::LinComb { terms } => {
                    for (w, term) in terms {
                        let mut contribution = grad.clone();
                        contribution.scale(w);
                        pending.push((term, contribution));
                    }
                }
            }
            for (target, delta) in pending {
                self.accumulate(target, delta);
            }
        }

        // Leaves the sweep never reached get exact zeros of their own shape.
        for node in &self.nodes {
            if let Op::Leaf { name } = &node.op {
                if !grads.contains_key(name) {
                    let dims = node.val.as_ref().expect("leaf value freed before use").dims();
                    grads.insert(name.clone(), Tensor::zeros(dims));
                }
            }
        }
        Ok(grads)
    }
}

impl<T: Real> Backend<T> for Tape<T> {
    type Value = NodeId;

    fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        assert!(
            self.leaf_names.insert(name.to_string()),
            "parameter {name:?} bound to the tape twice"
        );
        self.push(Op::Leaf { name: name.to_string() }, value)
    }

    fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant, value)
    }

    fn read_scalar(&self, v: &NodeId) -> Result<T> {
        self.value(*v)?.scalar_value()
    }

    fn weight_norm(&mut self, v: &NodeId, g: &NodeId) -> Result<NodeId> {
        let out = vo_weight_norm(self.val_of(*v), self.val_of(*g))?;
        Ok(self.push(Op::WeightNorm { v: *v, g: *g, norms: out.norms }, out.w))
    }

    fn conv1d(
        &mut self,
        x: &NodeId,
        w: &NodeId,
        bias: Option<&NodeId>,
        geom: &ConvGeom,
    ) -> Result<NodeId> {
        let t_in = dims2(self.val_of(*x))?.1;
        let out = vo_conv1d(
            self.val_of(*x),
            self.val_of(*w),
            bias.map(|b| self.val_of(*b)),
            geom,
        )?;
        Ok(self.push(
            Op::Conv1d { x: *x, w: *w, bias: bias.copied(), geom: geom.clone(), t_in },
            out,
        ))
    }

    fn instance_norm(&mut self, x: &NodeId, epsilon: T) -> Result<NodeId> {
        let (y, inv_std) = vo_instance_norm(self.val_of(*x), epsilon)?;
        Ok(self.push(Op::InstanceNorm { x: *x, inv_std }, y))
    }

    fn leaky_relu(&mut self, x: &NodeId, slope: T) -> Result<NodeId> {
        let y = vo_leaky_relu(self.val_of(*x), slope);
        Ok(self.push(Op::LeakyRelu { x: *x, slope }, y))
    }

    fn tanh(&mut self, x: &NodeId) -> Result<NodeId> {
        let y = vo_tanh(self.val_of(*x));
        Ok(self.push(Op::Tanh { x: *x }, y))
    }

    fn gated_tanh(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let (y, tanh_a, soft) = vo_gated_tanh(self.val_of(*a), self.val_of(*b))?;
        Ok(self.push(Op::GatedTanh { a: *a, b: *b, tanh_a, soft }, y))
    }

    fn upsample(&mut self, x: &NodeId, factor: usize) -> Result<NodeId> {
        let y = vo_upsample(self.val_of(*x), factor)?;
        Ok(self.push(Op::Upsample { x: *x, factor }, y))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = vo_add(self.val_of(*a), self.val_of(*b))?;
        Ok(self.push(Op::Add { a: *a, b: *b }, y))
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = vo_mul(self.val_of(*a), self.val_of(*b))?;
        Ok(self.push(Op::Mul { a: *a, b: *b }, y))
    }

    fn window(&mut self, x: &NodeId, start: usize, len: usize) -> Result<NodeId> {
        let y = vo_window(self.val_of(*x), start, len)?;
        Ok(self.push(Op::Window { x: *x, start }, y))
    }

    fn pqmf_analysis(&mut self, x: &NodeId, bank: &Arc<PqmfBank<T>>) -> Result<NodeId> {
        let y = vo_pqmf_analysis(self.val_of(*x), bank)?;
        Ok(self.push(Op::PqmfAnalysis { x: *x, bank: Arc::clone(bank) }, y))
    }

    fn stft_magnitude(&mut self, x: &NodeId, plan: &Arc<StftPlan<T>>) -> Result<NodeId> {
        let (mag, re, im) = vo_stft_magnitude(self.val_of(*x), plan)?;
        Ok(self.push(Op::StftMagnitude { x: *x, plan: Arc::clone(plan), re, im }, mag))
    }

    fn spectral_convergence(
        &mut self,
        reference: &Arc<Tensor<T>>,
        x: &NodeId,
    ) -> Result<NodeId> {
        let (loss, diff_norm, ref_norm) = vo_spectral_convergence(reference, self.val_of(*x))?;
        Ok(self.push(
            Op::SpectralConvergence {
                x: *x,
                reference: Arc::clone(reference),
                diff_norm,
                ref_norm,
            },
            loss,
        ))
    }

    fn log_magnitude_loss(&mut self, reference: &Arc<Tensor<T>>, x: &NodeId) -> Result<NodeId> {
        let loss = vo_log_magnitude(reference, self.val_of(*x))?;
        Ok(self.push(Op::LogMagnitude { x: *x, reference: Arc::clone(reference) }, loss))
    }

    fn mean_all(&mut self, x: &NodeId) -> Result<NodeId> {
        let y = vo_mean_all(self.val_of(*x))?;
        Ok(self.push(Op::MeanAll { x: *x }, y))
    }

    fn relu_affine(&mut self, x: &NodeId, scale: T, shift: T) -> Result<NodeId> {
        let y = vo_relu_affine(self.val_of(*x), scale, shift);
        Ok(self.push(Op::ReluAffine { x: *x, scale, shift }, y))
    }

    fn lin_comb(&mut self, terms: &[(T, NodeId)]) -> Result<NodeId> {
        let tensors: Vec<(T, &Tensor<T>)> =
            terms.iter().map(|(w, id)| (*w, self.val_of(*id))).collect();
        let y = vo_lin_comb(&tensors)?;
        Ok(self.push(Op::LinComb { terms: terms.to_vec() }, y))
    }
}
