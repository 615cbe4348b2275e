//! Differentiable segmentation losses and the assembly of the total objective.
//!
//! Every loss takes a batch of two-class probability maps and averages over
//! the batch items. Pseudo-labels are plain [`Mask`] values, so nothing that
//! was hardened can carry a gradient.

use crate::autodiff::{BackwardRule, Graph, NodeId, Tensor4};
use crate::error::{Error, Result};
use crate::metrics::{check_probs, Mask};

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f32 = 1e-5;
/// Clamp inside the logarithm of the cross-entropy loss.
pub const CE_EPS: f32 = 1e-7;

struct CrossEntropyRule {
    labels: Vec<u8>,
}

impl BackwardRule for CrossEntropyRule {
    fn backward(&self, inputs: &[&Tensor4], _output: &Tensor4, grad_out: &Tensor4) -> Vec<Option<Tensor4>> {
        let probs = inputs[0];
        let [n, c, _, _] = probs.dims();
        let plane = probs.plane_len();
        let scale = grad_out.item() / (n * plane) as f32;
        let mut grad = Tensor4::zeros(probs.dims());
        let gd = grad.data_mut();
        for b in 0..n {
            for p in 0..plane {
                let i = (b * c + self.labels[b * plane + p] as usize) * plane + p;
                let prob = probs.data()[i];
                if prob > CE_EPS {
                    gd[i] = -scale / prob;
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Mean over every pixel of the batch of `-ln max(p_true, 1e-7)`.
pub fn ce_loss(g: &mut Graph, probs: NodeId, truths: &[Mask]) -> Result<NodeId> {
    let value = g.value(probs)?;
    check_probs("ce_loss", value, truths)?;
    let [n, c, _, _] = value.dims();
    let plane = value.plane_len();
    let labels: Vec<u8> = truths.iter().flat_map(|m| m.labels()).collect();
    let mut total = 0.0f32;
    for b in 0..n {
        for p in 0..plane {
            let prob = value.data()[(b * c + labels[b * plane + p] as usize) * plane + p];
            total -= prob.max(CE_EPS).ln();
        }
    }
    let loss = Tensor4::scalar(total / (n * plane) as f32);
    g.custom(&[probs], loss, Box::new(CrossEntropyRule { labels }))
}

struct DiceRule {
    labels: Vec<u8>,
}

/// Per-item foreground sums: (Σ p·g, Σ p + Σ g).
fn dice_sums(probs: &Tensor4, labels: &[u8], b: usize) -> (f32, f32) {
    let plane = probs.plane_len();
    let fg = probs.plane(b, 1);
    let lab = &labels[b * plane..(b + 1) * plane];
    let mut inter = 0.0f32;
    let mut total = 0.0f32;
    for (&p, &g) in fg.iter().zip(lab) {
        let g = g as f32;
        inter += p * g;
        total += p + g;
    }
    (inter, total)
}

impl BackwardRule for DiceRule {
    fn backward(&self, inputs: &[&Tensor4], _output: &Tensor4, grad_out: &Tensor4) -> Vec<Option<Tensor4>> {
        let probs = inputs[0];
        let [n, c, _, _] = probs.dims();
        let plane = probs.plane_len();
        let upstream = grad_out.item() / n as f32;
        let mut grad = Tensor4::zeros(probs.dims());
        for b in 0..n {
            let (inter, total) = dice_sums(probs, &self.labels, b);
            let num = 2.0 * inter + DICE_EPS;
            let den = total + DICE_EPS;
            let base = (b * c + 1) * plane;
            let lab = &self.labels[b * plane..(b + 1) * plane];
            for (slot, &g) in grad.data_mut()[base..base + plane].iter_mut().zip(lab) {
                *slot = -upstream * (2.0 * g as f32 * den - num) / (den * den);
            }
        }
        vec![Some(grad)]
    }
}

/// Soft Dice loss on the foreground channel,
/// `1 - (2 Σ p·g + ε) / (Σ p + Σ g + ε)`, averaged over batch items.
pub fn dice_loss(g: &mut Graph, probs: NodeId, truths: &[Mask]) -> Result<NodeId> {
    let value = g.value(probs)?;
    check_probs("dice_loss", value, truths)?;
    let labels: Vec<u8> = truths.iter().flat_map(|m| m.labels()).collect();
    let n = value.batch();
    let mut total = 0.0f32;
    for b in 0..n {
        let (inter, sum) = dice_sums(value, &labels, b);
        total += 1.0 - (2.0 * inter + DICE_EPS) / (sum + DICE_EPS);
    }
    let loss = Tensor4::scalar(total / n as f32);
    g.custom(&[probs], loss, Box::new(DiceRule { labels }))
}

/// Supervised segmentation loss: cross-entropy plus soft Dice, unweighted.
pub fn seg_loss(g: &mut Graph, probs: NodeId, truths: &[Mask]) -> Result<NodeId> {
    let ce = ce_loss(g, probs, truths)?;
    let dice = dice_loss(g, probs, truths)?;
    g.add(ce, dice)
}

/// Hard per-pixel argmax labels for every item, ties to background.
pub fn pseudo_labels(probs: &Tensor4) -> Vec<Mask> {
    (0..probs.batch()).map(|n| Mask::harden(probs, n)).collect()
}

fn same_dims(op: &'static str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Cross pseudo supervision between two students whose predictions share a
/// pixel frame: each is trained on the other's hardened output.
pub fn cps_loss(g: &mut Graph, probs_s1: NodeId, probs_s2: NodeId) -> Result<NodeId> {
    let (v1, v2) = (g.value(probs_s1)?, g.value(probs_s2)?);
    same_dims("cps_loss", v1, v2)?;
    let (labels_from_s1, labels_from_s2) = (pseudo_labels(v1), pseudo_labels(v2));
    let a = seg_loss(g, probs_s1, &labels_from_s2)?;
    let b = seg_loss(g, probs_s2, &labels_from_s1)?;
    g.add(a, b)
}

/// Mentoring loss: the tutored student against the teacher's hardened output.
pub fn ms_loss(g: &mut Graph, probs_student: NodeId, teacher_probs: NodeId) -> Result<NodeId> {
    let (vs, vt) = (g.value(probs_student)?, g.value(teacher_probs)?);
    same_dims("ms_loss", vs, vt)?;
    let targets = pseudo_labels(vt);
    seg_loss(g, probs_student, &targets)
}

/// Gaussian warm-up of the unsupervised weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampSchedule {
    pub lambda_max: f64,
    pub ramp_iters: usize,
}

impl RampSchedule {
    /// `lambda_max * exp(-5 (1 - min(iter / ramp_iters, 1))^2)`; a zero-length
    /// ramp is already complete.
    pub fn lambda(&self, iter: usize) -> f64 {
        if self.ramp_iters == 0 {
            return self.lambda_max;
        }
        let t = (iter as f64 / self.ramp_iters as f64).min(1.0);
        self.lambda_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
    }
}

pub fn ramp_lambda(iter: usize, schedule: &RampSchedule) -> f64 {
    schedule.lambda(iter)
}

/// Loss components of one student for one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_seg: f64,
    pub l_cps: f64,
    pub l_ms: f64,
    pub lambda: f64,
    pub l_total: f64,
}

/// `l_seg + lambda * (l_cps + l_ms)`.
pub fn total_loss(l_seg: f64, l_cps: f64, l_ms: f64, lambda: f64) -> Result<LossReport> {
    for (name, v) in [("l_seg", l_seg), ("l_cps", l_cps), ("l_ms", l_ms), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(LossReport {
        l_seg,
        l_cps,
        l_ms,
        lambda,
        l_total: l_seg + lambda * (l_cps + l_ms),
    })
}
