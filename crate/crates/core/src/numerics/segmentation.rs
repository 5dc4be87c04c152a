//! Hybrid segmentation loss: focal, soft Dice and Lovász-softmax, each with
//! its gradient with respect to the probability map.

use super::{DenseTensor, ProbMap};
use crate::error::{Error, Result};
use crate::types::LossWeights;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Smoothing term of the Dice ratio.
pub const DICE_EPSILON: f64 = 1e-6;

/// Focusing exponent and per-class weights of the focal loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    /// One weight per class; an empty vector means all ones.
    pub alpha: Vec<f64>,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: Vec::new(),
        }
    }
}

impl FocalParams {
    fn alpha_for(&self, class: usize) -> f64 {
        self.alpha.get(class).copied().unwrap_or(1.0)
    }

    fn check(&self, classes: usize) -> Result<()> {
        if !self.alpha.is_empty() && self.alpha.len() != classes {
            return Err(Error::ShapeMismatch(format!(
                "{} focal weights for {classes} classes",
                self.alpha.len()
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidWeight(format!(
                "focal gamma = {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean over pixels of `-α_t (1 - p_t)^γ ln p_t`.
pub fn focal_loss(p: &ProbMap, target: &[usize], params: &FocalParams) -> Result<f64> {
    p.check_target(target)?;
    params.check(p.classes())?;
    let sum: f64 = target
        .iter()
        .enumerate()
        .map(|(px, &t)| {
            let pt = clamp_prob(p.get(t, px));
            -params.alpha_for(t) * (1.0 - pt).powf(params.gamma) * pt.ln()
        })
        .sum();
    Ok(sum / target.len() as f64)
}

/// Gradient of [`focal_loss`] with respect to each probability. Entries held
/// at the clamp bounds get zero gradient.
pub fn focal_loss_backward(
    p: &ProbMap,
    target: &[usize],
    params: &FocalParams,
) -> Result<DenseTensor> {
    p.check_target(target)?;
    params.check(p.classes())?;
    let n = target.len() as f64;
    let g = params.gamma;
    let mut grad = DenseTensor::zeros(p.classes(), p.pixels());
    for (px, &t) in target.iter().enumerate() {
        let raw = p.get(t, px);
        if raw != clamp_prob(raw) {
            continue;
        }
        let one_minus = 1.0 - raw;
        let focus_term = if g == 0.0 {
            0.0
        } else {
            g * one_minus.powf(g - 1.0) * raw.ln()
        };
        let d = -params.alpha_for(t) * (one_minus.powf(g) / raw - focus_term);
        grad.set(t, px, d / n);
    }
    Ok(grad)
}

fn dice_terms(p: &ProbMap, target: &[usize], class: usize) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut pred = 0.0;
    let mut truth = 0.0;
    for (px, &t) in target.iter().enumerate() {
        let v = p.get(class, px);
        pred += v;
        if t == class {
            inter += v;
            truth += 1.0;
        }
    }
    (inter, pred, truth)
}

/// `1 - mean_c (2 Σ p_c t_c + ε) / (Σ p_c + Σ t_c + ε)` over all classes.
pub fn dice_loss(p: &ProbMap, target: &[usize], epsilon: f64) -> Result<f64> {
    p.check_target(target)?;
    let classes = p.classes();
    let mean: f64 = (0..classes)
        .map(|c| {
            let (i, sp, st) = dice_terms(p, target, c);
            (2.0 * i + epsilon) / (sp + st + epsilon)
        })
        .sum::<f64>()
        / classes as f64;
    Ok(1.0 - mean)
}

pub fn dice_loss_backward(p: &ProbMap, target: &[usize], epsilon: f64) -> Result<DenseTensor> {
    p.check_target(target)?;
    let classes = p.classes();
    let mut grad = DenseTensor::zeros(classes, p.pixels());
    for c in 0..classes {
        let (i, sp, st) = dice_terms(p, target, c);
        let num = 2.0 * i + epsilon;
        let den = sp + st + epsilon;
        for (px, &t) in target.iter().enumerate() {
            let hit = if t == c { 1.0 } else { 0.0 };
            let d_ratio = (2.0 * hit * den - num) / (den * den);
            grad.set(c, px, -d_ratio / classes as f64);
        }
    }
    Ok(grad)
}

/// Per-class Lovász extension data: pixel order by descending error and the
/// matching Jaccard gradient weights.
struct LovaszClass {
    order: Vec<usize>,
    weights: Vec<f64>,
    errors: Vec<f64>,
}

fn lovasz_class(p: &ProbMap, target: &[usize], class: usize) -> LovaszClass {
    let errors: Vec<f64> = target
        .iter()
        .enumerate()
        .map(|(px, &t)| {
            let truth = if t == class { 1.0 } else { 0.0 };
            (truth - p.get(class, px)).abs()
        })
        .collect();
    let mut order: Vec<usize> = (0..errors.len()).collect();
    // stable sort keeps ties in pixel order
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));

    let gts: f64 = target.iter().filter(|&&t| t == class).count() as f64;
    let mut weights = Vec::with_capacity(order.len());
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    for &px in &order {
        if target[px] == class {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let intersection = gts - cum_fg;
        let union = gts + cum_bg;
        let jaccard = 1.0 - intersection / union;
        weights.push(jaccard - prev);
        prev = jaccard;
    }
    LovaszClass {
        order,
        weights,
        errors,
    }
}

fn present_classes(classes: usize, target: &[usize]) -> Vec<usize> {
    (0..classes).filter(|c| target.contains(c)).collect()
}

/// Lovász-softmax averaged over the classes present in `target`.
pub fn lovasz_loss(p: &ProbMap, target: &[usize]) -> Result<f64> {
    p.check_target(target)?;
    let present = present_classes(p.classes(), target);
    let total: f64 = present
        .iter()
        .map(|&c| {
            let lc = lovasz_class(p, target, c);
            lc.order
                .iter()
                .zip(&lc.weights)
                .map(|(&px, w)| lc.errors[px] * w)
                .sum::<f64>()
        })
        .sum();
    Ok(total / present.len() as f64)
}

/// Subgradient of [`lovasz_loss`] for the current error ordering.
pub fn lovasz_loss_backward(p: &ProbMap, target: &[usize]) -> Result<DenseTensor> {
    p.check_target(target)?;
    let present = present_classes(p.classes(), target);
    let scale = 1.0 / present.len() as f64;
    let mut grad = DenseTensor::zeros(p.classes(), p.pixels());
    for &c in &present {
        let lc = lovasz_class(p, target, c);
        for (&px, w) in lc.order.iter().zip(&lc.weights) {
            // error = 1 - p on the class's own pixels, p elsewhere
            let sign = if target[px] == c { -1.0 } else { 1.0 };
            grad.set(c, px, sign * w * scale);
        }
    }
    Ok(grad)
}

/// Smallest gap between consecutive sorted errors over the present classes.
/// Small gaps mark points where the Lovász loss is not differentiable.
pub fn lovasz_min_error_gap(p: &ProbMap, target: &[usize]) -> f64 {
    present_classes(p.classes(), target)
        .into_iter()
        .flat_map(|c| {
            let lc = lovasz_class(p, target, c);
            let sorted: Vec<f64> = lc.order.iter().map(|&px| lc.errors[px]).collect();
            sorted.windows(2).map(|w| w[0] - w[1]).collect::<Vec<_>>()
        })
        .fold(f64::INFINITY, f64::min)
}

/// `α·focal + β·dice + γ·lovász`.
pub fn seg_loss(
    p: &ProbMap,
    target: &[usize],
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<f64> {
    weights.validate()?;
    Ok(weights.alpha * focal_loss(p, target, focal)?
        + weights.beta * dice_loss(p, target, DICE_EPSILON)?
        + weights.gamma * lovasz_loss(p, target)?)
}

pub fn seg_loss_backward(
    p: &ProbMap,
    target: &[usize],
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<DenseTensor> {
    weights.validate()?;
    let f = focal_loss_backward(p, target, focal)?.scale(weights.alpha);
    let d = dice_loss_backward(p, target, DICE_EPSILON)?.scale(weights.beta);
    let l = lovasz_loss_backward(p, target)?.scale(weights.gamma);
    f.add(&d)?.add(&l)
}
