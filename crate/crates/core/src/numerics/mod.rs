//! Small-scale numerics for text-guided change detection training: attention
//! fusion, segmentation losses, the bidirectional contrastive loss and a
//! finite-difference gradient checker.
//!
//! Every differentiable operation comes as a forward function plus a
//! closed-form backward pass. Nothing here allocates a graph; the backward
//! functions take the forward inputs (and, where useful, a cache) and the
//! upstream gradient explicitly.

pub mod attention;
pub mod contrastive;
pub mod gradcheck;
pub mod segmentation;

pub use attention::{
    attention, attention_backward, fuse, fuse_backward, FusionGrads, FusionParams,
};
pub use contrastive::{
    contrastive_loss, contrastive_loss_backward, similarity_matrix, similarity_matrix_backward,
    total_loss, ContrastiveLoss,
};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, GradOp};
pub use segmentation::{
    dice_loss, dice_loss_backward, focal_loss, focal_loss_backward, lovasz_loss,
    lovasz_loss_backward, seg_loss, seg_loss_backward, FocalParams, DICE_EPSILON, PROB_CLAMP,
};

use crate::error::{Error, Result};

/// Row-major dense matrix of finite doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Sum of element-wise products.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{op} {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Per-pixel class probabilities, laid out `classes x pixels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    probs: DenseTensor,
}

impl ProbMap {
    /// Columns must be non-negative and sum to one within `1e-9`.
    pub fn new(probs: DenseTensor) -> Result<Self> {
        if probs.rows() == 0 || probs.cols() == 0 {
            return Err(Error::InvalidProbabilities("empty probability map".into()));
        }
        for px in 0..probs.cols() {
            let mut sum = 0.0;
            for c in 0..probs.rows() {
                let v = probs.get(c, px);
                if v < 0.0 {
                    return Err(Error::InvalidProbabilities(format!(
                        "negative probability {v} at class {c}, pixel {px}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidProbabilities(format!(
                    "pixel {px} sums to {sum}"
                )));
            }
        }
        Ok(Self { probs })
    }

    /// Column-wise softmax of `classes x pixels` logits.
    pub fn from_logits(logits: &DenseTensor) -> Result<Self> {
        Self::new(softmax_columns(logits))
    }

    /// One-hot map for a class raster.
    pub fn one_hot(target: &[usize], classes: usize) -> Result<Self> {
        let mut t = DenseTensor::zeros(classes, target.len());
        for (px, &c) in target.iter().enumerate() {
            if c >= classes {
                return Err(Error::ShapeMismatch(format!(
                    "target class {c} >= {classes}"
                )));
            }
            t.set(c, px, 1.0);
        }
        Self::new(t)
    }

    pub fn classes(&self) -> usize {
        self.probs.rows()
    }

    pub fn pixels(&self) -> usize {
        self.probs.cols()
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.probs
    }

    pub fn get(&self, class: usize, pixel: usize) -> f64 {
        self.probs.get(class, pixel)
    }

    pub(crate) fn check_target(&self, target: &[usize]) -> Result<()> {
        if target.len() != self.pixels() {
            return Err(Error::ShapeMismatch(format!(
                "{} target pixels for {} predicted pixels",
                target.len(),
                self.pixels()
            )));
        }
        if let Some(&c) = target.iter().find(|&&c| c >= self.classes()) {
            return Err(Error::ShapeMismatch(format!(
                "target class {c} >= {} classes",
                self.classes()
            )));
        }
        Ok(())
    }
}

/// Max-subtracted softmax over one slice, in place.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(v)` with max subtraction.
pub(crate) fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
    max + v.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax down each column of a `classes x pixels` tensor.
pub fn softmax_columns(logits: &DenseTensor) -> DenseTensor {
    let t = logits.transpose();
    let mut out = t.clone();
    for r in 0..t.rows() {
        let cols = t.cols();
        softmax_in_place(&mut out.data[r * cols..(r + 1) * cols]);
    }
    out.transpose()
}

/// Chains a gradient with respect to column-softmax probabilities back to
/// the logits: `dz = p ⊙ (dp − Σ_c p_c dp_c)` per column.
pub fn softmax_columns_backward(probs: &DenseTensor, grad_probs: &DenseTensor) -> DenseTensor {
    let mut out = DenseTensor::zeros(probs.rows(), probs.cols());
    for px in 0..probs.cols() {
        let inner: f64 = (0..probs.rows())
            .map(|c| probs.get(c, px) * grad_probs.get(c, px))
            .sum();
        for c in 0..probs.rows() {
            out.set(c, px, probs.get(c, px) * (grad_probs.get(c, px) - inner));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_transpose() {
        let a = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseTensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert_eq!(a.transpose().data(), &[1.0, 3.0, 2.0, 4.0]);
        assert!(b.matmul(&b).is_err());
    }

    #[test]
    fn prob_map_validation() {
        let ok = DenseTensor::from_rows(&[vec![0.25, 1.0], vec![0.75, 0.0]]).unwrap();
        assert!(ProbMap::new(ok).is_ok());
        let bad = DenseTensor::from_rows(&[vec![0.5, 1.0], vec![0.6, 0.0]]).unwrap();
        assert!(ProbMap::new(bad).is_err());
        let neg = DenseTensor::from_rows(&[vec![-0.1], vec![1.1]]).unwrap();
        assert!(ProbMap::new(neg).is_err());
    }

    #[test]
    fn softmax_handles_large_logits() {
        let z = DenseTensor::from_rows(&[vec![1000.0], vec![999.0]]).unwrap();
        let p = ProbMap::from_logits(&z).unwrap();
        let e = (-1.0f64).exp();
        assert!((p.get(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn tensor_rejects_non_finite() {
        assert!(DenseTensor::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(DenseTensor::new(1, 2, vec![1.0]).is_err());
    }
}
