//! Image-text similarity and the bidirectional InfoNCE objective.

use serde::Serialize;

use super::{log_sum_exp, softmax_in_place, DenseTensor};
use crate::error::{Error, Result};
use crate::types::{EmbeddingBatch, LossWeights};

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalized_rows(batch: &EmbeddingBatch) -> Result<DenseTensor> {
    let mut t = DenseTensor::new(batch.rows(), batch.cols(), batch.values().to_vec())?;
    let cols = t.cols();
    for (i, row) in t.data_mut().chunks_exact_mut(cols).enumerate() {
        let n = row_norm(row);
        if n == 0.0 {
            return Err(Error::NonFinite(format!(
                "row {i} has zero norm and cannot be normalized"
            )));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(t)
}

fn check_pair(r_i: &EmbeddingBatch, r_t: &EmbeddingBatch, tau: f64) -> Result<()> {
    if r_i.rows() != r_t.rows() || r_i.cols() != r_t.cols() {
        return Err(Error::ShapeMismatch(format!(
            "visual batch {}x{} vs text batch {}x{}",
            r_i.rows(),
            r_i.cols(),
            r_t.rows(),
            r_t.cols()
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::NonPositiveTau(tau));
    }
    Ok(())
}

fn as_tensor(b: &EmbeddingBatch) -> DenseTensor {
    DenseTensor::new(b.rows(), b.cols(), b.values().to_vec()).expect("embedding batch is valid")
}

/// `S_ij = r_I^i · r_T^j / τ`, optionally with L2-normalized rows.
pub fn similarity_matrix(
    r_i: &EmbeddingBatch,
    r_t: &EmbeddingBatch,
    tau: f64,
    normalize: bool,
) -> Result<DenseTensor> {
    check_pair(r_i, r_t, tau)?;
    let (a, b) = if normalize {
        (normalized_rows(r_i)?, normalized_rows(r_t)?)
    } else {
        (as_tensor(r_i), as_tensor(r_t))
    };
    Ok(a.matmul(&b.transpose())?.scale(1.0 / tau))
}

/// Gradients of a scalar with respect to `R_I` and `R_T` given its gradient
/// with respect to the similarity matrix.
pub fn similarity_matrix_backward(
    r_i: &EmbeddingBatch,
    r_t: &EmbeddingBatch,
    tau: f64,
    normalize: bool,
    grad_s: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor)> {
    check_pair(r_i, r_t, tau)?;
    if grad_s.shape() != (r_i.rows(), r_t.rows()) {
        return Err(Error::ShapeMismatch("similarity gradient shape".into()));
    }
    let (a, b) = if normalize {
        (normalized_rows(r_i)?, normalized_rows(r_t)?)
    } else {
        (as_tensor(r_i), as_tensor(r_t))
    };
    let grad_a = grad_s.matmul(&b)?.scale(1.0 / tau);
    let grad_b = grad_s.transpose().matmul(&a)?.scale(1.0 / tau);
    if !normalize {
        return Ok((grad_a, grad_b));
    }
    Ok((
        normalize_backward(r_i, &a, &grad_a),
        normalize_backward(r_t, &b, &grad_b),
    ))
}

/// Through `u = x / ‖x‖`: `dx = (du - u (u·du)) / ‖x‖`, row by row.
fn normalize_backward(
    raw: &EmbeddingBatch,
    unit: &DenseTensor,
    grad_unit: &DenseTensor,
) -> DenseTensor {
    let mut out = DenseTensor::zeros(unit.rows(), unit.cols());
    for r in 0..unit.rows() {
        let norm = row_norm(raw.row(r));
        let u = unit.row(r);
        let g = grad_unit.row(r);
        let proj: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        for c in 0..unit.cols() {
            out.set(r, c, (g[c] - u[c] * proj) / norm);
        }
    }
    out
}

/// Vision-to-text, text-to-vision and averaged InfoNCE losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContrastiveLoss {
    pub vision_to_text: f64,
    pub text_to_vision: f64,
    pub combined: f64,
}

fn check_square(s: &DenseTensor) -> Result<()> {
    if s.rows() != s.cols() || s.rows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "similarity matrix must be square and non-empty, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    Ok(())
}

/// Row-wise (V→T) and column-wise (T→V) cross-entropy against the diagonal.
pub fn contrastive_loss(s: &DenseTensor) -> Result<ContrastiveLoss> {
    check_square(s)?;
    let b = s.rows();
    let mut vt = 0.0;
    let mut tv = 0.0;
    for i in 0..b {
        let diag = s.get(i, i);
        vt += log_sum_exp((0..b).map(|j| s.get(i, j))) - diag;
        tv += log_sum_exp((0..b).map(|j| s.get(j, i))) - diag;
    }
    let vision_to_text = vt / b as f64;
    let text_to_vision = tv / b as f64;
    Ok(ContrastiveLoss {
        vision_to_text,
        text_to_vision,
        combined: 0.5 * (vision_to_text + text_to_vision),
    })
}

/// Gradient of the combined loss with respect to `S`.
pub fn contrastive_loss_backward(s: &DenseTensor) -> Result<DenseTensor> {
    check_square(s)?;
    let b = s.rows();
    let scale = 0.5 / b as f64;
    let mut grad = DenseTensor::zeros(b, b);
    // V→T: softmax across each row
    for i in 0..b {
        let mut row = s.row(i).to_vec();
        softmax_in_place(&mut row);
        for (j, p) in row.into_iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            grad.set(i, j, scale * (p - target));
        }
    }
    // T→V: softmax down each column
    for j in 0..b {
        let mut col: Vec<f64> = (0..b).map(|i| s.get(i, j)).collect();
        softmax_in_place(&mut col);
        for (i, p) in col.into_iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            grad.set(i, j, grad.get(i, j) + scale * (p - target));
        }
    }
    Ok(grad)
}

/// `seg + λ·cot`.
pub fn total_loss(seg: f64, cot: f64, weights: &LossWeights) -> f64 {
    seg + weights.lambda * cot
}
