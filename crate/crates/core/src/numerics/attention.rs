//! Scaled dot-product cross-attention and the bridged fusion built on it.

use super::{softmax_in_place, DenseTensor};
use crate::error::{Error, Result};

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    /// Row-softmaxed attention weights, `n_q x n_k`.
    pub weights: DenseTensor,
    pub scale: f64,
}

/// `softmax(Q·Kᵀ/√d)·V`, softmax taken per query row.
pub fn attention(q: &DenseTensor, k: &DenseTensor, v: &DenseTensor) -> Result<DenseTensor> {
    attention_with_cache(q, k, v).map(|(out, _)| out)
}

pub fn attention_with_cache(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
) -> Result<(DenseTensor, AttentionCache)> {
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} keys vs {} values",
            k.rows(),
            v.rows()
        )));
    }
    if q.cols() == 0 || k.rows() == 0 {
        return Err(Error::ShapeMismatch(
            "attention needs d >= 1 and at least one key".into(),
        ));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut weights = q.matmul(&k.transpose())?.scale(scale);
    let n_k = weights.cols();
    for row in weights.data_mut().chunks_exact_mut(n_k) {
        softmax_in_place(row);
    }
    let out = weights.matmul(v)?;
    Ok((out, AttentionCache { weights, scale }))
}

/// Gradients of `attention` with respect to `(Q, K, V)` given the upstream
/// gradient of its output.
pub fn attention_backward(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    cache: &AttentionCache,
    grad_out: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
    let a = &cache.weights;
    if grad_out.shape() != (q.rows(), v.cols()) {
        return Err(Error::ShapeMismatch("upstream gradient shape".into()));
    }
    let grad_v = a.transpose().matmul(grad_out)?;
    let grad_a = grad_out.matmul(&v.transpose())?;
    // softmax backward per row
    let mut grad_s = DenseTensor::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let inner: f64 = a.row(i).iter().zip(grad_a.row(i)).map(|(p, g)| p * g).sum();
        for j in 0..a.cols() {
            grad_s.set(i, j, a.get(i, j) * (grad_a.get(i, j) - inner));
        }
    }
    let grad_q = grad_s.matmul(k)?.scale(cache.scale);
    let grad_k = grad_s.transpose().matmul(q)?.scale(cache.scale);
    Ok((grad_q, grad_k, grad_v))
}

/// Projections and bridge for [`fuse`].
///
/// Queries come from the visual features, keys and values from the text
/// features: `Q = R_I·W_q`, `K = R_T·W_k`, `V = R_T·W_v`. The bridge maps a
/// visual row into the value space as `W_b·r`, i.e. `R_I·W_bᵀ` row-wise, so
/// `W_b` is `d_v x d_I`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w_q: DenseTensor,
    pub w_k: DenseTensor,
    pub w_v: DenseTensor,
    pub w_b: DenseTensor,
}

impl FusionParams {
    /// Identity projections and bridge for a shared dimension `d`.
    pub fn identity(d: usize) -> Self {
        Self {
            w_q: DenseTensor::identity(d),
            w_k: DenseTensor::identity(d),
            w_v: DenseTensor::identity(d),
            w_b: DenseTensor::identity(d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub r_i: DenseTensor,
    pub r_t: DenseTensor,
    pub w_q: DenseTensor,
    pub w_k: DenseTensor,
    pub w_v: DenseTensor,
    pub w_b: DenseTensor,
}

/// `R_m = Attention(R_I·W_q, R_T·W_k, R_T·W_v) + R_I·W_bᵀ`.
pub fn fuse(r_i: &DenseTensor, r_t: &DenseTensor, params: &FusionParams) -> Result<DenseTensor> {
    let q = r_i.matmul(&params.w_q)?;
    let k = r_t.matmul(&params.w_k)?;
    let v = r_t.matmul(&params.w_v)?;
    let attended = attention(&q, &k, &v)?;
    let bridged = r_i.matmul(&params.w_b.transpose())?;
    attended.add(&bridged)
}

pub fn fuse_backward(
    r_i: &DenseTensor,
    r_t: &DenseTensor,
    params: &FusionParams,
    grad_out: &DenseTensor,
) -> Result<FusionGrads> {
    let q = r_i.matmul(&params.w_q)?;
    let k = r_t.matmul(&params.w_k)?;
    let v = r_t.matmul(&params.w_v)?;
    let (_, cache) = attention_with_cache(&q, &k, &v)?;
    let (gq, gk, gv) = attention_backward(&q, &k, &v, &cache, grad_out)?;

    let grad_w_b = grad_out.transpose().matmul(r_i)?;
    let grad_r_i = gq
        .matmul(&params.w_q.transpose())?
        .add(&grad_out.matmul(&params.w_b)?)?;
    let grad_w_q = r_i.transpose().matmul(&gq)?;
    let grad_r_t = gk
        .matmul(&params.w_k.transpose())?
        .add(&gv.matmul(&params.w_v.transpose())?)?;
    let grad_w_k = r_t.transpose().matmul(&gk)?;
    let grad_w_v = r_t.transpose().matmul(&gv)?;
    Ok(FusionGrads {
        r_i: grad_r_i,
        r_t: grad_r_t,
        w_q: grad_w_q,
        w_k: grad_w_k,
        w_v: grad_w_v,
        w_b: grad_w_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseTensor {
        DenseTensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Triple-loop reference, no shared helpers.
    fn naive_attention(q: &DenseTensor, k: &DenseTensor, v: &DenseTensor) -> Vec<Vec<f64>> {
        let d = q.cols() as f64;
        (0..q.rows())
            .map(|i| {
                let scores: Vec<f64> = (0..k.rows())
                    .map(|j| {
                        (0..q.cols())
                            .map(|c| q.get(i, c) * k.get(j, c))
                            .sum::<f64>()
                            / d.sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v.cols())
                    .map(|c| (0..k.rows()).map(|j| e[j] / z * v.get(j, c)).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random(&mut rng, 3, 4);
        let k = random(&mut rng, 1, 4);
        let v = random(&mut rng, 1, 5);
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn sharp_query_selects_matching_value() {
        // orthonormal keys; query = 100 * k_1
        let k = DenseTensor::identity(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random(&mut rng, 3, 2);
        let q = DenseTensor::from_rows(&[vec![100.0, 0.0, 0.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        for c in 0..2 {
            assert!((out.get(0, c) - v.get(0, c)).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = random(&mut rng, 3, 4);
            let k = random(&mut rng, 3, 4);
            let v = random(&mut rng, 3, 4);
            let out = attention(&q, &k, &v).unwrap();
            let naive = naive_attention(&q, &k, &v);
            for i in 0..3 {
                for c in 0..4 {
                    assert!((out.get(i, c) - naive[i][c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(&mut rng, 5, 3).scale(50.0);
        let k = random(&mut rng, 7, 3).scale(50.0);
        let v = random(&mut rng, 7, 2);
        let (_, cache) = attention_with_cache(&q, &k, &v).unwrap();
        for i in 0..5 {
            let s: f64 = cache.weights.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = DenseTensor::zeros(2, 3);
        let b = DenseTensor::zeros(2, 4);
        assert!(matches!(
            attention(&a, &b, &b),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            attention(&a, &a, &DenseTensor::zeros(3, 1)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn identity_bridge_with_zero_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r_i = random(&mut rng, 4, 3);
        let r_t = DenseTensor::zeros(1, 3);
        let out = fuse(&r_i, &r_t, &FusionParams::identity(3)).unwrap();
        // single key: attention yields V_1 = 0 row, so R_m = R_I
        for i in 0..4 {
            for c in 0..3 {
                assert_eq!(out.get(i, c), r_i.get(i, c));
            }
        }
        let r_t = DenseTensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let mut params = FusionParams::identity(3);
        params.w_k = DenseTensor::zeros(3, 3);
        let out = fuse(&r_i, &r_t, &params).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert!((out.get(i, c) - (r_t.get(0, c) + r_i.get(i, c))).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_bridge_and_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r_i = random(&mut rng, 3, 4);
        let r_t = random(&mut rng, 5, 2);
        let params = FusionParams {
            w_q: random(&mut rng, 4, 3),
            w_k: random(&mut rng, 2, 3),
            w_v: random(&mut rng, 2, 6),
            w_b: random(&mut rng, 6, 4),
        };
        let q = r_i.matmul(&params.w_q).unwrap();
        let k = r_t.matmul(&params.w_k).unwrap();
        let v = r_t.matmul(&params.w_v).unwrap();
        let attn = naive_attention(&q, &k, &v);

        let zero = FusionParams {
            w_b: DenseTensor::zeros(6, 4),
            ..params.clone()
        };
        let out = fuse(&r_i, &r_t, &zero).unwrap();
        for i in 0..3 {
            for c in 0..6 {
                assert!((out.get(i, c) - attn[i][c]).abs() < 1e-12);
            }
        }

        let out = fuse(&r_i, &r_t, &params).unwrap();
        for i in 0..3 {
            for c in 0..6 {
                let bridge: f64 = (0..4).map(|j| params.w_b.get(c, j) * r_i.get(i, j)).sum();
                assert!((out.get(i, c) - (attn[i][c] + bridge)).abs() < 1e-12);
            }
        }
    }
}
