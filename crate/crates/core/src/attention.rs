//! Scaled dot-product attention and rotary position embedding.
//!
//! Scores, softmax weights and the weighted sum of values are accumulated in
//! `f64`; inputs and outputs stay `f32`.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Numerically stable in-place softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `softmax(QKᵀ/√d)V`, causally masked when there is more than one query.
///
/// Queries are aligned to the end of the key sequence: query `i` sits at
/// position `t_k - t_q + i` and sees keys at positions `<=` its own.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.rows() > k.rows() {
        return Err(Error::Shape(format!(
            "{} queries against only {} keys",
            q.rows(),
            k.rows()
        )));
    }
    let kpos: Vec<usize> = (0..k.rows()).collect();
    let offset = k.rows() - q.rows();
    let qpos: Vec<usize> = (0..q.rows()).map(|i| offset + i).collect();
    masked_attention(q, &qpos, k, v, &kpos)
}

/// Attention where each key carries an absolute position and query `i`
/// attends only to keys whose position is `<= query_pos[i]`.
pub fn masked_attention(
    q: &Matrix,
    query_pos: &[usize],
    k: &Matrix,
    v: &Matrix,
    key_pos: &[usize],
) -> Result<Matrix> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d {
        return Err(Error::Shape(format!(
            "head widths differ: q {}, k {}, v {}",
            d,
            k.cols(),
            v.cols()
        )));
    }
    if k.rows() != v.rows() || k.rows() != key_pos.len() || q.rows() != query_pos.len() {
        return Err(Error::Shape(format!(
            "row counts disagree: q {} ({} positions), k {}, v {} ({} positions)",
            q.rows(),
            query_pos.len(),
            k.rows(),
            v.rows(),
            key_pos.len()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    let mut weights: Vec<f64> = Vec::with_capacity(k.rows());
    let mut acc = vec![0.0f64; d];
    for i in 0..q.rows() {
        let qi = q.row(i);
        let visible = key_pos.iter().take_while(|&&p| p <= query_pos[i]).count();
        // keys are sorted by position, so visibility is a prefix
        debug_assert!(key_pos[visible..].iter().all(|&p| p > query_pos[i]));
        if visible == 0 {
            return Err(Error::Input(format!(
                "query at position {} has no visible keys",
                query_pos[i]
            )));
        }
        weights.clear();
        weights.extend((0..visible).map(|j| {
            let kj = k.row(j);
            qi.iter()
                .zip(kj)
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum::<f64>()
                * scale
        }));
        softmax_in_place(&mut weights);
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, w) in weights.iter().enumerate() {
            for (a, x) in acc.iter_mut().zip(v.row(j)) {
                *a += w * f64::from(*x);
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(out)
}

/// Rotary embedding over interleaved pairs `(2i, 2i+1)` with frequency
/// `theta^(-2i/d)`.
#[derive(Debug, Clone)]
pub struct Rope {
    inv_freq: Vec<f64>,
}

impl Rope {
    pub fn new(head_dim: usize, theta: f64) -> Self {
        let inv_freq = (0..head_dim / 2)
            .map(|i| theta.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Self { inv_freq }
    }

    pub fn apply(&self, x: &mut [f32], pos: usize) {
        for (i, f) in self.inv_freq.iter().enumerate() {
            let angle = pos as f64 * f;
            let (s, c) = angle.sin_cos();
            let a = f64::from(x[2 * i]);
            let b = f64::from(x[2 * i + 1]);
            x[2 * i] = (a * c - b * s) as f32;
            x[2 * i + 1] = (a * s + b * c) as f32;
        }
    }
}
