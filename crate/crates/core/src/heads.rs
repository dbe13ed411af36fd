//! Bag-level heads: tanh attention pooling, the linear classifier, and the
//! losses. Also the plain attention-pooling baseline that skips the hook block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, dot, log_sum_exp, softmax_in_place, uniform_fill, Matrix};

pub const DEFAULT_ATTN_DIM: usize = 128;

/// Pooling and classifier weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolParams {
    /// `D_a x D`.
    pub v_a: Matrix,
    /// `1 x D_a`.
    pub w_a: Matrix,
    /// `C x D`.
    pub w_c: Matrix,
    /// `1 x C`.
    pub b_c: Matrix,
}

impl PoolParams {
    pub fn new<R: Rng + ?Sized>(d: usize, attn_dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || attn_dim == 0 {
            return Err(Error::Config(format!(
                "pooling needs positive dimensions, got D={d}, D_a={attn_dim}"
            )));
        }
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let bd = 1.0 / (d as f64).sqrt();
        let ba = 1.0 / (attn_dim as f64).sqrt();
        Ok(Self {
            v_a: uniform_fill(attn_dim, d, bd, rng),
            w_a: uniform_fill(1, attn_dim, ba, rng),
            w_c: uniform_fill(classes, d, bd, rng),
            b_c: Matrix::zeros(1, classes),
        })
    }

    pub fn dim(&self) -> usize {
        self.v_a.cols()
    }

    pub fn classes(&self) -> usize {
        self.w_c.rows()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            v_a: z(&self.v_a),
            w_a: z(&self.w_a),
            w_c: z(&self.w_c),
            b_c: z(&self.b_c),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("pool.v_a", &self.v_a),
            ("pool.w_a", &self.w_a),
            ("cls.w_c", &self.w_c),
            ("cls.b_c", &self.b_c),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("pool.v_a", &mut self.v_a),
            ("pool.w_a", &mut self.w_a),
            ("cls.w_c", &mut self.w_c),
            ("cls.b_c", &mut self.b_c),
        ]
    }
}

/// Attention dimension actually used: the requested value clipped to D.
pub fn effective_attn_dim(requested: usize, d: usize) -> usize {
    requested.min(d)
}

#[derive(Clone, Debug)]
pub struct BagPrediction {
    pub probs: Vec<f64>,
    pub attention: Vec<f64>,
    pub z: Vec<f64>,
}

impl BagPrediction {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Pooling intermediates for backward.
#[derive(Clone, Debug)]
pub(crate) struct PoolCache {
    /// `tanh(X V_aᵀ)`, N×D_a.
    pub hidden: Matrix,
    pub attention: Vec<f64>,
    pub z: Vec<f64>,
}

pub(crate) fn attention_pool_cached(x: &Matrix, p: &PoolParams) -> Result<PoolCache> {
    if x.rows() == 0 {
        return Err(Error::EmptyBag);
    }
    if x.cols() != p.dim() {
        return Err(Error::Shape(format!(
            "pooling expects {} features, bag has {}",
            p.dim(),
            x.cols()
        )));
    }
    let hidden = x.matmul_t(&p.v_a)?.map(f64::tanh);
    let mut attention: Vec<f64> = (0..x.rows())
        .map(|i| dot(hidden.row(i), p.w_a.data()))
        .collect();
    softmax_in_place(&mut attention);
    let mut z = vec![0.0; x.cols()];
    for (i, &a) in attention.iter().enumerate() {
        for (zc, &v) in z.iter_mut().zip(x.row(i)) {
            *zc += a * v;
        }
    }
    Ok(PoolCache { hidden, attention, z })
}

/// `a_i ∝ exp(w_aᵀ tanh(V_a x_i))`, `z = Σ a_i x_i`. Returns `(z, a)`.
pub fn attention_pool(x: &Matrix, params: &PoolParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = attention_pool_cached(x, params)?;
    Ok((c.z, c.attention))
}

/// Classifier logits `W_c z + b_c`.
pub fn class_logits(z: &[f64], params: &PoolParams) -> Result<Vec<f64>> {
    if z.len() != params.dim() {
        return Err(Error::Shape(format!(
            "bag embedding has length {}, classifier expects {}",
            z.len(),
            params.dim()
        )));
    }
    Ok((0..params.classes())
        .map(|c| dot(params.w_c.row(c), z) + params.b_c.data()[c])
        .collect())
}

/// `softmax(W_c z + b_c)`.
pub fn classify(z: &[f64], params: &PoolParams) -> Result<Vec<f64>> {
    let mut probs = class_logits(z, params)?;
    softmax_in_place(&mut probs);
    Ok(probs)
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::Label(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Cross-entropy from logits via log-sum-exp.
pub fn cross_entropy_from_logits(logits: &[f64], label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    Ok(log_sum_exp(logits) - logits[label])
}

/// `−ln p[label]` for an already-normalized distribution.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    check_label(label, probs.len())?;
    Ok(-probs[label].ln())
}

/// `ce + λ·div`.
pub fn total_loss(ce: f64, div: f64, lambda: f64) -> f64 {
    ce + lambda * div
}

/// Attention pooling plus classifier on the raw instances (no hook block).
pub fn abmil_forward(x: &Matrix, pool: &PoolParams) -> Result<BagPrediction> {
    let c = attention_pool_cached(x, pool)?;
    let probs = classify(&c.z, pool)?;
    Ok(BagPrediction {
        probs,
        attention: c.attention,
        z: c.z,
    })
}

/// Softmax of the classifier logits kept with the logits themselves.
pub(crate) fn softmax_vec(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    tensor::softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn pool(d: usize, da: usize, c: usize, seed: u64) -> PoolParams {
        let mut p = PoolParams::new(d, da, c, &mut seeded(seed)).unwrap();
        p.b_c = uniform_fill(1, c, 0.5, &mut seeded(seed + 100));
        p
    }

    #[test]
    fn single_instance_pools_to_itself() {
        let p = pool(3, 2, 2, 1);
        let x = Matrix::from_rows(&[&[0.1, -0.4, 2.0]]);
        let (z, a) = attention_pool(&x, &p).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(z, x.row(0).to_vec());
    }

    #[test]
    fn identical_instances_get_uniform_weights() {
        let p = pool(3, 2, 2, 2);
        let r = [0.5, 0.5, -1.0];
        let x = Matrix::from_rows(&[&r, &r, &r, &r]);
        let (_, a) = attention_pool(&x, &p).unwrap();
        assert!(a.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn pooling_matches_transcription() {
        let p = pool(3, 2, 2, 3);
        let x = uniform_fill(4, 3, 1.0, &mut seeded(4));
        let (z, a) = attention_pool(&x, &p).unwrap();
        let scores: Vec<f64> = (0..4)
            .map(|i| {
                (0..2)
                    .map(|j| {
                        let h: f64 = (0..3).map(|c| p.v_a.get(j, c) * x.get(i, c)).sum();
                        p.w_a.get(0, j) * h.tanh()
                    })
                    .sum()
            })
            .collect();
        let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let tot: f64 = e.iter().sum();
        for i in 0..4 {
            assert!((a[i] - e[i] / tot).abs() < 1e-12);
        }
        for c in 0..3 {
            let want: f64 = (0..4).map(|i| e[i] / tot * x.get(i, c)).sum();
            assert!((z[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_cases() {
        let mut p = pool(3, 2, 4, 5);
        p.w_c = Matrix::zeros(4, 3);
        p.b_c = Matrix::zeros(1, 4);
        let probs = classify(&[1.0, 2.0, 3.0], &p).unwrap();
        assert!(probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!((cross_entropy(&probs, 2).unwrap() - 4f64.ln()).abs() < 1e-12);

        let mut p = pool(3, 2, 2, 6);
        p.w_c = Matrix::zeros(2, 3);
        p.b_c = Matrix::row_vector(&[10.0, -10.0]);
        let probs = classify(&[0.3, 0.2, 0.1], &p).unwrap();
        assert!((probs[0] - 1.0).abs() < 1e-4 && probs[1].abs() < 1e-4);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.25, 0.75], 1).unwrap() - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert!(matches!(cross_entropy(&[0.5, 0.5], 2), Err(Error::Label(_))));
        let logits = [0.0, 3f64.ln()];
        assert!((cross_entropy_from_logits(&logits, 1).unwrap() - (-(0.75f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.7, 0.3, 0.0), 0.7);
        assert!((total_loss(1.0, 0.25, 0.2) - 1.05).abs() < 1e-15);
    }

    #[test]
    fn abmil_rejects_empty_bag() {
        let p = pool(3, 2, 2, 7);
        assert!(matches!(abmil_forward(&Matrix::zeros(0, 3), &p), Err(Error::EmptyBag)));
    }

    #[test]
    fn abmil_matches_pool_then_classify() {
        let p = pool(5, 3, 3, 8);
        let x = uniform_fill(6, 5, 1.0, &mut seeded(9));
        let pred = abmil_forward(&x, &p).unwrap();
        let (z, a) = attention_pool(&x, &p).unwrap();
        let probs = classify(&z, &p).unwrap();
        assert_eq!(pred.probs, probs);
        assert_eq!(pred.attention, a);
    }

    #[test]
    fn pooling_is_shift_invariant_in_scores() {
        // Adding a constant to every score leaves the softmax unchanged.
        let mut s = vec![0.3, -1.0, 2.2];
        let mut t: Vec<f64> = s.iter().map(|v| v + 17.5).collect();
        softmax_in_place(&mut s);
        softmax_in_place(&mut t);
        for (a, b) in s.iter().zip(&t) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
