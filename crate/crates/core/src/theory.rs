//! Numerical checks of the hook block's structural properties: the rank of
//! the induced instance dependency, the softmax Jacobian norm, two-hop
//! connectivity between instances, and linear-versus-quadratic scaling.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::hook::{hook_forward, induced_dependency, op_count, HookParams};
use crate::tensor::{self, dot, Matrix};

pub const DEFAULT_RANK_TAU: f64 = 1e-8;
pub const PUBLISHED_JACOBIAN_BOUND: f64 = 0.25;
pub const JACOBIAN_BOUND: f64 = 0.5;

/// Singular values of a matrix and its numerical rank.
#[derive(Clone, Debug, PartialEq)]
pub struct RankReport {
    /// Descending.
    pub singular_values: Vec<f64>,
    pub numerical_rank: usize,
    pub claimed_bound: usize,
    pub pass: bool,
}

/// Singular values by one-sided Jacobi rotations, descending.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    // Work on columns of the taller orientation.
    let a = if m.rows() >= m.cols() { m.clone() } else { m.transpose() };
    let (rows, cols) = a.shape();
    // Column-major copy so rotations touch contiguous memory.
    let mut c: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a.get(i, j)).collect())
        .collect();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&c[p], &c[p]);
                let beta = dot(&c[q], &c[q]);
                let gamma = dot(&c[p], &c[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = c.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = cs * xp - sn * yq;
                    *y = sn * xp + cs * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = c.iter().map(|col| dot(col, col).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Rank as the count of singular values above `tau·σ₁`.
pub fn numerical_rank(m: &Matrix, tau: f64, claimed_bound: usize) -> Result<RankReport> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Validation(format!("rank threshold must lie in (0, 1), got {tau}")));
    }
    let singular_values = singular_values(m);
    let top = singular_values.first().copied().unwrap_or(0.0);
    let numerical_rank = if top == 0.0 {
        0
    } else {
        singular_values.iter().filter(|&&s| s > tau * top).count()
    };
    Ok(RankReport {
        pass: numerical_rank <= claimed_bound,
        singular_values,
        numerical_rank,
        claimed_bound,
    })
}

/// Rank report for `Ã = A_x2h A_h2x` from one hook round on `x`.
pub fn induced_rank(x: &Matrix, params: &HookParams, tau: f64) -> Result<RankReport> {
    let rec = hook_forward(x, params, crate::hook::DEFAULT_DIV_EPS)?;
    let a = induced_dependency(&rec.a_x2h, &rec.a_h2x)?;
    numerical_rank(&a, tau, params.num_hooks())
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Validation("probability vector is empty".into()));
    }
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!("probability entry {v} is not in [0, 1]")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

/// Spectral norm of `Diag(p) − ppᵀ` by power iteration on the Rayleigh
/// quotient, stopped when successive estimates agree to 1e-13.
pub fn softmax_jacobian_norm(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    let n = p.len();
    let apply = |v: &[f64], out: &mut [f64]| {
        let pv = dot(p, v);
        for i in 0..n {
            out[i] = p[i] * v[i] - p[i] * pv;
        }
    };
    let mut v: Vec<f64> = (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.618_033_988_749_895).fract() - 0.5 + 1e-3 * i as f64)
        .collect();
    let mut w = vec![0.0; n];
    let mut estimate = 0.0;
    for _ in 0..100_000 {
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        apply(&v, &mut w);
        let next = dot(&v, &w);
        std::mem::swap(&mut v, &mut w);
        if (next - estimate).abs() <= 1e-13 {
            return Ok(next);
        }
        estimate = next;
    }
    Ok(estimate)
}

#[derive(Clone, Debug)]
pub struct JacobianSweep {
    pub points: usize,
    pub max_norm: f64,
    pub argmax: Vec<f64>,
}

impl JacobianSweep {
    pub fn within_bound(&self) -> bool {
        self.max_norm <= JACOBIAN_BOUND + 1e-9
    }

    pub fn exceeds_published_bound(&self) -> bool {
        self.max_norm > PUBLISHED_JACOBIAN_BOUND
    }
}

/// Maximum Jacobian norm over uniform simplex points whose dimension cycles
/// through `2..=max_dim`.
pub fn jacobian_sweep<R: Rng + ?Sized>(points: usize, max_dim: usize, rng: &mut R) -> Result<JacobianSweep> {
    let max_dim = max_dim.max(2);
    let mut best = JacobianSweep {
        points,
        max_norm: 0.0,
        argmax: Vec::new(),
    };
    for t in 0..points {
        let n = 2 + t % (max_dim - 1);
        let mut p: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let norm = softmax_jacobian_norm(&p)?;
        if norm > best.max_norm {
            best.max_norm = norm;
            best.argmax = p;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairInfluence {
    pub i: usize,
    pub j: usize,
    /// `‖∂x′_j/∂x_i · u‖` by central differences along a unit direction `u`.
    pub influence: f64,
    /// `max_k (A_h2x)_{k,i} (A_x2h)_{j,k}`.
    pub two_hop_weight: f64,
}

#[derive(Clone, Debug)]
pub struct ConnectivityReport {
    pub pairs: Vec<PairInfluence>,
    pub min_induced_entry: f64,
    pub pass: bool,
}

/// `count` instance pairs; the first is always the self pair `(0, 0)`.
pub fn sample_pairs<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    (0..count)
        .map(|t| if t == 0 { (0, 0) } else { (rng.gen_range(0..n), rng.gen_range(0..n)) })
        .collect()
}

/// Checks that every sampled instance `i` influences `x′_j` through one round.
pub fn connectivity_check<R: Rng + ?Sized>(
    params: &HookParams,
    x: &Matrix,
    pairs: &[(usize, usize)],
    h: f64,
    rng: &mut R,
) -> Result<ConnectivityReport> {
    let n = x.rows();
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(Error::Shape(format!("pair ({i}, {j}) out of range for {n} instances")));
    }
    let eps = crate::hook::DEFAULT_DIV_EPS;
    let base = hook_forward(x, params, eps)?;
    let induced = induced_dependency(&base.a_x2h, &base.a_h2x)?;
    let min_induced_entry = induced.data().iter().copied().fold(f64::INFINITY, f64::min);
    let d = x.cols();
    let mut out = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let un = dot(&u, &u).sqrt();
        u.iter_mut().for_each(|v| *v /= un);
        let shifted = |sign: f64| -> Result<Vec<f64>> {
            let mut xs = x.clone();
            for (v, du) in xs.row_mut(i).iter_mut().zip(&u) {
                *v += sign * h * du;
            }
            Ok(hook_forward(&xs, params, eps)?.x_prime.row(j).to_vec())
        };
        let up = shifted(1.0)?;
        let down = shifted(-1.0)?;
        let influence = up
            .iter()
            .zip(&down)
            .map(|(a, b)| ((a - b) / (2.0 * h)).powi(2))
            .sum::<f64>()
            .sqrt();
        let two_hop_weight = (0..params.num_hooks())
            .map(|k| base.a_h2x.get(k, i) * base.a_x2h.get(j, k))
            .fold(0.0, f64::max);
        out.push(PairInfluence {
            i,
            j,
            influence,
            two_hop_weight,
        });
    }
    let pass = min_induced_entry > 0.0
        && out.iter().all(|p| p.influence > 1e-12 && p.two_hop_weight > 0.0);
    Ok(ConnectivityReport {
        pairs: out,
        min_induced_entry,
        pass,
    })
}

/// Single-head dense self-attention `softmax(Q Kᵀ/√D) V` with
/// `Q, K, V = X W_{q,k,v}ᵀ`, computed one query row at a time so memory stays
/// linear in N.
pub fn dense_self_attention(x: &Matrix, w_q: &Matrix, w_k: &Matrix, w_v: &Matrix) -> Result<Matrix> {
    let q = x.matmul_t(w_q)?;
    let k = x.matmul_t(w_k)?;
    let v = x.matmul_t(w_v)?;
    let (n, d) = x.shape();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut scores = vec![0.0; n];
    for i in 0..n {
        let qi = q.row(i);
        for (s, j) in scores.iter_mut().zip(0..n) {
            *s = dot4(qi, k.row(j)) * scale;
        }
        tensor::softmax_in_place(&mut scores);
        let row = out.row_mut(i);
        for (j, &pj) in scores.iter().enumerate() {
            for (o, &vj) in row.iter_mut().zip(v.row(j)) {
                *o += pj * vj;
            }
        }
    }
    Ok(out)
}

fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = acc[0] + acc[1] + acc[2] + acc[3];
    for t in 4 * chunks..a.len() {
        s += a[t] * b[t];
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub hook_ms: f64,
    pub dense_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    /// Size at which the analytic counts are taken.
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub hook_flops: u128,
    pub selfattn_flops: u128,
    /// Dominant-term ratio `N/K`.
    pub ratio: f64,
    pub timings: Vec<BenchRow>,
}

impl ComplexityReport {
    /// `T(N_{t+1}) / T(N_t)` for hook and dense, per consecutive grid pair.
    pub fn growth_ratios(&self) -> Vec<(f64, f64)> {
        self.timings
            .windows(2)
            .map(|w| (w[1].hook_ms / w[0].hook_ms, w[1].dense_ms / w[0].dense_ms))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("N,hook_ms,dense_ms\n");
        for r in &self.timings {
            s.push_str(&format!("{},{:.6},{:.6}\n", r.n, r.hook_ms, r.dense_ms));
        }
        s
    }
}

/// Median milliseconds per call; each repeat loops until at least 20 ms pass.
fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let mut calls = 0u32;
        loop {
            f()?;
            calls += 1;
            if start.elapsed().as_secs_f64() >= 0.02 {
                break;
            }
        }
        samples.push(start.elapsed().as_secs_f64() * 1e3 / calls as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples[samples.len() / 2])
}

/// Wall-time of one hook round against dense self-attention over `n_grid`,
/// plus the analytic counts at `(analytic_n, k, d)`.
pub fn complexity_bench<R: Rng + ?Sized>(
    n_grid: &[usize],
    k: usize,
    d: usize,
    repeats: usize,
    analytic_n: usize,
    rng: &mut R,
) -> Result<ComplexityReport> {
    if repeats < 3 {
        return Err(Error::Config(format!("need at least 3 repeats, got {repeats}")));
    }
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[1] <= w[0]) || n_grid[0] == 0 {
        return Err(Error::Config(format!("N grid must be ascending and positive, got {n_grid:?}")));
    }
    let heads = if d % 4 == 0 { 4 } else { 1 };
    let params = HookParams::new(k, d, heads, &crate::hook::HookInitStrategy::default(), rng)?;
    let bound = 1.0 / (d as f64).sqrt();
    let w_q = tensor::uniform_fill(d, d, bound, rng);
    let w_k = tensor::uniform_fill(d, d, bound, rng);
    let w_v = tensor::uniform_fill(d, d, bound, rng);
    let mut timings = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let mut data = vec![0.0; n * d];
        data.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        let x = Matrix::from_vec(n, d, data)?;
        let hook_ms = time_median(repeats, || {
            std::hint::black_box(hook_forward(&x, &params, crate::hook::DEFAULT_DIV_EPS)?);
            Ok(())
        })?;
        let dense_ms = time_median(repeats, || {
            std::hint::black_box(dense_self_attention(&x, &w_q, &w_k, &w_v)?);
            Ok(())
        })?;
        timings.push(BenchRow { n, hook_ms, dense_ms });
    }
    let counts = op_count(analytic_n, k, d);
    Ok(ComplexityReport {
        n: analytic_n,
        k,
        d,
        hook_flops: counts.hook,
        selfattn_flops: counts.dense,
        ratio: counts.dominant_ratio,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hook::HookInitStrategy;
    use crate::rng::seeded;
    use crate::tensor::uniform_fill;

    #[test]
    fn identity_and_outer_product_ranks() {
        let r = numerical_rank(&Matrix::identity(5), DEFAULT_RANK_TAU, 5).unwrap();
        assert_eq!(r.numerical_rank, 5);
        assert!(r.singular_values.iter().all(|s| (s - 1.0).abs() < 1e-14));

        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.1, -0.7];
        let rows: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let r = numerical_rank(&Matrix::from_rows(&refs), DEFAULT_RANK_TAU, 1).unwrap();
        assert_eq!(r.numerical_rank, 1);
        let want = dot(&u, &u).sqrt() * dot(&v, &v).sqrt();
        assert!((r.singular_values[0] - want).abs() < 1e-12);
    }

    #[test]
    fn singular_values_match_frobenius_and_known_diagonal() {
        let m = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, -4.0], &[0.0, 0.0]]);
        assert_eq!(singular_values(&m), vec![4.0, 3.0]);
        let m = uniform_fill(9, 6, 1.0, &mut seeded(3));
        let sv = singular_values(&m);
        let fro2: f64 = sv.iter().map(|s| s * s).sum();
        assert!((fro2 - m.frobenius_norm().powi(2)).abs() < 1e-10);
        assert!(sv.windows(2).all(|w| w[0] >= w[1]) && sv.iter().all(|&s| s >= 0.0));
        for (a, b) in sv.iter().zip(singular_values(&m.transpose())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn induced_dependency_rank_is_bounded_by_hook_count() {
        let x = uniform_fill(50, 8, 1.0, &mut seeded(11));
        let p = HookParams::new(4, 8, 2, &HookInitStrategy::TruncNormal(0.5), &mut seeded(12)).unwrap();
        let r = induced_rank(&x, &p, DEFAULT_RANK_TAU).unwrap();
        assert!(r.pass && r.numerical_rank <= 4, "{r:?}");
    }

    #[test]
    fn rank_threshold_is_validated() {
        assert!(matches!(numerical_rank(&Matrix::identity(2), 0.0, 2), Err(Error::Validation(_))));
        assert!(numerical_rank(&Matrix::identity(2), 1.0, 2).is_err());
    }

    #[test]
    fn jacobian_norm_examples() {
        assert!((softmax_jacobian_norm(&[0.5, 0.5]).unwrap() - 0.5).abs() < 1e-10);
        assert_eq!(softmax_jacobian_norm(&[1.0, 0.0]).unwrap(), 0.0);
        // Uniform over n: eigenvalue 1/n on the sum-zero subspace.
        assert!((softmax_jacobian_norm(&[0.25; 4]).unwrap() - 0.25).abs() < 1e-10);
        assert!(matches!(softmax_jacobian_norm(&[0.7, 0.7]), Err(Error::Validation(_))));
        assert!(softmax_jacobian_norm(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn jacobian_norm_matches_two_point_closed_form() {
        // For p = (a, 1−a) the nonzero eigenvalue is 2a(1−a).
        for a in [0.1, 0.3, 0.45, 0.9] {
            let got = softmax_jacobian_norm(&[a, 1.0 - a]).unwrap();
            assert!((got - 2.0 * a * (1.0 - a)).abs() < 1e-10);
        }
    }

    #[test]
    fn small_sweep_stays_under_one_half() {
        let s = jacobian_sweep(2000, 6, &mut seeded(5)).unwrap();
        assert!(s.within_bound());
        assert!(s.exceeds_published_bound());
    }

    #[test]
    fn connectivity_on_random_block() {
        let mut rng = seeded(21);
        let x = uniform_fill(12, 8, 1.0, &mut rng);
        let p = HookParams::new(3, 8, 2, &HookInitStrategy::TruncNormal(0.5), &mut rng).unwrap();
        let pairs = sample_pairs(12, 10, &mut rng);
        assert_eq!(pairs[0], (0, 0));
        let r = connectivity_check(&p, &x, &pairs, 1e-5, &mut rng).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.min_induced_entry > 0.0);
        assert!(connectivity_check(&p, &x, &[(12, 0)], 1e-5, &mut rng).is_err());
    }

    #[test]
    fn dense_reference_rows_match_direct_formula() {
        let mut rng = seeded(8);
        let x = uniform_fill(5, 4, 1.0, &mut rng);
        let w: Vec<Matrix> = (0..3).map(|_| uniform_fill(4, 4, 0.5, &mut rng)).collect();
        let got = dense_self_attention(&x, &w[0], &w[1], &w[2]).unwrap();
        let q = x.matmul_t(&w[0]).unwrap();
        let k = x.matmul_t(&w[1]).unwrap();
        let v = x.matmul_t(&w[2]).unwrap();
        let p = tensor::row_softmax(&q.matmul_t(&k).unwrap().scale(0.5));
        let want = p.matmul(&v).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn bench_validates_inputs_and_reports_ratio() {
        let mut rng = seeded(1);
        assert!(complexity_bench(&[64], 8, 16, 2, 10_000, &mut rng).is_err());
        assert!(complexity_bench(&[64, 32], 8, 16, 3, 10_000, &mut rng).is_err());
        let r = complexity_bench(&[32, 64], 8, 16, 3, 10_000, &mut rng).unwrap();
        assert_eq!(r.ratio, 1250.0);
        assert_eq!(r.timings.len(), 2);
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(r.to_csv().starts_with("N,hook_ms,dense_ms\n"));
    }
}
