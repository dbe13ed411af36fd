//! The hook block: K learnable tokens that read from the bag, talk to each
//! other, and write context back into every instance.
//!
//! One round runs three attention phases in order:
//!
//! 1. hook → instance aggregation: hooks query the instances,
//!    `H̃ = LN(H + softmax(Q_h K_xᵀ/√D) V_x)`;
//! 2. hook intercommunication: multi-head self-attention over the K hooks,
//!    `H' = LN(H̃ + MHSA(H̃))`;
//! 3. instance ← hook feedback: instances query the refined hooks,
//!    `X' = LN(X + softmax(Q_x K_hᵀ/√D) V_h)`.
//!
//! The pre-softmax logits of phase 1 feed the diversity penalty. Every phase
//! costs O(NKD) or O(K²D), so the block is linear in the bag size.

use std::path::PathBuf;

use rand::Rng;

use crate::data::read_bag;
use crate::error::{Error, Result};
use crate::tensor::{
    self, layer_norm_rows_cached, row_softmax, truncated_normal_fill, uniform_fill,
    LayerNormCache, Matrix,
};

pub const DEFAULT_HOOK_STD: f64 = 0.02;
pub const DEFAULT_DIV_EPS: f64 = 1e-6;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How the hook tokens are seeded.
///
/// `ExternalVectors` covers every prior-knowledge variant (visual prototypes,
/// text embeddings, expression-profile embeddings): the vectors are produced
/// elsewhere and loaded from an HKB1 file with exactly K rows and D columns.
#[derive(Clone, Debug, PartialEq)]
pub enum HookInitStrategy {
    TruncNormal(f64),
    ExternalVectors(PathBuf),
}

impl Default for HookInitStrategy {
    fn default() -> Self {
        HookInitStrategy::TruncNormal(DEFAULT_HOOK_STD)
    }
}

impl std::fmt::Display for HookInitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HookInitStrategy::TruncNormal(std) => write!(f, "tn:{std}"),
            HookInitStrategy::ExternalVectors(p) => write!(f, "external:{}", p.display()),
        }
    }
}

impl std::str::FromStr for HookInitStrategy {
    type Err = Error;

    /// Accepts `tn`, `tn:<std>` or `external:<path>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "tn" {
            return Ok(HookInitStrategy::default());
        }
        if let Some(std) = s.strip_prefix("tn:") {
            let std: f64 = std
                .parse()
                .map_err(|_| Error::Config(format!("invalid hook std {std:?}")))?;
            if !(std > 0.0 && std.is_finite()) {
                return Err(Error::Config(format!("hook std must be positive, got {std}")));
            }
            return Ok(HookInitStrategy::TruncNormal(std));
        }
        if let Some(path) = s.strip_prefix("external:") {
            if path.is_empty() {
                return Err(Error::Config("external hook init needs a path".into()));
            }
            return Ok(HookInitStrategy::ExternalVectors(PathBuf::from(path)));
        }
        Err(Error::Config(format!(
            "unknown hook init {s:?} (expected tn, tn:<std> or external:<path>)"
        )))
    }
}

/// Produces the initial K×D hook-token matrix.
pub fn init_hooks<R: Rng + ?Sized>(
    strategy: &HookInitStrategy,
    k: usize,
    d: usize,
    rng: &mut R,
) -> Result<Matrix> {
    if k == 0 || d == 0 {
        return Err(Error::Config(format!("hook shape {k}x{d} must be non-empty")));
    }
    match strategy {
        HookInitStrategy::TruncNormal(std) => truncated_normal_fill(k, d, *std, rng),
        HookInitStrategy::ExternalVectors(path) => {
            let bag = read_bag(path)?;
            let (rows, cols) = bag.features.shape();
            if (rows, cols) != (k, d) {
                return Err(Error::HookInit {
                    expected_rows: k,
                    expected_cols: d,
                    found_rows: rows,
                    found_cols: cols,
                });
            }
            Ok(bag.features)
        }
    }
}

/// Every learnable tensor of the hook block.
///
/// Projections are stored as `D x D` matrices applied on the right as `x Wᵀ`.
/// The multi-head projections keep all heads side by side: head `l` owns
/// rows `l·D/heads .. (l+1)·D/heads` of `mh_q`, `mh_k`, `mh_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct HookParams {
    pub tokens: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub mh_q: Matrix,
    pub mh_k: Matrix,
    pub mh_v: Matrix,
    pub mh_o: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub fb_q: Matrix,
    pub fb_k: Matrix,
    pub fb_v: Matrix,
    pub ln3_gain: Matrix,
    pub ln3_bias: Matrix,
    pub heads: usize,
}

impl HookParams {
    pub fn new<R: Rng + ?Sized>(
        k: usize,
        d: usize,
        heads: usize,
        strategy: &HookInitStrategy,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        let tokens = init_hooks(strategy, k, d, rng)?;
        let bound = 1.0 / (d as f64).sqrt();
        let mut proj = || uniform_fill(d, d, bound, rng);
        let w_q = proj();
        let w_k = proj();
        let w_v = proj();
        let mh_q = proj();
        let mh_k = proj();
        let mh_v = proj();
        let mh_o = proj();
        let fb_q = proj();
        let fb_k = proj();
        let fb_v = proj();
        let ones = Matrix::filled(1, d, 1.0);
        let zeros = Matrix::zeros(1, d);
        Ok(Self {
            tokens,
            w_q,
            w_k,
            w_v,
            ln1_gain: ones.clone(),
            ln1_bias: zeros.clone(),
            mh_q,
            mh_k,
            mh_v,
            mh_o,
            ln2_gain: ones.clone(),
            ln2_bias: zeros.clone(),
            fb_q,
            fb_k,
            fb_v,
            ln3_gain: ones,
            ln3_bias: zeros,
            heads,
        })
    }

    pub fn num_hooks(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// All-zero tensors with this block's shapes.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            tokens: z(&self.tokens),
            w_q: z(&self.w_q),
            w_k: z(&self.w_k),
            w_v: z(&self.w_v),
            ln1_gain: z(&self.ln1_gain),
            ln1_bias: z(&self.ln1_bias),
            mh_q: z(&self.mh_q),
            mh_k: z(&self.mh_k),
            mh_v: z(&self.mh_v),
            mh_o: z(&self.mh_o),
            ln2_gain: z(&self.ln2_gain),
            ln2_bias: z(&self.ln2_bias),
            fb_q: z(&self.fb_q),
            fb_k: z(&self.fb_k),
            fb_v: z(&self.fb_v),
            ln3_gain: z(&self.ln3_gain),
            ln3_bias: z(&self.ln3_bias),
            heads: self.heads,
        }
    }

    /// Named tensors in a fixed order (checkpoint and optimizer order).
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("hook.tokens", &self.tokens),
            ("hook.agg.w_q", &self.w_q),
            ("hook.agg.w_k", &self.w_k),
            ("hook.agg.w_v", &self.w_v),
            ("hook.ln1.gain", &self.ln1_gain),
            ("hook.ln1.bias", &self.ln1_bias),
            ("hook.mhsa.w_q", &self.mh_q),
            ("hook.mhsa.w_k", &self.mh_k),
            ("hook.mhsa.w_v", &self.mh_v),
            ("hook.mhsa.w_o", &self.mh_o),
            ("hook.ln2.gain", &self.ln2_gain),
            ("hook.ln2.bias", &self.ln2_bias),
            ("hook.fb.w_q", &self.fb_q),
            ("hook.fb.w_k", &self.fb_k),
            ("hook.fb.w_v", &self.fb_v),
            ("hook.ln3.gain", &self.ln3_gain),
            ("hook.ln3.bias", &self.ln3_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("hook.tokens", &mut self.tokens),
            ("hook.agg.w_q", &mut self.w_q),
            ("hook.agg.w_k", &mut self.w_k),
            ("hook.agg.w_v", &mut self.w_v),
            ("hook.ln1.gain", &mut self.ln1_gain),
            ("hook.ln1.bias", &mut self.ln1_bias),
            ("hook.mhsa.w_q", &mut self.mh_q),
            ("hook.mhsa.w_k", &mut self.mh_k),
            ("hook.mhsa.w_v", &mut self.mh_v),
            ("hook.mhsa.w_o", &mut self.mh_o),
            ("hook.ln2.gain", &mut self.ln2_gain),
            ("hook.ln2.bias", &mut self.ln2_bias),
            ("hook.fb.w_q", &mut self.fb_q),
            ("hook.fb.w_k", &mut self.fb_k),
            ("hook.fb.w_v", &mut self.fb_v),
            ("hook.ln3.gain", &mut self.ln3_gain),
            ("hook.ln3.bias", &mut self.ln3_bias),
        ]
    }
}

pub(crate) fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "feature dimension {d} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Outputs of one hook round.
#[derive(Clone, Debug)]
pub struct HookForwardRecord {
    /// Context-aware instances, N×D.
    pub x_prime: Matrix,
    /// Hooks after aggregation, K×D.
    pub h_tilde: Matrix,
    /// Hooks after intercommunication, K×D.
    pub h_prime: Matrix,
    /// Scaled pre-softmax aggregation logits, K×N.
    pub logits: Matrix,
    /// Hook → instance attention, K×N, row-stochastic.
    pub a_h2x: Matrix,
    /// Instance → hook attention, N×K, row-stochastic.
    pub a_x2h: Matrix,
    pub div_loss: f64,
}

/// Phase 1 intermediates.
#[derive(Clone, Debug)]
pub(crate) struct AggregationCache {
    pub qh: Matrix,
    pub kx: Matrix,
    pub vx: Matrix,
    pub logits: Matrix,
    pub attn: Matrix,
    pub ln: LayerNormCache,
    pub h_tilde: Matrix,
}

/// Phase 2 intermediates.
#[derive(Clone, Debug)]
pub(crate) struct IntercommCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub concat: Matrix,
    pub ln: LayerNormCache,
    pub h_prime: Matrix,
}

/// Phase 3 intermediates.
#[derive(Clone, Debug)]
pub(crate) struct FeedbackCache {
    pub qx: Matrix,
    pub kh: Matrix,
    pub vh: Matrix,
    pub attn: Matrix,
    pub ln: LayerNormCache,
    pub x_prime: Matrix,
}

/// Everything one round keeps for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BlockCache {
    pub x: Matrix,
    pub agg: AggregationCache,
    pub inter: IntercommCache,
    pub fb: FeedbackCache,
    pub div_loss: f64,
}

impl BlockCache {
    pub fn record(&self) -> HookForwardRecord {
        HookForwardRecord {
            x_prime: self.fb.x_prime.clone(),
            h_tilde: self.agg.h_tilde.clone(),
            h_prime: self.inter.h_prime.clone(),
            logits: self.agg.logits.clone(),
            a_h2x: self.agg.attn.clone(),
            a_x2h: self.fb.attn.clone(),
            div_loss: self.div_loss,
        }
    }
}

pub(crate) fn aggregate_cached(x: &Matrix, p: &HookParams) -> Result<AggregationCache> {
    if x.rows() == 0 {
        return Err(Error::EmptyBag);
    }
    if x.cols() != p.dim() {
        return Err(Error::Shape(format!(
            "bag has {} features per instance, hook block expects {}",
            x.cols(),
            p.dim()
        )));
    }
    let scale = 1.0 / (p.dim() as f64).sqrt();
    let qh = p.tokens.matmul_t(&p.w_q)?;
    let kx = x.matmul_t(&p.w_k)?;
    let vx = x.matmul_t(&p.w_v)?;
    let logits = qh.matmul_t(&kx)?.scale(scale);
    let attn = row_softmax(&logits);
    let pre = p.tokens.add(&attn.matmul(&vx)?)?;
    let (h_tilde, ln) = layer_norm_rows_cached(&pre, &p.ln1_gain, &p.ln1_bias, LAYER_NORM_EPS)?;
    Ok(AggregationCache {
        qh,
        kx,
        vx,
        logits,
        attn,
        ln,
        h_tilde,
    })
}

pub(crate) fn intercomm_cached(h_tilde: &Matrix, p: &HookParams) -> Result<IntercommCache> {
    let d = h_tilde.cols();
    check_heads(d, p.heads)?;
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = h_tilde.matmul_t(&p.mh_q)?;
    let k = h_tilde.matmul_t(&p.mh_k)?;
    let v = h_tilde.matmul_t(&p.mh_v)?;
    let mut concat = Matrix::zeros(h_tilde.rows(), d);
    let mut probs = Vec::with_capacity(p.heads);
    for l in 0..p.heads {
        let ql = q.col_block(l * dh, dh);
        let kl = k.col_block(l * dh, dh);
        let vl = v.col_block(l * dh, dh);
        let pl = row_softmax(&ql.matmul_t(&kl)?.scale(scale));
        concat.set_col_block(l * dh, &pl.matmul(&vl)?);
        probs.push(pl);
    }
    let inter = concat.matmul_t(&p.mh_o)?;
    let pre = h_tilde.add(&inter)?;
    let (h_prime, ln) = layer_norm_rows_cached(&pre, &p.ln2_gain, &p.ln2_bias, LAYER_NORM_EPS)?;
    Ok(IntercommCache {
        q,
        k,
        v,
        probs,
        concat,
        ln,
        h_prime,
    })
}

pub(crate) fn feedback_cached(x: &Matrix, h_prime: &Matrix, p: &HookParams) -> Result<FeedbackCache> {
    if x.cols() != h_prime.cols() {
        return Err(Error::Shape(format!(
            "instances have {} columns, hooks have {}",
            x.cols(),
            h_prime.cols()
        )));
    }
    let scale = 1.0 / (x.cols() as f64).sqrt();
    let qx = x.matmul_t(&p.fb_q)?;
    let kh = h_prime.matmul_t(&p.fb_k)?;
    let vh = h_prime.matmul_t(&p.fb_v)?;
    let attn = row_softmax(&qx.matmul_t(&kh)?.scale(scale));
    let pre = x.add(&attn.matmul(&vh)?)?;
    let (x_prime, ln) = layer_norm_rows_cached(&pre, &p.ln3_gain, &p.ln3_bias, LAYER_NORM_EPS)?;
    Ok(FeedbackCache {
        qx,
        kh,
        vh,
        attn,
        ln,
        x_prime,
    })
}

pub(crate) fn block_forward_cached(x: &Matrix, p: &HookParams, div_eps: f64) -> Result<BlockCache> {
    let agg = aggregate_cached(x, p)?;
    let inter = intercomm_cached(&agg.h_tilde, p)?;
    let fb = feedback_cached(x, &inter.h_prime, p)?;
    let div_loss = diversity_loss(&agg.logits, div_eps);
    Ok(BlockCache {
        x: x.clone(),
        agg,
        inter,
        fb,
        div_loss,
    })
}

/// Phase 1. Returns `(H̃, logits, A_h2x)`.
pub fn hook_to_instance(x: &Matrix, params: &HookParams) -> Result<(Matrix, Matrix, Matrix)> {
    let c = aggregate_cached(x, params)?;
    Ok((c.h_tilde, c.logits, c.attn))
}

/// Phase 2. Returns `H'`.
pub fn hook_intercomm(h_tilde: &Matrix, params: &HookParams) -> Result<Matrix> {
    Ok(intercomm_cached(h_tilde, params)?.h_prime)
}

/// Phase 3. Returns `(X', A_x2h)`.
pub fn instance_feedback(
    x: &Matrix,
    h_prime: &Matrix,
    params: &HookParams,
) -> Result<(Matrix, Matrix)> {
    let c = feedback_cached(x, h_prime, params)?;
    Ok((c.x_prime, c.attn))
}

/// One full hook round plus the diversity penalty on the phase-1 logits.
pub fn hook_forward(x: &Matrix, params: &HookParams, div_eps: f64) -> Result<HookForwardRecord> {
    Ok(block_forward_cached(x, params, div_eps)?.record())
}

/// Similarity of hook attention patterns: `S = L̂ L̂ᵀ` with
/// `L̂ = L / (‖L‖_F + eps)`.
pub fn hook_similarity(logits: &Matrix, eps: f64) -> Matrix {
    let ln = tensor::frobenius_normalize(logits, eps);
    ln.matmul_t(&ln).expect("square by construction")
}

/// Mean squared off-diagonal entry of [`hook_similarity`]. Zero when K = 1.
pub fn diversity_loss(logits: &Matrix, eps: f64) -> f64 {
    let k = logits.rows();
    if k < 2 {
        return 0.0;
    }
    let s = hook_similarity(logits, eps);
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                acc += s.get(i, j) * s.get(i, j);
            }
        }
    }
    acc / (k * (k - 1)) as f64
}

/// Gradient of [`diversity_loss`] with respect to the logits.
pub fn diversity_loss_grad(logits: &Matrix, eps: f64) -> Matrix {
    let k = logits.rows();
    if k < 2 {
        return Matrix::zeros(logits.rows(), logits.cols());
    }
    let norm = logits.frobenius_norm();
    let denom = norm + eps;
    if denom == 0.0 {
        return Matrix::zeros(logits.rows(), logits.cols());
    }
    let ln = logits.scale(1.0 / denom);
    let mut s = ln.matmul_t(&ln).expect("square by construction");
    let c = 2.0 / (k * (k - 1)) as f64;
    for i in 0..k {
        for j in 0..k {
            let v = if i == j { 0.0 } else { c * s.get(i, j) };
            s.set(i, j, v);
        }
    }
    // dS is symmetric, so dL̂ = (dS + dSᵀ) L̂ = 2 dS L̂.
    let d_ln = s.matmul(&ln).expect("shapes agree").scale(2.0);
    let mut out = d_ln.scale(1.0 / denom);
    if norm > 0.0 {
        let proj = tensor::dot(d_ln.data(), logits.data()) / (denom * denom * norm);
        for (o, &l) in out.data_mut().iter_mut().zip(logits.data()) {
            *o -= proj * l;
        }
    }
    out
}

/// Mean absolute off-diagonal entry of the hook similarity matrix.
pub fn mean_offdiag_similarity(s: &Matrix) -> f64 {
    let k = s.rows();
    if k < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                acc += s.get(i, j).abs();
            }
        }
    }
    acc / (k * (k - 1)) as f64
}

/// Instance-to-instance dependency induced by one round, `Ã = A_x2h A_h2x`.
pub fn induced_dependency(a_x2h: &Matrix, a_h2x: &Matrix) -> Result<Matrix> {
    if a_x2h.cols() != a_h2x.rows() || a_x2h.rows() != a_h2x.cols() {
        return Err(Error::Shape(format!(
            "induced dependency needs N x K and K x N maps, got {}x{} and {}x{}",
            a_x2h.rows(),
            a_x2h.cols(),
            a_h2x.rows(),
            a_h2x.cols()
        )));
    }
    a_x2h.matmul(a_h2x)
}

/// Analytic operation counts for one hook round against dense self-attention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpCount {
    /// Aggregation (N·K·D) + intercommunication (K²·D) + feedback (N·K·D).
    pub hook: u128,
    /// Dense N²·D score-and-mix term.
    pub dense: u128,
    /// Dominant-term ratio `N²·D / (N·K·D) = N / K`.
    pub dominant_ratio: f64,
}

pub fn op_count(n: usize, k: usize, d: usize) -> OpCount {
    let (n, k, d) = (n as u128, k as u128, d as u128);
    OpCount {
        hook: 2 * n * k * d + k * k * d,
        dense: n * n * d,
        dominant_ratio: (n * n * d) as f64 / (n * k * d) as f64,
    }
}
