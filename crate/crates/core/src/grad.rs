//! Hand-derived backward pass for the whole model, and the central-difference
//! oracle used to validate it.

use crate::data::BagFeatures;
use crate::error::{Error, Result};
use crate::heads::PoolParams;
use crate::hook::{diversity_loss_grad, BlockCache, HookParams};
use crate::model::{ModelParams, TapeRecord};
use crate::tensor::{layer_norm_rows_backward, row_softmax_backward, Matrix};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// One gradient tensor per model parameter, shape-matched.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet(ModelParams);

impl GradSet {
    pub fn zeros_for(params: &ModelParams) -> Self {
        GradSet(params.zeros_like())
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.0.get(name)
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        self.0.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        self.0.tensors_mut()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, m)| m.data().iter())
            .fold(0.0, |a, &b| a.max(b.abs()))
    }
}

/// Gradient of `loss_grad · L_total` for the bag recorded in `tape`.
pub fn backward(loss_grad: f64, tape: &TapeRecord, params: &ModelParams) -> Result<GradSet> {
    if tape.version != params.version() {
        return Err(Error::StaleTape {
            tape: tape.version,
            params: params.version(),
        });
    }
    let mut grads = GradSet::zeros_for(params);
    let mut d_features = pool_backward(loss_grad, tape, &params.pool, &mut grads.0.pool)?;

    if let (Some(hook), Some(hg)) = (&params.hook, grads.0.hook.as_mut()) {
        let div_weight = loss_grad * tape.lambda / params.rounds as f64;
        for cache in tape.blocks.iter().rev() {
            d_features = block_backward(cache, &d_features, div_weight, params.div_eps, hook, hg)?;
        }
    }
    Ok(grads)
}

/// Classifier and pooling; returns the gradient w.r.t. the pooled features.
fn pool_backward(
    loss_grad: f64,
    tape: &TapeRecord,
    p: &PoolParams,
    g: &mut PoolParams,
) -> Result<Matrix> {
    let x = &tape.pooled_input;
    let (n, d) = x.shape();
    let classes = p.classes();

    // d ce / d logits = softmax − onehot
    let dlogits: Vec<f64> = (0..classes)
        .map(|c| loss_grad * (tape.probs[c] - if c == tape.label { 1.0 } else { 0.0 }))
        .collect();
    let mut dz = vec![0.0; d];
    for (c, &dl) in dlogits.iter().enumerate() {
        g.b_c.data_mut()[c] += dl;
        let wc = p.w_c.row(c);
        for (j, gw) in g.w_c.row_mut(c).iter_mut().enumerate() {
            *gw += dl * tape.pool.z[j];
            dz[j] += dl * wc[j];
        }
    }

    let a = &tape.pool.attention;
    let mut dx = Matrix::zeros(n, d);
    let mut da = vec![0.0; n];
    for i in 0..n {
        let xi = x.row(i);
        da[i] = crate::tensor::dot(xi, &dz);
        for (o, &v) in dx.row_mut(i).iter_mut().zip(&dz) {
            *o = a[i] * v;
        }
    }
    let inner: f64 = a.iter().zip(&da).map(|(ai, di)| ai * di).sum();
    let ds: Vec<f64> = a.iter().zip(&da).map(|(ai, di)| ai * (di - inner)).collect();

    // s_i = w_aᵀ tanh(V_a x_i)
    let hidden = &tape.pool.hidden;
    let da_dim = hidden.cols();
    let mut dpre = Matrix::zeros(n, da_dim);
    for i in 0..n {
        let hi = hidden.row(i);
        for j in 0..da_dim {
            g.w_a.data_mut()[j] += ds[i] * hi[j];
            dpre.set(i, j, ds[i] * p.w_a.data()[j] * (1.0 - hi[j] * hi[j]));
        }
    }
    g.v_a.add_assign(&dpre.t_matmul(x)?)?;
    dx.add_assign(&dpre.matmul(&p.v_a)?)?;
    Ok(dx)
}

/// For `Y = S Wᵀ`: accumulates `dW += dYᵀ S` and returns `dS = dY W`.
fn proj_backward(d_out: &Matrix, input: &Matrix, w: &Matrix, gw: &mut Matrix) -> Result<Matrix> {
    gw.add_assign(&d_out.t_matmul(input)?)?;
    d_out.matmul(w)
}

/// One hook round. `d_out` is the gradient w.r.t. the round's output X'.
/// Returns the gradient w.r.t. the round's input X.
fn block_backward(
    c: &BlockCache,
    d_out: &Matrix,
    div_weight: f64,
    div_eps: f64,
    p: &HookParams,
    g: &mut HookParams,
) -> Result<Matrix> {
    let x = &c.x;
    let d = x.cols();
    let scale = 1.0 / (d as f64).sqrt();

    // Phase 3: X' = LN3(X + B Vh), B = softmax(Qx Khᵀ / √D)
    let (d_pre3, dg3, db3) = layer_norm_rows_backward(d_out, &p.ln3_gain, &c.fb.ln);
    g.ln3_gain.add_assign(&dg3)?;
    g.ln3_bias.add_assign(&db3)?;
    let mut dx = d_pre3.clone();
    let d_attn3 = d_pre3.matmul_t(&c.fb.vh)?;
    let d_vh = c.fb.attn.t_matmul(&d_pre3)?;
    let d_scores3 = row_softmax_backward(&c.fb.attn, &d_attn3).scale(scale);
    let d_qx = d_scores3.matmul(&c.fb.kh)?;
    let d_kh = d_scores3.t_matmul(&c.fb.qx)?;
    let h_prime = &c.inter.h_prime;
    dx.add_assign(&proj_backward(&d_qx, x, &p.fb_q, &mut g.fb_q)?)?;
    let mut d_hp = proj_backward(&d_kh, h_prime, &p.fb_k, &mut g.fb_k)?;
    d_hp.add_assign(&proj_backward(&d_vh, h_prime, &p.fb_v, &mut g.fb_v)?)?;

    // Phase 2: H' = LN2(H̃ + concat_l(P_l V_l) W_oᵀ)
    let (d_pre2, dg2, db2) = layer_norm_rows_backward(&d_hp, &p.ln2_gain, &c.inter.ln);
    g.ln2_gain.add_assign(&dg2)?;
    g.ln2_bias.add_assign(&db2)?;
    let h_tilde = &c.agg.h_tilde;
    let mut d_ht = d_pre2.clone();
    let d_concat = proj_backward(&d_pre2, &c.inter.concat, &p.mh_o, &mut g.mh_o)?;
    let dh = d / p.heads;
    let head_scale = 1.0 / (dh as f64).sqrt();
    let k = h_tilde.rows();
    let mut dq = Matrix::zeros(k, d);
    let mut dk = Matrix::zeros(k, d);
    let mut dv = Matrix::zeros(k, d);
    for (l, pl) in c.inter.probs.iter().enumerate() {
        let off = l * dh;
        let d_ol = d_concat.col_block(off, dh);
        let ql = c.inter.q.col_block(off, dh);
        let kl = c.inter.k.col_block(off, dh);
        let vl = c.inter.v.col_block(off, dh);
        let d_pl = d_ol.matmul_t(&vl)?;
        dv.set_col_block(off, &pl.t_matmul(&d_ol)?);
        let d_sl = row_softmax_backward(pl, &d_pl).scale(head_scale);
        dq.set_col_block(off, &d_sl.matmul(&kl)?);
        dk.set_col_block(off, &d_sl.t_matmul(&ql)?);
    }
    d_ht.add_assign(&proj_backward(&dq, h_tilde, &p.mh_q, &mut g.mh_q)?)?;
    d_ht.add_assign(&proj_backward(&dk, h_tilde, &p.mh_k, &mut g.mh_k)?)?;
    d_ht.add_assign(&proj_backward(&dv, h_tilde, &p.mh_v, &mut g.mh_v)?)?;

    // Phase 1: H̃ = LN1(H + A Vx), A = softmax(L), L = Qh Kxᵀ / √D
    let (d_pre1, dg1, db1) = layer_norm_rows_backward(&d_ht, &p.ln1_gain, &c.agg.ln);
    g.ln1_gain.add_assign(&dg1)?;
    g.ln1_bias.add_assign(&db1)?;
    g.tokens.add_assign(&d_pre1)?;
    let d_attn1 = d_pre1.matmul_t(&c.agg.vx)?;
    let d_vx = c.agg.attn.t_matmul(&d_pre1)?;
    let mut d_logits = row_softmax_backward(&c.agg.attn, &d_attn1);
    if div_weight != 0.0 {
        d_logits.add_assign(&diversity_loss_grad(&c.agg.logits, div_eps).scale(div_weight))?;
    }
    let d_raw = d_logits.scale(scale);
    let d_qh = d_raw.matmul(&c.agg.kx)?;
    let d_kx = d_raw.t_matmul(&c.agg.qh)?;
    let d_tok = proj_backward(&d_qh, &p.tokens, &p.w_q, &mut g.w_q)?;
    g.tokens.add_assign(&d_tok)?;
    dx.add_assign(&proj_backward(&d_kx, x, &p.w_k, &mut g.w_k)?)?;
    dx.add_assign(&proj_backward(&d_vx, x, &p.w_v, &mut g.w_v)?)?;
    Ok(dx)
}

/// Central-difference gradient of the total loss w.r.t. one named parameter.
pub fn finite_diff_grad(
    param_name: &str,
    model: &ModelParams,
    bag: &BagFeatures,
    lambda: f64,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let shape = model.get(param_name)?.shape();
    let mut probe = model.clone();
    let mut out = Matrix::zeros(shape.0, shape.1);
    for idx in 0..shape.0 * shape.1 {
        let orig = probe.get(param_name)?.data()[idx];
        probe.get_mut(param_name)?.data_mut()[idx] = orig + h;
        let up = probe.loss(&bag.features, bag.label, lambda)?.total;
        probe.get_mut(param_name)?.data_mut()[idx] = orig - h;
        let down = probe.loss(&bag.features, bag.label, lambda)?.total;
        probe.get_mut(param_name)?.data_mut()[idx] = orig;
        out.data_mut()[idx] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Relative error in the max norm: `max|a − f| / max(max|a|, max|f|, 1e-8)`.
///
/// Scaling by the largest entry of the tensor keeps entries whose true
/// gradient is near zero from turning finite-difference roundoff into a large
/// ratio.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(1e-8f64, |m, v| m.max(v.abs()));
    analytic.max_abs_diff(numeric) / scale
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Compares analytic and numeric gradients for every parameter.
pub fn check_gradients(
    model: &ModelParams,
    bag: &BagFeatures,
    lambda: f64,
    h: f64,
) -> Result<Vec<ParamCheck>> {
    let tape = model.forward_tape(&bag.features, bag.label, lambda)?;
    let grads = backward(1.0, &tape, model)?;
    let mut out = Vec::new();
    for (name, analytic) in grads.tensors() {
        let numeric = finite_diff_grad(name, model, bag, lambda, h)?;
        out.push(ParamCheck {
            name,
            max_rel_err: max_relative_error(analytic, &numeric),
            max_abs_err: analytic.max_abs_diff(&numeric),
        });
    }
    Ok(out)
}
