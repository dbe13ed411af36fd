//! WebAssembly bindings for the browser demo in `web/`.
//!
//! Every export is a pure function of its arguments, so the same calls run
//! natively under `cargo test`.

use hookmil::hook::{diversity_loss, hook_forward, hook_similarity, induced_dependency, HookInitStrategy, HookParams};
use hookmil::rng::derived;
use hookmil::tensor::{row_softmax, uniform_fill, Matrix};
use hookmil::theory::{numerical_rank, softmax_jacobian_norm, DEFAULT_RANK_TAU, PUBLISHED_JACOBIAN_BOUND};
use wasm_bindgen::prelude::*;

fn js_err(e: hookmil::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One hook round on a random bag.
#[wasm_bindgen]
pub struct HookView {
    hooks: usize,
    instances: usize,
    attention: Vec<f64>,
    feedback: Vec<f64>,
    singular_values: Vec<f64>,
    rank: usize,
    diversity: f64,
}

#[wasm_bindgen]
impl HookView {
    #[wasm_bindgen(getter)]
    pub fn hooks(&self) -> usize {
        self.hooks
    }

    #[wasm_bindgen(getter)]
    pub fn instances(&self) -> usize {
        self.instances
    }

    /// Hook → instance attention, K×N row-major.
    #[wasm_bindgen(getter)]
    pub fn attention(&self) -> Vec<f64> {
        self.attention.clone()
    }

    /// Instance → hook attention, N×K row-major.
    #[wasm_bindgen(getter)]
    pub fn feedback(&self) -> Vec<f64> {
        self.feedback.clone()
    }

    /// Singular values of the induced N×N dependency, descending.
    #[wasm_bindgen(getter)]
    pub fn singular_values(&self) -> Vec<f64> {
        self.singular_values.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn rank(&self) -> usize {
        self.rank
    }

    #[wasm_bindgen(getter)]
    pub fn diversity(&self) -> f64 {
        self.diversity
    }
}

/// Random bag of `n` instances in `d` dimensions through a block with `k`
/// hooks drawn at `hook_std`. `clusters` > 0 places instances around that many
/// centres so the attention maps show structure.
#[wasm_bindgen]
pub fn hook_view(n: usize, k: usize, d: usize, hook_std: f64, clusters: usize, seed: u64) -> Result<HookView, JsError> {
    let heads = if d % 2 == 0 { 2 } else { 1 };
    let mut rng = derived(seed, 0);
    let params = HookParams::new(k, d, heads, &HookInitStrategy::TruncNormal(hook_std), &mut rng).map_err(js_err)?;
    let noise = uniform_fill(n, d, 1.0, &mut derived(seed, 1));
    let x = if clusters == 0 {
        noise
    } else {
        let centres = uniform_fill(clusters, d, 3.0, &mut derived(seed, 2));
        let mut x = noise;
        for i in 0..n {
            let c = centres.row(i % clusters).to_vec();
            for (v, cv) in x.row_mut(i).iter_mut().zip(c) {
                *v += cv;
            }
        }
        x
    };
    let rec = hook_forward(&x, &params, hookmil::hook::DEFAULT_DIV_EPS).map_err(js_err)?;
    let a = induced_dependency(&rec.a_x2h, &rec.a_h2x).map_err(js_err)?;
    let r = numerical_rank(&a, DEFAULT_RANK_TAU, k).map_err(js_err)?;
    Ok(HookView {
        hooks: k,
        instances: n,
        attention: rec.a_h2x.data().to_vec(),
        feedback: rec.a_x2h.data().to_vec(),
        singular_values: r.singular_values,
        rank: r.numerical_rank,
        diversity: rec.div_loss,
    })
}

/// Diversity penalty for `k` hook logit rows that share a common component
/// with weight `collapse` ∈ [0, 1]: 0 gives independent rows, 1 identical
/// rows. Returns `[loss, S_00, S_01, ...]` with the K×K similarity matrix.
#[wasm_bindgen]
pub fn diversity_explorer(k: usize, n: usize, collapse: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    if k == 0 || n == 0 {
        return Err(JsError::new("K and N must be positive"));
    }
    let t = collapse.clamp(0.0, 1.0);
    let own = uniform_fill(k, n, 1.0, &mut derived(seed, 3));
    let common = uniform_fill(1, n, 1.0, &mut derived(seed, 4));
    let mut logits = Matrix::zeros(k, n);
    for i in 0..k {
        for j in 0..n {
            logits.set(i, j, (1.0 - t) * own.get(i, j) + t * common.get(0, j));
        }
    }
    let eps = hookmil::hook::DEFAULT_DIV_EPS;
    let mut out = vec![diversity_loss(&logits, eps)];
    out.extend_from_slice(hook_similarity(&logits, eps).data());
    Ok(out)
}

/// `[‖Diag(p) − ppᵀ‖₂, p_0, p_1, ...]` for `p = softmax(logits / temperature)`.
#[wasm_bindgen]
pub fn jacobian_norm(logits: &[f64], temperature: f64) -> Result<Vec<f64>, JsError> {
    if logits.is_empty() {
        return Err(JsError::new("need at least one logit"));
    }
    if !(temperature > 0.0) {
        return Err(JsError::new("temperature must be positive"));
    }
    let z = Matrix::from_vec(1, logits.len(), logits.iter().map(|v| v / temperature).collect()).map_err(js_err)?;
    let p = row_softmax(&z);
    let norm = softmax_jacobian_norm(p.data()).map_err(js_err)?;
    let mut out = vec![norm];
    out.extend_from_slice(p.data());
    Ok(out)
}

/// The bound stated in the published analysis, for display next to the
/// measured value.
#[wasm_bindgen]
pub fn published_jacobian_bound() -> f64 {
    PUBLISHED_JACOBIAN_BOUND
}
