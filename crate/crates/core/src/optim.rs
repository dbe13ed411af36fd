//! Adam with bias correction. Weight decay is the classic L2 form: `wd·θ` is
//! added to the gradient before the moment updates.

use crate::error::{Error, Result};
use crate::grad::GradSet;
use crate::model::ModelParams;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradSet,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be non-negative, got {}", cfg.lr)));
    }
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    if param_tensors.len() != grad_tensors.len() || param_tensors.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "optimizer state has {} tensors, gradients {}, parameters {}",
            state.m.len(),
            grad_tensors.len(),
            param_tensors.len()
        )));
    }
    for (((_, p), (gname, g)), (m, v)) in param_tensors
        .iter_mut()
        .zip(&grad_tensors)
        .zip(state.m.iter().zip(&state.v))
    {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "{gname}: parameter {:?}, gradient {:?}, state {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((_, p), (_, g)), (m, v)) in param_tensors
        .iter_mut()
        .zip(&grad_tensors)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (((theta, &gr), mi), vi) in pd
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let grad = gr + cfg.weight_decay * *theta;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * grad;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * grad * grad;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    drop(param_tensors);
    params.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hook::HookInitStrategy;
    use crate::model::{ModelConfig, ModelKind};
    use crate::rng::seeded;

    fn model() -> ModelParams {
        let cfg = ModelConfig {
            kind: ModelKind::HookMil,
            dim: 4,
            hooks: 2,
            heads: 2,
            rounds: 1,
            attn_dim: 3,
            classes: 2,
            div_eps: 1e-6,
        };
        ModelParams::init(&cfg, &HookInitStrategy::default(), &mut seeded(1)).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = model();
        let before = p.clone();
        let g = GradSet::zeros_for(&p);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(p.tensors(), before.tensors());
    }

    #[test]
    fn first_step_moves_each_entry_by_about_lr() {
        let mut p = model();
        let before = p.clone();
        let mut g = GradSet::zeros_for(&p);
        for (i, (_, t)) in g.tensors_mut().into_iter().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v = if (i + j) % 2 == 0 { 0.37 } else { -2.5 };
            }
        }
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        // m̂ = g, v̂ = g², so the update is −lr·g/(|g| + eps).
        for (((_, a), (_, b)), (_, gr)) in p.tensors().iter().zip(before.tensors()).zip(g.tensors()) {
            for ((x, y), gv) in a.data().iter().zip(b.data()).zip(gr.data()) {
                let want = -1e-3 * gv / (gv.abs() + 1e-8);
                assert!((x - y - want).abs() < 1e-15);
            }
        }
        assert_eq!(st.step_count(), 1);
        assert_eq!(p.version(), before.version() + 1);
    }

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.beta1, c.beta2, c.eps), (1e-4, 1e-5, 0.9, 0.999, 1e-8));
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = model();
        let g = GradSet::zeros_for(&p);
        let mut other = p.clone();
        other.hook = None;
        let mut st = AdamState::new(&other);
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, &AdamConfig::default()),
            Err(Error::Shape(_))
        ));
    }
}
