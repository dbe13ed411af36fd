//! The full bag classifier: optional hook block, attention pooling, and the
//! linear classifier, with a forward pass that records what backward needs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::heads::{
    attention_pool_cached, class_logits, cross_entropy_from_logits, effective_attn_dim,
    softmax_vec, PoolCache, PoolParams,
};
use crate::hook::{
    block_forward_cached, check_heads, BlockCache, HookForwardRecord, HookInitStrategy,
    HookParams, DEFAULT_DIV_EPS,
};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    HookMil,
    Abmil,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::HookMil => "hookmil",
            ModelKind::Abmil => "abmil",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hookmil" => Ok(ModelKind::HookMil),
            "abmil" => Ok(ModelKind::Abmil),
            other => Err(Error::Config(format!(
                "unknown model {other:?} (expected hookmil or abmil)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dim: usize,
    pub hooks: usize,
    pub heads: usize,
    pub rounds: usize,
    /// Requested attention dimension; clipped to `dim`.
    pub attn_dim: usize,
    pub classes: usize,
    pub div_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.attn_dim == 0 {
            return Err(Error::Config("attention dimension must be positive".into()));
        }
        if self.kind == ModelKind::HookMil {
            if self.hooks == 0 {
                return Err(Error::Config("K must be at least 1".into()));
            }
            if self.rounds == 0 {
                return Err(Error::Config("rounds must be at least 1".into()));
            }
            check_heads(self.dim, self.heads)?;
        }
        if !(self.div_eps >= 0.0) {
            return Err(Error::Config("diversity eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// All learnable parameters. `version` increments on every optimizer update
/// so a tape recorded before an update cannot be replayed after it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub hook: Option<HookParams>,
    pub pool: PoolParams,
    pub rounds: usize,
    pub div_eps: f64,
    version: u64,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        hook_init: &HookInitStrategy,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let hook = match config.kind {
            ModelKind::HookMil => Some(HookParams::new(
                config.hooks,
                config.dim,
                config.heads,
                hook_init,
                rng,
            )?),
            ModelKind::Abmil => None,
        };
        let pool = PoolParams::new(
            config.dim,
            effective_attn_dim(config.attn_dim, config.dim),
            config.classes,
            rng,
        )?;
        Ok(Self {
            hook,
            pool,
            rounds: config.rounds.max(1),
            div_eps: config.div_eps,
            version: 0,
        })
    }

    pub fn from_parts(hook: Option<HookParams>, pool: PoolParams, rounds: usize) -> Self {
        Self {
            hook,
            pool,
            rounds: rounds.max(1),
            div_eps: DEFAULT_DIV_EPS,
            version: 0,
        }
    }

    pub fn kind(&self) -> ModelKind {
        if self.hook.is_some() {
            ModelKind::HookMil
        } else {
            ModelKind::Abmil
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn dim(&self) -> usize {
        self.pool.dim()
    }

    pub fn classes(&self) -> usize {
        self.pool.classes()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hook: self.hook.as_ref().map(HookParams::zeros_like),
            pool: self.pool.zeros_like(),
            rounds: self.rounds,
            div_eps: self.div_eps,
            version: 0,
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = self.hook.as_ref().map(HookParams::tensors).unwrap_or_default();
        out.extend(self.pool.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = self
            .hook
            .as_mut()
            .map(HookParams::tensors_mut)
            .unwrap_or_default();
        out.extend(self.pool.tensors_mut());
        out
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Full forward pass, keeping every intermediate.
    pub fn forward_tape(&self, x: &Matrix, label: usize, lambda: f64) -> Result<TapeRecord> {
        if x.rows() == 0 {
            return Err(Error::EmptyBag);
        }
        if x.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "bag has {} features, model expects {}",
                x.cols(),
                self.dim()
            )));
        }
        let mut blocks = Vec::new();
        let mut div = 0.0;
        let mut features = x.clone();
        if let Some(hook) = &self.hook {
            for _ in 0..self.rounds {
                let cache = block_forward_cached(&features, hook, self.div_eps)?;
                div += cache.div_loss;
                features = cache.fb.x_prime.clone();
                blocks.push(cache);
            }
            div /= self.rounds as f64;
        }
        let pool = attention_pool_cached(&features, &self.pool)?;
        let logits = class_logits(&pool.z, &self.pool)?;
        let ce = cross_entropy_from_logits(&logits, label)?;
        let probs = softmax_vec(&logits);
        Ok(TapeRecord {
            version: self.version,
            blocks,
            pooled_input: features,
            pool,
            logits,
            probs,
            label,
            lambda,
            ce,
            div,
        })
    }

    /// Prediction without a label.
    pub fn predict(&self, x: &Matrix) -> Result<Prediction> {
        // Label 0 is always valid here; the loss terms are discarded.
        let tape = self.forward_tape(x, 0, 0.0)?;
        Ok(tape.prediction())
    }

    /// `(ce, div, ce + λ·div)` for one labelled bag.
    pub fn loss(&self, x: &Matrix, label: usize, lambda: f64) -> Result<LossParts> {
        Ok(self.forward_tape(x, label, lambda)?.loss())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub div: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub attention: Vec<f64>,
    pub z: Vec<f64>,
    pub div: f64,
    /// First hook round, when the model has a hook block.
    pub hook: Option<HookForwardRecord>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        crate::heads::argmax(&self.probs)
    }
}

/// Cached forward intermediates for one bag.
#[derive(Clone, Debug)]
pub struct TapeRecord {
    pub(crate) version: u64,
    pub(crate) blocks: Vec<BlockCache>,
    pub(crate) pooled_input: Matrix,
    pub(crate) pool: PoolCache,
    pub(crate) logits: Vec<f64>,
    pub(crate) probs: Vec<f64>,
    pub(crate) label: usize,
    pub(crate) lambda: f64,
    pub(crate) ce: f64,
    pub(crate) div: f64,
}

impl TapeRecord {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn loss(&self) -> LossParts {
        LossParts {
            ce: self.ce,
            div: self.div,
            total: crate::heads::total_loss(self.ce, self.div, self.lambda),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn hook_records(&self) -> Vec<HookForwardRecord> {
        self.blocks.iter().map(BlockCache::record).collect()
    }

    pub fn prediction(&self) -> Prediction {
        Prediction {
            probs: self.probs.clone(),
            logits: self.logits.clone(),
            attention: self.pool.attention.clone(),
            z: self.pool.z.clone(),
            div: self.div,
            hook: self.blocks.first().map(BlockCache::record),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::abmil_forward;
    use crate::rng::seeded;
    use crate::tensor::uniform_fill;

    fn config(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            dim: 8,
            hooks: 3,
            heads: 2,
            rounds: 1,
            attn_dim: 128,
            classes: 2,
            div_eps: DEFAULT_DIV_EPS,
        }
    }

    #[test]
    fn attention_dim_is_clipped_to_feature_dim() {
        let m = ModelParams::init(&config(ModelKind::Abmil), &HookInitStrategy::default(), &mut seeded(1))
            .unwrap();
        assert_eq!(m.pool.v_a.shape(), (8, 8));
    }

    #[test]
    fn disabled_hook_block_reduces_to_baseline() {
        let m = ModelParams::init(&config(ModelKind::HookMil), &HookInitStrategy::default(), &mut seeded(2))
            .unwrap();
        let x = uniform_fill(9, 8, 1.0, &mut seeded(3));
        let mut baseline = m.clone();
        baseline.hook = None;
        let pred = baseline.predict(&x).unwrap();
        let want = abmil_forward(&x, &m.pool).unwrap();
        assert_eq!(pred.probs, want.probs);
        assert_eq!(pred.attention, want.attention);
    }

    #[test]
    fn param_lookup() {
        let m = ModelParams::init(&config(ModelKind::HookMil), &HookInitStrategy::default(), &mut seeded(4))
            .unwrap();
        assert_eq!(m.get("hook.tokens").unwrap().shape(), (3, 8));
        assert!(matches!(m.get("nope"), Err(Error::UnknownParam(_))));
        let names: Vec<_> = m.tensors().iter().map(|(n, _)| *n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn config_validation() {
        let mut c = config(ModelKind::HookMil);
        c.heads = 3;
        assert!(c.validate().is_err());
        c = config(ModelKind::HookMil);
        c.hooks = 0;
        assert!(c.validate().is_err());
        c = config(ModelKind::Abmil);
        c.hooks = 0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn rounds_stack_the_block() {
        let mut c = config(ModelKind::HookMil);
        c.rounds = 2;
        let m = ModelParams::init(&c, &HookInitStrategy::default(), &mut seeded(5)).unwrap();
        let x = uniform_fill(6, 8, 1.0, &mut seeded(6));
        let tape = m.forward_tape(&x, 1, 0.2).unwrap();
        let recs = tape.hook_records();
        assert_eq!(recs.len(), 2);
        let second = crate::hook::hook_forward(&recs[0].x_prime, m.hook.as_ref().unwrap(), m.div_eps)
            .unwrap();
        assert_eq!(second.x_prime, recs[1].x_prime);
        let l = tape.loss();
        assert!((l.div - (recs[0].div_loss + recs[1].div_loss) / 2.0).abs() < 1e-15);
    }
}
