//! Per-bag training loop, evaluation, and the λ / K ablation sweeps.

use log::{info, warn};
use rand::seq::SliceRandom;

use crate::data::BagFeatures;
use crate::error::{Error, Result};
use crate::grad::backward;
use crate::heads::{cross_entropy_from_logits, total_loss, DEFAULT_ATTN_DIM};
use crate::hook::{hook_similarity, mean_offdiag_similarity, HookInitStrategy, DEFAULT_DIV_EPS};
use crate::metrics::classification_metrics;
use crate::model::{ModelConfig, ModelKind, ModelParams, Prediction};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::derived;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub hooks: usize,
    pub heads: usize,
    pub rounds: usize,
    pub lambda: f64,
    pub attn_dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hook_init: HookInitStrategy,
    pub classes: usize,
    pub div_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::HookMil,
            hooks: 8,
            heads: 4,
            rounds: 1,
            lambda: 0.2,
            attn_dim: DEFAULT_ATTN_DIM,
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 30,
            seed: 0,
            hook_init: HookInitStrategy::default(),
            classes: 2,
            div_eps: DEFAULT_DIV_EPS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a non-negative number, got {}", self.lambda)));
        }
        if self.hooks == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a non-negative number, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be a non-negative number, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            kind: self.model,
            dim,
            hooks: self.hooks,
            heads: self.heads,
            rounds: self.rounds,
            attn_dim: self.attn_dim,
            classes: self.classes,
            div_eps: self.div_eps,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub mean_ce: f64,
    pub mean_div: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    pub mean_offdiag_hook_similarity: f64,
}

pub const METRICS_HEADER: &str = "epoch,total_loss,ce,div,acc,macro_f1,macro_auc,hook_sim";

/// `%.9g`-style formatting: nine significant digits, trailing zeros trimmed.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{v:.8e}");
        let (mant, e) = s.split_once('e').expect("scientific format");
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}e{e}")
    }
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            fmt_sig(self.mean_total_loss),
            fmt_sig(self.mean_ce),
            fmt_sig(self.mean_div),
            fmt_sig(self.accuracy),
            fmt_sig(self.macro_f1),
            fmt_sig(self.macro_auc),
            fmt_sig(self.mean_offdiag_hook_similarity)
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in history {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

/// Forward pass on every bag of a split.
pub fn predict_split(model: &ModelParams, bags: &[BagFeatures]) -> Result<Vec<Prediction>> {
    bags.iter().map(|b| model.predict(&b.features)).collect()
}

/// Mean off-diagonal `|S_ij|` of the first hook round; 0 without hooks.
pub fn hook_similarity_of(pred: &Prediction, div_eps: f64) -> f64 {
    pred.hook
        .as_ref()
        .map(|h| mean_offdiag_similarity(&hook_similarity(&h.logits, div_eps)))
        .unwrap_or(0.0)
}

/// Losses and classification metrics on one split. `epoch` is only copied
/// into the result.
pub fn evaluate(model: &ModelParams, bags: &[BagFeatures], lambda: f64, epoch: usize) -> Result<EpochMetrics> {
    let preds = predict_split(model, bags)?;
    evaluate_predictions(model, bags, &preds, lambda, epoch)
}

pub fn evaluate_predictions(
    model: &ModelParams,
    bags: &[BagFeatures],
    preds: &[Prediction],
    lambda: f64,
    epoch: usize,
) -> Result<EpochMetrics> {
    if bags.is_empty() {
        return Err(Error::NoBags("evaluation split is empty".into()));
    }
    let n = bags.len() as f64;
    let (mut ce, mut div, mut sim) = (0.0, 0.0, 0.0);
    for (b, p) in bags.iter().zip(preds) {
        ce += cross_entropy_from_logits(&p.logits, b.label)?;
        div += p.div;
        sim += hook_similarity_of(p, model.div_eps);
    }
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let truth: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let m = classification_metrics(&probs, &truth, model.classes());
    let (mean_ce, mean_div) = (ce / n, div / n);
    Ok(EpochMetrics {
        epoch,
        mean_total_loss: total_loss(mean_ce, mean_div, lambda),
        mean_ce,
        mean_div,
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
        macro_auc: m.macro_auc,
        mean_offdiag_hook_similarity: sim / n,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation macro AUC.
    pub best: ModelParams,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: ModelParams,
    pub history: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.history.last().expect("at least one epoch")
    }

    pub fn best_metrics(&self) -> &EpochMetrics {
        &self.history[self.best_epoch - 1]
    }
}

/// Trains one model with batch size one. Parameters are drawn from stream 0
/// of `seed` and bag order from stream 1, so two runs with the same config
/// and data are identical.
pub fn train(config: &TrainConfig, train_bags: &[BagFeatures], val_bags: &[BagFeatures]) -> Result<TrainOutcome> {
    config.validate()?;
    if train_bags.is_empty() {
        return Err(Error::NoBags("training split is empty".into()));
    }
    if val_bags.is_empty() {
        return Err(Error::NoBags("validation split is empty".into()));
    }
    let dim = train_bags[0].features.cols();
    if let Some(b) = train_bags.iter().chain(val_bags).find(|b| b.features.cols() != dim) {
        return Err(Error::Shape(format!(
            "bag {} has {} features, expected {dim}",
            b.bag_id,
            b.features.cols()
        )));
    }
    let mut model = ModelParams::init(&config.model_config(dim), &config.hook_init, &mut derived(config.seed, 0))?;
    let mut order_rng = derived(config.seed, 1);
    let mut state = AdamState::new(&model);
    let adam = config.adam();
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        for &idx in &order {
            let bag = &train_bags[idx];
            let tape = model.forward_tape(&bag.features, bag.label, config.lambda)?;
            let nonfinite = || Error::NonFinite {
                bag_id: bag.bag_id.clone(),
                epoch,
            };
            if !tape.loss().total.is_finite() {
                return Err(nonfinite());
            }
            let grads = backward(1.0, &tape, &model)?;
            if !grads.is_finite() {
                return Err(nonfinite());
            }
            adam_step(&mut model, &grads, &mut state, &adam)?;
        }
        let m = evaluate(&model, val_bags, config.lambda, epoch)?;
        info!(
            "epoch {epoch}: loss {:.4} auc {:.4} acc {:.4}",
            m.mean_total_loss, m.macro_auc, m.accuracy
        );
        if best.as_ref().map_or(true, |(auc, _, _)| m.macro_auc > *auc) {
            best = Some((m.macro_auc, epoch, model.clone()));
        }
        history.push(m);
    }
    let (_, best_epoch, best) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}

/// One sweep cell: the swept value and either the final validation metrics
/// or the error that stopped that run.
#[derive(Debug)]
pub struct SweepCell {
    pub value: f64,
    pub result: Result<EpochMetrics>,
}

fn run_sweep(
    base: &TrainConfig,
    train_bags: &[BagFeatures],
    val_bags: &[BagFeatures],
    values: &[f64],
    apply: impl Fn(&mut TrainConfig, f64),
) -> Vec<SweepCell> {
    values
        .iter()
        .map(|&value| {
            let mut cfg = base.clone();
            apply(&mut cfg, value);
            let result = train(&cfg, train_bags, val_bags).map(|o| o.final_metrics().clone());
            if let Err(e) = &result {
                warn!("sweep cell {value} failed: {e}");
            }
            SweepCell { value, result }
        })
        .collect()
}

/// One model per λ, all from the same seed.
pub fn lambda_sweep(
    base: &TrainConfig,
    train_bags: &[BagFeatures],
    val_bags: &[BagFeatures],
    lambdas: &[f64],
) -> Result<Vec<SweepCell>> {
    if lambdas.len() < 2 {
        return Err(Error::Config("a λ sweep needs at least 2 values".into()));
    }
    Ok(run_sweep(base, train_bags, val_bags, lambdas, |c, v| c.lambda = v))
}

/// One model per hook count, all from the same seed.
pub fn hooks_sweep(
    base: &TrainConfig,
    train_bags: &[BagFeatures],
    val_bags: &[BagFeatures],
    hooks: &[usize],
) -> Result<Vec<SweepCell>> {
    if hooks.is_empty() {
        return Err(Error::Config("a K sweep needs at least one value".into()));
    }
    let values: Vec<f64> = hooks.iter().map(|&k| k as f64).collect();
    Ok(run_sweep(base, train_bags, val_bags, &values, |c, v| c.hooks = v as usize))
}

/// `<column>,acc,macro_f1,macro_auc,hook_sim,div,status`; failed cells keep
/// their row with empty metric fields and the error in `status`.
pub fn sweep_csv(column: &str, cells: &[SweepCell]) -> String {
    let mut s = format!("{column},acc,macro_f1,macro_auc,hook_sim,div,status\n");
    for c in cells {
        match &c.result {
            Ok(m) => s.push_str(&format!(
                "{},{},{},{},{},{},ok\n",
                c.value,
                fmt_sig(m.accuracy),
                fmt_sig(m.macro_f1),
                fmt_sig(m.macro_auc),
                fmt_sig(m.mean_offdiag_hook_similarity),
                fmt_sig(m.mean_div)
            )),
            Err(e) => s.push_str(&format!(
                "{},,,,,,error: {}\n",
                c.value,
                e.to_string().replace([',', '\n'], ";")
            )),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, SynthTaskConfig};

    fn small_data() -> crate::data::SynthDataset {
        gen_dataset(&SynthTaskConfig {
            dim: 8,
            n_min: 6,
            n_max: 12,
            train_bags: 12,
            val_bags: 8,
            test_bags: 4,
            ..SynthTaskConfig::default()
        })
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            hooks: 3,
            heads: 2,
            attn_dim: 4,
            epochs: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sig_formatting() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(0.5), "0.5");
        assert_eq!(fmt_sig(2.0 / 3.0), "0.666666667");
        assert_eq!(fmt_sig(123.456789012), "123.456789");
        assert_eq!(fmt_sig(-1.25e-7), "-1.25e-7");
        assert_eq!(fmt_sig(3.0e12), "3e12");
        assert_eq!(fmt_sig(0.000123456789012), "0.000123456789");
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = TrainConfig { lambda: -0.1, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { hooks: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let ds = small_data();
        let cfg = TrainConfig { lr: 0.0, ..small_config() };
        let out = train(&cfg, &ds.train, &ds.val).unwrap();
        let init = ModelParams::init(&cfg.model_config(8), &cfg.hook_init, &mut derived(cfg.seed, 0)).unwrap();
        assert_eq!(out.last.tensors(), init.tensors());
    }

    #[test]
    fn training_is_deterministic_and_loss_decomposes() {
        let ds = small_data();
        let cfg = small_config();
        let a = train(&cfg, &ds.train, &ds.val).unwrap();
        let b = train(&cfg, &ds.train, &ds.val).unwrap();
        assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history));
        assert_eq!(a.last.tensors(), b.last.tensors());
        for m in &a.history {
            assert!((m.mean_total_loss - (m.mean_ce + cfg.lambda * m.mean_div)).abs() < 1e-10);
            assert!(m.mean_div >= 0.0);
            assert!((0.0..=1.0).contains(&m.accuracy) && (0.0..=1.0).contains(&m.macro_auc));
        }
        let best = a.history.iter().map(|m| m.macro_auc).fold(f64::MIN, f64::max);
        assert_eq!(a.best_metrics().macro_auc, best);
        let first_best = a.history.iter().position(|m| m.macro_auc == best).unwrap() + 1;
        assert_eq!(a.best_epoch, first_best);
    }

    #[test]
    fn best_model_reproduces_logged_metrics() {
        let ds = small_data();
        let cfg = small_config();
        let out = train(&cfg, &ds.train, &ds.val).unwrap();
        let again = evaluate(&out.best, &ds.val, cfg.lambda, out.best_epoch).unwrap();
        assert_eq!(again.csv_row(), out.best_metrics().csv_row());
    }

    #[test]
    fn empty_splits_are_rejected() {
        let ds = small_data();
        assert!(matches!(train(&small_config(), &[], &ds.val), Err(Error::NoBags(_))));
        assert!(matches!(train(&small_config(), &ds.train, &[]), Err(Error::NoBags(_))));
    }

    #[test]
    fn nan_features_abort_with_bag_and_epoch() {
        let mut ds = small_data();
        ds.train[3].features.set(0, 0, f64::NAN);
        let id = ds.train[3].bag_id.clone();
        match train(&small_config(), &ds.train, &ds.val) {
            Err(Error::NonFinite { bag_id, epoch }) => {
                assert_eq!(bag_id, id);
                assert_eq!(epoch, 1);
            }
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn abmil_has_zero_divergence_columns() {
        let ds = small_data();
        let cfg = TrainConfig { model: ModelKind::Abmil, ..small_config() };
        let out = train(&cfg, &ds.train, &ds.val).unwrap();
        assert!(out.history.iter().all(|m| m.mean_div == 0.0 && m.mean_offdiag_hook_similarity == 0.0));
    }

    #[test]
    fn lambda_sweep_rows_echo_inputs() {
        let ds = small_data();
        let cfg = TrainConfig { epochs: 1, ..small_config() };
        let lambdas = [0.0, 0.1, 0.2, 0.5, 1.0];
        let cells = lambda_sweep(&cfg, &ds.train, &ds.val, &lambdas).unwrap();
        assert_eq!(cells.len(), 5);
        let csv = sweep_csv("lambda", &cells);
        let col: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(col, ["0", "0.1", "0.2", "0.5", "1"]);
        assert!(lambda_sweep(&cfg, &ds.train, &ds.val, &[0.2]).is_err());
    }

    #[test]
    fn hooks_sweep_keeps_failed_cells() {
        let ds = small_data();
        let cfg = TrainConfig { epochs: 1, ..small_config() };
        let bad = TrainConfig { lr: -1.0, ..cfg.clone() };
        let cells = hooks_sweep(&bad, &ds.train, &ds.val, &[2, 4]).unwrap();
        assert!(cells.iter().all(|c| c.result.is_err()));
        assert!(sweep_csv("hooks", &cells).lines().nth(1).unwrap().contains("error"));
        let cells = hooks_sweep(&cfg, &ds.train, &ds.val, &[1, 2]).unwrap();
        assert!(cells.iter().all(|c| c.result.is_ok()));
    }
}
