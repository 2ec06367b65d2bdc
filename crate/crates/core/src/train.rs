//! Cross-entropy training with Adam and validation-based checkpoint selection.

use ndarray::{Array1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    backward, forward, forward_eval, init_params, Gradients, Mode, ModelConfig, ModelParams,
    BLOCK_NAMES,
};
use crate::signal_io::{DatasetSplit, Epoch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            learning_rate: 1e-4,
            epochs: 80,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        for (name, beta) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::invalid(format!(
                    "Adam {name} = {beta} outside [0, 1)"
                )));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// `probs - onehot(label)`: the gradient with respect to the logits.
    pub grad_logits: [f64; 2],
}

/// Cross-entropy of a two-class softmax output.
pub fn cross_entropy(probs: &Array1<f64>, label: usize) -> Result<CrossEntropy> {
    if probs.len() != 2 {
        return Err(Error::Shape(format!(
            "expected 2 class probabilities, got {}",
            probs.len()
        )));
    }
    if label >= 2 {
        return Err(Error::invalid(format!(
            "label {label} out of range for 2 classes"
        )));
    }
    let mut grad = [probs[0], probs[1]];
    grad[label] -= 1.0;
    Ok(CrossEntropy {
        loss: -probs[label].ln(),
        grad_logits: grad,
    })
}

/// Loss computed from logits via log-sum-exp; more accurate than going
/// through the probabilities when the loss is tiny.
fn loss_from_logits(logits: &Array1<f64>, label: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
    lse - logits[label]
}

/// Adam moments; `m` and `v` mirror the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: &ModelConfig) -> Self {
        AdamState {
            m: Gradients::zeros(config),
            v: Gradients::zeros(config),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ModelParams,
    grads: &Gradients,
    config: &TrainConfig,
) -> Result<()> {
    for (name, block) in BLOCK_NAMES.iter().zip(grads.blocks()) {
        if let Some(i) = block.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{i}]")));
        }
    }
    state.t += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let m_corr = 1.0 - b1.powi(state.t as i32);
    let v_corr = 1.0 - b2.powi(state.t as i32);
    let lr = config.learning_rate;
    let eps = config.adam_eps;

    let ms = state.m.blocks_mut();
    let vs = state.v.blocks_mut();
    for (((theta, g), m), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(ms)
        .zip(vs)
    {
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / m_corr;
            let v_hat = v[i] / v_corr;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based training epoch.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

impl EpochRecord {
    /// `epoch,<n>,train_loss,<v>,val_loss,<v>,val_acc,<v>`
    pub fn log_line(&self) -> String {
        format!(
            "epoch,{},train_loss,{},val_loss,{},val_acc,{}",
            self.epoch, self.train_loss, self.val_loss, self.val_accuracy
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose parameters are in `best_checkpoint`.
    pub best_epoch: usize,
    pub best_checkpoint: ModelParams,
    pub train_config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct HistoryJson {
    train_config: TrainConfig,
    model_config: ModelConfig,
    best_epoch: usize,
    best_val_accuracy: f64,
    best_val_loss: f64,
    epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn best_record(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }

    /// JSON summary (without the parameters, which go to a checkpoint file).
    pub fn to_json(&self) -> String {
        let best = self.best_record();
        let doc = HistoryJson {
            train_config: self.train_config,
            model_config: self.best_checkpoint.config,
            best_epoch: self.best_epoch,
            best_val_accuracy: best.val_accuracy,
            best_val_loss: best.val_loss,
            epochs: self.records.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("history serializes") + "\n"
    }
}

/// Mean loss and accuracy of `params` over `epochs` in eval mode.
pub fn evaluate_loss(params: &ModelParams, epochs: &[Epoch]) -> Result<(f64, f64)> {
    let results: Vec<(f64, bool)> = epochs
        .par_iter()
        .map(|e| {
            let cache = forward_eval(params, e.data.view())?;
            let label = e.label.index();
            let pred = predicted_class(&cache.probs);
            Ok((loss_from_logits(&cache.logits, label), pred == label))
        })
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
    let acc = results.iter().filter(|r| r.1).count() as f64 / n;
    Ok((loss, acc))
}

/// Argmax with ties going to class 0.
pub fn predicted_class(probs: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

// Salts keep the shuffle and dropout streams apart from model init.
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;
const DROPOUT_SALT: u64 = 0x4452_4f50_4f55_5431;

fn item_loss_and_grads(
    params: &ModelParams,
    x: ArrayView2<f64>,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients)> {
    let cache = forward(params, x, Mode::Train, rng)?;
    let ce = cross_entropy(&cache.probs, label)?;
    let loss = loss_from_logits(&cache.logits, label);
    let grads = backward(&cache, params, &Array1::from(ce.grad_logits.to_vec()))?;
    Ok((loss, grads))
}

/// Trains from `train_config.seed`, reporting each finished epoch to `observer`.
pub fn train_with_observer(
    data: &DatasetSplit,
    train_config: &TrainConfig,
    model_config: ModelConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    train_config.validate()?;
    model_config.validate()?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::invalid(format!(
            "training needs non-empty train and validation partitions (got {} and {} epochs)",
            data.train.len(),
            data.validation.len()
        )));
    }
    if model_config.classes != 2 {
        return Err(Error::invalid("only two-class models can be trained"));
    }

    let mut params = init_params(train_config.seed, model_config)?;
    let mut adam = AdamState::new(&model_config);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::with_capacity(train_config.epochs);
    let mut best: Option<(usize, f64, f64, ModelParams)> = None;
    let mut item_counter: u64 = 0;

    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(train_config.batch_size).enumerate() {
            let first_item = item_counter;
            item_counter += batch.len() as u64;
            // One dropout stream per item keeps results independent of
            // how the batch is scheduled.
            let per_item: Vec<(f64, Gradients)> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ DROPOUT_SALT);
                    rng.set_stream(first_item + j as u64);
                    let e = &data.train[idx];
                    item_loss_and_grads(&params, e.data.view(), e.label.index(), &mut rng)
                })
                .collect::<Result<_>>()?;

            let mut grads = Gradients::zeros(&model_config);
            let mut batch_loss = 0.0;
            for (loss, g) in &per_item {
                batch_loss += loss;
                grads.add_assign(g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx + 1,
                    loss: batch_loss / batch.len() as f64,
                });
            }
            loss_sum += batch_loss;
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut adam, &mut params, &grads, train_config).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch,
                    batch: batch_idx + 1,
                    loss: batch_loss / batch.len() as f64,
                },
                other => other,
            })?;
        }

        let (val_loss, val_accuracy) = evaluate_loss(&params, &data.validation)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            val_loss,
            val_accuracy,
        };
        observer(&record);
        records.push(record);

        let improved = match &best {
            None => true,
            Some((_, acc, loss, _)) => {
                val_accuracy > *acc || (val_accuracy == *acc && val_loss < *loss)
            }
        };
        if improved {
            best = Some((epoch, val_accuracy, val_loss, params.clone()));
        }
    }

    let (best_epoch, _, _, best_checkpoint) = best.expect("at least one epoch ran");
    Ok(TrainHistory {
        records,
        best_epoch,
        best_checkpoint,
        train_config: *train_config,
    })
}

pub fn train(
    data: &DatasetSplit,
    train_config: &TrainConfig,
    model_config: ModelConfig,
) -> Result<TrainHistory> {
    train_with_observer(data, train_config, model_config, &mut |_| {})
}

/// Largest parameter count [`finite_diff_check`] accepts.
pub const FINITE_DIFF_MAX_PARAMS: usize = 10_000;

/// Worst relative disagreement between analytic gradients and central
/// differences of the eval-mode loss, over every parameter.
///
/// Per entry the error is `|a - n| / max(|a|, |n|)`, and zero when both
/// are exactly zero.
pub fn finite_diff_check(params: &ModelParams, epoch: &Epoch, eps: f64) -> Result<f64> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let n_params = params.param_count().total();
    if n_params > FINITE_DIFF_MAX_PARAMS {
        return Err(Error::invalid(format!(
            "{n_params} parameters is too many for a finite-difference check"
        )));
    }
    let label = epoch.label.index();
    let x = epoch.data.view();
    let cache = forward_eval(params, x)?;
    let ce = cross_entropy(&cache.probs, label)?;
    let analytic = backward(&cache, params, &Array1::from(ce.grad_logits.to_vec()))?;

    let loss_at = |p: &ModelParams| -> Result<f64> {
        Ok(loss_from_logits(&forward_eval(p, x)?.logits, label))
    };

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (b, analytic_block) in analytic.blocks().iter().enumerate() {
        for (i, &a) in analytic_block.iter().enumerate() {
            let orig = probe.blocks()[b][i];
            probe.blocks_mut()[b][i] = orig + eps;
            let plus = loss_at(&probe)?;
            probe.blocks_mut()[b][i] = orig - eps;
            let minus = loss_at(&probe)?;
            probe.blocks_mut()[b][i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs());
            if denom > 0.0 {
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_io::Label;
    use ndarray::{array, Array2};
    use rand::Rng;

    #[test]
    fn cross_entropy_cases() {
        let ce = cross_entropy(&array![0.5, 0.5], 0).unwrap();
        assert!((ce.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(ce.grad_logits, [-0.5, 0.5]);

        let ce = cross_entropy(&array![1.0 - 1e-12, 1e-12], 0).unwrap();
        assert!(ce.loss >= 0.0 && ce.loss < 1e-11);

        let ce = cross_entropy(&array![0.9, 0.1], 1).unwrap();
        assert!((ce.loss - std::f64::consts::LN_10).abs() < 1e-12);
        assert!((ce.grad_logits[0] - 0.9).abs() < 1e-15);
        assert!((ce.grad_logits[1] + 0.9).abs() < 1e-15);

        assert!(cross_entropy(&array![0.5, 0.5], 2).is_err());
        assert_eq!(cross_entropy(&array![0.0, 1.0], 1).unwrap().loss, 0.0);
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig::new(2, 3, 3, 2)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        for g in [1e-3, 0.5, -7.0] {
            let mut p = ModelParams::zeros(tiny_config()).unwrap();
            let mut state = AdamState::new(&p.config);
            let mut grads = Gradients::zeros(&p.config);
            grads.conv_bias[0] = g;
            adam_step(&mut state, &mut p, &grads, &cfg).unwrap();
            // |Δθ| = lr·|g| / (|g| + ε) at t = 1.
            let expected = -cfg.learning_rate * g / (g.abs() + cfg.adam_eps);
            assert!(
                (p.conv_bias[0] - expected).abs() < 1e-18,
                "{}",
                p.conv_bias[0]
            );
            assert_eq!(p.conv_bias[1], 0.0);
            assert_eq!(state.t, 1);
        }
    }

    #[test]
    fn adam_zero_gradient_and_independence() {
        let cfg = TrainConfig::default();
        let mut p = init_params(1, tiny_config()).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p.config);
        adam_step(&mut state, &mut p, &Gradients::zeros(&tiny_config()), &cfg).unwrap();
        assert_eq!(p, before);

        let mut grads = Gradients::zeros(&p.config);
        grads.conv_bias.fill(0.25);
        grads.fc_bias.fill(0.25);
        let mut q = ModelParams::zeros(tiny_config()).unwrap();
        let mut state = AdamState::new(&q.config);
        for _ in 0..3 {
            adam_step(&mut state, &mut q, &grads, &cfg).unwrap();
        }
        assert_eq!(q.conv_bias[0], q.fc_bias[1]);
    }

    #[test]
    fn adam_update_signs_ignore_gradient_scale() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut grads = Gradients::zeros(&tiny_config());
        for block in grads.blocks_mut() {
            block
                .iter_mut()
                .for_each(|g| *g = rng.random_range(-1.0..1.0));
        }
        let deltas = |scale: f64| -> Vec<f64> {
            let mut p = ModelParams::zeros(tiny_config()).unwrap();
            let mut state = AdamState::new(&tiny_config());
            let mut g = grads.clone();
            g.scale(scale);
            for _ in 0..5 {
                adam_step(&mut state, &mut p, &g, &cfg).unwrap();
            }
            p.blocks().iter().flat_map(|b| b.to_vec()).collect()
        };
        let a = deltas(1.0);
        let b = deltas(1000.0);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.signum(), y.signum());
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let cfg = TrainConfig::default();
        let mut p = ModelParams::zeros(tiny_config()).unwrap();
        let mut state = AdamState::new(&p.config);
        let mut grads = Gradients::zeros(&p.config);
        grads.fc_weight[[1, 2]] = f64::NAN;
        let err = adam_step(&mut state, &mut p, &grads, &cfg).unwrap_err();
        assert!(err.to_string().contains("fc_weight"), "{err}");
        assert_eq!(state.t, 0);
    }

    fn random_epoch(channels: usize, t: usize, seed: u64, label: Label) -> Epoch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Epoch {
            data: Array2::from_shape_simple_fn((channels, t), || rng.random_range(-1.0..1.0)),
            label,
            subject_id: "s".into(),
            epoch_index: 0,
        }
    }

    #[test]
    fn finite_differences_agree() {
        let p = init_params(11, ModelConfig::new(2, 2, 3, 2)).unwrap();
        let e = random_epoch(2, 8, 12, Label::Pd);
        let err = finite_diff_check(&p, &e, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn finite_differences_zero_input() {
        let mut p = init_params(2, ModelConfig::new(2, 2, 3, 2)).unwrap();
        // Keep pre-activations off the ReLU kink at exactly zero.
        p.conv_bias = array![0.1, -0.2];
        let mut e = random_epoch(2, 8, 1, Label::Control);
        e.data.fill(0.0);
        let cache = forward_eval(&p, e.data.view()).unwrap();
        let ce = cross_entropy(&cache.probs, 0).unwrap();
        let g = backward(&cache, &p, &Array1::from(ce.grad_logits.to_vec())).unwrap();
        assert!(g.conv_weight.iter().all(|&v| v == 0.0));
        assert!(finite_diff_check(&p, &e, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn finite_differences_preconditions() {
        let p = init_params(2, ModelConfig::new(2, 2, 3, 2)).unwrap();
        let e = random_epoch(2, 8, 1, Label::Control);
        assert!(finite_diff_check(&p, &e, 0.0).is_err());
        let big = init_params(2, ModelConfig::default()).unwrap();
        let e = random_epoch(59, 8, 1, Label::Control);
        assert!(finite_diff_check(&big, &e, 1e-5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                adam_beta2: 1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn predicted_class_ties_to_zero() {
        assert_eq!(predicted_class(&array![0.5, 0.5]), 0);
        assert_eq!(predicted_class(&array![0.4, 0.6]), 1);
    }

    #[test]
    fn log_line_format() {
        let r = EpochRecord {
            epoch: 3,
            train_loss: 0.5,
            val_loss: 0.25,
            val_accuracy: 1.0,
        };
        assert_eq!(
            r.log_line(),
            "epoch,3,train_loss,0.5,val_loss,0.25,val_acc,1"
        );
    }
}
