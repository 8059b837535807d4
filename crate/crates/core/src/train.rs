//! Mini-batch Adam training with early stopping, evaluation helpers and the
//! λ sweep.

use crate::losses::{self, check_lambda, LossError};
use crate::net::{ClassifierModel, Variant, ATTENTION_SIZE};
use crate::supervision::{AttentionMask, PpeTypeConfig};
use crate::synth::Sample;
use crate::tensor::{adam_step, Scalar, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::variant")]
    pub variant: Variant,
    #[serde(default = "defaults::bce_epsilon")]
    pub bce_epsilon: f64,
}

mod defaults {
    use crate::net::Variant;
    pub fn lambda() -> f64 {
        0.5
    }
    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn max_epochs() -> usize {
        150
    }
    pub fn patience() -> usize {
        10
    }
    pub fn variant() -> Variant {
        Variant::SuperSam
    }
    pub fn bce_epsilon() -> f64 {
        crate::losses::DEFAULT_BCE_EPSILON
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: defaults::lambda(),
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            max_epochs: defaults::max_epochs(),
            patience: defaults::patience(),
            seed: 0,
            variant: defaults::variant(),
            bce_epsilon: defaults::bce_epsilon(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.bce_epsilon > 0.0 && self.bce_epsilon < 0.5) {
            return bad(format!("bce_epsilon must lie in (0, 0.5), got {}", self.bce_epsilon));
        }
        Ok(())
    }

    /// Whether the attention term enters the objective.
    pub fn supervises_attention(&self) -> bool {
        self.variant == Variant::SuperSam
    }
}

/// One training example: a normalized crop, its label and, when the
/// skeleton allows, the pseudo-ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor<f32>,
    pub label: u8,
    pub mask: Option<AttentionMask>,
}

impl Example {
    pub fn from_sample(sample: &Sample, ppe: &PpeTypeConfig) -> Self {
        Self {
            image: sample.image.clone(),
            label: sample.label,
            mask: sample.pseudo_gt(ppe, ATTENTION_SIZE, ATTENTION_SIZE),
        }
    }
}

pub fn examples(samples: &[Sample], ppe: &PpeTypeConfig) -> Vec<Example> {
    samples.iter().map(|s| Example::from_sample(s, ppe)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the best validation epoch.
    pub model: ClassifierModel<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// Tape nodes for a batch objective.
pub struct BatchGraph {
    pub loss: Var,
    pub class_loss: Var,
    pub attention_loss: Option<Var>,
}

/// Records the variant's objective for `batch` on `tape`, using parameter
/// nodes bound by the caller.
pub fn batch_objective<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &crate::net::BoundModel,
    batch: &[&Example],
    config: &TrainConfig,
) -> Result<BatchGraph> {
    let eps = T::from_f64(config.bce_epsilon);
    let mut probs = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    for ex in batch {
        let x = tape.constant(ex.image.cast());
        let out = bound.forward(tape, x)?;
        probs.push(out.probability);
        masks.extend(out.mask);
    }
    let labels: Vec<T> = batch.iter().map(|e| T::from_f64(e.label as f64)).collect();
    let class_loss = tape.bce_class(&probs, &labels, eps)?;
    if !config.supervises_attention() {
        return Ok(BatchGraph {
            loss: class_loss,
            class_loss,
            attention_loss: None,
        });
    }
    let targets: Vec<Option<Tensor<T>>> = batch.iter().map(|e| e.mask.as_ref().map(|m| m.to_tensor())).collect();
    let attention_loss = tape.bce_attention(&masks, &targets, eps)?;
    let lambda = T::from_f64(config.lambda);
    let loss = tape.weighted_sum(&[(class_loss, lambda), (attention_loss, T::one() - lambda)])?;
    Ok(BatchGraph {
        loss,
        class_loss,
        attention_loss: Some(attention_loss),
    })
}

/// Objective value and gradients for one batch, accumulated into the
/// model's parameter gradients. Returns the loss value.
pub fn accumulate_batch<T: Scalar>(model: &mut ClassifierModel<T>, batch: &[&Example], config: &TrainConfig) -> Result<T> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let graph = batch_objective(&mut tape, &bound, batch, config)?;
    let loss = tape.value(graph.loss).item();
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            what: "loss",
            epoch: 0,
            batch: 0,
        });
    }
    let grads = tape.backward(graph.loss)?;
    model.accumulate_grads(&bound, &grads);
    Ok(loss)
}

/// Loss of a batch without recording gradients.
pub fn batch_loss<T: Scalar>(model: &ClassifierModel<T>, batch: &[&Example], config: &TrainConfig) -> Result<T> {
    let mut tape = Tape::inference();
    let bound = model.bind(&mut tape);
    let graph = batch_objective(&mut tape, &bound, batch, config)?;
    Ok(tape.value(graph.loss).item())
}

/// Scores of a model on a labeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub probabilities: Vec<f64>,
    pub predictions: Vec<u8>,
    pub accuracy: f64,
    pub class_loss: f64,
    /// Mean per-cell BCE of the predicted masks against the pseudo-ground
    /// truth; `None` without an attention block or without targets.
    pub attention_bce: Option<f64>,
    /// Mean IoU between masks thresholded at 0.5 and the pseudo-ground truth.
    pub mask_iou: Option<f64>,
    /// The training objective of `config.variant` on this set.
    pub objective: f64,
}

pub fn evaluate(model: &ClassifierModel<f32>, data: &[Example], config: &TrainConfig) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    let mut probabilities = Vec::with_capacity(data.len());
    let mut predicted = Vec::new();
    let mut targets = Vec::new();
    for ex in data {
        let p = model.classify_crop(&ex.image)?;
        probabilities.push(p.probability as f64);
        if let Some(m) = p.mask {
            predicted.push(m);
            targets.push(ex.mask.clone());
        }
    }
    let labels: Vec<u8> = data.iter().map(|e| e.label).collect();
    let predictions: Vec<u8> = probabilities.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let correct = predictions.iter().zip(&labels).filter(|(a, b)| a == b).count();
    let class_loss = losses::bce_class(&probabilities, &labels, config.bce_epsilon)?;
    let has_targets = targets.iter().any(Option::is_some);
    let attention_bce = if has_targets {
        Some(losses::bce_attention(&predicted, &targets, config.bce_epsilon)?)
    } else {
        None
    };
    let ious: Vec<f64> = predicted
        .iter()
        .zip(&targets)
        .filter_map(|(p, t)| t.as_ref().map(|t| p.threshold(0.5).iou(t)))
        .collect();
    let mask_iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    let objective = if config.supervises_attention() {
        losses::joint_loss(class_loss, attention_bce.unwrap_or(0.0), config.lambda)?
    } else {
        class_loss
    };
    Ok(Evaluation {
        probabilities,
        predictions,
        accuracy: correct as f64 / data.len() as f64,
        class_loss,
        attention_bce,
        mask_iou,
        objective,
    })
}

/// Fresh model for `config`, initialized from its seed.
pub fn init_model(config: &TrainConfig) -> ClassifierModel<f32> {
    ClassifierModel::init(config.variant, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

pub fn train(train_set: &[Example], val_set: &[Example], config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(init_model(config), train_set, val_set, config)
}

/// Trains `model` in place of a fresh initialization.
pub fn train_from(
    mut model: ClassifierModel<f32>,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.variant != config.variant {
        return Err(TrainError::Config(format!(
            "model variant {} differs from configured {}",
            model.variant, config.variant
        )));
    }
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ClassifierModel<f32>)> = None;
    let mut wait = 0usize;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0f64;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = accumulate_batch(&mut model, &batch, config).map_err(|e| match e {
                TrainError::NonFinite { what, .. } => TrainError::NonFinite { what, epoch, batch: b + 1 },
                other => other,
            })?;
            adam_step(&mut model.params_mut(), config.learning_rate).map_err(|e| match e {
                TensorError::NonFiniteGradient(_) => TrainError::NonFinite {
                    what: "gradient",
                    epoch,
                    batch: b + 1,
                },
                other => other.into(),
            })?;
            total += loss as f64 * chunk.len() as f64;
        }
        let eval = evaluate(&model, val_set, config)?;
        if !eval.objective.is_finite() {
            return Err(TrainError::NonFinite {
                what: "validation loss",
                epoch,
                batch: 0,
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss: eval.objective,
            val_accuracy: eval.accuracy,
        });
        if best.as_ref().map_or(true, |(l, _, _)| eval.objective < *l) {
            best = Some((eval.objective, epoch, model.clone()));
            wait = 0;
        } else {
            wait += 1;
            if wait >= config.patience {
                break;
            }
        }
    }
    let (_, best_epoch, mut best_model) = best.expect("at least one epoch ran");
    best_model.zero_grad();
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
    })
}

/// One row of a λ sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

/// Trains SuPEr-SAM once per λ and picks the λ with the highest validation
/// accuracy (earliest on ties).
pub fn sweep_lambda(
    train_set: &[Example],
    val_set: &[Example],
    base: &TrainConfig,
    lambdas: &[f64],
) -> Result<(f64, Vec<SweepRow>)> {
    if lambdas.is_empty() {
        return Err(TrainError::Config("no lambda values to sweep".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let config = TrainConfig {
            lambda,
            variant: Variant::SuperSam,
            ..base.clone()
        };
        let out = train(train_set, val_set, &config)?;
        let best = out.best();
        rows.push(SweepRow {
            lambda,
            val_accuracy: best.val_accuracy,
            val_loss: best.val_loss,
        });
    }
    let chosen = rows
        .iter()
        .fold(None::<&SweepRow>, |acc, r| match acc {
            Some(a) if a.val_accuracy >= r.val_accuracy => Some(a),
            _ => Some(r),
        })
        .expect("non-empty")
        .lambda;
    Ok((chosen, rows))
}
