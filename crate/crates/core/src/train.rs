//! Mini-batch training for the autoencoder and the classifier, plus the
//! three transfer regimes and the surrogate pretraining task.

use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{synth, Dataset, DatasetIndex};
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::loss::{mse_loss, softmax_cross_entropy};
use crate::model::{build_classifier, glorot_init, ClassifierConfig, ModelKind, ModelSpec};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

// Independent RNG streams derived from the run seed.
const SPLIT_STREAM: u64 = 0x5151_0001;
const SHUFFLE_STREAM: u64 = 0x5151_0002;
const HEAD_INIT_STREAM: u64 = 0x5151_0003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub image_size: usize,
    pub shuffle: bool,
    /// Fraction of the corpus used for training; the rest is validation.
    pub train_fraction: f64,
    /// Log a progress line every this many epochs (0 = never).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            image_size: 64,
            shuffle: true,
            train_fraction: 0.9,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.image_size == 0 {
            return Err(Error::InvalidConfig("image size must be positive".into()));
        }
        Ok(())
    }
}

/// Disjoint, exhaustive train/validation split of `0..n`, a pure function
/// of `(n, fraction, seed)`. Both sides are nonempty whenever `n >= 2`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let n_train = if n < 2 {
        n
    } else {
        ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1)
    };
    let val = idx.split_off(n_train);
    (idx, val)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// Transfer learning: copy the base trunk and freeze it; train the head.
    A1,
    /// Transfer learning with every layer fine-tuned.
    A2,
    /// Random initialization throughout.
    A3,
}

impl Regime {
    pub fn needs_base(self) -> bool {
        matches!(self, Regime::A1 | Regime::A2)
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a1" => Ok(Regime::A1),
            "a2" => Ok(Regime::A2),
            "a3" => Ok(Regime::A3),
            other => Err(Error::InvalidConfig(format!(
                "unknown regime {other:?} (expected a1, a2 or a3)"
            ))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::A1 => "a1",
            Regime::A2 => "a2",
            Regime::A3 => "a3",
        })
    }
}

/// Layers before the first `Flatten`: the convolutional trunk.
fn trunk_len(model: &ModelSpec<f32>) -> usize {
    model
        .layers
        .iter()
        .position(|l| matches!(l, Layer::Flatten))
        .unwrap_or(model.layers.len())
}

fn check_trunk_compatible(model: &ModelSpec<f32>, base: &ModelSpec<f32>) -> Result<usize> {
    let trunk = trunk_len(model);
    if base.input_shape != model.input_shape {
        return Err(Error::ArchitectureMismatch {
            layer: 0,
            reason: format!(
                "input shape {:?} differs from base {:?}",
                model.input_shape, base.input_shape
            ),
        });
    }
    for i in 0..trunk {
        let Some(b) = base.layers.get(i) else {
            return Err(Error::ArchitectureMismatch {
                layer: i,
                reason: "base model has no such layer".into(),
            });
        };
        let m = &model.layers[i];
        let same = match (m, b) {
            (Layer::Conv2d(x), Layer::Conv2d(y)) => {
                x.weight.shape() == y.weight.shape() && x.activation == y.activation
            }
            _ => m.kind() == b.kind(),
        };
        if !same {
            return Err(Error::ArchitectureMismatch {
                layer: i,
                reason: format!("{} in model vs {} in base", m.kind(), b.kind()),
            });
        }
    }
    Ok(trunk)
}

/// Prepare `model` for one of the three training regimes.
///
/// A1 copies the base trunk, freezes it and reinitializes the head; A2
/// copies the trunk and freezes nothing; A3 reinitializes everything and
/// ignores `base`.
pub fn apply_regime(
    model: &mut ModelSpec<f32>,
    regime: Regime,
    base: Option<&ModelSpec<f32>>,
    seed: u64,
) -> Result<()> {
    match regime {
        Regime::A3 => {
            model.initialize(seed);
            model.frozen.iter_mut().for_each(|f| *f = false);
            Ok(())
        }
        Regime::A1 | Regime::A2 => {
            let base = base.ok_or_else(|| {
                Error::InvalidConfig(format!("regime {regime} requires a base checkpoint"))
            })?;
            let trunk = check_trunk_compatible(model, base)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_INIT_STREAM);
            for (i, layer) in model.layers.iter_mut().enumerate() {
                if i < trunk {
                    *layer = base.layers[i].clone();
                } else {
                    glorot_init(layer, &mut rng);
                }
            }
            for (i, f) in model.frozen.iter_mut().enumerate() {
                *f = regime == Regime::A1 && i < trunk;
            }
            Ok(())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation loss (autoencoder) or accuracy (classifier).
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub best: ModelSpec<f32>,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: ModelSpec<f32>,
    pub history: Vec<EpochRecord>,
}

/// Loss history as CSV: `epoch,train_loss[,val_metric]`.
pub fn history_csv(history: &[EpochRecord], val_column: Option<&str>) -> String {
    let mut out = String::from("epoch,train_loss");
    if let Some(name) = val_column {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in history {
        out.push_str(&format!("{},{}", r.epoch, r.train_loss));
        if val_column.is_some() {
            match r.val_metric {
                Some(v) => out.push_str(&format!(",{v}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

fn stack(dataset: &Dataset, indices: &[usize]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &dataset.images[i]).collect();
    Tensor::stack(&refs)
}

const EVAL_CHUNK: usize = 64;

/// Mean reconstruction MSE over `indices`.
pub fn reconstruction_loss(model: &ModelSpec<f32>, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = stack(dataset, chunk)?;
        let y = model.predict(&x)?;
        let (loss, _) = mse_loss(&y, &x)?;
        total += loss as f64 * chunk.len() as f64;
    }
    Ok(total / indices.len().max(1) as f64)
}

/// Fraction of `indices` whose arg-max logit equals the label.
pub fn accuracy(model: &ModelSpec<f32>, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = stack(dataset, chunk)?;
        let logits = model.predict(&x)?;
        for (row, &i) in chunk.iter().enumerate() {
            let item = logits.item(row);
            let pred = item
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > item[best] { j } else { best });
            correct += (pred == dataset.labels[i]) as usize;
        }
    }
    Ok(correct as f64 / indices.len().max(1) as f64)
}

enum Objective {
    Reconstruction,
    Classification,
}

fn run_training(
    model: &ModelSpec<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.train_fraction, cfg.seed);
    let mut model = model.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order = train_idx.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelSpec<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut step = || -> Result<f64> {
                let x = stack(dataset, batch)?;
                let trace = model.forward_trace(&x)?;
                let (loss, grad) = match objective {
                    Objective::Reconstruction => mse_loss(trace.output(), &x)?,
                    Objective::Classification => {
                        let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels[i]).collect();
                        softmax_cross_entropy(trace.output(), &labels)?
                    }
                };
                let (_, grads) = model.backward_model(&trace, &grad)?;
                opt.step(&mut model.layers, &grads, &model.frozen)?;
                Ok(loss as f64)
            };
            let loss = step().map_err(|e| Error::Batch {
                epoch,
                batch: b,
                source: Box::new(e),
            })?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;

        // Higher score is better; autoencoders score by negated loss.
        let (val_metric, score) = match objective {
            Objective::Reconstruction => {
                let eval = if val_idx.is_empty() { &train_idx } else { &val_idx };
                let v = reconstruction_loss(&model, dataset, eval)?;
                (Some(v).filter(|_| !val_idx.is_empty()), -v)
            }
            Objective::Classification => {
                let eval = if val_idx.is_empty() { &train_idx } else { &val_idx };
                let v = accuracy(&model, dataset, eval)?;
                (Some(v).filter(|_| !val_idx.is_empty()), v)
            }
        };
        if cfg.log_every > 0 && epoch % cfg.log_every == 0 {
            match val_metric {
                Some(v) => info!("epoch {epoch}: train_loss={train_loss:.6} val={v:.6}"),
                None => info!("epoch {epoch}: train_loss={train_loss:.6}"),
            }
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
        });
        // Ties keep the earlier epoch.
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}

/// Minimize reconstruction MSE on an in-memory dataset.
pub fn train_autoencoder_on(
    model: &ModelSpec<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if model.kind != ModelKind::Autoencoder {
        return Err(Error::InvalidConfig(format!(
            "expected an autoencoder, got a {} model",
            model.kind
        )));
    }
    run_training(model, dataset, cfg, Objective::Reconstruction)
}

/// Load `index` at the configured image size and train the autoencoder.
pub fn train_autoencoder(
    model: &ModelSpec<f32>,
    index: &DatasetIndex,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let dataset = Dataset::load(index, cfg.image_size)?;
    train_autoencoder_on(model, &dataset, cfg)
}

/// Minimize softmax cross-entropy. Call [`apply_regime`] first to select the
/// regime; its freeze mask is honoured here.
pub fn train_classifier_on(
    model: &ModelSpec<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if model.kind != ModelKind::Classifier {
        return Err(Error::InvalidConfig(format!(
            "expected a classifier, got a {} model",
            model.kind
        )));
    }
    let classes = match model.layers.last() {
        Some(Layer::Dense(d)) => d.units(),
        _ => 0,
    };
    if classes != dataset.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "classifier has {classes} outputs but the dataset has {} classes",
            dataset.num_classes()
        )));
    }
    run_training(model, dataset, cfg, Objective::Classification)
}

/// Apply `regime` and train on the corpus behind `index`.
pub fn train_classifier(
    model: &ModelSpec<f32>,
    index: &DatasetIndex,
    cfg: &TrainConfig,
    regime: Regime,
    base: Option<&ModelSpec<f32>>,
) -> Result<TrainOutcome> {
    let dataset = Dataset::load(index, cfg.image_size)?;
    let mut model = model.clone();
    apply_regime(&mut model, regime, base, cfg.seed)?;
    train_classifier_on(&model, &dataset, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub images_per_class: usize,
}

impl SurrogateConfig {
    /// Surrogate pretraining matching a downstream classifier's trunk.
    pub fn for_classifier(classifier: &ClassifierConfig, train: &TrainConfig) -> Self {
        Self {
            classifier: ClassifierConfig {
                num_classes: synth::GRATING_ANGLES_DEG.len() * synth::GRATING_PERIODS.len(),
                ..classifier.clone()
            },
            train: train.clone(),
            images_per_class: 24,
        }
    }
}

/// Pretrain a classifier on the eight-class oriented-grating task. Its trunk
/// is the transfer base for regimes A1 and A2.
pub fn make_surrogate_base(cfg: &SurrogateConfig) -> Result<TrainOutcome> {
    let dataset = synth::oriented_gratings(
        cfg.images_per_class,
        cfg.classifier.input_size,
        cfg.train.seed,
    );
    let model = build_classifier(&cfg.classifier, cfg.train.seed)?;
    train_classifier_on(&model, &dataset, &cfg.train)
}
