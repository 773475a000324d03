//! Volumetric segmentation: the 3D U-Net family, soft Dice and
//! cross-entropy losses, and a training loop with early stopping on
//! validation Dice.

mod model;

pub use model::{
    check_divisible, dynunet_levels, ActivationKind, Segmenter, SegmenterConfig, SegmenterNet, Variant,
    CHECKPOINT_KIND, UNET_DEFAULT_WIDTH,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::metrics::mean_foreground_dice;
use crate::nn::tape::{cross_entropy_forward, dice_forward};
use crate::nn::{AdamW, Bound, CrossEntropyMode, OptimizerSettings, Tape, Var};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::train::{at_step, optimize_step, push, History, TrainSchedule};
use crate::volume::{argmax_decode, one_hot_encode, LabelMap, Volume, BACKGROUND, LIVER, NUM_CLASSES};

/// Per-voxel class probabilities, `[C, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVolume {
    pub data: Tensor,
}

impl PredictionVolume {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "prediction must be [C, D, H, W], got {:?}",
                data.shape()
            )));
        }
        if data.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("probabilities must lie in [0, 1]".into()));
        }
        Ok(PredictionVolume { data })
    }

    pub fn num_classes(&self) -> usize {
        self.data.shape()[0]
    }

    fn batched(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.data.shape());
        self.data.clone().reshape(&shape).expect("same element count")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceReduction {
    MeanOverClasses,
    ForegroundOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiceLossConfig {
    pub smoothing_epsilon: f64,
    pub reduction: DiceReduction,
}

impl Default for DiceLossConfig {
    fn default() -> Self {
        DiceLossConfig {
            smoothing_epsilon: 1e-6,
            reduction: DiceReduction::ForegroundOnly,
        }
    }
}

impl DiceLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_epsilon > 0.0) {
            return Err(Error::Validation("smoothing_epsilon must be positive".into()));
        }
        Ok(())
    }

    fn include(&self, classes: usize) -> Vec<bool> {
        (0..classes)
            .map(|c| c > 0 || self.reduction == DiceReduction::MeanOverClasses)
            .collect()
    }
}

/// Which objective the segmenter optimizes. Dice and cross-entropy are
/// weighted equally in the combined mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMix {
    Dice,
    CrossEntropy,
    #[default]
    DiceCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegTask {
    LiverOnly,
    MultiClass,
}

impl SegTask {
    pub fn num_classes(self) -> usize {
        match self {
            SegTask::LiverOnly => 2,
            SegTask::MultiClass => NUM_CLASSES as usize,
        }
    }

    pub fn cross_entropy_mode(self) -> CrossEntropyMode {
        match self {
            SegTask::LiverOnly => CrossEntropyMode::Binary,
            SegTask::MultiClass => CrossEntropyMode::Categorical,
        }
    }

    /// Ground truth in this task's label space.
    pub fn target(self, g: &LabelMap) -> Result<LabelMap> {
        match self {
            SegTask::LiverOnly => relabel_liver_only(g),
            SegTask::MultiClass => Ok(g.clone()),
        }
    }
}

/// Every non-background class becomes liver.
pub fn relabel_liver_only(g: &LabelMap) -> Result<LabelMap> {
    let data = g
        .data()
        .iter()
        .map(|&v| if v == BACKGROUND { BACKGROUND } else { LIVER })
        .collect();
    LabelMap::new(g.shape(), data, 2)
}

fn one_hot_like(p: &PredictionVolume, g: &LabelMap) -> Result<Tensor> {
    if g.num_classes as usize != p.num_classes() {
        return Err(Error::Shape(format!(
            "label has {} classes, prediction {}",
            g.num_classes,
            p.num_classes()
        )));
    }
    let oh = one_hot_encode(g)?;
    oh.data.expect_shape(p.data.shape())?;
    Ok(oh.batched())
}

/// Smoothed soft Dice loss `1 − (2Σpg + ε)/(Σp + Σg + ε)`, per class, reduced
/// per `cfg`.
pub fn dice_loss(p: &PredictionVolume, g: &LabelMap, cfg: &DiceLossConfig) -> Result<f64> {
    cfg.validate()?;
    let target = one_hot_like(p, g)?;
    Ok(dice_forward(
        &p.batched(),
        &target,
        cfg.smoothing_epsilon,
        &cfg.include(p.num_classes()),
    ))
}

/// Mean negative log-likelihood with probabilities clamped to
/// `[1e-7, 1 − 1e-7]`. Binary mode reads channel 1 of a two-class
/// prediction.
pub fn cross_entropy_loss(p: &PredictionVolume, g: &LabelMap, mode: CrossEntropyMode) -> Result<f64> {
    let target = one_hot_like(p, g)?;
    cross_entropy_forward(&p.batched(), &target, mode)
}

/// The training objective on the tape: `probs` are softmax outputs and
/// `target` the batched one-hot ground truth.
pub fn segmentation_loss_on(
    t: &mut Tape,
    probs: Var,
    target: &Tensor,
    mix: LossMix,
    dice: &DiceLossConfig,
    mode: CrossEntropyMode,
) -> Result<Var> {
    let classes = target.shape()[1];
    let d = || dice.include(classes);
    match mix {
        LossMix::Dice => t.dice_loss(probs, target.clone(), dice.smoothing_epsilon, d()),
        LossMix::CrossEntropy => t.cross_entropy(probs, target.clone(), mode),
        LossMix::DiceCrossEntropy => {
            let a = t.dice_loss(probs, target.clone(), dice.smoothing_epsilon, d())?;
            let b = t.cross_entropy(probs, target.clone(), mode)?;
            t.add(a, b)
        }
    }
}

/// Decision after recording one validation score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Halts after `patience` consecutive epochs without a strictly higher
/// validation score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            stale: 0,
            epoch: 0,
        }
    }

    pub fn update(&mut self, score: f64) -> StopDecision {
        let e = self.epoch;
        self.epoch += 1;
        if score > self.best {
            self.best = score;
            self.best_epoch = Some(e);
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegTrainSettings {
    pub task: SegTask,
    #[serde(default)]
    pub loss_mix: LossMix,
    #[serde(default)]
    pub dice: DiceLossConfig,
    /// Maximum epochs, batch size and seed.
    pub schedule: TrainSchedule,
    pub optimizer: OptimizerSettings,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Optional early exit once validation Dice reaches this value.
    #[serde(default)]
    pub target_dice: Option<f64>,
}

fn default_patience() -> usize {
    10
}

#[derive(Debug, Clone)]
pub struct SegTraining {
    /// Weights from the best validation epoch.
    pub model: Segmenter,
    /// `loss` and `val_dice` per completed epoch.
    pub history: History,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub epochs_run: usize,
}

impl SegTraining {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = self.model.to_checkpoint()?;
        c.history = self.history.clone();
        c.constants.insert("best_epoch".into(), self.best_epoch as f64);
        c.constants.insert("best_val_dice".into(), self.best_val_dice);
        Ok(c)
    }
}

/// One `(input, one-hot target, label)` triple per sample in task space.
fn prepare(pairs: &[(Volume, LabelMap)], task: SegTask) -> Result<Vec<(Tensor, Tensor, LabelMap)>> {
    pairs
        .iter()
        .map(|(v, g)| {
            g.same_grid(v)?;
            let g = task.target(g)?;
            Ok((v.to_tensor(), one_hot_encode(&g)?.batched(), g))
        })
        .collect()
}

/// Mean foreground Dice of argmax predictions over `val`.
pub fn validation_dice(model: &Segmenter, val: &[(Volume, LabelMap)], task: SegTask) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Validation("validation split is empty".into()));
    }
    let mut total = 0.0;
    for (v, g) in val {
        let pred = predict_mask(model, v)?;
        total += mean_foreground_dice(&pred, &task.target(g)?, task.num_classes() as u8)?;
    }
    Ok(total / val.len() as f64)
}

/// Train from scratch with early stopping on validation Dice and return the
/// best-validation weights.
pub fn train_segmenter(
    config: &SegmenterConfig,
    train: &[(Volume, LabelMap)],
    val: &[(Volume, LabelMap)],
    settings: &SegTrainSettings,
) -> Result<SegTraining> {
    train_segmenter_with(config, train, val, settings, |m| validation_dice(m, val, settings.task))
}

/// As [`train_segmenter`] with an injected validation metric.
pub fn train_segmenter_with(
    config: &SegmenterConfig,
    train: &[(Volume, LabelMap)],
    val: &[(Volume, LabelMap)],
    settings: &SegTrainSettings,
    mut validate: impl FnMut(&Segmenter) -> Result<f64>,
) -> Result<SegTraining> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation(
            "train and validation splits must be non-empty".into(),
        ));
    }
    settings.schedule.validate()?;
    settings.optimizer.validate()?;
    settings.dice.validate()?;
    if config.num_classes != settings.task.num_classes() {
        return Err(Error::Validation(format!(
            "{:?} needs {} output classes, config has {}",
            settings.task,
            settings.task.num_classes(),
            config.num_classes
        )));
    }
    let data = prepare(train, settings.task)?;
    let shape = train[0].0.shape();
    let mut model = Segmenter::new(config.clone(), shape, derive_seed(settings.schedule.seed, 0x5E6))?;
    let mut opt = AdamW::new(settings.optimizer, &model.store);
    let mut stopper = EarlyStopping::new(settings.patience);
    let mut best = model.store.clone();
    let mut history = History::new();
    let mode = settings.task.cross_entropy_mode();
    let mut epochs_run = 0;
    for epoch in 0..settings.schedule.epochs {
        let (mut total, mut nb) = (0.0, 0.0);
        for (bi, batch) in settings.schedule.batches(data.len(), epoch).into_iter().enumerate() {
            let x = Tensor::stack(&batch.iter().map(|&i| data[i].0.clone()).collect::<Vec<_>>())?;
            let y = Tensor::stack(&batch.iter().map(|&i| data[i].1.clone()).collect::<Vec<_>>())?;
            let net = &model.net;
            let (loss, ()) = optimize_step(&mut model.store, &mut opt, |t: &mut Tape, p: &Bound| {
                let xv = t.constant(x);
                let logits = net.forward_on(t, p, xv)?;
                let probs = t.softmax_channels(logits);
                Ok((
                    segmentation_loss_on(t, probs, &y, settings.loss_mix, &settings.dice, mode)?,
                    (),
                ))
            })
            .map_err(|e| at_step(e, "segmenter", epoch, bi))?;
            total += loss;
            nb += 1.0;
        }
        let score = validate(&model)?;
        push(&mut history, "loss", total / nb);
        push(&mut history, "val_dice", score);
        epochs_run = epoch + 1;
        match stopper.update(score) {
            StopDecision::Improved => best = model.store.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
        if settings.target_dice.is_some_and(|t| score >= t) {
            break;
        }
    }
    let (best_epoch, best_val_dice) = stopper
        .best()
        .ok_or_else(|| Error::Validation("training ran zero epochs".into()))?;
    model.store = best;
    Ok(SegTraining {
        model,
        history,
        best_epoch,
        best_val_dice,
        epochs_run,
    })
}

/// Softmax probabilities for one volume.
pub fn predict_probabilities(model: &Segmenter, v: &Volume) -> Result<PredictionVolume> {
    let p = model.probabilities(&v.to_tensor())?;
    let s = p.shape()[1..].to_vec();
    PredictionVolume::new(p.reshape(&s)?)
}

/// Per-voxel argmax of the model's prediction.
pub fn predict_mask(model: &Segmenter, v: &Volume) -> Result<LabelMap> {
    argmax_decode(&predict_probabilities(model, v)?.data)
}
