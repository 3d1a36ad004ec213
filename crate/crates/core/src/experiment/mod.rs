//! Training, evaluation under test-time scrambling and class-level
//! scrambling analysis.

mod metrics;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{
    report_intersections, scrambling_report, set_intersection_table, top_fraction, ClassMetrics, ClassScramble,
    ScramblingReport, ELIGIBILITY_THRESHOLD,
};

use crate::arch::{ComposedModel, ForwardOptions, Network, PermutationMap, ScrambleKind, Variant};
use crate::checkpoint::Checkpoint;
use crate::data::{flip_horizontal, Dataset, PreprocessConfig, SplitData};
use crate::error::{EscError, Result};
use crate::rng;
use crate::tensor::{Graph, LrSchedule, OptimizerState, Tensor};

fn default_momentum() -> f32 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    pub variant: Variant,
    /// Save a checkpoint every this many epochs (when a directory is given).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(variant: Variant, epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 32,
            seed,
            schedule: LrSchedule::default(),
            momentum: 0.9,
            variant,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(EscError::Config("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(EscError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Base-parameter checksum before and after follow-up training.
    pub base_checksum: Option<(String, String)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: History,
    pub optimizer: OptimizerState,
}

/// One SGD step on a batch; returns summed loss and correct count.
fn sgd_step(
    net: &mut Network,
    opt: &mut OptimizerState,
    x: Tensor<f32>,
    labels: &[usize],
    epoch: usize,
    batch: usize,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g, true);
    let xi = g.leaf(x, false);
    let trace = net.forward(&mut g, xi, &vars, ForwardOptions::TRAIN)?;
    let loss = g.softmax_cross_entropy(trace.logits, labels)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(EscError::NonFiniteLoss {
            epoch,
            batch,
            lr: opt.learning_rate as f64,
        });
    }
    let correct = argmax_rows(g.probs(loss).expect("loss node"))
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    g.backward(loss)?;
    let grads = net.collect_grads(&g, &vars);
    opt.step(net.params.values_mut(), &grads)?;
    Ok((value * labels.len() as f64, correct))
}

pub fn argmax_rows(probs: &Tensor<f32>) -> Vec<usize> {
    let k = probs.shape().last().copied().unwrap_or(1).max(1);
    probs
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Trains the trainable part of `model` (the base network for
/// [`Variant::Base`], otherwise the follow-up stack on frozen base
/// features).
pub fn train(
    model: &mut ComposedModel,
    data: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.variant != model.variant() {
        return Err(EscError::Config(format!(
            "config variant {} does not match model variant {}",
            cfg.variant.tag(),
            model.variant().tag()
        )));
    }
    if data.classes() != model.classes() {
        return Err(EscError::Config(format!(
            "dataset has {} classes, model {}",
            data.classes(),
            model.classes()
        )));
    }
    if data.train.is_empty() {
        return Err(EscError::Data("empty training split".into()));
    }
    match model.variant() {
        Variant::Base => train_base(model, data, cfg, checkpoint_dir),
        _ => train_followup(model, data, cfg, checkpoint_dir),
    }
}

fn new_optimizer(net: &Network, cfg: &TrainConfig) -> OptimizerState {
    OptimizerState::new(
        net.params.values().iter().map(Tensor::numel),
        cfg.momentum,
        cfg.schedule.initial_lr as f32,
    )
}

fn finish_epoch(
    model: &ComposedModel,
    opt: &OptimizerState,
    cfg: &TrainConfig,
    dir: Option<&Path>,
    epoch: usize,
) -> Result<()> {
    let net = model.followup.as_ref().unwrap_or(&model.base);
    if !net.params.all_finite() {
        return Err(EscError::NonFiniteLoss {
            epoch,
            batch: usize::MAX,
            lr: opt.learning_rate as f64,
        });
    }
    if let (Some(dir), Some(every)) = (dir, cfg.checkpoint_every) {
        if every > 0 && (epoch + 1) % every == 0 {
            std::fs::create_dir_all(dir)?;
            Checkpoint::from_model(model, Some(opt)).save(&dir.join(format!("epoch{:03}.esck", epoch + 1)))?;
        }
    }
    Ok(())
}

fn train_base(
    model: &mut ComposedModel,
    data: &Dataset,
    cfg: &TrainConfig,
    dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let pre = data.preprocess_config();
    let resized = data
        .train
        .images
        .iter()
        .map(|im| pre.square_and_resize(im))
        .collect::<Result<Vec<_>>>()?;
    let labels = &data.train.labels;
    let mut opt = new_optimizer(&model.base, cfg);
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        opt.learning_rate = lr as f32;
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, &format!("shuffle/{epoch}")));
        let mut aug = rng::substream(cfg.seed, &format!("augment/{epoch}"));
        let (mut loss, mut correct) = (0.0, 0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<Tensor<f32>> = chunk.iter().map(|&i| pre.augment(&resized[i], &mut aug)).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (l, c) = sgd_step(&mut model.base, &mut opt, Tensor::stack(&items)?, &y, epoch, b)?;
            loss += l;
            correct += c;
        }
        finish_epoch(model, &opt, cfg, dir, epoch)?;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: loss / labels.len() as f64,
            accuracy: correct as f64 / labels.len() as f64,
        });
        log::info!("epoch {epoch} lr {lr:.5} loss {:.4}", loss / labels.len() as f64);
    }
    Ok(TrainOutcome { history, optimizer: opt })
}

/// Frozen-base features of eval-preprocessed images, one `[1, C, h, w]`
/// tensor per image.
pub fn base_features(
    model: &mut ComposedModel,
    split: &SplitData,
    pre: &PreprocessConfig,
    flipped: bool,
    batch_size: usize,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(split.len());
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let items = chunk
            .iter()
            .map(|&i| {
                let t = pre.eval(&split.images[i])?;
                Ok(if flipped { flip_horizontal(&t) } else { t })
            })
            .collect::<Result<Vec<_>>>()?;
        let f = model.base_features(&Tensor::stack(&items)?)?;
        out.extend((0..chunk.len()).map(|i| f.sample(i)));
    }
    Ok(out)
}

fn train_followup(
    model: &mut ComposedModel,
    data: &Dataset,
    cfg: &TrainConfig,
    dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let pre = data.preprocess_config();
    let before = model.base.params.checksum();
    // the only augmentation on cached features is the horizontal flip
    let mut cache = [
        base_features(model, &data.train, &pre, false, 64)?,
        base_features(model, &data.train, &pre, true, 64)?,
    ];
    for set in &mut cache {
        for f in set.iter_mut() {
            *f = model.boundary(std::mem::replace(f, Tensor::zeros(&[0])), None)?;
        }
    }
    let labels = &data.train.labels;
    let fu = model.followup.as_ref().expect("follow-up variant");
    let mut opt = new_optimizer(fu, cfg);
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        opt.learning_rate = lr as f32;
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, &format!("shuffle/{epoch}")));
        let mut aug = rng::substream(cfg.seed, &format!("augment/{epoch}"));
        let (mut loss, mut correct) = (0.0, 0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|&i| cache[usize::from(aug.random_bool(0.5))][i].clone())
                .collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let fu = model.followup.as_mut().expect("follow-up variant");
            let (l, c) = sgd_step(fu, &mut opt, Tensor::concat(&items)?, &y, epoch, b)?;
            loss += l;
            correct += c;
        }
        finish_epoch(model, &opt, cfg, dir, epoch)?;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: loss / labels.len() as f64,
            accuracy: correct as f64 / labels.len() as f64,
        });
    }
    let after = model.base.params.checksum();
    if before != after {
        return Err(EscError::Config("frozen base parameters changed during follow-up training".into()));
    }
    history.base_checksum = Some((before, after));
    Ok(TrainOutcome { history, optimizer: opt })
}

/// Test-time scrambling applied at the base/follow-up boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ScrambleMode {
    None,
    Global,
    Local { window: usize },
}

impl ScrambleMode {
    pub fn kind(self) -> Option<ScrambleKind> {
        match self {
            ScrambleMode::None => None,
            ScrambleMode::Global => Some(ScrambleKind::Global),
            ScrambleMode::Local { window } => Some(ScrambleKind::Local { window }),
        }
    }

    pub fn tag(self) -> String {
        match self {
            ScrambleMode::None => "none".into(),
            ScrambleMode::Global => "global".into(),
            ScrambleMode::Local { window } => format!("local{window}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scramble: ScrambleMode,
    pub seed: u64,
    /// Seed of the permutation drawn for each batch (empty without scrambling).
    pub batch_seeds: Vec<u64>,
    pub metrics: ClassMetrics,
    pub predictions: Vec<usize>,
}

pub const EVAL_BATCH: usize = 64;

/// Permutation used for batch `b` of a scrambled evaluation.
pub fn batch_permutation(grid: (usize, usize), mode: ScrambleMode, seed: u64, batch: usize) -> Result<Option<PermutationMap>> {
    match mode.kind() {
        None => Ok(None),
        Some(kind) => {
            let s = rng::derive_seed(seed, &format!("scramble/{batch}"));
            PermutationMap::random(grid, kind, s).map(Some)
        }
    }
}

/// Evaluates `model` on a split once per requested scramble mode, computing
/// frozen base features only once. With `fixed` set, that map replaces the
/// per-batch random draws of every scrambled mode.
pub fn evaluate_modes(
    model: &mut ComposedModel,
    split: &SplitData,
    pre: &PreprocessConfig,
    modes: &[ScrambleMode],
    seed: u64,
    fixed: Option<&PermutationMap>,
) -> Result<Vec<Evaluation>> {
    let classes = model.classes();
    if !model.has_boundary() {
        if modes.iter().any(|m| *m != ScrambleMode::None) || fixed.is_some() {
            return Err(EscError::Config(
                "test-time scrambling needs a base/follow-up boundary".into(),
            ));
        }
        let mut preds = Vec::with_capacity(split.len());
        let indices: Vec<usize> = (0..split.len()).collect();
        for chunk in indices.chunks(EVAL_BATCH) {
            let x = split.eval_batch(chunk, pre)?;
            preds.extend(argmax_rows(&model.predict(&x, None)?));
        }
        let metrics = ClassMetrics::from_predictions(&preds, &split.labels, classes)?;
        return Ok(modes
            .iter()
            .map(|m| Evaluation {
                scramble: *m,
                seed,
                batch_seeds: Vec::new(),
                metrics: metrics.clone(),
                predictions: preds.clone(),
            })
            .collect());
    }
    let feats = base_features(model, split, pre, false, EVAL_BATCH)?;
    let side = model.descriptor.base.output_size();
    let mut out = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut preds = Vec::with_capacity(split.len());
        let mut batch_seeds = Vec::new();
        for (b, chunk) in feats.chunks(EVAL_BATCH).enumerate() {
            let f = model.boundary(Tensor::concat(chunk)?, None)?;
            let map = match (mode, fixed) {
                (ScrambleMode::None, _) => None,
                (_, Some(p)) => Some(p.clone()),
                _ => {
                    let p = batch_permutation((side, side), mode, seed, b)?;
                    batch_seeds.extend(p.as_ref().map(|p| p.seed));
                    p
                }
            };
            let f = match &map {
                Some(p) => crate::arch::apply_scramble(&f, p)?,
                None => f,
            };
            preds.extend(argmax_rows(&model.from_features(f, false)?.probs));
        }
        out.push(Evaluation {
            scramble: mode,
            seed,
            batch_seeds,
            metrics: ClassMetrics::from_predictions(&preds, &split.labels, classes)?,
            predictions: preds,
        });
    }
    Ok(out)
}

pub fn evaluate(
    model: &mut ComposedModel,
    split: &SplitData,
    pre: &PreprocessConfig,
    mode: ScrambleMode,
    seed: u64,
) -> Result<Evaluation> {
    Ok(evaluate_modes(model, split, pre, &[mode], seed, None)?.remove(0))
}
