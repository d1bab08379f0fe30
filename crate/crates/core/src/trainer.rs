//! Consistency training: supervised cross-entropy on labeled batches, plus
//! pseudo-label and Grad-CAM agreement between each unlabeled image and a
//! random augmentation of it.

use std::time::Instant;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_to_image, replay_spatial, sample_augmentation, AugmentPolicy, AugmentationRecord};
use crate::autograd::{self, Tensor};
use crate::backbone::{Backbone, Classifier, InputShape, LayerId, ParamStore};
use crate::data::{self, DatasetSplit, LabeledSet, PairedIterator, CHANNELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::gradcam::{cam_from_forward, detached_cam, normalize_cam_batch, CamBatch, CamMap};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::optim::{Optimizer, OptimizerKind};
use crate::toy::ToyConvNet;

const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    Full,
    /// Grad-CAM weight forced to 0.
    Ablation,
    /// Supervised only, on augmented labeled images.
    Baseline,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CamClassSource {
    /// Both maps explain the class predicted for the original image.
    #[default]
    ArgmaxOriginal,
    /// Each map explains its own image's predicted class.
    ArgmaxEach,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopStyle {
    /// One update per paired batch on the summed loss.
    #[default]
    Paired,
    /// A supervised pass over the epoch, then a consistency pass.
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub weights: LossWeights,
    pub target_layer: LayerId,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub align_cams: bool,
    pub cam_class_source: CamClassSource,
    pub mode: TrainMode,
    pub loop_style: LoopStyle,
    /// Validation images scored after each epoch but the last; all when unset.
    pub eval_subset: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            target_layer: LayerId::new(3).unwrap(),
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            align_cams: true,
            cam_class_source: CamClassSource::ArgmaxOriginal,
            mode: TrainMode::Full,
            loop_style: LoopStyle::Paired,
            eval_subset: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.eval_subset == Some(0) {
            return Err(Error::Config("eval_subset must be at least 1".into()));
        }
        Ok(())
    }

    /// Loss weights after the mode overrides.
    pub fn effective_weights(&self) -> LossWeights {
        let w = self.weights;
        match self.mode {
            TrainMode::Full => w,
            TrainMode::Ablation => LossWeights { gamma: 0.0, ..w },
            TrainMode::Baseline => LossWeights { beta: 0.0, gamma: 0.0, ..w },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_s: f64,
    pub l_p: f64,
    pub l_g: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,l_s,l_p,l_g,val_accuracy,wall_seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.l_s, self.l_p, self.l_g, self.val_accuracy, self.wall_seconds
        )
    }

    /// Equal in everything but wall time, to `tol`.
    pub fn same_values(&self, other: &Self, tol: f64) -> bool {
        self.epoch == other.epoch
            && [
                (self.l_s, other.l_s),
                (self.l_p, other.l_p),
                (self.l_g, other.l_g),
                (self.val_accuracy, other.val_accuracy),
            ]
            .iter()
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// A classifier whose parameters the trainer may update.
pub trait Trainable: Classifier {
    fn params_mut(&mut self) -> &mut ParamStore;

    fn input_shape(&self) -> InputShape;

    /// `(h, w)` of the map at `layer`.
    fn cam_grid(&self, layer: LayerId) -> Result<(usize, usize)>;
}

impl Trainable for Backbone {
    fn params_mut(&mut self) -> &mut ParamStore {
        Backbone::params_mut(self)
    }

    fn input_shape(&self) -> InputShape {
        self.config().input_shape
    }

    fn cam_grid(&self, layer: LayerId) -> Result<(usize, usize)> {
        let (_, h, w) = self.config().stage_shape(layer);
        Ok((h, w))
    }
}

impl Trainable for ToyConvNet {
    fn params_mut(&mut self) -> &mut ParamStore {
        ToyConvNet::params_mut(self)
    }

    fn input_shape(&self) -> InputShape {
        let (channels, height, width) = self.input_dims();
        InputShape { height, width, channels }
    }

    fn cam_grid(&self, layer: LayerId) -> Result<(usize, usize)> {
        if !self.target_layers().contains(&layer) {
            return Err(Error::Input(format!("toy model has no {layer}")));
        }
        let (_, h, w) = self.input_dims();
        Ok((h, w))
    }
}

/// Checks that stored 32×32 images can be fed to a model with `input`.
pub fn check_input_shape(input: InputShape) -> Result<()> {
    let ok = input.channels == CHANNELS
        && input.height > 0
        && input.width > 0
        && IMAGE_SIDE.is_multiple_of(input.height)
        && IMAGE_SIDE.is_multiple_of(input.width);
    if !ok {
        return Err(Error::Config(format!(
            "model input {}x{}x{} cannot be fed from {IMAGE_SIDE}x{IMAGE_SIDE}x{CHANNELS} images",
            input.height, input.width, input.channels
        )));
    }
    Ok(())
}

/// Image bytes on the [0, 1] scale at the model resolution; smaller inputs are
/// obtained by block averaging.
pub fn unit_image(bytes: &[u8], input: InputShape) -> Array3<f64> {
    let full = data::image_to_unit(bytes);
    let (fy, fx) = (IMAGE_SIDE / input.height, IMAGE_SIDE / input.width);
    if fy == 1 && fx == 1 {
        return full;
    }
    let area = (fy * fx) as f64;
    Array3::from_shape_fn((CHANNELS, input.height, input.width), |(c, y, x)| {
        let block = full.slice(ndarray::s![c, y * fy..(y + 1) * fy, x * fx..(x + 1) * fx]);
        block.sum() / area
    })
}

/// Standardizes and stacks `[C, H, W]` images into an `[N, C, H, W]` tensor.
pub fn to_batch(images: Vec<Array3<f64>>) -> Tensor {
    let views: Vec<_> = images
        .into_iter()
        .map(|mut im| {
            data::standardize(&mut im);
            im
        })
        .collect();
    let stacked = ndarray::stack(Axis(0), &views.iter().map(|v| v.view()).collect::<Vec<_>>()).unwrap();
    Tensor::constant(stacked.into_dyn())
}

fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

fn to_array2(t: &Tensor) -> Array2<f64> {
    t.value().clone().into_dimensionality().expect("rank-2 tensor")
}

/// Fixed targets computed from the clean unlabeled images.
#[derive(Clone, Debug)]
pub struct PseudoTargets {
    pub probabilities: Array2<f64>,
    pub classes: Vec<usize>,
    /// Normalized maps at the target layer, when requested.
    pub cams: Option<Vec<CamMap>>,
}

pub fn pseudo_targets<M: Classifier + ?Sized>(model: &M, clean: &Tensor, layer: LayerId, with_cam: bool) -> Result<PseudoTargets> {
    let out = autograd::no_grad(|| model.forward(clean, with_cam.then_some(layer)))?;
    let probabilities = to_array2(&out.probabilities);
    let classes = argmax_rows(&probabilities);
    let cams = match out.captured {
        Some(acts) if with_cam => {
            let raw = detached_cam(model, &acts, &classes, layer)?;
            let maps = autograd::no_grad(|| normalize_cam_batch(&raw.maps))?.detach();
            Some(CamBatch { maps, ..raw }.to_maps())
        }
        _ => None,
    };
    Ok(PseudoTargets {
        probabilities,
        classes,
        cams,
    })
}

/// Settings of the consistency terms.
#[derive(Clone, Copy, Debug)]
pub struct ConsistencySettings {
    pub layer: LayerId,
    pub with_pseudo_label: bool,
    pub with_cam: bool,
    pub align_cams: bool,
    pub cam_class_source: CamClassSource,
}

#[derive(Clone, Debug)]
pub struct UnlabeledLosses {
    pub l_p: Option<Tensor>,
    pub l_g: Option<Tensor>,
    /// Replayed pseudo-label maps and their validity, `[N, h, w]`.
    pub cam_target: Option<(ArrayD<f64>, ArrayD<bool>)>,
    /// Normalized maps of the augmented images.
    pub cam_augmented: Option<Tensor>,
}

/// Pseudo-label and Grad-CAM losses of augmented images against `targets`.
/// `records[i]` is the augmentation that produced image `i`.
pub fn unlabeled_losses<M: Classifier + ?Sized>(
    model: &M,
    augmented: &Tensor,
    targets: &PseudoTargets,
    records: &[AugmentationRecord],
    settings: &ConsistencySettings,
) -> Result<UnlabeledLosses> {
    let n = augmented.shape()[0];
    if records.len() != n || targets.classes.len() != n {
        return Err(Error::Input(format!(
            "{n} augmented images, {} records, {} targets",
            records.len(),
            targets.classes.len()
        )));
    }
    let out = model.forward(augmented, settings.with_cam.then_some(settings.layer))?;
    let l_p = if settings.with_pseudo_label {
        let p = Tensor::constant(targets.probabilities.clone().into_dyn());
        Some(losses::pseudo_label_loss(&p, &out.probabilities)?)
    } else {
        None
    };
    let mut result = UnlabeledLosses {
        l_p,
        l_g: None,
        cam_target: None,
        cam_augmented: None,
    };
    if !settings.with_cam {
        return Ok(result);
    }
    let originals = targets
        .cams
        .as_ref()
        .ok_or_else(|| Error::Usage("pseudo targets were computed without maps".into()))?;
    let classes = match settings.cam_class_source {
        CamClassSource::ArgmaxOriginal => targets.classes.clone(),
        CamClassSource::ArgmaxEach => argmax_rows(&to_array2(&out.probabilities)),
    };
    let acts = out.captured.expect("capture requested");
    let raw = cam_from_forward(&acts, &out.logits, &classes, settings.layer)?;
    let cam_aug = normalize_cam_batch(&raw.maps)?;
    let (h, w) = (cam_aug.shape()[1], cam_aug.shape()[2]);
    let mut target = ArrayD::zeros(IxDyn(&[n, h, w]));
    let mut valid = ArrayD::from_elem(IxDyn(&[n, h, w]), true);
    for (i, (cam, record)) in originals.iter().zip(records).enumerate() {
        if cam.grid.dim() != (h, w) {
            return Err(Error::Input(format!("pseudo-label map {:?} vs augmented map {h}x{w}", cam.grid.dim())));
        }
        let (grid, mask) = if settings.align_cams {
            let r = replay_spatial(cam, record)?;
            (r.map.grid, r.valid)
        } else {
            (cam.grid.clone(), Array2::from_elem((h, w), true))
        };
        target.index_axis_mut(Axis(0), i).assign(&grid);
        valid.index_axis_mut(Axis(0), i).assign(&mask);
    }
    let l_g = losses::gradcam_consistency_loss(&Tensor::constant(target.clone()), &cam_aug, &valid)?;
    result.l_g = Some(l_g);
    result.cam_target = Some((target, valid));
    result.cam_augmented = Some(cam_aug);
    Ok(result)
}

/// Masked mean squared difference between each clean image's replayed map
/// and the map of its augmentation, both explaining the clean prediction.
pub fn cam_disagreement<M: Classifier + ?Sized>(
    model: &M,
    clean: &[Array3<f64>],
    records: &[AugmentationRecord],
    layer: LayerId,
) -> Result<f64> {
    if clean.is_empty() || clean.len() != records.len() {
        return Err(Error::Input(format!("{} images for {} records", clean.len(), records.len())));
    }
    let targets = pseudo_targets(model, &to_batch(clean.to_vec()), layer, true)?;
    let mut augmented = Vec::with_capacity(clean.len());
    for (img, r) in clean.iter().zip(records) {
        augmented.push(apply_to_image(img, r)?);
    }
    let settings = ConsistencySettings {
        layer,
        with_pseudo_label: false,
        with_cam: true,
        align_cams: true,
        cam_class_source: CamClassSource::ArgmaxOriginal,
    };
    let out = unlabeled_losses(model, &to_batch(augmented), &targets, records, &settings)?;
    Ok(out.l_g.expect("map loss requested").item())
}

/// Mixes integers into one seed (SplitMix64 finalizer over each part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const TAG_UNLABELED: u64 = 1;
const TAG_LABELED: u64 = 2;

/// Accuracy of argmax predictions over the first `limit` items of `set`.
pub fn evaluate_subset<M: Trainable + ?Sized>(model: &M, set: &LabeledSet, limit: usize) -> Result<f64> {
    let n = limit.min(set.len());
    if n == 0 {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    let input = model.input_shape();
    check_input_shape(input)?;
    let mut correct = 0usize;
    for lo in (0..n).step_by(EVAL_BATCH) {
        let hi = (lo + EVAL_BATCH).min(n);
        let batch = to_batch((lo..hi).map(|i| unit_image(set.image(i), input)).collect());
        let out = autograd::no_grad(|| model.forward(&batch, None))?;
        let pred = argmax_rows(&to_array2(&out.logits));
        correct += pred.iter().enumerate().filter(|(k, &p)| p == set.label(lo + k)).count();
    }
    Ok(correct as f64 / n as f64)
}

pub fn evaluate<M: Trainable + ?Sized>(model: &M, set: &LabeledSet) -> Result<f64> {
    evaluate_subset(model, set, set.len())
}

#[derive(Default)]
struct Running {
    sums: [f64; 3],
    counts: [usize; 3],
}

impl Running {
    fn add(&mut self, k: usize, value: f64, n: usize) {
        self.sums[k] += value * n as f64;
        self.counts[k] += n;
    }

    fn mean(&self, k: usize) -> f64 {
        if self.counts[k] == 0 {
            0.0
        } else {
            self.sums[k] / self.counts[k] as f64
        }
    }
}

pub struct Trainer<'a, M: Trainable> {
    model: M,
    split: &'a DatasetSplit,
    config: TrainingConfig,
    policy: AugmentPolicy,
    weights: LossWeights,
    schedule: PairedIterator,
    optimizer: Optimizer,
    epochs_done: usize,
}

impl<'a, M: Trainable> Trainer<'a, M> {
    pub fn new(model: M, split: &'a DatasetSplit, config: TrainingConfig, policy: AugmentPolicy) -> Result<Self> {
        config.validate()?;
        policy.validate()?;
        let input = model.input_shape();
        check_input_shape(input)?;
        if policy.image_size != (input.height, input.width) {
            return Err(Error::Config(format!(
                "augmentation image_size {:?} differs from model input {}x{}",
                policy.image_size, input.height, input.width
            )));
        }
        let weights = config.effective_weights();
        if weights.gamma > 0.0 {
            let (h, w) = model.cam_grid(config.target_layer)?;
            if config.align_cams && h * input.width != w * input.height {
                return Err(Error::Config(format!(
                    "{h}x{w} maps at {} cannot be aligned with {}x{} images",
                    config.target_layer, input.height, input.width
                )));
            }
        }
        let needs_unlabeled = weights.beta > 0.0 || weights.gamma > 0.0;
        let schedule = data::paired_iterator(split, config.batch_size, config.seed, needs_unlabeled)?;
        let passes = match config.loop_style {
            LoopStyle::Paired => 1,
            LoopStyle::Sequential => 2,
        };
        let total_steps = (config.epochs * schedule.batches_per_epoch() * passes) as u64;
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, total_steps, model.parameters());
        Ok(Self {
            model,
            split,
            config,
            policy,
            weights,
            schedule,
            optimizer,
            epochs_done: 0,
        })
    }

    /// Continue from saved optimizer state after `epochs_done` epochs.
    pub fn resume(
        model: M,
        split: &'a DatasetSplit,
        config: TrainingConfig,
        policy: AugmentPolicy,
        optimizer: Optimizer,
        epochs_done: usize,
    ) -> Result<Self> {
        let mut t = Self::new(model, split, config, policy)?;
        if optimizer.kind != t.optimizer.kind || optimizer.buffers.len() != t.optimizer.buffers.len() {
            return Err(Error::Input("optimizer state does not match the configuration".into()));
        }
        t.optimizer = optimizer;
        t.epochs_done = epochs_done;
        Ok(t)
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn into_model(self) -> M {
        self.model
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn policy(&self) -> &AugmentPolicy {
        &self.policy
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.config.epochs
    }

    fn settings(&self) -> ConsistencySettings {
        ConsistencySettings {
            layer: self.config.target_layer,
            with_pseudo_label: self.weights.beta > 0.0,
            with_cam: self.weights.gamma > 0.0,
            align_cams: self.config.align_cams,
            cam_class_source: self.config.cam_class_source,
        }
    }

    fn record(&self, tag: u64, epoch: usize, step: usize, i: usize) -> Result<AugmentationRecord> {
        let seed = derive_seed(&[self.config.seed, tag, epoch as u64, step as u64, i as u64]);
        sample_augmentation(seed, &self.policy)
    }

    /// One optimizer update on the given labeled and unlabeled positions.
    /// Either list may be empty. Terms with a zero weight are not computed
    /// and are reported as 0.
    pub fn step(&mut self, epoch: usize, step: usize, labeled: &[usize], unlabeled: &[usize]) -> Result<LossBreakdown> {
        let input = self.model.input_shape();
        let w = self.weights;
        let mut l_s = None;
        if w.alpha > 0.0 && !labeled.is_empty() {
            let set = &self.split.labeled;
            let mut images = Vec::with_capacity(labeled.len());
            for (i, &pos) in labeled.iter().enumerate() {
                let img = unit_image(set.image(pos), input);
                images.push(if self.config.mode == TrainMode::Baseline {
                    apply_to_image(&img, &self.record(TAG_LABELED, epoch, step, i)?)?
                } else {
                    img
                });
            }
            let labels: Vec<usize> = labeled.iter().map(|&p| set.label(p)).collect();
            let out = self.model.forward(&to_batch(images), None)?;
            l_s = Some(losses::supervised_loss(&out.logits, &labels)?);
        }
        let settings = self.settings();
        let (mut l_p, mut l_g) = (None, None);
        if (settings.with_pseudo_label || settings.with_cam) && !unlabeled.is_empty() {
            let set = &self.split.unlabeled;
            let clean: Vec<_> = unlabeled.iter().map(|&p| unit_image(set.image(p), input)).collect();
            let targets = pseudo_targets(&self.model, &to_batch(clean.clone()), settings.layer, settings.with_cam)?;
            let mut records = Vec::with_capacity(clean.len());
            let mut augmented = Vec::with_capacity(clean.len());
            for (i, img) in clean.iter().enumerate() {
                let r = self.record(TAG_UNLABELED, epoch, step, i)?;
                augmented.push(apply_to_image(img, &r)?);
                records.push(r);
            }
            let out = unlabeled_losses(&self.model, &to_batch(augmented), &targets, &records, &settings)?;
            l_p = out.l_p;
            l_g = out.l_g;
        }
        let value = |t: &Option<Tensor>| t.as_ref().map_or(0.0, Tensor::item);
        let breakdown = losses::combined_loss((value(&l_s), value(&l_p), value(&l_g)), &w)?;
        let total = losses::combine_tensors(l_s.as_ref(), l_p.as_ref(), l_g.as_ref(), &w);
        if total.requires_grad() {
            let params = self.model.parameters().tensors().to_vec();
            let grads = autograd::grad(&total, &params, false)?;
            self.optimizer.step(self.model.params_mut(), &grads)?;
        }
        Ok(breakdown)
    }

    /// Runs the next epoch and scores the validation set.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let epoch = self.epochs_done;
        let batches: Vec<_> = self.schedule.epoch(epoch).collect();
        let mut run = Running::default();
        let note = |b: &LossBreakdown, nl: usize, nu: usize, run: &mut Running| {
            if nl > 0 {
                run.add(0, b.l_s, nl);
            }
            if nu > 0 {
                run.add(1, b.l_p, nu);
                run.add(2, b.l_g, nu);
            }
        };
        let unlabeled_used = self.weights.beta > 0.0 || self.weights.gamma > 0.0;
        match self.config.loop_style {
            LoopStyle::Paired => {
                for (k, b) in batches.iter().enumerate() {
                    let u: &[usize] = if unlabeled_used { &b.unlabeled } else { &[] };
                    let r = self.step(epoch, k, &b.labeled, u)?;
                    note(&r, b.labeled.len(), u.len(), &mut run);
                }
            }
            LoopStyle::Sequential => {
                for (k, b) in batches.iter().enumerate() {
                    let r = self.step(epoch, k, &b.labeled, &[])?;
                    note(&r, b.labeled.len(), 0, &mut run);
                }
                if unlabeled_used {
                    for (k, b) in batches.iter().enumerate() {
                        let r = self.step(epoch, batches.len() + k, &[], &b.unlabeled)?;
                        note(&r, 0, b.unlabeled.len(), &mut run);
                    }
                }
            }
        }
        self.epochs_done += 1;
        let limit = match self.config.eval_subset {
            Some(n) if !self.is_finished() => n,
            _ => usize::MAX,
        };
        let val_accuracy = evaluate_subset(&self.model, &self.split.validation, limit)?;
        let metrics = EpochMetrics {
            epoch: self.epochs_done,
            l_s: run.mean(0),
            l_p: run.mean(1),
            l_g: run.mean(2),
            val_accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {}: {}", metrics.epoch, metrics.csv_row());
        Ok(metrics)
    }
}

/// Trains for `config.epochs` epochs.
pub fn train<M: Trainable>(
    model: M,
    split: &DatasetSplit,
    config: TrainingConfig,
    policy: AugmentPolicy,
) -> Result<(M, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(model, split, config, policy)?;
    let mut metrics = Vec::new();
    while !trainer.is_finished() {
        metrics.push(trainer.run_epoch()?);
    }
    Ok((trainer.into_model(), metrics))
}
