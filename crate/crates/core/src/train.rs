//! Training: Adam on all trainable tensors (`U` for NMF layers), a
//! reduce-on-plateau learning-rate schedule, image augmentation and the
//! epoch loop with best-validation checkpointing.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classic::factorize;
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::layer::{derive_w, group_patches, NmfParams};
use crate::network::{argmax_rows, loss, loss_grad, Layer, LossConfig, Model};
use crate::tensor::{unfold, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Random crop to the model input size; otherwise a center crop.
    pub crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: true,
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.1,
            crop: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            hflip: false,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            crop: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub lr_floor: f64,
    /// Minimum absolute drop in validation loss that counts as progress.
    pub plateau_threshold: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub alpha: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            plateau_patience: 10,
            lr_factor: 0.1,
            lr_floor: 1e-9,
            plateau_threshold: 1e-6,
            max_epochs: 500,
            batch_size: 64,
            eval_batch_size: 256,
            seed: 0,
            val_fraction: 0.1,
            alpha: 0.5,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if !(self.lr0 > 0.0) || !(self.lr_floor < self.lr0) {
            return bad("need 0 < lr_floor < lr0");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.max_epochs == 0 {
            return bad("batch sizes and max_epochs must be positive");
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        let a = &self.augment;
        if [a.brightness, a.contrast, a.saturation]
            .iter()
            .any(|d| !(0.0..1.0).contains(d))
        {
            return bad("jitter deltas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { alpha: self.alpha }
    }
}

/// Bias-corrected Adam with lazily allocated moments.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f64> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Real> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter whose `mask` entry is true.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], mask: &[bool], lr: f64) -> Result<()> {
        if params.len() != grads.len() || mask.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters, {} gradients, {} mask entries",
                params.len(),
                grads.len(),
                mask.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "parameter {k} is {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            g.check_finite(&format!("gradient of parameter {k}"))?;
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                if mask[k] {
                    let mh = m[j] / c1;
                    let vh = v[j] / c2;
                    p.data_mut()[j] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleAction {
    Continue,
    Reduced,
    Stop,
}

/// Multiplies the learning rate by `factor` after `patience` epochs without a
/// new minimum, and stops once it falls below `floor`.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr0: f64,
    factor: f64,
    floor: f64,
    patience: usize,
    threshold: f64,
    best: f64,
    bad_epochs: usize,
    reductions: i32,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauScheduler {
            lr0: cfg.lr0,
            factor: cfg.lr_factor,
            floor: cfg.lr_floor,
            patience: cfg.plateau_patience,
            threshold: cfg.plateau_threshold,
            best: f64::INFINITY,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    /// `lr0 · factor^k` after `k` reductions.
    pub fn lr(&self) -> f64 {
        self.lr0 * self.factor.powi(self.reductions)
    }

    pub fn reductions(&self) -> i32 {
        self.reductions
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleAction {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.bad_epochs = 0;
            return ScheduleAction::Continue;
        }
        self.best = self.best.min(val_loss);
        self.bad_epochs += 1;
        if self.bad_epochs < self.patience {
            return ScheduleAction::Continue;
        }
        self.bad_epochs = 0;
        self.reductions += 1;
        // relative slack so lr0·factor^k landing on the floor is not a stop
        if self.lr() < self.floor * (1.0 - 1e-9) {
            ScheduleAction::Stop
        } else {
            ScheduleAction::Reduced
        }
    }
}

/// Learning rate after replaying a validation-loss history, or `None` once
/// the schedule signals a stop.
pub fn lr_schedule(history: &[f64], cfg: &TrainConfig) -> Option<f64> {
    let mut s = PlateauScheduler::new(cfg);
    for &v in history {
        if s.observe(v) == ScheduleAction::Stop {
            return None;
        }
    }
    Some(s.lr())
}

pub fn hflip(img: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * h * w);
    for row in img.chunks(w) {
        out.extend(row.iter().rev());
    }
    out
}

pub fn crop(img: &[f64], (c, h, w): (usize, usize, usize), (oy, ox): (usize, usize), (th, tw): (usize, usize)) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * th * tw);
    for ci in 0..c {
        for y in oy..oy + th {
            let start = (ci * h + y) * w + ox;
            out.extend_from_slice(&img[start..start + tw]);
        }
    }
    out
}

fn clamp01(img: &mut [f64]) {
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Brightness, contrast and saturation factors, applied in that order, each
/// followed by clamping to `[0, 1]`. A factor of exactly 1 is skipped.
pub fn color_jitter(img: &mut [f64], c: usize, factors: (f64, f64, f64)) {
    let (brightness, contrast, saturation) = factors;
    let plane = img.len() / c;
    if brightness != 1.0 {
        img.iter_mut().for_each(|v| *v *= brightness);
        clamp01(img);
    }
    let gray = |img: &[f64], p: usize| {
        if c == 3 {
            0.299 * img[p] + 0.587 * img[plane + p] + 0.114 * img[2 * plane + p]
        } else {
            img[p]
        }
    };
    if contrast != 1.0 {
        let mean = (0..plane).map(|p| gray(img, p)).sum::<f64>() / plane as f64;
        img.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
        clamp01(img);
    }
    if saturation != 1.0 && c == 3 {
        for p in 0..plane {
            let g = gray(img, p);
            for ci in 0..3 {
                let v = &mut img[ci * plane + p];
                *v = g + saturation * (*v - g);
            }
        }
        clamp01(img);
    }
}

/// Produces model-sized views of dataset images.
#[derive(Clone, Debug)]
pub struct Augmenter {
    pub cfg: AugmentConfig,
    pub out_hw: (usize, usize),
}

impl Augmenter {
    fn center(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.out_hw.0) / 2, (w - self.out_hw.1) / 2)
    }

    /// Center crop, no flip or jitter.
    pub fn eval_view(&self, img: &[f64], shape: (usize, usize, usize)) -> Vec<f64> {
        let (_, h, w) = shape;
        crop(img, shape, self.center(h, w), self.out_hw)
    }

    pub fn train_view(&self, img: &[f64], shape: (usize, usize, usize), rng: &mut impl Rng) -> Vec<f64> {
        let (c, h, w) = shape;
        let mut cur = if self.cfg.hflip && rng.gen_bool(0.5) {
            hflip(img, shape)
        } else {
            img.to_vec()
        };
        let mut factor = |d: f64| if d > 0.0 { rng.gen_range(1.0 - d..=1.0 + d) } else { 1.0 };
        let factors = (
            factor(self.cfg.brightness),
            factor(self.cfg.contrast),
            factor(self.cfg.saturation),
        );
        color_jitter(&mut cur, c, factors);
        let offset = if self.cfg.crop {
            (
                rng.gen_range(0..=h - self.out_hw.0),
                rng.gen_range(0..=w - self.out_hw.1),
            )
        } else {
            self.center(h, w)
        };
        crop(&cur, shape, offset, self.out_hw)
    }

    /// Batch tensor of the selected images; `rng = None` gives eval views.
    pub fn batch<T: Real>(&self, ds: &Dataset, idx: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<(Tensor<T>, Vec<usize>)> {
        let shape = ds.image_shape();
        if shape.1 < self.out_hw.0 || shape.2 < self.out_hw.1 {
            return Err(Error::shape(format!(
                "images {shape:?} are smaller than the model input {:?}",
                self.out_hw
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * shape.0 * self.out_hw.0 * self.out_hw.1);
        let mut labels = Vec::with_capacity(idx.len());
        let mut rng = rng;
        for &i in idx {
            let img = ds.images.row(i);
            let view = match rng.as_deref_mut() {
                Some(r) => self.train_view(img, shape, r),
                None => self.eval_view(img, shape),
            };
            data.extend(view.into_iter().map(T::lit));
            labels.push(ds.labels[i]);
        }
        let t = Tensor::new(vec![idx.len(), shape.0, self.out_hw.0, self.out_hw.1], data)?;
        Ok((t, labels))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and accuracy on center-cropped images, eval mode.
pub fn evaluate<T: Real>(model: &Model<T>, ds: &Dataset, loss_cfg: &LossConfig, batch_size: usize) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let (_, h, w) = model.config().input_shape;
    let aug = Augmenter {
        cfg: AugmentConfig::none(),
        out_hw: (h, w),
    };
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| -> Result<(f64, usize)> {
            let (x, labels) = aug.batch::<T>(ds, chunk, None)?;
            let logits = model.forward_eval(&x)?;
            let l = loss(&logits, &labels, loss_cfg)?.as_f64() * chunk.len() as f64;
            let correct = argmax_rows(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            Ok((l, correct))
        })
        .collect::<Result<Vec<_>>>()?;
    let (total, correct) = parts.iter().fold((0.0, 0), |(a, b), &(l, c)| (a + l, b + c));
    Ok(EvalResult {
        loss: total / ds.len() as f64,
        accuracy: correct as f64 / ds.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    LrFloor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_acc: f64,
    pub stop: StopReason,
    pub param_count: usize,
}

impl TrainingReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.epochs {
            w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "epochs": self.epochs.len(),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "best_val_acc": self.best_val_acc,
            "stop": self.stop,
            "param_count": self.param_count,
            "final_lr": self.epochs.last().map(|r| r.lr),
            "seconds": self.epochs.iter().map(|r| r.seconds).sum::<f64>(),
        })
    }

    /// Equality ignoring wall-clock columns.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &TrainingReport| {
            let mut r = r.clone();
            r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
            r
        };
        strip(self) == strip(other)
    }
}

fn assert_nmf_constraints<T: Real>(model: &Model<T>) -> Result<()> {
    for l in model.layers() {
        if let Layer::Nmf { params, .. } = &l.layer {
            for p in params {
                let w = derive_w(&p.u)?;
                debug_assert!(w.data().iter().all(|&v| v >= T::zero()));
            }
        }
    }
    Ok(())
}

/// Trains `model` on `train`, selecting by validation loss. The best weights
/// are restored before returning. `on_epoch` sees each record as it is made.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let (c, h, w) = model.config().input_shape;
    if train.image_shape().0 != c {
        return Err(Error::shape(format!(
            "dataset has {} channels, model expects {c}",
            train.image_shape().0
        )));
    }
    let aug = Augmenter {
        cfg: cfg.augment.clone(),
        out_hw: (h, w),
    };
    let loss_cfg = cfg.loss();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    let mut adam = Adam::<T>::new();
    let mut sched = PlateauScheduler::new(cfg);
    let mask = model.trainable();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, EvalResult, BTreeMap<String, Tensor<T>>)> = None;
    let mut records = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let lr = sched.lr();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = aug.batch::<T>(train, chunk, Some(&mut aug_rng))?;
            let logits = model.forward_train(&x)?;
            total += loss(&logits, &labels, &loss_cfg)?.as_f64() * chunk.len() as f64;
            let grads = model.backward(&loss_grad(&logits, &labels, &loss_cfg)?)?;
            adam.step(model.parameters_mut(), &grads, &mask, lr)?;
        }
        assert_nmf_constraints(model)?;
        let ev = evaluate(model, val, &loss_cfg, cfg.eval_batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss: ev.loss,
            val_acc: ev.accuracy,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        records.push(rec);
        if best.as_ref().is_none_or(|(_, b, _)| ev.loss < b.loss) {
            let snapshot = model
                .state_dict()
                .into_iter()
                .map(|(k, v)| (k, v.clone()))
                .collect();
            best = Some((epoch, ev, snapshot));
        }
        if sched.observe(ev.loss) == ScheduleAction::Stop {
            stop = StopReason::LrFloor;
            break;
        }
    }
    let (best_epoch, best_eval, snapshot) = best.expect("at least one epoch ran");
    model.load_state(snapshot)?;
    Ok(TrainingReport {
        epochs: records,
        best_epoch,
        best_val_loss: best_eval.loss,
        best_val_acc: best_eval.accuracy,
        stop,
        param_count: model.param_count(),
    })
}

/// Settings for unsupervised layer-wise NMF weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalNmfConfig {
    /// Images whose patches are factorized.
    pub images: usize,
    /// Patches sampled per group.
    pub patches: usize,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for LocalNmfConfig {
    fn default() -> Self {
        LocalNmfConfig {
            images: 256,
            patches: 4000,
            rounds: 200,
            seed: 0,
        }
    }
}

/// Replaces every NMF layer's `U` by a classic KL-NMF basis of its input
/// patches, layer by layer from the input, then freezes those layers.
pub fn pretrain_nmf_local<T: Real>(model: &mut Model<T>, data: &Dataset, cfg: &LocalNmfConfig) -> Result<()> {
    let (_, h, w) = model.config().input_shape;
    let aug = Augmenter {
        cfg: AugmentConfig::none(),
        out_hw: (h, w),
    };
    let n = cfg.images.min(data.len());
    if n == 0 {
        return Err(Error::invalid("no images for local NMF"));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (x, _) = aug.batch::<T>(data, &idx, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for li in 0..model.layers().len() {
        let Layer::Nmf { spec, .. } = &model.layers()[li].layer else {
            continue;
        };
        let spec = *spec;
        let input = model.forward_prefix(&x, li)?;
        let cols = unfold(&input, &spec)?;
        let mut bases = Vec::with_capacity(spec.groups);
        for g in 0..spec.groups {
            let patches = group_patches(&cols, &spec, g);
            let s = spec.group_patch_len();
            let rows: Vec<&[T]> = patches
                .data()
                .chunks(s)
                .filter(|r| r.iter().fold(T::zero(), |a, &b| a + b) > T::zero())
                .collect();
            if rows.is_empty() {
                return Err(Error::invalid(format!(
                    "{}: every input patch is zero",
                    model.layers()[li].name
                )));
            }
            let picked: Vec<&[T]> = rows
                .choose_multiple(&mut rng, cfg.patches.min(rows.len()))
                .copied()
                .collect();
            let mut data = Vec::with_capacity(picked.len() * s);
            for r in &picked {
                let mass = r.iter().fold(T::zero(), |a, &b| a + b);
                data.extend(r.iter().map(|&v| v / mass));
            }
            let xm = Tensor::new(vec![picked.len(), s], data)?;
            let fac = factorize(&xm, spec.group_out(), cfg.rounds, rng.gen())?;
            bases.push(NmfParams::new(fac.w)?);
        }
        if let Layer::Nmf { params, .. } = &mut model.layers_mut()[li].layer {
            *params = bases;
        }
    }
    model.freeze_nmf();
    Ok(())
}
