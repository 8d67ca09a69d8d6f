use super::{
    augment_sample, compute_class_weights, focal_loss, focal_loss_value, Adam, AdamConfig, AugConfig, Checkpoint,
    CheckpointMeta, ClassWeightMode, EarlyStopConfig, EarlyStopping, Monitor, PlateauConfig, PlateauLr, Result,
    TrainError,
};
use crate::eval::{confusion, macro_average, roc_auc, UndefinedPolicy};
use crate::net::{ForwardOptions, Model};
use crate::tensor::{Tape, Tensor};
use crate::volio::{IntensityUnit, Volume};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// Mixes a base seed with a path of integers (splitmix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |h, &p| mix(h ^ mix(p)))
}

/// Brain-window bounds (HU) used to scale raw or shifted volumes into [0, 1].
pub const INPUT_WINDOW_HU: (f64, f64) = (0.0, 100.0);

/// Network input for a volume: spatial extents in storage order
/// (`[nz, ny, nx]`, or `[ny, nx]` for single-slice images) and the values
/// scaled to [0, 1]. Normalized volumes pass through; HU and shifted volumes
/// are clipped to the brain window.
pub fn volume_input(v: &Volume) -> (Vec<usize>, Vec<f32>) {
    let [nx, ny, nz] = v.shape();
    let spatial = if nz == 1 { vec![ny, nx] } else { vec![nz, ny, nx] };
    let offset = match v.unit() {
        IntensityUnit::Normalized => return (spatial, v.data().to_vec()),
        IntensityUnit::Hu => 0.0,
        IntensityUnit::NonNegative => 1024.0,
    };
    let (lo, hi) = INPUT_WINDOW_HU;
    let data = v.data().iter().map(|&x| ((x as f64 - offset - lo) / (hi - lo)).clamp(0.0, 1.0) as f32).collect();
    (spatial, data)
}

/// One subject: image channels in storage order plus optional raw metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `channels × prod(spatial)` values, channel-major.
    pub image: Vec<f32>,
    pub label: usize,
    pub metadata: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub spatial: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(channels: usize, spatial: Vec<usize>) -> Self {
        Self { channels, spatial, samples: Vec::new() }
    }

    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.image.len() != self.channels * self.voxels() {
            return Err(TrainError::ShapeMismatch(format!(
                "sample '{}' has {} values, expected {}×{:?}",
                sample.id,
                sample.image.len(),
                self.channels,
                self.spatial
            )));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            channels: self.channels,
            spatial: self.spatial.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Stacks samples into `[B, C, *spatial]`; `aug` gives the config and
    /// per-sample seeds when augmenting.
    fn batch(&self, indices: &[usize], aug: Option<(&AugConfig, &dyn Fn(usize) -> u64)>) -> Tensor {
        let v = self.voxels();
        let mut data = Vec::with_capacity(indices.len() * self.channels * v);
        for &i in indices {
            let s = &self.samples[i];
            for c in 0..self.channels {
                let chan = &s.image[c * v..(c + 1) * v];
                match aug {
                    Some((cfg, seed)) => data.extend(augment_sample(chan, &self.spatial, seed(i), cfg).iter().map(|&x| x as f64)),
                    None => data.extend(chan.iter().map(|&x| x as f64)),
                }
            }
        }
        let mut shape = vec![indices.len(), self.channels];
        shape.extend(&self.spatial);
        Tensor::new(shape, data).expect("batch size matches shape")
    }

    fn metadata(&self, model: &Model, indices: &[usize]) -> Result<Option<Tensor>> {
        let Some(spec) = model.metadata_spec() else { return Ok(None) };
        let rows = indices
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                s.metadata.clone().ok_or_else(|| {
                    TrainError::ShapeMismatch(format!("sample '{}' has no metadata for a fused model", s.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(spec.transform_batch(&rows)?))
    }
}

/// Splits indices per class so that each class contributes
/// `round(n_c · val_fraction)` samples to validation. Both lists are sorted.
pub fn stratified_split(labels: &[usize], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(TrainError::ConfigInvalid(format!("validation fraction {val_fraction}")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * val_fraction).round() as usize;
        val.extend(&idx[..k]);
        train.extend(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    /// Metric that selects the best checkpoint; its direction follows the
    /// metric kind.
    pub monitor: Monitor,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self { monitor: Monitor::ValLoss }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_phase1: f64,
    /// Defaults to `lr_phase1 / 10`.
    pub lr_phase2: Option<f64>,
    /// Epochs with the backbone frozen.
    pub freeze_epochs: usize,
    pub gamma: f64,
    pub class_weight: ClassWeightMode,
    pub adam: AdamConfig,
    pub augmentation: AugConfig,
    pub early_stop: EarlyStopConfig,
    pub plateau: PlateauConfig,
    pub checkpoint: CheckpointConfig,
    pub seed: u64,
    /// Store per-epoch wall-clock time in the history. Off by default so
    /// that histories are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr_phase1: 1e-3,
            lr_phase2: None,
            freeze_epochs: 5,
            gamma: 2.0,
            class_weight: ClassWeightMode::Balanced,
            adam: AdamConfig::default(),
            augmentation: AugConfig::default(),
            early_stop: EarlyStopConfig::default(),
            plateau: PlateauConfig::default(),
            checkpoint: CheckpointConfig::default(),
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn lr2(&self) -> f64 {
        self.lr_phase2.unwrap_or(self.lr_phase1 / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::ConfigInvalid(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad(format!("epochs {} batch size {}", self.epochs, self.batch_size));
        }
        if self.freeze_epochs >= self.epochs {
            return bad(format!("freeze_epochs {} must be below epochs {}", self.freeze_epochs, self.epochs));
        }
        for lr in [self.lr_phase1, self.lr2()] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("learning rate {lr}"));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("focal gamma {}", self.gamma));
        }
        if self.early_stop.patience == 0 || self.plateau.patience == 0 {
            return bad("callback patience must be at least 1".into());
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) || p.min_lr < 0.0 {
            return bad(format!("plateau factor {} min_lr {}", p.factor, p.min_lr));
        }
        self.augmentation.validate()
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub val_f1: f64,
    pub val_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch after which early stopping ended training.
    pub stopped_early_at: Option<usize>,
}

impl History {
    pub fn values(&self, monitor: Monitor) -> Vec<f64> {
        self.records.iter().map(|r| monitor.value(r)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "phase", "lr", "train_loss", "val_loss", "val_auc", "val_f1", "val_accuracy", "wall_time"])
            .expect("in-memory write");
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.phase.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.val_auc.to_string(),
                r.val_f1.to_string(),
                r.val_accuracy.to_string(),
                r.wall_time.map_or(String::new(), |t| t.to_string()),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("ascii csv")
    }
}

/// Model state at the epoch where a metric was best.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub epoch: usize,
    pub value: f64,
    pub model: Model,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: History,
    /// Best epoch by the checkpoint monitor, with optimizer state.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_auc: Snapshot,
    pub best_f1: Snapshot,
    pub best_loss: Snapshot,
}

impl FitOutcome {
    /// Models for the "best AUC", "best F1", "best loss" and "last" columns.
    pub fn snapshots(&self) -> [(&'static str, &Model); 4] {
        [
            ("best_auc", &self.best_auc.model),
            ("best_f1", &self.best_f1.model),
            ("best_loss", &self.best_loss.model),
            ("last", &self.last.model),
        ]
    }
}

/// Eval-mode class probabilities `[N, K]`, computed in batches.
pub fn predict(model: &Model, data: &Dataset, batch_size: usize) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(data.len() * model.config().num_classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = data.batch(chunk, None);
        let m = data.metadata(model, chunk)?;
        rows.extend_from_slice(model.forward(&x, m.as_ref())?.data());
    }
    Ok(Tensor::new(vec![data.len(), model.config().num_classes], rows)?)
}

struct ValMetrics {
    loss: f64,
    auc: f64,
    f1: f64,
    accuracy: f64,
}

fn validate(model: &Model, val: &Dataset, batch_size: usize, gamma: f64) -> Result<ValMetrics> {
    let probs = predict(model, val, batch_size)?;
    let labels = val.labels();
    let loss = focal_loss_value(&probs, &labels, &[1.0, 1.0], gamma)?;
    let scores: Vec<f64> = probs.data().chunks(2).map(|r| r[1]).collect();
    let pred: Vec<usize> = scores.iter().map(|&s| usize::from(s > 0.5)).collect();
    let dead: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let auc = roc_auc(&scores, &dead)?;
    let cm = confusion(&pred, &labels, 2)?;
    let f1 = macro_average(&cm.classes, UndefinedPolicy::Zero)?.metrics.f1.unwrap_or(0.0);
    let accuracy = pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    Ok(ValMetrics { loss, auc, f1, accuracy })
}

fn check_classes(data: &Dataset, split: &'static str) -> Result<()> {
    for class in 0..2 {
        if !data.samples.iter().any(|s| s.label == class) {
            return Err(TrainError::EmptyClass { split, class });
        }
    }
    Ok(())
}

/// Shuffled minibatches; a trailing batch of one sample joins the previous one.
fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

struct Best {
    monitor: Monitor,
    value: f64,
    snapshot: Option<Snapshot>,
}

impl Best {
    fn new(monitor: Monitor) -> Self {
        Self { monitor, value: monitor.worst(), snapshot: None }
    }

    fn offer(&mut self, record: &EpochRecord, model: &Model) -> bool {
        let v = self.monitor.value(record);
        if self.monitor.improves(v, self.value, 0.0) || self.snapshot.is_none() {
            self.value = v;
            self.snapshot = Some(Snapshot { epoch: record.epoch, value: v, model: model.clone() });
            true
        } else {
            false
        }
    }

    fn take(self) -> Snapshot {
        self.snapshot.expect("at least one epoch ran")
    }
}

/// Trains `model` in two phases: the head alone for `freeze_epochs` epochs
/// with frozen, inference-mode backbone, then every parameter. Each phase
/// starts with a fresh optimizer and fresh callback state.
///
/// When `checkpoint_dir` is given, `best.json` is rewritten whenever the
/// checkpoint monitor improves and `last.json` after every epoch.
pub fn fit(model: Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<FitOutcome> {
    fit_observed(model, train, val, cfg, checkpoint_dir, |_, _| {})
}

/// [`fit`] that also hands every finished epoch's record and model state
/// to `on_epoch`, after validation and before callbacks run.
pub fn fit_observed(
    mut model: Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord, &Model),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if model.config().num_classes != 2 {
        return Err(TrainError::ConfigInvalid("training expects a binary classifier".into()));
    }
    for d in [train, val] {
        let mut want = vec![d.channels];
        want.extend(&d.spatial);
        if want.as_slice() != &model.input_shape(0)[1..] {
            return Err(TrainError::ShapeMismatch(format!("data {want:?} vs model input {:?}", model.input_shape(0))));
        }
    }
    check_classes(train, "train")?;
    check_classes(val, "validation")?;
    let class_weights = compute_class_weights(&train.labels(), 2, &cfg.class_weight)?;
    if let Some(spec) = model.metadata_spec_mut() {
        if !spec.is_fitted() {
            let rows = train
                .samples
                .iter()
                .map(|s| s.metadata.clone().ok_or_else(|| TrainError::ShapeMismatch(format!("sample '{}' lacks metadata", s.id))))
                .collect::<Result<Vec<_>>>()?;
            spec.fit(&rows)?;
        }
    }

    let mut history = History::default();
    let mut optimizer = Adam::new(&model, cfg.adam);
    let mut plateau = PlateauLr::new(&cfg.plateau);
    let mut stopper = EarlyStopping::new(cfg.early_stop.monitor, cfg.early_stop.patience, cfg.early_stop.min_delta);
    let mut lr = if cfg.freeze_epochs > 0 { cfg.lr_phase1 } else { cfg.lr2() };
    let mut best_ck: Option<Checkpoint> = None;
    let mut best_ck_value = cfg.checkpoint.monitor.worst();
    let (mut by_auc, mut by_f1, mut by_loss) =
        (Best::new(Monitor::ValAuc), Best::new(Monitor::ValF1), Best::new(Monitor::ValLoss));
    let mut last = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let phase: u8 = if epoch <= cfg.freeze_epochs { 1 } else { 2 };
        if phase == 2 && epoch == cfg.freeze_epochs + 1 && cfg.freeze_epochs > 0 {
            optimizer = Adam::new(&model, cfg.adam);
            plateau = PlateauLr::new(&cfg.plateau);
            stopper = EarlyStopping::new(cfg.early_stop.monitor, cfg.early_stop.patience, cfg.early_stop.min_delta);
            lr = cfg.lr2();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, 0]));
        let batches = minibatches(train.len(), cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let seed_of = |i: usize| derive_seed(cfg.seed, &[epoch as u64, 1, i as u64]);
            let x = train.batch(idx, cfg.augmentation.enabled.then_some((&cfg.augmentation, &seed_of as &dyn Fn(usize) -> u64)));
            let meta = train.metadata(&model, idx)?;
            let targets: Vec<usize> = idx.iter().map(|&i| train.samples[i].label).collect();

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, |name| phase == 2 || name.starts_with("head."));
            let xv = tape.leaf(x, false);
            let mv = meta.map(|m| tape.leaf(m, false));
            let opts = if phase == 2 {
                ForwardOptions::train(derive_seed(cfg.seed, &[epoch as u64, 2, b as u64]))
            } else {
                ForwardOptions::eval()
            };
            let out = model.forward_on(&mut tape, &bound, xv, mv, opts)?;
            let loss = focal_loss(&mut tape, out.probs, &targets, &class_weights, cfg.gamma)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss(epoch));
            }
            loss_sum += value * idx.len() as f64;
            let mut grads = tape.backward(loss)?;
            let mut named = Vec::new();
            for &(ti, var) in bound.entries() {
                if tape.requires_grad(var) {
                    if let Some(g) = grads.take(var) {
                        named.push((model.tensors()[ti].name.clone(), g));
                    }
                }
            }
            let stats = out.batch_stats;
            drop(tape);
            optimizer.update(&mut model, &named, lr)?;
            if phase == 2 {
                model.update_running_stats(&stats)?;
            }
        }

        let vm = validate(&model, val, cfg.batch_size, cfg.gamma)?;
        let record = EpochRecord {
            epoch,
            phase,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss: vm.loss,
            val_auc: vm.auc,
            val_f1: vm.f1,
            val_accuracy: vm.accuracy,
            wall_time: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        };

        on_epoch(&record, &model);

        // Checkpointing first, then the learning-rate schedule, then stopping.
        by_auc.offer(&record, &model);
        by_f1.offer(&record, &model);
        by_loss.offer(&record, &model);
        let meta = |best_metric| CheckpointMeta {
            epoch,
            phase,
            lr,
            monitor: Some(cfg.checkpoint.monitor),
            best_metric,
            seed: cfg.seed,
        };
        let current = cfg.checkpoint.monitor.value(&record);
        if best_ck.is_none() || cfg.checkpoint.monitor.improves(current, best_ck_value, 0.0) {
            best_ck_value = current;
            let ck = Checkpoint { model: model.clone(), optimizer: Some(optimizer.clone()), meta: meta(Some(current)) };
            if let Some(dir) = checkpoint_dir {
                ck.save(&dir.join("best.json"))?;
            }
            best_ck = Some(ck);
        }
        let last_ck = Checkpoint { model: model.clone(), optimizer: Some(optimizer.clone()), meta: meta(Some(best_ck_value)) };
        if let Some(dir) = checkpoint_dir {
            last_ck.save(&dir.join("last.json"))?;
        }
        last = Some(last_ck);

        if cfg.plateau.enabled {
            lr = plateau.observe(cfg.plateau.monitor.value(&record), lr);
        }
        let stop = phase == 2 && cfg.early_stop.enabled && stopper.observe(cfg.early_stop.monitor.value(&record));
        history.records.push(record);
        if stop {
            history.stopped_early_at = Some(epoch);
            break;
        }
    }

    Ok(FitOutcome {
        history,
        best: best_ck.expect("at least one epoch ran"),
        last: last.expect("at least one epoch ran"),
        best_auc: by_auc.take(),
        best_f1: by_f1.take(),
        best_loss: by_loss.take(),
    })
}
