//! Trainers for SPSS (proportions only), SPSS+ (proportions and keypoints)
//! and the mask-supervised benchmark, sharing one optimiser and one
//! early-stopping loop.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::extract_sp;
use crate::error::{Error, Result};
use crate::io::write_json;
use crate::nn::{checkpoint, gap, gap_backward, BackboneConfig, Input, ModelState, OutputGrad, Real, ScoreMaps};
use crate::objectives::{loss_sk, loss_sk_grad, loss_sp, loss_sp_grad, loss_total, pixel_cross_entropy, LossConfig};
use crate::types::{AnnotatedDataset, KeypointAnnotation, ProportionVector};

/// Stream tags mixed into the run seed so that carving, shuffling and
/// initialisation draw from independent generators.
const VALIDATION_STREAM: u64 = 0x5641_4c49_4441_5445;
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4521;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Spss,
    SpssPlus,
    Benchmark,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Spss => "spss",
            TrainMode::SpssPlus => "spss_plus",
            TrainMode::Benchmark => "benchmark",
        })
    }
}

/// Which images drive early stopping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationMode {
    /// A seeded fraction of the train split is held out for monitoring.
    Holdout { fraction: f64 },
    /// Monitor the test split directly.
    TestSplit,
}

impl Default for ValidationMode {
    fn default() -> Self {
        ValidationMode::Holdout { fraction: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss_cfg: LossConfig,
    pub mode: TrainMode,
    pub base_filters: usize,
    pub validation: ValidationMode,
    pub precision: Precision,
    pub adam: AdamConfig,
    /// Start the head biases at the log of the mean training class
    /// proportion instead of zero.
    pub prior_head_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            loss_cfg: LossConfig::default(),
            mode: TrainMode::Spss,
            base_filters: 64,
            validation: ValidationMode::default(),
            precision: Precision::F32,
            adam: AdamConfig::default(),
            prior_head_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if let ValidationMode::Holdout { fraction } = self.validation {
            if !(0.0..1.0).contains(&fraction) {
                return Err(Error::invalid(format!("validation fraction {fraction} not in [0, 1)")));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and epsilon be positive"));
        }
        self.loss_cfg.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub mode: TrainMode,
    pub seed: u64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// 1-based epoch after which training ended.
    pub stopping_epoch: usize,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub early_stopped: bool,
    pub n_train: usize,
    pub n_validation: usize,
    /// Which loss the monitor saw and where it came from.
    pub monitor: String,
    pub adam: AdamConfig,
    pub config: TrainConfig,
}

impl TrainHistory {
    /// Equality ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        let strip = |h: &Self| Self {
            epoch_seconds: Vec::new(),
            ..h.clone()
        };
        strip(self) == strip(other)
    }
}

/// Patience-based stopping on a monitored loss: stops once `patience`
/// consecutive epochs fail to improve strictly on the best value.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            epoch: 0,
        }
    }

    /// Records the next epoch's loss; returns `true` when training should
    /// stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn improved_last(&self) -> bool {
        self.best_epoch == self.epoch
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

/// Adam with bias correction; moments kept in double precision.
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step<T: Real>(&mut self, model: &mut ModelState<T>, grads: &[T]) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.cfg.epsilon);
        let (m, v) = (&mut self.m, &mut self.v);
        model.update_params(|params| {
            for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.f64();
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = T::of(p.f64() - update);
            }
        });
        model.step += 1;
    }
}

/// Per-run view of the dataset after the validation carve-out.
struct Prepared<'a, T> {
    ds: &'a AnnotatedDataset,
    train: Vec<&'a str>,
    val: Vec<&'a str>,
    inputs: BTreeMap<&'a str, Input<T>>,
    keypoints: BTreeMap<&'a str, Vec<&'a KeypointAnnotation>>,
}

fn check_dataset(ds: &AnnotatedDataset, cfg: &TrainConfig, ids: &[&str]) -> Result<()> {
    match cfg.mode {
        TrainMode::Spss | TrainMode::SpssPlus => {
            let missing: Vec<&str> = ids.iter().copied().filter(|id| !ds.sp.contains_key(*id)).collect();
            if !missing.is_empty() {
                return Err(Error::MissingAnnotation(format!(
                    "{} train images lack proportions: {}",
                    missing.len(),
                    missing.join(", ")
                )));
            }
            if cfg.mode == TrainMode::SpssPlus && ds.keypoints.is_empty() {
                return Err(Error::MissingAnnotation(
                    "SPSS+ needs keypoint annotations; train with the proportion-only SPSS mode instead".into(),
                ));
            }
        }
        TrainMode::Benchmark => {
            let missing: Vec<&str> = ids.iter().copied().filter(|id| !ds.gt_masks.contains_key(*id)).collect();
            if !missing.is_empty() {
                return Err(Error::MissingAnnotation(format!(
                    "{} train images lack ground-truth masks: {}",
                    missing.len(),
                    missing.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn prepare<'a, T: Real>(ds: &'a AnnotatedDataset, cfg: &TrainConfig) -> Result<Prepared<'a, T>> {
    let mut train: Vec<&str> = ds.train_ids();
    if train.is_empty() {
        return Err(Error::invalid("dataset has no train images"));
    }
    check_dataset(ds, cfg, &train)?;
    let val: Vec<&str> = match cfg.validation {
        ValidationMode::TestSplit => ds.test_ids(),
        ValidationMode::Holdout { fraction } => {
            let n_val = ((fraction * train.len() as f64).round() as usize).min(train.len() - 1);
            let mut order = train.clone();
            order.sort_unstable();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_STREAM));
            let held: Vec<&str> = order[..n_val].to_vec();
            train.retain(|id| !held.contains(id));
            let mut held = held;
            held.sort_unstable();
            held
        }
    };
    check_dataset(ds, cfg, &val)?;
    let inputs = train
        .iter()
        .chain(&val)
        .map(|&id| {
            let p = ds.patch(id).ok_or_else(|| Error::MissingAnnotation(format!("no patch {id}")))?;
            Ok((id, Input::from_patch(p)))
        })
        .collect::<Result<_>>()?;
    let mut keypoints: BTreeMap<&str, Vec<&KeypointAnnotation>> = BTreeMap::new();
    for ann in &ds.keypoints {
        keypoints.entry(ann.image_id.as_str()).or_default().push(ann);
    }
    Ok(Prepared {
        ds,
        train,
        val,
        inputs,
        keypoints,
    })
}

/// Loss of a batch and, when requested, its gradient seed.
fn batch_objective<T: Real>(
    prep: &Prepared<'_, T>,
    cfg: &TrainConfig,
    ids: &[&str],
    maps: &[ScoreMaps<T>],
    logits: Option<Vec<&[T]>>,
    want_grad: bool,
) -> Result<(f64, Option<OutputGrad<T>>)> {
    let ds = prep.ds;
    match cfg.mode {
        TrainMode::Benchmark => {
            let truth: Vec<_> = ids.iter().map(|id| &ds.gt_masks[*id]).collect();
            let logits = logits.ok_or_else(|| Error::invalid("benchmark loss needs logits"))?;
            let activation = maps[0].activation();
            let (loss, grads) = pixel_cross_entropy(&logits, activation, &truth)?;
            Ok((loss, want_grad.then_some(OutputGrad::Logits(grads))))
        }
        TrainMode::Spss | TrainMode::SpssPlus => {
            let alpha = if cfg.mode == TrainMode::Spss { 1.0 } else { cfg.loss_cfg.alpha };
            let pred: Vec<ProportionVector> = maps.iter().map(gap).collect();
            let target: Vec<ProportionVector> = ids.iter().map(|id| ds.sp[*id].clone()).collect();
            let lsp = loss_sp(&pred, &target)?;
            let anns: Vec<KeypointAnnotation> = if alpha < 1.0 {
                ids.iter()
                    .flat_map(|id| prep.keypoints.get(id).into_iter().flatten())
                    .map(|a| (*a).clone())
                    .collect()
            } else {
                Vec::new()
            };
            let by_id: BTreeMap<&str, &ScoreMaps<T>> = ids.iter().copied().zip(maps.iter()).collect();
            let eps = cfg.loss_cfg.bce_epsilon;
            let lsk = if anns.is_empty() { 0.0 } else { loss_sk(&by_id, &anns, eps)? };
            let loss = loss_total(lsp, lsk, &LossConfig { alpha, ..cfg.loss_cfg });
            if !want_grad {
                return Ok((loss, None));
            }
            let mut seeds: Vec<Vec<T>> = if alpha > 0.0 {
                let d_rho = loss_sp_grad(&pred, &target)?;
                maps.iter()
                    .zip(&d_rho)
                    .map(|(m, d)| {
                        let scaled: Vec<f64> = d.iter().map(|v| alpha * v).collect();
                        gap_backward(m, &scaled)
                    })
                    .collect()
            } else {
                maps.iter().map(|m| vec![T::zero(); m.values().len()]).collect()
            };
            if alpha < 1.0 && !anns.is_empty() {
                let sk = loss_sk_grad(&by_id, &anns, eps)?;
                for (i, id) in ids.iter().enumerate() {
                    if let Some(g) = sk.get(*id) {
                        for (s, &v) in seeds[i].iter_mut().zip(g) {
                            *s = T::of(s.f64() + (1.0 - alpha) * v);
                        }
                    }
                }
            }
            Ok((loss, Some(OutputGrad::Scores(seeds))))
        }
    }
}

/// Size-weighted mean of the batch loss over `ids`, in chunks of the batch
/// size. For the proportion loss this is the plain mean over images.
fn evaluate_loss<T: Real>(model: &ModelState<T>, prep: &Prepared<'_, T>, cfg: &TrainConfig, ids: &[&str]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in ids.chunks(cfg.batch_size) {
        let inputs: Vec<Input<T>> = chunk.iter().map(|id| prep.inputs[id].clone()).collect();
        let graph = model.forward_graph(inputs)?;
        let logits = (0..graph.len()).map(|i| graph.logits(i)).collect();
        let (loss, _) = batch_objective(prep, cfg, chunk, &graph.maps, Some(logits), false)?;
        total += loss * chunk.len() as f64 / ids.len() as f64;
    }
    Ok(total)
}

/// Loss of the model on the given train images, computed from scratch.
pub fn batch_loss<T: Real>(model: &ModelState<T>, ds: &AnnotatedDataset, cfg: &TrainConfig, ids: &[&str]) -> Result<f64> {
    let prep = prepare::<T>(ds, &TrainConfig {
        validation: ValidationMode::Holdout { fraction: 0.0 },
        ..cfg.clone()
    })?;
    let inputs: Vec<Input<T>> = ids
        .iter()
        .map(|id| prep.inputs.get(id).cloned().ok_or_else(|| Error::invalid(format!("{id} is not a train image"))))
        .collect::<Result<_>>()?;
    let graph = model.forward_graph(inputs)?;
    let logits = (0..graph.len()).map(|i| graph.logits(i)).collect();
    Ok(batch_objective(&prep, cfg, ids, &graph.maps, Some(logits), false)?.0)
}

/// Mean class proportion over `ids`, read from the proportions for the
/// proportion-trained modes and from the masks for the benchmark.
fn class_prior(ds: &AnnotatedDataset, cfg: &TrainConfig, ids: &[&str]) -> Vec<f64> {
    let mut sum = vec![0.0; ds.n_classes()];
    for id in ids {
        let pv = match cfg.mode {
            TrainMode::Benchmark => extract_sp(&ds.gt_masks[*id]),
            TrainMode::Spss | TrainMode::SpssPlus => ds.sp[*id].clone(),
        };
        for (s, v) in sum.iter_mut().zip(pv.values()) {
            *s += v / ids.len() as f64;
        }
    }
    sum
}

/// Sets the head biases so that an otherwise silent network predicts the
/// class prior: `ln p` under softmax, `logit p` under sigmoid.
fn set_head_bias<T: Real>(model: &mut ModelState<T>, prior: &[f64]) {
    const FLOOR: f64 = 1e-3;
    let Some(spec) = model.tensors().iter().find(|t| t.name == "head.bias").cloned() else {
        return;
    };
    let sigmoid = prior.len() == 1;
    model.update_params(|p| {
        for (b, &q) in p[spec.offset..spec.offset + spec.len()].iter_mut().zip(prior) {
            let q = q.clamp(FLOOR, 1.0 - FLOOR);
            *b = T::of(if sigmoid { (q / (1.0 - q)).ln() } else { q.ln() });
        }
    });
}

/// Builds the backbone a dataset calls for: one output plane per class and
/// the head activation that matches.
pub fn backbone_for(ds: &AnnotatedDataset, base_filters: usize) -> Result<BackboneConfig> {
    let channels = ds.channels().ok_or_else(|| Error::invalid("dataset has no patches"))?;
    let cfg = BackboneConfig::new(channels, ds.n_classes(), base_filters);
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the trainer selected by `cfg.mode`.
pub fn train<T: Real>(ds: &AnnotatedDataset, cfg: &TrainConfig) -> Result<(ModelState<T>, TrainHistory)> {
    cfg.validate()?;
    let prep = prepare::<T>(ds, cfg)?;
    let mut model = ModelState::<T>::build(backbone_for(ds, cfg.base_filters)?, cfg.seed)?;
    if cfg.prior_head_bias {
        set_head_bias(&mut model, &class_prior(ds, cfg, &prep.train));
    }
    let mut adam = Adam::new(model.param_count(), cfg.learning_rate, cfg.adam);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order = prep.train.clone();
    let mut best_params = model.params().to_vec();
    let mut history = TrainHistory {
        mode: cfg.mode,
        seed: cfg.seed,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        epoch_seconds: Vec::new(),
        stopping_epoch: 0,
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        early_stopped: false,
        n_train: prep.train.len(),
        n_validation: prep.val.len(),
        monitor: match (prep.val.is_empty(), cfg.validation) {
            (true, _) => "train loss (no validation images)".into(),
            (false, ValidationMode::TestSplit) => "loss on the test split".into(),
            (false, ValidationMode::Holdout { .. }) => "loss on the held-out train subset".into(),
        },
        adam: cfg.adam,
        config: cfg.clone(),
    };
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<Input<T>> = batch.iter().map(|id| prep.inputs[id].clone()).collect();
            let graph = model.forward_graph(inputs)?;
            let logits = (0..graph.len()).map(|i| graph.logits(i)).collect();
            let (loss, seed) = batch_objective(&prep, cfg, batch, &graph.maps, Some(logits), true)?;
            if !loss.is_finite() {
                return Err(Error::Invariant(format!("non-finite training loss at epoch {epoch}")));
            }
            let grads = model.gradients(&graph, &seed.expect("gradient requested"))?;
            adam.step(&mut model, &grads.values);
            epoch_loss += loss * batch.len() as f64 / order.len() as f64;
        }
        let monitored = if prep.val.is_empty() {
            epoch_loss
        } else {
            evaluate_loss(&model, &prep, cfg, &prep.val)?
        };
        history.train_loss.push(epoch_loss);
        history.val_loss.push(monitored);
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
        log::info!("{} seed {} epoch {epoch}: train {epoch_loss:.6} monitor {monitored:.6}", cfg.mode, cfg.seed);
        let stop = stopper.observe(monitored);
        if stopper.improved_last() {
            best_params.copy_from_slice(model.params());
        }
        history.stopping_epoch = epoch;
        if stop {
            history.early_stopped = true;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    history.best_val_loss = stopper.best();
    model.update_params(|p| p.copy_from_slice(&best_params));
    Ok((model, history))
}

fn expect_mode(cfg: &TrainConfig, mode: TrainMode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::invalid(format!("config mode is {}, expected {mode}", cfg.mode)));
    }
    Ok(())
}

/// Trains from proportions alone.
pub fn train_spss<T: Real>(ds: &AnnotatedDataset, cfg: &TrainConfig) -> Result<(ModelState<T>, TrainHistory)> {
    expect_mode(cfg, TrainMode::Spss)?;
    train(ds, cfg)
}

/// Trains from proportions plus keypoints, weighting the two losses by
/// `cfg.loss_cfg.alpha`.
pub fn train_spss_plus<T: Real>(ds: &AnnotatedDataset, cfg: &TrainConfig) -> Result<(ModelState<T>, TrainHistory)> {
    expect_mode(cfg, TrainMode::SpssPlus)?;
    train(ds, cfg)
}

/// Trains the same backbone on ground-truth masks with per-pixel
/// cross-entropy.
pub fn train_benchmark<T: Real>(ds: &AnnotatedDataset, cfg: &TrainConfig) -> Result<(ModelState<T>, TrainHistory)> {
    expect_mode(cfg, TrainMode::Benchmark)?;
    train(ds, cfg)
}

pub type Trainer<T> = fn(&AnnotatedDataset, &TrainConfig) -> Result<(ModelState<T>, TrainHistory)>;

/// Repeats a trainer with seeds `cfg.seed`, `cfg.seed + 1`, ...
pub fn run_repeated<T: Real>(
    trainer: Trainer<T>,
    ds: &AnnotatedDataset,
    cfg: &TrainConfig,
    n_runs: usize,
) -> Result<Vec<(ModelState<T>, TrainHistory)>> {
    if n_runs == 0 {
        return Err(Error::invalid("n_runs must be at least 1"));
    }
    (0..n_runs as u64)
        .map(|k| {
            let run_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(k),
                ..cfg.clone()
            };
            trainer(ds, &run_cfg)
        })
        .collect()
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const CONFIG_FILE: &str = "config.json";

/// Writes the checkpoint, history and resolved config of one run.
pub fn write_run<T: Real>(dir: &Path, model: &ModelState<T>, history: &TrainHistory) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), model)?;
    write_json(&dir.join(HISTORY_FILE), history)?;
    write_json(&dir.join(CONFIG_FILE), &history.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{generate_synthetic, SyntheticSpec};

    #[test]
    fn early_stopping_contract() {
        let mut s = EarlyStopping::new(10);
        let losses = [0.5, 0.4].into_iter().chain(std::iter::repeat_n(0.41, 10));
        let mut stopped_at = None;
        for (e, l) in losses.enumerate() {
            if s.observe(l) {
                stopped_at = Some(e + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(12));
        assert_eq!(s.best_epoch(), 2);
        assert_eq!(s.best(), 0.4);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut m = ModelState::<f64>::build(BackboneConfig::new(1, 2, 4), 1).unwrap();
        let before = m.params().to_vec();
        let grads = vec![0.3; before.len()];
        Adam::new(before.len(), 0.0, AdamConfig::default()).step(&mut m, &grads);
        assert_eq!(m.params(), &before[..]);
    }

    fn tiny() -> AnnotatedDataset {
        generate_synthetic(&SyntheticSpec::multiclass(3, 6, 16, 2)).unwrap()
    }

    fn quick(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            base_filters: 4,
            batch_size: 2,
            max_epochs: 2,
            seed: 5,
            validation: ValidationMode::Holdout { fraction: 0.34 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn histories_are_reproducible() {
        let ds = tiny();
        for mode in [TrainMode::Spss, TrainMode::Benchmark] {
            let (m1, h1) = train::<f32>(&ds, &quick(mode)).unwrap();
            let (m2, h2) = train::<f32>(&ds, &quick(mode)).unwrap();
            assert!(h1.same_trajectory(&h2));
            assert_eq!(m1.params(), m2.params());
            assert_eq!((h1.n_train, h1.n_validation), (4, 2));
            let best = h1.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(best, h1.best_val_loss);
        }
    }

    #[test]
    fn missing_annotations_are_reported() {
        let mut ds = tiny();
        let id = ds.patches[0].id().to_string();
        ds.sp.remove(&id);
        let msg = train::<f32>(&ds, &quick(TrainMode::Spss)).unwrap_err().to_string();
        assert!(msg.contains(&id), "{msg}");
        let msg = train::<f32>(&tiny(), &quick(TrainMode::SpssPlus)).unwrap_err().to_string();
        assert!(msg.contains("SPSS"), "{msg}");
        ds.gt_masks.remove(&id);
        assert!(train::<f32>(&ds, &quick(TrainMode::Benchmark)).is_err());
        assert!(train_spss::<f32>(&tiny(), &quick(TrainMode::Benchmark)).is_err());
    }

    #[test]
    fn repeated_runs_use_consecutive_seeds() {
        let runs = run_repeated::<f32>(train_spss, &tiny(), &TrainConfig { max_epochs: 1, ..quick(TrainMode::Spss) }, 3).unwrap();
        let seeds: Vec<u64> = runs.iter().map(|(_, h)| h.seed).collect();
        assert_eq!(seeds, vec![5, 6, 7]);
    }
}
