//! Window dataset construction, the gated multi-task objective, the head-set
//! and on/off ablation policies, optimizers, and the training loop.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::features::{check_window_len, make_sample, FeatureConfig, Task, TaskLabels, TaskMask, WindowSample};
use crate::io_util::write_atomic;
use crate::model::{
    self, accumulate_gradients, argmax, forward_fine, init_params, task_loss, Activation, ConvSpec,
    ForwardOutput, Gradients, LossBreakdown, ModelParams, ModelSpec, Objective,
};
use crate::pose_io::PoseSequence;
use crate::seeds::rng_for;
use crate::tensor::Real;

/// Stream ids passed to `rng_for` alongside the training seed.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_POLICY: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;

/// Which heads are trained. Heads outside the set keep their initial weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadSet {
    #[serde(rename = "FG")]
    Fg,
    #[serde(rename = "FG+GS/GE")]
    FgGsGe,
    #[serde(rename = "FG+SDN")]
    FgSdn,
    #[serde(rename = "FG+SDN+GC")]
    FgSdnGc,
    #[serde(rename = "full")]
    Full,
}

impl HeadSet {
    pub const ALL: [HeadSet; 5] = [HeadSet::Fg, HeadSet::FgGsGe, HeadSet::FgSdn, HeadSet::FgSdnGc, HeadSet::Full];

    /// Active flags in `Task::ALL` order.
    pub fn active(self) -> [bool; 5] {
        match self {
            HeadSet::Fg => [false, true, false, false, false],
            HeadSet::FgGsGe => [false, true, true, true, false],
            HeadSet::FgSdn => [true, true, false, false, false],
            HeadSet::FgSdnGc => [true, true, false, false, true],
            HeadSet::Full => [true, true, true, true, false],
        }
    }

    pub fn uses_gc(self) -> bool {
        self == HeadSet::FgSdnGc
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadSet::Fg => "FG",
            HeadSet::FgGsGe => "FG+GS/GE",
            HeadSet::FgSdn => "FG+SDN",
            HeadSet::FgSdnGc => "FG+SDN+GC",
            HeadSet::Full => "full",
        }
    }
}

impl fmt::Display for HeadSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        match key.as_str() {
            "fg" => Ok(HeadSet::Fg),
            "fggsge" => Ok(HeadSet::FgGsGe),
            "fgsdn" => Ok(HeadSet::FgSdn),
            "fgsdngc" => Ok(HeadSet::FgSdnGc),
            "full" | "fgsdngsge" => Ok(HeadSet::Full),
            _ => Err(Error::config(format!("unknown head set '{s}'"))),
        }
    }
}

/// How the start/end gating of each training window is corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OnOffPolicy {
    Exact,
    /// Each of the start/end selectors is redrawn as Bernoulli(p).
    WindowError(f64),
    /// Present start/end indices are replaced by uniform random ones.
    IndexError,
}

impl fmt::Display for OnOffPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OnOffPolicy::Exact => f.write_str("exact"),
            OnOffPolicy::WindowError(p) => write!(f, "window_error:{p}"),
            OnOffPolicy::IndexError => f.write_str("index_error"),
        }
    }
}

impl FromStr for OnOffPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let policy = match (name, arg) {
            ("exact", None) => OnOffPolicy::Exact,
            ("index_error", None) => OnOffPolicy::IndexError,
            ("window_error", None) => OnOffPolicy::WindowError(0.5),
            ("window_error", Some(p)) => {
                let p: f64 = p
                    .parse()
                    .map_err(|_| Error::config(format!("bad window_error probability '{p}'")))?;
                OnOffPolicy::WindowError(p)
            }
            _ => return Err(Error::config(format!("unknown on/off policy '{s}'"))),
        };
        if let OnOffPolicy::WindowError(p) = policy {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("window_error probability {p} outside [0, 1]")));
            }
        }
        Ok(policy)
    }
}

impl TryFrom<String> for OnOffPolicy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OnOffPolicy> for String {
    fn from(p: OnOffPolicy) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adafactor,
    Adam,
}

impl OptimizerKind {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            OptimizerKind::Adafactor => 0.004,
            OptimizerKind::Adam => 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sdn: f64,
    pub fine: f64,
    pub start: f64,
    pub end: f64,
    pub gc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sdn: 1.0,
            fine: 1.0,
            start: 1.0,
            end: 1.0,
            gc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.sdn, self.fine, self.start, self.end, self.gc]
    }
}

/// Layer sizes used to build the model spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub channels: usize,
    pub kernel: usize,
    pub encoder_layers: usize,
    pub head_layers: usize,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            kernel: 3,
            encoder_layers: 2,
            head_layers: 2,
            activation: Activation::Elu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub window: usize,
    pub overlap_threshold: f64,
    pub stride: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to the optimizer's own rate (0.004 Adafactor, 1e-3 Adam).
    pub learning_rate: Option<f64>,
    pub optimizer: OptimizerKind,
    pub loss_weights: LossWeights,
    pub head_set: HeadSet,
    pub on_off_policy: OnOffPolicy,
    pub seed: u64,
    /// Trailing fraction of the training sequences held out for checkpoint selection.
    pub validation_fraction: f64,
    pub class_weights: Option<Vec<f64>>,
    /// Data-parallel gradient evaluation inside each batch.
    pub parallel: bool,
    pub features: FeatureConfig,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 16,
            overlap_threshold: 0.5,
            stride: 1,
            batch_size: 32,
            epochs: 100,
            learning_rate: None,
            optimizer: OptimizerKind::Adafactor,
            loss_weights: LossWeights::default(),
            head_set: HeadSet::Full,
            on_off_policy: OnOffPolicy::Exact,
            seed: 0,
            validation_fraction: 0.1,
            class_weights: None,
            parallel: false,
            features: FeatureConfig::default(),
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(self.optimizer.default_learning_rate())
    }

    pub fn validate(&self) -> Result<()> {
        check_window_len(self.window)?;
        if self.epochs == 0 || self.batch_size == 0 || self.stride == 0 {
            return Err(Error::config("epochs, batch_size and stride must be at least 1"));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(Error::config("overlap_threshold must lie in (0, 1]"));
        }
        let lr = self.learning_rate();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if self.loss_weights.as_array().iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 1)"));
        }
        if let Some(cw) = &self.class_weights {
            if cw.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return Err(Error::config("class weights must be finite and non-negative"));
            }
        }
        if let OnOffPolicy::WindowError(p) = self.on_off_policy {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("window_error probability outside [0, 1]"));
            }
        }
        if self.arch.channels == 0 || self.arch.kernel == 0 {
            return Err(Error::config("arch channels and kernel must be positive"));
        }
        if !(self.features.scale > 0.0 && self.features.scale.is_finite()) {
            return Err(Error::config("feature scale must be positive"));
        }
        Ok(())
    }

    pub fn model_spec(&self, joints: usize, num_classes: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(self.window, joints, num_classes);
        spec.features = self.features;
        spec.overlap_threshold = self.overlap_threshold;
        let conv = ConvSpec::new(self.arch.channels, self.arch.kernel);
        for enc in spec.encoders.iter_mut() {
            enc.convs = vec![conv; self.arch.encoder_layers];
            enc.activation = self.arch.activation;
        }
        spec.head.convs = vec![conv; self.arch.head_layers];
        spec.head.activation = self.arch.activation;
        spec.gc_head = self.head_set.uses_gc();
        spec
    }

    pub fn objective<F: Real>(&self) -> Objective<F> {
        Objective {
            weights: self.loss_weights.as_array().map(F::of),
            active: self.head_set.active(),
            class_weights: self
                .class_weights
                .as_ref()
                .map(|w| w.iter().map(|&v| F::of(v)).collect()),
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct WindowDataset {
    pub samples: Vec<WindowSample<f32>>,
    /// `(sequence position, window end frame)` of every sample.
    pub origins: Vec<(usize, usize)>,
    /// Number of windows per fine-grained label.
    pub class_counts: Vec<usize>,
    pub joints: usize,
    pub num_classes: usize,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `(joints, classes)` shared by every sequence of the corpus.
pub fn corpus_shape(corpus: &[PoseSequence]) -> Result<(usize, usize)> {
    let first = corpus.first().ok_or(Error::EmptyCorpus)?;
    let shape = (first.joint_count(), first.num_classes);
    for s in corpus {
        if (s.joint_count(), s.num_classes) != shape {
            return Err(Error::config(format!(
                "sequence {} has {} joints and {} classes, expected {} and {}",
                s.source_id,
                s.joint_count(),
                s.num_classes,
                shape.0,
                shape.1
            )));
        }
    }
    Ok(shape)
}

/// Windows ending at `W-1, W-1+stride, ...` of every sequence, in corpus order.
pub fn build_window_dataset(corpus: &[PoseSequence], cfg: &TrainConfig) -> Result<WindowDataset> {
    cfg.validate()?;
    let (joints, num_classes) = corpus_shape(corpus)?;
    let w = cfg.window;
    for s in corpus {
        if s.len() < w {
            return Err(Error::SequenceTooShort {
                id: s.source_id.clone(),
                len: s.len(),
                needed: w,
            });
        }
    }
    let per_seq: Vec<Vec<(usize, WindowSample<f32>)>> = corpus
        .par_iter()
        .map(|s| {
            (w - 1..s.len())
                .step_by(cfg.stride)
                .map(|t| make_sample(s, t, w, cfg.overlap_threshold, &cfg.features).map(|x| (t, x)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::new();
    let mut origins = Vec::new();
    let mut class_counts = vec![0; num_classes];
    for (i, windows) in per_seq.into_iter().enumerate() {
        for (t, sample) in windows {
            class_counts[sample.labels.fine] += 1;
            origins.push((i, t));
            samples.push(sample);
        }
    }
    Ok(WindowDataset {
        samples,
        origins,
        class_counts,
        joints,
        num_classes,
    })
}

/// Corrupts the start/end gating of one sample according to `policy`.
pub fn apply_on_off_policy<F: Real, R: Rng + ?Sized>(
    mut sample: WindowSample<F>,
    policy: OnOffPolicy,
    rng: &mut R,
) -> WindowSample<F> {
    let w = sample.views.jcd.cols();
    match policy {
        OnOffPolicy::Exact => {}
        OnOffPolicy::IndexError => {
            for slot in [&mut sample.labels.start_index, &mut sample.labels.end_index] {
                if slot.is_some() {
                    *slot = Some(rng.random_range(0..w));
                }
            }
        }
        OnOffPolicy::WindowError(p) => {
            for slot in [&mut sample.labels.start_index, &mut sample.labels.end_index] {
                let on = rng.random_bool(p);
                *slot = match (on, *slot) {
                    (false, _) => None,
                    (true, Some(i)) => Some(i),
                    // a wrongly activated head also gets a wrong index
                    (true, None) => Some(rng.random_range(0..w)),
                };
            }
        }
    }
    sample.mask = TaskMask::from_labels(&sample.labels);
    sample
}

/// The gated objective for one window, computed from a forward pass.
pub fn loss<F: Real>(
    out: &ForwardOutput<F>,
    labels: &TaskLabels,
    mask: &TaskMask,
    objective: &Objective<F>,
    window: usize,
) -> LossBreakdown<F> {
    let mut b = LossBreakdown::zero();
    b.fine_prediction = Some(argmax(&out.fine_logits));
    for task in Task::ALL {
        let i = task.index();
        if !objective.active[i] || !mask.get(task) || objective.weights[i] == F::zero() {
            continue;
        }
        let Some(o) = out.task_output(task) else { continue };
        if let Some((l, _)) = task_loss(task, &o, labels, window, objective.class_weights.as_deref()) {
            b.per_task[i] = Some(l);
            b.total += objective.weights[i] * l;
        }
    }
    b
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

const ADAFACTOR_EPS1: f64 = 1e-30;
const ADAFACTOR_EPS2: f64 = 1e-3;
const ADAFACTOR_CLIP: f64 = 1.0;
const ADAFACTOR_DECAY: f64 = -0.8;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

enum Moments {
    /// Row and column statistics of a weight viewed as `rows x (numel / rows)`.
    Factored { rows: Vec<f64>, cols: Vec<f64> },
    Full(Vec<f64>),
    Adam { m: Vec<f64>, v: Vec<f64> },
}

/// Adafactor with relative step size and update clipping, or Adam.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    state: Vec<Moments>,
    trainable: Vec<bool>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ModelParams<f32>, trainable: Vec<bool>) -> Self {
        let state = params
            .groups()
            .iter()
            .map(|g| {
                let n = g.numel();
                match kind {
                    OptimizerKind::Adam => Moments::Adam {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                    OptimizerKind::Adafactor if g.shape.len() >= 2 => Moments::Factored {
                        rows: vec![0.0; g.shape[0]],
                        cols: vec![0.0; n / g.shape[0]],
                    },
                    OptimizerKind::Adafactor => Moments::Full(vec![0.0; n]),
                }
            })
            .collect();
        Self {
            kind,
            lr,
            step: 0,
            state,
            trainable,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn apply(&mut self, params: &mut ModelParams<f32>, grads: &Gradients<f32>) {
        self.step += 1;
        let t = self.step as f64;
        for (gi, (moments, trainable)) in self.state.iter_mut().zip(&self.trainable).enumerate() {
            if !trainable {
                continue;
            }
            let p = &mut params.values_mut()[gi];
            let g = &grads.groups[gi];
            match moments {
                Moments::Adam { m, v } => {
                    let c1 = 1.0 - ADAM_BETA1.powf(t);
                    let c2 = 1.0 - ADAM_BETA2.powf(t);
                    for i in 0..p.len() {
                        let gv = g[i] as f64;
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gv;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gv * gv;
                        let step = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                        p[i] = (p[i] as f64 - step) as f32;
                    }
                }
                _ => adafactor_update(moments, p, g, self.lr, t),
            }
        }
    }
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

fn adafactor_update(moments: &mut Moments, p: &mut [f32], g: &[f32], lr: f64, t: f64) {
    let rho = lr.min(1.0 / t.sqrt());
    let beta2 = 1.0 - t.powf(ADAFACTOR_DECAY);
    let g2 = |i: usize| (g[i] as f64) * (g[i] as f64) + ADAFACTOR_EPS1;
    let mut update: Vec<f64> = match moments {
        Moments::Factored { rows, cols } => {
            let (nr, nc) = (rows.len(), cols.len());
            let mut row_mean = vec![0.0; nr];
            let mut col_mean = vec![0.0; nc];
            for r in 0..nr {
                for c in 0..nc {
                    let v = g2(r * nc + c);
                    row_mean[r] += v / nc as f64;
                    col_mean[c] += v / nr as f64;
                }
            }
            for (acc, m) in rows.iter_mut().zip(&row_mean) {
                *acc = beta2 * *acc + (1.0 - beta2) * m;
            }
            for (acc, m) in cols.iter_mut().zip(&col_mean) {
                *acc = beta2 * *acc + (1.0 - beta2) * m;
            }
            let row_avg = rows.iter().sum::<f64>() / nr as f64;
            (0..nr * nc)
                .map(|i| {
                    let v = rows[i / nc] * cols[i % nc] / row_avg;
                    g[i] as f64 / v.sqrt()
                })
                .collect()
        }
        Moments::Full(v) => (0..p.len())
            .map(|i| {
                v[i] = beta2 * v[i] + (1.0 - beta2) * g2(i);
                g[i] as f64 / v[i].sqrt()
            })
            .collect(),
        Moments::Adam { .. } => unreachable!("adam handled by the caller"),
    };
    let clip = (rms(update.iter().copied()) / ADAFACTOR_CLIP).max(1.0);
    let scale = ADAFACTOR_EPS2.max(rms(p.iter().map(|&v| v as f64))) * rho;
    for u in update.iter_mut() {
        *u /= clip;
    }
    for (pv, u) in p.iter_mut().zip(&update) {
        *pv = (*pv as f64 - scale * u) as f32;
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean weighted objective over the epoch's windows.
    pub total_loss: f64,
    /// Mean unweighted loss of each task over the windows where it was on.
    pub per_task: [Option<f64>; 5],
    /// Running fine-grained accuracy on the training windows.
    pub window_accuracy: f64,
    /// Fine-grained accuracy on the held-out windows after the epoch.
    pub val_accuracy: Option<f64>,
}

pub const EPOCH_CSV_HEADER: &str =
    "epoch,total_loss,sdn_loss,fine_loss,start_loss,end_loss,gc_loss,window_accuracy,val_accuracy";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut row = format!("{},{:.6}", self.epoch, self.total_loss);
        for v in self.per_task {
            row.push(',');
            row.push_str(&opt(v));
        }
        row.push_str(&format!(",{:.6},{}", self.window_accuracy, opt(self.val_accuracy)));
        row
    }
}

pub fn epoch_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for e in log {
        out.push_str(&e.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ModelParams<f32>,
    /// Parameters after the epoch with the best held-out accuracy (training
    /// accuracy when nothing is held out).
    pub best_params: ModelParams<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub train_windows: usize,
    pub val_windows: usize,
    pub class_counts: Vec<usize>,
}

/// Splits off the trailing `validation_fraction` of the sequences.
pub fn validation_split(n: usize, fraction: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).min(n - 1)
}

/// Groups whose values the optimizer may change: encoders and active heads.
pub fn trainable_groups(params: &ModelParams<f32>, head_set: HeadSet) -> Vec<bool> {
    let mut mask = vec![false; params.groups().len()];
    for g in params.encoder_groups() {
        mask[g] = true;
    }
    for task in Task::ALL {
        if head_set.active()[task.index()] {
            for g in params.head_groups(task) {
                mask[g] = true;
            }
        }
    }
    mask
}

/// The parameters training starts from, derived from `cfg.seed`.
pub fn initial_params(cfg: &TrainConfig, joints: usize, num_classes: usize) -> Result<ModelParams<f32>> {
    let spec = cfg.model_spec(joints, num_classes);
    init_params(&spec, rng_for(cfg.seed, 0, STREAM_INIT).random())
}

pub fn train(corpus: &[PoseSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(corpus, cfg, |_| {})
}

/// Trains on `corpus`, calling `on_epoch` after every epoch.
pub fn train_with(
    corpus: &[PoseSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n_val = validation_split(corpus.len(), cfg.validation_fraction);
    let (train_seqs, val_seqs) = corpus.split_at(corpus.len() - n_val);
    let mut data = build_window_dataset(train_seqs, cfg)?;
    let val = if val_seqs.is_empty() {
        None
    } else {
        Some(build_window_dataset(val_seqs, cfg)?)
    };
    if cfg.on_off_policy != OnOffPolicy::Exact {
        let mut rng = rng_for(cfg.seed, 0, STREAM_POLICY);
        data.samples = data
            .samples
            .into_iter()
            .map(|s| apply_on_off_policy(s, cfg.on_off_policy, &mut rng))
            .collect();
    }

    let mut params = initial_params(cfg, data.joints, data.num_classes)?;
    let objective: Objective<f32> = cfg.objective();
    if let Some(cw) = &objective.class_weights {
        if cw.len() != data.num_classes {
            return Err(Error::config(format!(
                "{} class weights for {} classes",
                cw.len(),
                data.num_classes
            )));
        }
    }
    let mut opt = Optimizer::new(
        cfg.optimizer,
        cfg.learning_rate(),
        &params,
        trainable_groups(&params, cfg.head_set),
    );

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, epoch as u64, STREAM_SHUFFLE));
        let mut sums = EpochSums::default();
        for batch in order.chunks(cfg.batch_size) {
            let (grads, parts) = batch_gradients(&params, &data.samples, batch, &objective, cfg.parallel)?;
            for (b, &i) in parts.iter().zip(batch) {
                sums.add(b, data.samples[i].labels.fine);
            }
            opt.apply(&mut params, &grads);
        }
        let val_accuracy = match &val {
            Some(v) => Some(window_accuracy(&params, &v.samples)?),
            None => None,
        };
        let entry = sums.finish(epoch, val_accuracy);
        let score = val_accuracy.unwrap_or(entry.window_accuracy);
        if score > best.0 {
            best = (score, epoch, params.clone());
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        final_params: params,
        best_params: best.2,
        best_epoch: best.1,
        log,
        train_windows: data.len(),
        val_windows: val.as_ref().map_or(0, |v| v.len()),
        class_counts: data.class_counts,
    })
}

/// Mean gradient of the batch. The parallel path splits the batch into
/// contiguous chunks and adds the chunk sums in chunk order.
pub fn batch_gradients(
    params: &ModelParams<f32>,
    samples: &[WindowSample<f32>],
    batch: &[usize],
    objective: &Objective<f32>,
    parallel: bool,
) -> Result<(Gradients<f32>, Vec<LossBreakdown<f32>>)> {
    let run = |idx: &[usize]| -> Result<(Gradients<f32>, Vec<LossBreakdown<f32>>)> {
        let mut g = Gradients::zeros_like(params);
        let mut parts = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &samples[i];
            parts.push(accumulate_gradients(params, &s.views, &s.labels, &s.mask, objective, &mut g)?);
        }
        Ok((g, parts))
    };
    let (mut grads, parts) = if parallel && batch.len() > 1 {
        let chunk = batch.len().div_ceil(rayon::current_num_threads().max(1));
        let pieces: Vec<_> = batch.par_chunks(chunk).map(run).collect::<Result<_>>()?;
        let mut iter = pieces.into_iter();
        let (mut g, mut parts) = iter.next().expect("non-empty batch");
        for (pg, pp) in iter {
            g.add_assign(&pg);
            parts.extend(pp);
        }
        (g, parts)
    } else {
        run(batch)?
    };
    grads.scale(1.0 / batch.len() as f32);
    Ok((grads, parts))
}

#[derive(Default)]
struct EpochSums {
    total: f64,
    n: usize,
    task: [f64; 5],
    task_n: [usize; 5],
    correct: usize,
}

impl EpochSums {
    fn add(&mut self, b: &LossBreakdown<f32>, truth: usize) {
        self.total += b.total as f64;
        self.n += 1;
        for (i, l) in b.per_task.iter().enumerate() {
            if let Some(l) = l {
                self.task[i] += *l as f64;
                self.task_n[i] += 1;
            }
        }
        if b.fine_prediction == Some(truth) {
            self.correct += 1;
        }
    }

    fn finish(&self, epoch: usize, val_accuracy: Option<f64>) -> EpochLog {
        let n = self.n.max(1) as f64;
        EpochLog {
            epoch,
            total_loss: self.total / n,
            per_task: std::array::from_fn(|i| (self.task_n[i] > 0).then(|| self.task[i] / self.task_n[i] as f64)),
            window_accuracy: self.correct as f64 / n,
            val_accuracy,
        }
    }
}

/// Fraction of windows whose fine-grained arg-max equals the label.
pub fn window_accuracy(params: &ModelParams<f32>, samples: &[WindowSample<f32>]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for s in samples {
        if argmax(&forward_fine(params, &s.views)?) == s.labels.fine {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains and writes `final.ckpt`, `best.ckpt`, `epochs.csv` and `train.toml` into `dir`.
pub fn train_to_dir(
    corpus: &[PoseSequence],
    cfg: &TrainConfig,
    dir: &Path,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(dir)?;
    let outcome = train_with(corpus, cfg, on_epoch)?;
    checkpoint::save(&outcome.final_params, &dir.join("final.ckpt"))?;
    checkpoint::save(&outcome.best_params, &dir.join("best.ckpt"))?;
    write_atomic(&dir.join("epochs.csv"), epoch_csv(&outcome.log).as_bytes())?;
    write_atomic(&dir.join("train.toml"), cfg.to_toml().as_bytes())?;
    Ok(outcome)
}

/// Gradient of one window under `cfg`'s objective, in double precision.
pub fn sample_gradient(
    params: &ModelParams<f64>,
    sample: &WindowSample<f64>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown<f64>, Gradients<f64>)> {
    model::backward_with(params, &sample.views, &sample.labels, &sample.mask, &cfg.objective())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Sdn;
    use crate::pose_io::{Category, GestureAnnotation, PoseFrame};

    fn still_sequence(len: usize, annotations: Vec<GestureAnnotation>) -> PoseSequence {
        let frames = (0..len)
            .map(|i| PoseFrame::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], i))
            .collect();
        PoseSequence::new(frames, annotations, 30.0, 3, "s").unwrap()
    }

    #[test]
    fn window_counts_follow_stride() {
        let seq = still_sequence(100, vec![]);
        let mut cfg = TrainConfig::default();
        let d = build_window_dataset(std::slice::from_ref(&seq), &cfg).unwrap();
        assert_eq!(d.len(), 85);
        assert_eq!(d.origins.first(), Some(&(0, 15)));
        assert_eq!(d.origins.last(), Some(&(0, 99)));
        cfg.stride = 4;
        assert_eq!(build_window_dataset(&[seq], &cfg).unwrap().len(), 22);
    }

    #[test]
    fn unannotated_corpus_is_all_non_gesture() {
        let d = build_window_dataset(&[still_sequence(40, vec![])], &TrainConfig::default()).unwrap();
        assert!(d.samples.iter().all(|s| s.labels.fine == 0 && s.mask == TaskMask([true, true, false, false])));
        assert_eq!(d.class_counts, vec![25, 0, 0]);
    }

    #[test]
    fn short_sequence_is_rejected() {
        let err = build_window_dataset(&[still_sequence(10, vec![])], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::SequenceTooShort { len: 10, needed: 16, .. }));
    }

    #[test]
    fn two_active_tasks_sum_to_the_loss() {
        let spec = ModelSpec::new(16, 3, 3);
        let p: ModelParams<f64> = init_params(&spec, 2).unwrap();
        let seq = still_sequence(40, vec![GestureAnnotation::new(1, 5, 30, Category::Static)]);
        let s = make_sample::<f64>(&seq, 25, 16, 0.5, &FeatureConfig::default()).unwrap();
        assert_eq!(s.mask, TaskMask([true, true, false, false]));
        let out = model::forward(&p, &s.views).unwrap();
        let b = loss(&out, &s.labels, &s.mask, &Objective::uniform(), 16);
        let sdn = task_loss(Task::Sdn, &out.sdn_logits, &s.labels, 16, None).unwrap().0;
        let fine = task_loss(Task::Fine, &out.fine_logits, &s.labels, 16, None).unwrap().0;
        assert_eq!(b.total, sdn + fine);
        assert_eq!(b.per_task[2], None);
        assert_eq!(s.labels.sdn, Sdn::Static);
    }

    #[test]
    fn policy_strings() {
        assert_eq!("window_error:0.5".parse::<OnOffPolicy>().unwrap(), OnOffPolicy::WindowError(0.5));
        assert_eq!("index_error".parse::<OnOffPolicy>().unwrap(), OnOffPolicy::IndexError);
        assert!("window_error:1.5".parse::<OnOffPolicy>().is_err());
        assert_eq!("FG+GS/GE".parse::<HeadSet>().unwrap(), HeadSet::FgGsGe);
        assert_eq!("fg_sdn_gc".parse::<HeadSet>().unwrap(), HeadSet::FgSdnGc);
        for h in HeadSet::ALL {
            assert_eq!(h.as_str().parse::<HeadSet>().unwrap(), h);
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = TrainConfig::default();
        cfg.on_off_policy = OnOffPolicy::WindowError(0.25);
        cfg.head_set = HeadSet::FgSdnGc;
        cfg.learning_rate = Some(0.01);
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_toml("epochs = 3\non_off_policy = \"index_error\"\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.batch_size, 32);
        assert!(TrainConfig::from_toml("window = 7").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn exact_policy_is_identity() {
        let seq = still_sequence(40, vec![GestureAnnotation::new(1, 18, 30, Category::Static)]);
        let s = make_sample::<f32>(&seq, 20, 16, 0.5, &FeatureConfig::default()).unwrap();
        let mut rng = rng_for(1, 2, 3);
        assert_eq!(apply_on_off_policy(s.clone(), OnOffPolicy::Exact, &mut rng), s);
    }

    #[test]
    fn validation_split_sizes() {
        assert_eq!(validation_split(60, 0.1), 6);
        assert_eq!(validation_split(1, 0.5), 0);
        assert_eq!(validation_split(3, 0.9), 2);
        assert_eq!(validation_split(20, 0.0), 0);
    }
}
