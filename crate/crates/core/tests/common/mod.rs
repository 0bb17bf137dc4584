//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod fuzz;
pub mod geometry;
pub mod matching;

use handstream::features::{Sdn, TaskLabels, TaskMask, ViewSet};
use handstream::model::{self, init_params, ConvSpec, ModelParams, ModelSpec, Objective};
use handstream::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_views(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> ViewSet<f64> {
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut mk = |v: usize| {
        let (r, c) = spec.view_shape(v);
        Matrix::from_vec(r, c, (0..r * c).map(|_| unit.sample(rng)).collect())
    };
    ViewSet {
        jcd: mk(0),
        m_slow: mk(1),
        m_fast: mk(2),
    }
}

pub fn random_labels(window: usize, classes: usize, rng: &mut ChaCha8Rng) -> TaskLabels {
    let fine = rng.random_range(0..classes);
    let sdn = if fine == 0 {
        Sdn::NonGesture
    } else if rng.random_bool(0.5) {
        Sdn::Static
    } else {
        Sdn::Dynamic
    };
    TaskLabels {
        sdn,
        fine,
        start_index: rng.random_bool(0.6).then(|| rng.random_range(0..window)),
        end_index: rng.random_bool(0.6).then(|| rng.random_range(0..window)),
    }
}

/// A random tiny network (W=4, J=3, L=3) with random depths and widths, the
/// boundary head enabled, non-zero biases, and one labelled window.
pub struct TinyCase {
    pub params: ModelParams<f64>,
    pub views: ViewSet<f64>,
    pub labels: TaskLabels,
    pub mask: TaskMask,
}

pub fn tiny_case(seed: u64) -> TinyCase {
    let mut r = rng(seed ^ 0x5eed);
    let mut spec = ModelSpec::new(4, 3, 3);
    spec.gc_head = true;
    let stack = |r: &mut ChaCha8Rng| -> Vec<ConvSpec> {
        (0..r.random_range(1..=2))
            .map(|_| ConvSpec::new(r.random_range(3..=8), 3))
            .collect()
    };
    for enc in spec.encoders.iter_mut() {
        enc.convs = stack(&mut r);
    }
    spec.head.convs = stack(&mut r);
    let mut params: ModelParams<f64> = init_params(&spec, seed).unwrap();
    for group in params.values_mut() {
        for v in group.iter_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    let views = random_views(&spec, &mut r);
    let labels = random_labels(4, 3, &mut r);
    let mask = TaskMask::from_labels(&labels);
    TinyCase {
        params,
        views,
        labels,
        mask,
    }
}

/// Largest relative gap between the analytic gradient and central finite
/// differences, over every parameter of every group.
pub fn max_fd_relative_error(case: &TinyCase, objective: &Objective<f64>) -> f64 {
    let (_, grads) =
        model::backward_with(&case.params, &case.views, &case.labels, &case.mask, objective).unwrap();
    let mut probe = case.params.clone();
    let mut worst = 0.0f64;
    for g in 0..probe.values().len() {
        for i in 0..probe.values()[g].len() {
            let orig = probe.values()[g][i];
            probe.values_mut()[g][i] = orig + FD_STEP;
            let up = model::objective_value(&probe, &case.views, &case.labels, &case.mask, objective).unwrap();
            probe.values_mut()[g][i] = orig - FD_STEP;
            let down = model::objective_value(&probe, &case.views, &case.labels, &case.mask, objective).unwrap();
            probe.values_mut()[g][i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.groups[g][i];
            // Central differences at this step are only accurate to ~1e-10
            // absolute, so gradients below the floor are compared absolutely.
            let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

pub fn all_heads() -> Objective<f64> {
    let mut o = Objective::uniform();
    o.active = [true; 5];
    o
}

/// One static gesture against non-gesture motion.
pub fn two_class_config(seed: u64) -> handstream::synth::SynthConfig {
    let mut cfg = handstream::synth::SynthConfig::benchmark(seed);
    cfg.templates.truncate(1);
    cfg.length = [200, 200];
    cfg.gestures = [2, 2];
    cfg
}

/// A small, fast training configuration for the two-class corpus.
pub fn quick_train_config(epochs: usize) -> handstream::train::TrainConfig {
    let mut cfg = handstream::train::TrainConfig::default();
    cfg.stride = 4;
    cfg.epochs = epochs;
    cfg.validation_fraction = 0.0;
    cfg
}
