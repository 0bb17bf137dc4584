//! Labeled synthetic pose streams.
//!
//! The hand is a wrist plus five fingers of five joints each (26 joints).
//! A hand shape is a curl value per finger; the placed hand is that shape
//! re-centred on a centroid position. Static gestures hold a template shape
//! still, dynamic gestures translate the hand rigidly along a trajectory,
//! periodic gestures oscillate back and forth along a path. Everything
//! between gestures is a smoothed, mean-reverting random walk with pauses
//! and small finger noise.

use std::f64::consts::TAU;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_for;
use crate::pose_io::{Category, Dictionary, GestureAnnotation, Point3, PoseFrame, PoseSequence};

pub const HAND_JOINTS: usize = 26;
const FINGERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthCategory {
    Static,
    Dynamic,
    Periodic,
}

impl SynthCategory {
    pub fn category(self) -> Category {
        match self {
            SynthCategory::Static => Category::Static,
            SynthCategory::Dynamic => Category::DynamicCoarse,
            SynthCategory::Periodic => Category::Periodic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryShape {
    Circle,
    Square,
    VMark,
    XMark,
    Caret,
    Line,
}

impl TrajectoryShape {
    /// Offset from the starting point after progress `s` in [0, 1], for unit amplitude.
    /// Paths lie in the x-y plane and start at the origin.
    pub fn point(self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, 1.0);
        let poly: &[[f64; 2]] = match self {
            TrajectoryShape::Circle => {
                let a = TAU * s;
                return [a.cos() - 1.0, a.sin()];
            }
            TrajectoryShape::Line => &[[0.0, 0.0], [1.0, 0.0]],
            TrajectoryShape::VMark => &[[0.0, 0.0], [0.5, -1.0], [1.0, 0.0]],
            TrajectoryShape::Caret => &[[0.0, 0.0], [0.5, 1.0], [1.0, 0.0]],
            TrajectoryShape::XMark => &[[0.0, 0.0], [1.0, -1.0], [1.0, 0.0], [0.0, -1.0]],
            TrajectoryShape::Square => &[[0.0, 0.0], [1.0, 0.0], [1.0, -1.0], [0.0, -1.0], [0.0, 0.0]],
        };
        polyline_at(poly, s)
    }
}

fn polyline_at(poly: &[[f64; 2]], s: f64) -> [f64; 2] {
    let seg_len = |a: [f64; 2], b: [f64; 2]| ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let total: f64 = poly.windows(2).map(|w| seg_len(w[0], w[1])).sum();
    let mut remaining = s * total;
    for w in poly.windows(2) {
        let l = seg_len(w[0], w[1]);
        if remaining <= l {
            let f = if l > 0.0 { remaining / l } else { 0.0 };
            return [w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])];
        }
        remaining -= l;
    }
    *poly.last().expect("non-empty polyline")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GestureTemplate {
    pub name: String,
    pub category: SynthCategory,
    /// Inclusive duration range in frames.
    pub duration: [usize; 2],
    /// Curl per finger (thumb first), radians per bend.
    pub curls: [f64; FINGERS],
    #[serde(default)]
    pub shape: Option<TrajectoryShape>,
    /// Trajectory scale in meters (circle radius, stroke length).
    #[serde(default)]
    pub amplitude: f64,
    /// Number of back-and-forth cycles, periodic gestures only.
    #[serde(default = "default_cycles")]
    pub cycles: f64,
    /// Per-joint Gaussian noise std in meters.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_cycles() -> f64 {
    3.0
}

fn default_jitter() -> f64 {
    0.001
}

impl GestureTemplate {
    pub fn validate(&self) -> Result<()> {
        check_range(self.duration, &format!("template '{}' duration", self.name))?;
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::config(format!("template '{}': jitter must be >= 0", self.name)));
        }
        match (self.category, self.shape) {
            (SynthCategory::Static, Some(_)) => Err(Error::config(format!(
                "template '{}': static gestures take no trajectory shape",
                self.name
            ))),
            (SynthCategory::Dynamic | SynthCategory::Periodic, None) => Err(Error::config(format!(
                "template '{}': moving gestures need a trajectory shape",
                self.name
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonGestureMotion {
    /// Std of the per-frame velocity innovation (meters).
    pub step_std: f64,
    /// Velocity persistence in [0, 1).
    pub smoothing: f64,
    /// Pull towards the home position per frame.
    pub reversion: f64,
    /// Per-frame probability of starting a pause.
    pub pause_prob: f64,
    pub pause_len: [usize; 2],
    /// Std of the per-frame finger-curl random walk.
    pub finger_noise: f64,
    /// Mean curl of the relaxed hand; finger curls wander in [0, 2 * rest_curl].
    pub rest_curl: f64,
    pub jitter: f64,
}

impl Default for NonGestureMotion {
    fn default() -> Self {
        Self {
            step_std: 0.0015,
            smoothing: 0.85,
            reversion: 0.01,
            pause_prob: 0.015,
            pause_len: [8, 25],
            finger_noise: 0.03,
            rest_curl: 0.25,
            jitter: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    #[serde(default = "default_joints")]
    pub joints: usize,
    pub fps: f64,
    /// Inclusive sequence-length range in frames.
    pub length: [usize; 2],
    /// Inclusive range of gestures per sequence.
    pub gestures: [usize; 2],
    /// Non-gesture frames before the first and after the last gesture, at least.
    #[serde(default = "default_margin")]
    pub margin: usize,
    /// Non-gesture frames between two gestures, at least.
    #[serde(default = "default_margin")]
    pub min_gap: usize,
    /// Frames spent blending the hand shape into a template.
    #[serde(default = "default_transition")]
    pub transition: usize,
    /// When set, sequence `i` belongs to subject `i % subjects`.
    #[serde(default)]
    pub subjects: Option<usize>,
    #[serde(default)]
    pub motion: NonGestureMotion,
    #[serde(rename = "template")]
    pub templates: Vec<GestureTemplate>,
}

fn default_joints() -> usize {
    HAND_JOINTS
}

fn default_margin() -> usize {
    20
}

fn default_transition() -> usize {
    4
}

fn check_range(r: [usize; 2], what: &str) -> Result<()> {
    if r[0] == 0 || r[0] > r[1] {
        Err(Error::config(format!("{what}: range [{}, {}] is empty or zero", r[0], r[1])))
    } else {
        Ok(())
    }
}

impl SynthConfig {
    /// Six-class benchmark dictionary: two static poses, three trajectories
    /// and one periodic wave, plus the non-gesture class.
    pub fn benchmark(seed: u64) -> Self {
        let t = |name: &str, category, duration, curls, shape, amplitude| GestureTemplate {
            name: name.to_string(),
            category,
            duration,
            curls,
            shape,
            amplitude,
            cycles: default_cycles(),
            jitter: default_jitter(),
        };
        use SynthCategory::*;
        use TrajectoryShape::*;
        Self {
            seed,
            joints: HAND_JOINTS,
            fps: 30.0,
            length: [300, 340],
            gestures: [3, 3],
            margin: 20,
            min_gap: 25,
            transition: default_transition(),
            subjects: None,
            motion: NonGestureMotion::default(),
            templates: vec![
                t("fist", Static, [45, 65], [1.2, 1.5, 1.5, 1.5, 1.5], None, 0.0),
                t("victory", Static, [45, 65], [1.2, 0.0, 0.0, 1.5, 1.5], None, 0.0),
                t("circle", Dynamic, [45, 65], [1.0, 0.0, 1.4, 1.4, 1.4], Some(Circle), 0.07),
                t("v_mark", Dynamic, [45, 65], [0.2, 0.0, 1.4, 1.4, 0.0], Some(VMark), 0.12),
                t("x_mark", Dynamic, [45, 65], [1.2, 0.0, 0.0, 0.0, 1.5], Some(XMark), 0.12),
                t("wave", Periodic, [45, 65], [0.0, 0.0, 0.0, 0.0, 0.0], Some(Line), 0.06),
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synth config serializes")
    }

    pub fn num_classes(&self) -> usize {
        self.templates.len() + 1
    }

    pub fn dictionary(&self) -> Dictionary {
        Dictionary::new(
            self.templates
                .iter()
                .map(|t| (t.name.clone(), t.category.category()))
                .collect(),
            self.joints,
        )
        .expect("validated config yields a valid dictionary")
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints != HAND_JOINTS {
            return Err(Error::config(format!(
                "the synthetic hand model has {HAND_JOINTS} joints, config asks for {}",
                self.joints
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::config("fps must be positive"));
        }
        if self.templates.is_empty() {
            return Err(Error::config("at least one gesture template is required"));
        }
        check_range(self.length, "sequence length")?;
        check_range(self.motion.pause_len, "pause length")?;
        if self.gestures[0] > self.gestures[1] {
            return Err(Error::config("gestures-per-sequence range is empty"));
        }
        if self.subjects == Some(0) {
            return Err(Error::config("subjects must be positive"));
        }
        let m = &self.motion;
        if !(0.0..1.0).contains(&m.smoothing)
            || !(0.0..=1.0).contains(&m.pause_prob)
            || m.step_std < 0.0
            || m.finger_noise < 0.0
            || m.jitter < 0.0
            || m.reversion < 0.0
        {
            return Err(Error::config("non-gesture motion parameters out of range"));
        }
        for t in &self.templates {
            t.validate()?;
        }
        let g = self.gestures[1];
        let longest = self.templates.iter().map(|t| t.duration[1]).max().unwrap_or(0);
        let required = g * longest + 2 * self.margin + g.saturating_sub(1) * self.min_gap;
        if required > self.length[0] {
            return Err(Error::config(format!(
                "gesture durations exceed sequence length: {g} gestures may need {required} frames, \
                 shortest sequence has {}",
                self.length[0]
            )));
        }
        Ok(())
    }
}


const STREAM_MOTION: u64 = 1;
const STREAM_COUNT: u64 = 2;
const STREAM_BLOCK: u64 = 3;

fn gesture_count(cfg: &SynthConfig, index: usize) -> usize {
    let [lo, hi] = cfg.gestures;
    if lo == hi {
        return lo;
    }
    rng_for(cfg.seed, index as u64, STREAM_COUNT).random_range(lo..=hi)
}

/// Class of the `m`-th gesture occurrence of the whole corpus. Occurrences are
/// dealt in blocks holding every class once, so any prefix is balanced to ±1.
fn scheduled_label(cfg: &SynthConfig, m: usize) -> usize {
    let k = cfg.templates.len();
    let mut block: Vec<usize> = (1..=k).collect();
    block.shuffle(&mut rng_for(cfg.seed, (m / k) as u64, STREAM_BLOCK));
    block[m % k]
}

fn occurrence_offset(cfg: &SynthConfig, index: usize) -> usize {
    if cfg.gestures[0] == cfg.gestures[1] {
        index * cfg.gestures[0]
    } else {
        (0..index).map(|i| gesture_count(cfg, i)).sum()
    }
}

/// Joint positions of the hand shape for the given curls, wrist near the origin.
pub fn hand_shape(curls: &[f64; FINGERS]) -> Vec<Point3> {
    const ANGLES: [f64; FINGERS] = [-1.0, -0.35, 0.0, 0.3, 0.6];
    const BASE: [f64; FINGERS] = [0.02, 0.03, 0.03, 0.03, 0.028];
    const SEGMENTS: [[f64; 4]; FINGERS] = [
        [0.030, 0.025, 0.020, 0.015],
        [0.040, 0.030, 0.020, 0.018],
        [0.042, 0.032, 0.022, 0.018],
        [0.040, 0.030, 0.020, 0.017],
        [0.034, 0.024, 0.017, 0.015],
    ];
    let mut joints = Vec::with_capacity(HAND_JOINTS);
    joints.push([0.0, 0.0, 0.0]);
    for f in 0..FINGERS {
        let d = [ANGLES[f].sin(), ANGLES[f].cos(), 0.0];
        let mut p = [d[0] * BASE[f], d[1] * BASE[f], 0.0];
        joints.push(p);
        for (k, len) in SEGMENTS[f].iter().enumerate() {
            let phi = (k + 1) as f64 * curls[f] * 0.5;
            let (s, c) = phi.sin_cos();
            p = [p[0] + len * c * d[0], p[1] + len * c * d[1], p[2] - len * s];
            joints.push(p);
        }
    }
    joints
}

fn place(shape: &[Point3], center: Point3) -> Vec<Point3> {
    let n = shape.len() as f64;
    let mut mean = [0.0; 3];
    for p in shape {
        for a in 0..3 {
            mean[a] += p[a] / n;
        }
    }
    shape
        .iter()
        .map(|p| [p[0] - mean[0] + center[0], p[1] - mean[1] + center[1], p[2] - mean[2] + center[2]])
        .collect()
}

fn lerp_curls(a: &[f64; FINGERS], b: &[f64; FINGERS], t: f64) -> [f64; FINGERS] {
    std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t)
}

struct Slot {
    template: usize,
    start: usize,
    duration: usize,
}

const HOME: Point3 = [0.0, 1.2, 0.4];

/// Generates sequence `index` of the corpus described by `cfg`.
pub fn generate_sequence(cfg: &SynthConfig, index: usize) -> Result<PoseSequence> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, index as u64, STREAM_MOTION);

    let g = gesture_count(cfg, index);
    let offset = occurrence_offset(cfg, index);
    let labels: Vec<usize> = (0..g).map(|i| scheduled_label(cfg, offset + i)).collect();
    let durations: Vec<usize> = labels
        .iter()
        .map(|&l| {
            let [lo, hi] = cfg.templates[l - 1].duration;
            rng.random_range(lo..=hi)
        })
        .collect();
    let len = rng.random_range(cfg.length[0]..=cfg.length[1]);

    // Split the slack over the g + 1 gaps with sorted uniform cut points.
    let required: usize =
        durations.iter().sum::<usize>() + 2 * cfg.margin + g.saturating_sub(1) * cfg.min_gap;
    let slack = len - required;
    let mut cuts: Vec<usize> = (0..g).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut slots = Vec::with_capacity(g);
    let mut cursor = cfg.margin;
    let mut prev_cut = 0;
    for i in 0..g {
        cursor += cuts[i] - prev_cut;
        prev_cut = cuts[i];
        slots.push(Slot {
            template: labels[i] - 1,
            start: cursor,
            duration: durations[i],
        });
        cursor += durations[i] + cfg.min_gap;
    }

    let frames = simulate(cfg, &slots, len, &mut rng);
    let annotations = slots
        .iter()
        .map(|s| {
            GestureAnnotation::new(
                s.template + 1,
                s.start,
                s.start + s.duration - 1,
                cfg.templates[s.template].category.category(),
            )
        })
        .collect();
    let source = match cfg.subjects {
        Some(n) => format!("subject-{:02}", index % n),
        None => format!("synth-{index:04}"),
    };
    PoseSequence::new(frames, annotations, cfg.fps, cfg.num_classes(), source)
}

fn simulate(cfg: &SynthConfig, slots: &[Slot], len: usize, rng: &mut ChaCha8Rng) -> Vec<PoseFrame> {
    let m = &cfg.motion;
    let step = Normal::new(0.0, m.step_std).expect("validated std");
    let finger = Normal::new(0.0, m.finger_noise).expect("validated std");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut pos = HOME;
    let mut vel = [0.0; 3];
    let mut pause_left = 0usize;
    let mut wander: [f64; FINGERS] = [m.rest_curl; FINGERS];
    // Curls shown when the last gesture ended, blended back into `wander`.
    let mut released = wander;
    let mut since_gesture = usize::MAX;
    let mut shown = wander;

    let mut frames = Vec::with_capacity(len);
    let mut slot_iter = slots.iter().peekable();
    let mut f = 0;
    while f < len {
        if let Some(slot) = slot_iter.next_if(|s| s.start == f) {
            let t = &cfg.templates[slot.template];
            let from = shown;
            let origin = pos;
            for k in 0..slot.duration {
                let blend = ((k + 1) as f64 / cfg.transition.max(1) as f64).min(1.0);
                shown = lerp_curls(&from, &t.curls, blend);
                let center = gesture_center(t, origin, k, slot.duration);
                frames.push(jittered(place(&hand_shape(&shown), center), t.jitter, &unit, rng, f));
                pos = center;
                f += 1;
            }
            vel = [0.0; 3];
            pause_left = 0;
            released = shown;
            since_gesture = 0;
            continue;
        }

        if pause_left > 0 {
            pause_left -= 1;
            vel = [0.0; 3];
        } else if rng.random::<f64>() < m.pause_prob {
            pause_left = rng.random_range(m.pause_len[0]..=m.pause_len[1]);
            vel = [0.0; 3];
        } else {
            for a in 0..3 {
                vel[a] = m.smoothing * vel[a] + step.sample(rng) - m.reversion * (pos[a] - HOME[a]);
            }
        }
        for a in 0..3 {
            pos[a] += vel[a];
        }
        for c in wander.iter_mut() {
            *c = (*c + finger.sample(rng)).clamp(0.0, 2.0 * m.rest_curl);
        }
        since_gesture = since_gesture.saturating_add(1);
        let blend = (since_gesture as f64 / cfg.transition.max(1) as f64).min(1.0);
        shown = lerp_curls(&released, &wander, blend);
        frames.push(jittered(place(&hand_shape(&shown), pos), m.jitter, &unit, rng, f));
        f += 1;
    }
    frames
}

fn gesture_center(t: &GestureTemplate, origin: Point3, k: usize, duration: usize) -> Point3 {
    let progress = if duration > 1 { k as f64 / (duration - 1) as f64 } else { 0.0 };
    let offset = match (t.category, t.shape) {
        (SynthCategory::Static, _) | (_, None) => [0.0, 0.0],
        (SynthCategory::Dynamic, Some(shape)) => shape.point(progress),
        (SynthCategory::Periodic, Some(shape)) => {
            shape.point(0.5 * (1.0 - (TAU * t.cycles * progress).cos()))
        }
    };
    [
        origin[0] + t.amplitude * offset[0],
        origin[1] + t.amplitude * offset[1],
        origin[2],
    ]
}

fn jittered(
    mut joints: Vec<Point3>,
    std: f64,
    unit: &Normal<f64>,
    rng: &mut ChaCha8Rng,
    index: usize,
) -> PoseFrame {
    if std > 0.0 {
        for p in joints.iter_mut() {
            for v in p.iter_mut() {
                *v += std * unit.sample(rng);
            }
        }
    }
    PoseFrame::new(joints, index)
}

/// Generates `n` sequences; gesture classes are balanced to within one occurrence.
pub fn generate_corpus(cfg: &SynthConfig, n: usize) -> Result<Vec<PoseSequence>> {
    if n == 0 {
        return Err(Error::config("corpus size must be at least 1"));
    }
    cfg.validate()?;
    (0..n).into_par_iter().map(|i| generate_sequence(cfg, i)).collect()
}
