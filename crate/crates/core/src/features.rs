//! Window views and training samples.
//!
//! * JCD: pairwise joint distances per frame, rows in lexicographic pair order.
//! * Slow motion: one-frame joint displacements, rows joint-major / axis-minor.
//! * Fast motion: two-frame displacements taken every other frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose_io::{Category, GestureAnnotation, PoseFrame, PoseSequence, NON_GESTURE};
use crate::tensor::{Matrix, Real};

/// How the two motion views encode a joint displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionVariant {
    /// Per-axis displacement, 3 rows per joint.
    #[default]
    Displacement,
    /// Displacement magnitude, 1 row per joint.
    Speed,
}

impl MotionVariant {
    pub fn rows_per_joint(self) -> usize {
        match self {
            MotionVariant::Displacement => 3,
            MotionVariant::Speed => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    #[serde(default)]
    pub motion: MotionVariant,
    /// Multiplies raw coordinates to convert device units to meters.
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            motion: MotionVariant::Displacement,
            scale: 1.0,
        }
    }
}

pub fn check_window_len(w: usize) -> Result<()> {
    if w < 4 || w % 2 != 0 {
        Err(Error::config(format!("window length must be even and >= 4, got {w}")))
    } else {
        Ok(())
    }
}

pub fn pair_count(joints: usize) -> usize {
    joints * joints.saturating_sub(1) / 2
}

/// The `W` frames covering `[end - W + 1, end]`.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    end: usize,
    frames: &'a [PoseFrame],
}

impl<'a> Window<'a> {
    pub fn new(frames: &'a [PoseFrame], end: usize) -> Result<Self> {
        check_window_len(frames.len())?;
        let j = frames[0].joints.len();
        if j < 2 || frames.iter().any(|f| f.joints.len() != j) {
            return Err(Error::shape("window frames need a common joint count >= 2"));
        }
        Ok(Self { end, frames })
    }

    pub fn from_sequence(seq: &'a PoseSequence, end: usize, w: usize) -> Result<Self> {
        if end + 1 < w || end >= seq.len() {
            return Err(Error::OutOfRange {
                t: end,
                reason: format!("window of {w} frames does not fit in {} frames", seq.len()),
            });
        }
        Self::new(&seq.frames[end + 1 - w..=end], end)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn start(&self) -> usize {
        self.end + 1 - self.frames.len()
    }

    pub fn joints(&self) -> usize {
        self.frames[0].joints.len()
    }

    pub fn frames(&self) -> &'a [PoseFrame] {
        self.frames
    }
}

pub fn jcd<F: Real>(window: &Window<'_>) -> Matrix<F> {
    jcd_scaled(window, 1.0)
}

fn jcd_scaled<F: Real>(window: &Window<'_>, scale: f64) -> Matrix<F> {
    let j = window.joints();
    let w = window.len();
    let mut out = Matrix::zeros(pair_count(j), w);
    for (f, frame) in window.frames().iter().enumerate() {
        let mut row = 0;
        for a in 0..j {
            let pa = frame.joints[a];
            for pb in &frame.joints[a + 1..] {
                let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
                out.set(row, f, F::of(d * scale));
                row += 1;
            }
        }
    }
    out
}

fn displacement_view<F: Real>(
    frames: &[PoseFrame],
    pairs: impl Iterator<Item = (usize, usize)>,
    cols: usize,
    variant: MotionVariant,
    scale: f64,
) -> Matrix<F> {
    let j = frames[0].joints.len();
    let per = variant.rows_per_joint();
    let mut out = Matrix::zeros(per * j, cols);
    for (col, (from, to)) in pairs.enumerate() {
        for (jt, (p0, p1)) in frames[from].joints.iter().zip(&frames[to].joints).enumerate() {
            let d = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
            match variant {
                MotionVariant::Displacement => {
                    for a in 0..3 {
                        out.set(3 * jt + a, col, F::of(d[a] * scale));
                    }
                }
                MotionVariant::Speed => {
                    let s = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    out.set(jt, col, F::of(s * scale));
                }
            }
        }
    }
    out
}

pub fn m_slow<F: Real>(window: &Window<'_>, variant: MotionVariant) -> Matrix<F> {
    let w = window.len();
    displacement_view(window.frames(), (0..w - 1).map(|f| (f, f + 1)), w - 1, variant, 1.0)
}

pub fn m_fast<F: Real>(window: &Window<'_>, variant: MotionVariant) -> Matrix<F> {
    let half = window.len() / 2;
    displacement_view(
        window.frames(),
        (0..half - 1).map(|k| (2 * k, 2 * k + 2)),
        half - 1,
        variant,
        1.0,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet<F> {
    pub jcd: Matrix<F>,
    pub m_slow: Matrix<F>,
    pub m_fast: Matrix<F>,
}

impl<F: Real> ViewSet<F> {
    pub fn compute(window: &Window<'_>, cfg: &FeatureConfig) -> Self {
        let w = window.len();
        let half = w / 2;
        Self {
            jcd: jcd_scaled(window, cfg.scale),
            m_slow: displacement_view(
                window.frames(),
                (0..w - 1).map(|f| (f, f + 1)),
                w - 1,
                cfg.motion,
                cfg.scale,
            ),
            m_fast: displacement_view(
                window.frames(),
                (0..half - 1).map(|k| (2 * k, 2 * k + 2)),
                half - 1,
                cfg.motion,
                cfg.scale,
            ),
        }
    }

    pub fn cast<G: Real>(&self) -> ViewSet<G> {
        ViewSet {
            jcd: self.jcd.cast(),
            m_slow: self.m_slow.cast(),
            m_fast: self.m_fast.cast(),
        }
    }

    pub fn get(&self, view: usize) -> &Matrix<F> {
        match view {
            0 => &self.jcd,
            1 => &self.m_slow,
            2 => &self.m_fast,
            _ => panic!("view index {view} out of range"),
        }
    }

    pub fn get_mut(&mut self, view: usize) -> &mut Matrix<F> {
        match view {
            0 => &mut self.jcd,
            1 => &mut self.m_slow,
            2 => &mut self.m_fast,
            _ => panic!("view index {view} out of range"),
        }
    }
}

/// Coarse superclass: static gesture, dynamic gesture, non-gesture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sdn {
    Static,
    Dynamic,
    NonGesture,
}

impl Sdn {
    pub fn index(self) -> usize {
        match self {
            Sdn::Static => 0,
            Sdn::Dynamic => 1,
            Sdn::NonGesture => 2,
        }
    }

    pub fn of_category(c: Category) -> Self {
        match c {
            Category::Static => Sdn::Static,
            Category::DynamicCoarse | Category::DynamicFine | Category::Periodic => Sdn::Dynamic,
        }
    }
}

/// Training tasks. `Gc` is the ablation-only boundary classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Sdn,
    Fine,
    Start,
    End,
    Gc,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Sdn, Task::Fine, Task::Start, Task::End, Task::Gc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Sdn => "sdn",
            Task::Fine => "fine",
            Task::Start => "start",
            Task::End => "end",
            Task::Gc => "gc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskLabels {
    pub sdn: Sdn,
    pub fine: usize,
    pub start_index: Option<usize>,
    pub end_index: Option<usize>,
}

impl TaskLabels {
    pub fn non_gesture() -> Self {
        Self {
            sdn: Sdn::NonGesture,
            fine: NON_GESTURE,
            start_index: None,
            end_index: None,
        }
    }

    /// Boundary label for the GC head: the window holds a start or an end.
    pub fn has_boundary(&self) -> bool {
        self.start_index.is_some() || self.end_index.is_some()
    }
}

/// The per-window on/off selector for the four tasks (SDN, fine, start, end).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskMask(pub [bool; 4]);

impl TaskMask {
    pub fn from_labels(labels: &TaskLabels) -> Self {
        TaskMask([true, true, labels.start_index.is_some(), labels.end_index.is_some()])
    }

    pub fn all() -> Self {
        TaskMask([true; 4])
    }

    /// `Gc` is never gated by the window itself.
    pub fn get(&self, task: Task) -> bool {
        match task {
            Task::Gc => true,
            t => self.0[t.index()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample<F> {
    pub views: ViewSet<F>,
    pub labels: TaskLabels,
    pub mask: TaskMask,
}

/// Labels of the window `[t - w + 1, t]` given a sorted annotation list.
pub fn window_labels(
    annotations: &[GestureAnnotation],
    t: usize,
    w: usize,
    overlap_threshold: f64,
) -> TaskLabels {
    let lo = t + 1 - w;
    let mut best: Option<(usize, usize, &GestureAnnotation)> = None;
    let mut start_index = None;
    let mut end_index = None;
    for a in annotations {
        if a.start_frame > t || a.end_frame < lo {
            continue;
        }
        let ov_end = a.end_frame.min(t);
        let overlap = ov_end - a.start_frame.max(lo) + 1;
        let better = match best {
            None => true,
            Some((o, e, _)) => overlap > o || (overlap == o && ov_end > e),
        };
        if better {
            best = Some((overlap, ov_end, a));
        }
        if a.start_frame >= lo {
            start_index = Some(a.start_frame - lo);
        }
        if a.end_frame <= t {
            end_index = Some(a.end_frame - lo);
        }
    }
    let (sdn, fine) = match best {
        Some((overlap, _, a)) if overlap as f64 >= overlap_threshold * w as f64 => {
            (Sdn::of_category(a.category), a.label)
        }
        _ => (Sdn::NonGesture, NON_GESTURE),
    };
    TaskLabels {
        sdn,
        fine,
        start_index,
        end_index,
    }
}

pub fn make_sample<F: Real>(
    seq: &PoseSequence,
    t: usize,
    w: usize,
    overlap_threshold: f64,
    cfg: &FeatureConfig,
) -> Result<WindowSample<F>> {
    check_window_len(w)?;
    let window = Window::from_sequence(seq, t, w)?;
    let labels = window_labels(&seq.annotations, t, w, overlap_threshold);
    Ok(WindowSample {
        views: ViewSet::compute(&window, cfg),
        mask: TaskMask::from_labels(&labels),
        labels,
    })
}
