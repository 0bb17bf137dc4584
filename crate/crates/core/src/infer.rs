//! Online inference: per-frame window views, fine-grained preliminary
//! labels, a `W`-frame majority vote, and detection events.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ViewSet, Window};
use crate::model::{argmax, forward_fine, ModelParams};
use crate::pose_io::{PoseFrame, PoseSequence, NON_GESTURE};

/// Which frame a final label is reported against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    /// `emit - W/2`: the centre of the window that produced the label.
    #[default]
    Center,
    /// `emit - (W - 1)`: the first frame of that window.
    WindowStart,
    /// The emitting frame itself.
    EmitFrame,
}

impl Attribution {
    pub fn offset(self, window: usize) -> usize {
        match self {
            Attribution::Center => window / 2,
            Attribution::WindowStart => window - 1,
            Attribution::EmitFrame => 0,
        }
    }
}

impl FromStr for Attribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(Attribution::Center),
            "window_start" => Ok(Attribution::WindowStart),
            "emit_frame" => Ok(Attribution::EmitFrame),
            _ => Err(Error::config(format!("unknown attribution '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub label: usize,
    pub pred_start_frame: usize,
    pub pred_end_frame: usize,
    /// Last input frame used when the detection first appeared.
    pub first_emit_frame: usize,
}

impl DetectionEvent {
    pub fn len(&self) -> usize {
        self.pred_end_frame - self.pred_start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Maps the first and last emitting frames of a detection to a predicted
/// span, clamped to `[0, last_frame]`.
pub fn assign_predicted_span(
    first_emit: usize,
    close_emit: usize,
    window: usize,
    attribution: Attribution,
    last_frame: Option<usize>,
) -> (usize, usize) {
    let off = attribution.offset(window);
    let clamp = |f: usize| {
        let v = f.saturating_sub(off);
        last_frame.map_or(v, |m| v.min(m))
    };
    (clamp(first_emit), clamp(close_emit))
}

/// Mode of the last `W` preliminary labels; ties go to the label seen most recently.
#[derive(Debug, Clone)]
pub struct MajorityVote {
    window: usize,
    labels: VecDeque<usize>,
    counts: Vec<usize>,
}

impl MajorityVote {
    pub fn new(window: usize, num_classes: usize) -> Self {
        Self {
            window,
            labels: VecDeque::with_capacity(window),
            counts: vec![0; num_classes],
        }
    }

    /// Adds a label; returns the vote once `W` labels have been seen.
    pub fn push(&mut self, label: usize) -> Option<usize> {
        if label >= self.counts.len() {
            self.counts.resize(label + 1, 0);
        }
        if self.labels.len() == self.window {
            let old = self.labels.pop_front().expect("full buffer");
            self.counts[old] -= 1;
        }
        self.labels.push_back(label);
        self.counts[label] += 1;
        (self.labels.len() == self.window).then(|| self.mode())
    }

    fn mode(&self) -> usize {
        let best = *self.counts.iter().max().expect("non-empty counts");
        *self
            .labels
            .iter()
            .rev()
            .find(|&&l| self.counts[l] == best)
            .expect("a label holds the maximum")
    }
}

#[derive(Debug, Clone, Copy)]
struct OpenDetection {
    label: usize,
    first_emit: usize,
    last_emit: usize,
}

/// Turns preliminary labels into final labels and detection events.
///
/// A detection opens whenever the final label changes to a gesture class
/// and closes when it changes away from it (or when the stream ends).
#[derive(Debug, Clone)]
pub struct LabelTracker {
    window: usize,
    attribution: Attribution,
    vote: MajorityVote,
    open: Option<OpenDetection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrackStep {
    /// `None` while the vote is still warming up.
    pub label: Option<usize>,
    pub closed: Option<DetectionEvent>,
}

impl LabelTracker {
    pub fn new(window: usize, num_classes: usize, attribution: Attribution) -> Self {
        Self {
            window,
            attribution,
            vote: MajorityVote::new(window, num_classes),
            open: None,
        }
    }

    /// Feeds the preliminary label computed at frame `t`.
    pub fn push(&mut self, t: usize, preliminary: usize) -> TrackStep {
        let Some(y) = self.vote.push(preliminary) else {
            return TrackStep::default();
        };
        let mut closed = None;
        match self.open {
            Some(ref mut d) if d.label == y => d.last_emit = t,
            _ => {
                if let Some(d) = self.open.take() {
                    closed = Some(self.event(d));
                }
                if y != NON_GESTURE {
                    self.open = Some(OpenDetection {
                        label: y,
                        first_emit: t,
                        last_emit: t,
                    });
                }
            }
        }
        TrackStep { label: Some(y), closed }
    }

    /// Closes a detection still open at the end of the stream.
    pub fn finish(&mut self) -> Option<DetectionEvent> {
        self.open.take().map(|d| self.event(d))
    }

    fn event(&self, d: OpenDetection) -> DetectionEvent {
        let (s, e) = assign_predicted_span(d.first_emit, d.last_emit, self.window, self.attribution, None);
        DetectionEvent {
            label: d.label,
            pred_start_frame: s,
            pred_end_frame: e,
            first_emit_frame: d.first_emit,
        }
    }
}

/// Per-stream online state: frame ring buffer plus the label tracker.
#[derive(Debug, Clone)]
pub struct StreamState {
    window: usize,
    joints: usize,
    frames: VecDeque<PoseFrame>,
    tracker: LabelTracker,
    seen: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StepOutput {
    pub preliminary: Option<usize>,
    /// Final label `y_t`; `None` until `2W - 1` frames have been seen.
    pub label: Option<usize>,
    pub closed: Option<DetectionEvent>,
}

impl StreamState {
    pub fn new(params: &ModelParams<f32>, attribution: Attribution) -> Self {
        let spec = params.spec();
        Self {
            window: spec.window,
            joints: spec.joints,
            frames: VecDeque::with_capacity(spec.window),
            tracker: LabelTracker::new(spec.window, spec.num_classes, attribution),
            seen: 0,
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.seen
    }

    pub fn step(&mut self, frame: &PoseFrame, params: &ModelParams<f32>) -> Result<StepOutput> {
        if frame.joints.len() != self.joints {
            return Err(Error::shape(format!(
                "frame has {} joints, model expects {}",
                frame.joints.len(),
                self.joints
            )));
        }
        let t = self.seen;
        self.seen += 1;
        if self.frames.len() == self.window {
            self.frames.pop_front();
        }
        self.frames.push_back(frame.clone());
        if self.frames.len() < self.window {
            return Ok(StepOutput::default());
        }
        let window = Window::new(self.frames.make_contiguous(), t)?;
        let views: ViewSet<f32> = ViewSet::compute(&window, &params.spec().features);
        let preliminary = argmax(&forward_fine(params, &views)?);
        let s = self.tracker.push(t, preliminary);
        Ok(StepOutput {
            preliminary: Some(preliminary),
            label: s.label,
            closed: s.closed,
        })
    }

    pub fn finish(&mut self) -> Option<DetectionEvent> {
        self.tracker.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineResult {
    pub events: Vec<DetectionEvent>,
    /// Final label attributed to each input frame.
    pub track: Vec<Option<usize>>,
    pub preliminary: Vec<Option<usize>>,
}

/// Feeds a whole sequence through [`StreamState::step`], one frame at a time.
pub fn run_offline(seq: &PoseSequence, params: &ModelParams<f32>, attribution: Attribution) -> Result<OfflineResult> {
    let w = params.spec().window;
    if seq.len() < 2 * w - 1 {
        return Err(Error::SequenceTooShort {
            id: seq.source_id.clone(),
            len: seq.len(),
            needed: 2 * w - 1,
        });
    }
    let mut state = StreamState::new(params, attribution);
    let mut out = OfflineResult {
        events: Vec::new(),
        track: Vec::with_capacity(seq.len()),
        preliminary: Vec::with_capacity(seq.len()),
    };
    for frame in &seq.frames {
        let s = state.step(frame, params)?;
        out.track.push(s.label);
        out.preliminary.push(s.preliminary);
        out.events.extend(s.closed);
    }
    out.events.extend(state.finish());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Interchange format: `sequence_id label pred_start pred_end first_emit`
// ---------------------------------------------------------------------------

pub fn format_detections<'a>(items: impl IntoIterator<Item = (&'a str, &'a DetectionEvent)>) -> String {
    let mut out = String::new();
    for (id, d) in items {
        writeln!(
            out,
            "{id} {} {} {} {}",
            d.label, d.pred_start_frame, d.pred_end_frame, d.first_emit_frame
        )
        .unwrap();
    }
    out
}

/// Parses detection lines grouped by sequence id, keeping file order.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_detections(text: &str) -> Result<BTreeMap<String, Vec<DetectionEvent>>> {
    let mut out: BTreeMap<String, Vec<DetectionEvent>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::parse(i + 1, format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |k: usize| -> Result<usize> {
            fields[k]
                .parse()
                .map_err(|_| Error::parse(i + 1, format!("'{}' is not a frame or label", fields[k])))
        };
        let d = DetectionEvent {
            label: num(1)?,
            pred_start_frame: num(2)?,
            pred_end_frame: num(3)?,
            first_emit_frame: num(4)?,
        };
        if d.label == NON_GESTURE {
            return Err(Error::parse(i + 1, "detections cannot carry the non-gesture label"));
        }
        if d.pred_start_frame > d.pred_end_frame {
            return Err(Error::parse(i + 1, "pred_start after pred_end"));
        }
        out.entry(fields[0].to_string()).or_default().push(d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Frequency count from scratch; ties broken by latest last occurrence.
    fn brute_mode(buf: &[usize]) -> usize {
        let count = |l: usize| buf.iter().filter(|&&x| x == l).count();
        let best = buf.iter().map(|&l| count(l)).max().unwrap();
        let last = |l: usize| buf.iter().rposition(|&x| x == l).unwrap();
        buf.iter()
            .copied()
            .filter(|&l| count(l) == best)
            .max_by_key(|&l| last(l))
            .unwrap()
    }

    #[test]
    fn vote_picks_mode() {
        let mut v = MajorityVote::new(5, 3);
        let out: Vec<_> = [1, 1, 2, 0, 1].iter().map(|&l| v.push(l)).collect();
        assert_eq!(out, vec![None, None, None, None, Some(1)]);
    }

    #[test]
    fn vote_tie_goes_to_most_recent() {
        let mut v = MajorityVote::new(4, 3);
        for l in [1, 1, 2] {
            v.push(l);
        }
        assert_eq!(v.push(2), Some(2));
        assert_eq!(brute_mode(&[1, 1, 2, 2]), 2);
    }

    #[test]
    fn step_function_stream_gives_one_detection() {
        // 0^8 A^16 0^16 with W = 8
        let w = 8;
        let stream: Vec<usize> = [vec![0; 8], vec![2; 16], vec![0; 16]].concat();
        let mut tr = LabelTracker::new(w, 3, Attribution::Center);
        let mut events = Vec::new();
        for (t, &l) in stream.iter().enumerate() {
            let s = tr.push(t, l);
            if t >= w - 1 {
                assert_eq!(s.label, Some(brute_mode(&stream[t + 1 - w..=t])));
            }
            events.extend(s.closed);
        }
        events.extend(tr.finish());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].label, 2);
        assert!((9..=23).contains(&events[0].len()), "{}", events[0].len());
        // A reaches a 4-4 tie as the most recent label at frame 11 and loses it at 27
        assert_eq!(events[0].first_emit_frame, 11);
        assert_eq!(events[0].pred_start_frame, 7);
        assert_eq!(events[0].pred_end_frame, 22);
    }

    #[test]
    fn non_gesture_stream_never_detects() {
        let mut tr = LabelTracker::new(6, 2, Attribution::Center);
        for t in 0..200 {
            assert!(tr.push(t, 0).closed.is_none());
        }
        assert!(tr.finish().is_none());
    }

    #[test]
    fn center_attribution_delay() {
        assert_eq!(assign_predicted_span(108, 140, 16, Attribution::Center, None), (100, 132));
        assert_eq!(assign_predicted_span(120, 150, 40, Attribution::Center, None).0, 100);
        assert_eq!(assign_predicted_span(5, 30, 16, Attribution::Center, None), (0, 22));
        assert_eq!(assign_predicted_span(108, 140, 16, Attribution::WindowStart, None), (93, 125));
        assert_eq!(assign_predicted_span(108, 140, 16, Attribution::EmitFrame, Some(120)), (108, 120));
    }

    #[test]
    fn detections_round_trip() {
        let a = DetectionEvent {
            label: 3,
            pred_start_frame: 10,
            pred_end_frame: 40,
            first_emit_frame: 18,
        };
        let b = DetectionEvent { label: 1, ..a };
        let text = format_detections([("seq-1", &a), ("seq-0", &b), ("seq-1", &b)]);
        let back = parse_detections(&text).unwrap();
        assert_eq!(back["seq-1"], vec![a, b]);
        assert_eq!(back["seq-0"], vec![b]);
        assert!(matches!(parse_detections("x 1 2 3"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_detections("\nx 0 2 3 4"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_detections("x 1 5 3 4"), Err(Error::Parse { .. })));
    }
}
