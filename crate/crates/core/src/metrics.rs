//! Continuous-recognition scoring: detection matching, detection rate,
//! false-positive score, Jaccard index, delay, and the report tables.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::infer::DetectionEvent;
use crate::pose_io::{Category, GestureAnnotation};

pub const DEFAULT_MOR: f64 = 0.5;
/// Tolerance of the time-window rule, in seconds.
pub const SHREC19_TOLERANCE_S: f64 = 2.5;

fn intersection(a: (usize, usize), b: (usize, usize)) -> usize {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo > hi {
        0
    } else {
        hi - lo + 1
    }
}

fn gt_span(g: &GestureAnnotation) -> (usize, usize) {
    (g.start_frame, g.end_frame)
}

fn det_span(d: &DetectionEvent) -> (usize, usize) {
    (d.pred_start_frame, d.pred_end_frame)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub gt: usize,
    pub det: usize,
    /// Frames shared by the two spans.
    pub intersection: usize,
    pub gt_len: usize,
    /// Fraction of the ground-truth span covered by the detection.
    pub overlap_ratio: f64,
    /// Frame-level Jaccard index of the two spans.
    pub jaccard: f64,
    /// `first_emit - pred_start` of the detection.
    pub delay: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// Matched detection index for every ground-truth gesture.
    pub gt_match: Vec<Option<usize>>,
    /// Whether each detection was matched.
    pub det_matched: Vec<bool>,
    pub pairs: Vec<MatchedPair>,
}

impl MatchResult {
    pub fn matched(&self) -> usize {
        self.pairs.len()
    }

    pub fn false_positives(&self) -> usize {
        self.det_matched.iter().filter(|m| !**m).count()
    }

    /// Keeps only the pairs whose overlap ratio reaches `mor`.
    pub fn filtered(&self, mor: f64) -> MatchResult {
        let mut out = MatchResult {
            gt_match: vec![None; self.gt_match.len()],
            det_matched: vec![false; self.det_matched.len()],
            pairs: Vec::new(),
        };
        for p in self.pairs.iter().filter(|p| reaches(p.intersection, p.gt_len, mor)) {
            out.gt_match[p.gt] = Some(p.det);
            out.det_matched[p.det] = true;
            out.pairs.push(*p);
        }
        out
    }
}

/// `inter >= mor * len`, tolerant to the rounding of `mor * len`.
fn reaches(inter: usize, len: usize, mor: f64) -> bool {
    inter as f64 >= mor * len as f64 - 1e-9
}

fn check_mor(mor: f64) -> Result<()> {
    if mor > 0.0 && mor <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidMor(mor))
    }
}

/// Whether `d` can be credited to `g` at overlap ratio `mor`: same label,
/// `|d ∩ g| >= mor |g|`, and `|d| <= 2 |g|`.
pub fn qualifies(g: &GestureAnnotation, d: &DetectionEvent, mor: f64) -> bool {
    let gl = g.len();
    let inter = intersection(gt_span(g), det_span(d));
    d.label == g.label && inter > 0 && reaches(inter, gl, mor) && d.len() <= 2 * gl
}

fn pair(g: &GestureAnnotation, d: &DetectionEvent, gi: usize, di: usize) -> MatchedPair {
    let inter = intersection(gt_span(g), det_span(d));
    let union = g.len() + d.len() - inter;
    MatchedPair {
        gt: gi,
        det: di,
        intersection: inter,
        gt_len: g.len(),
        overlap_ratio: inter as f64 / g.len() as f64,
        jaccard: inter as f64 / union as f64,
        delay: d.first_emit_frame.saturating_sub(d.pred_start_frame),
    }
}

/// One-to-one greedy assignment over candidate edges in the order given by
/// `cmp`; each edge is taken when both ends are still free.
fn greedy(
    gt: &[GestureAnnotation],
    det: &[DetectionEvent],
    mut edges: Vec<(usize, usize)>,
    cmp: impl Fn(&(usize, usize), &(usize, usize)) -> Ordering,
) -> MatchResult {
    edges.sort_by(cmp);
    let mut r = MatchResult {
        gt_match: vec![None; gt.len()],
        det_matched: vec![false; det.len()],
        pairs: Vec::new(),
    };
    for (gi, di) in edges {
        if r.gt_match[gi].is_some() || r.det_matched[di] {
            continue;
        }
        r.gt_match[gi] = Some(di);
        r.det_matched[di] = true;
        r.pairs.push(pair(&gt[gi], &det[di], gi, di));
    }
    r.pairs.sort_by_key(|p| p.gt);
    r
}

/// Greedy one-to-one matching under the overlap, duration and label rules.
///
/// Candidate pairs are taken in decreasing order of overlap ratio, ties
/// broken by earlier ground-truth start, then earlier detection start. With
/// this order the matching at a stricter `mor` is exactly the looser
/// matching with low-overlap pairs removed, so DR, FP and JI are monotone
/// in `mor`.
pub fn match_detections(gt: &[GestureAnnotation], det: &[DetectionEvent], mor: f64) -> Result<MatchResult> {
    check_mor(mor)?;
    let edges: Vec<(usize, usize)> = (0..gt.len())
        .flat_map(|gi| (0..det.len()).map(move |di| (gi, di)))
        .filter(|&(gi, di)| qualifies(&gt[gi], &det[di], mor))
        .collect();
    Ok(greedy(gt, det, edges, |a, b| {
        let ia = intersection(gt_span(&gt[a.0]), det_span(&det[a.1])) * gt[b.0].len();
        let ib = intersection(gt_span(&gt[b.0]), det_span(&det[b.1])) * gt[a.0].len();
        ib.cmp(&ia)
            .then(gt[a.0].start_frame.cmp(&gt[b.0].start_frame))
            .then(det[a.1].pred_start_frame.cmp(&det[b.1].pred_start_frame))
            .then(a.1.cmp(&b.1))
    }))
}

/// Frames between the two spans; zero when they intersect.
pub fn span_gap(a: (usize, usize), b: (usize, usize)) -> usize {
    if b.0 > a.1 {
        b.0 - a.1
    } else if a.0 > b.1 {
        a.0 - b.1
    } else {
        0
    }
}

/// Time-window rule: same label and boundary gap at most 2.5 s. Pairs are
/// taken by increasing gap, then temporal order.
pub fn match_shrec19(gt: &[GestureAnnotation], det: &[DetectionEvent], fps: f64) -> Result<MatchResult> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::InvalidFps(fps));
    }
    let tol = SHREC19_TOLERANCE_S * fps;
    let gap = |gi: usize, di: usize| span_gap(gt_span(&gt[gi]), det_span(&det[di]));
    let edges: Vec<(usize, usize)> = (0..gt.len())
        .flat_map(|gi| (0..det.len()).map(move |di| (gi, di)))
        .filter(|&(gi, di)| gt[gi].label == det[di].label && gap(gi, di) as f64 <= tol + 1e-9)
        .collect();
    Ok(greedy(gt, det, edges, |a, b| {
        gap(a.0, a.1)
            .cmp(&gap(b.0, b.1))
            .then(gt[a.0].start_frame.cmp(&gt[b.0].start_frame))
            .then(det[a.1].pred_start_frame.cmp(&det[b.1].pred_start_frame))
            .then(a.1.cmp(&b.1))
    }))
}

/// Matched ground-truth gestures over all ground-truth gestures.
pub fn detection_rate(matches: &[MatchResult]) -> Result<f64> {
    let total: usize = matches.iter().map(|m| m.gt_match.len()).sum();
    if total == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(matches.iter().map(MatchResult::matched).sum::<usize>() as f64 / total as f64)
}

/// Unmatched detections over all ground-truth gestures; may exceed 1.
pub fn false_positive_score(matches: &[MatchResult]) -> Result<f64> {
    let total: usize = matches.iter().map(|m| m.gt_match.len()).sum();
    if total == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(matches.iter().map(MatchResult::false_positives).sum::<usize>() as f64 / total as f64)
}

/// Mean per-gesture Jaccard index of one sequence; undetected gestures count 0.
pub fn sequence_jaccard(m: &MatchResult) -> Result<f64> {
    if m.gt_match.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(m.pairs.iter().map(|p| p.jaccard).sum::<f64>() / m.gt_match.len() as f64)
}

/// Jaccard index of a sequence under the default matching, optionally
/// keeping only pairs whose overlap ratio reaches `mor_filter`. Because the
/// matching at a stricter ratio is the looser matching with pairs removed,
/// this is the same as matching at `mor_filter` directly.
pub fn jaccard_index(gt: &[GestureAnnotation], det: &[DetectionEvent], mor_filter: Option<f64>) -> Result<f64> {
    let mor = mor_filter.unwrap_or(DEFAULT_MOR);
    sequence_jaccard(&match_detections(gt, det, mor)?)
}

/// Mean over sequences (with at least one gesture) of the per-sequence JI.
pub fn corpus_jaccard(matches: &[MatchResult]) -> Result<f64> {
    let per: Vec<f64> = matches
        .iter()
        .filter(|m| !m.gt_match.is_empty())
        .map(|m| sequence_jaccard(m).expect("non-empty"))
        .collect();
    if per.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayStats {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

pub fn delay_stats(matches: &[MatchResult]) -> Result<DelayStats> {
    let mut delays: Vec<usize> = matches.iter().flat_map(|m| m.pairs.iter().map(|p| p.delay)).collect();
    if delays.is_empty() {
        return Err(Error::NoMatches);
    }
    delays.sort_unstable();
    let n = delays.len();
    let median = if n % 2 == 1 {
        delays[n / 2] as f64
    } else {
        (delays[n / 2 - 1] + delays[n / 2]) as f64 / 2.0
    };
    Ok(DelayStats {
        mean: delays.iter().sum::<usize>() as f64 / n as f64,
        median,
        count: n,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    /// Overlap-ratio matching at the given MOR.
    Overlap { mor: f64 },
    /// 2.5-second window rule at the given frame rate.
    TimeWindow { fps: f64 },
}

#[derive(Debug, Clone)]
pub struct SequenceInput<'a> {
    pub id: &'a str,
    pub gt: &'a [GestureAnnotation],
    pub det: &'a [DetectionEvent],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub id: String,
    pub gestures: usize,
    pub detections: usize,
    pub matched: usize,
    pub false_positives: usize,
    pub ji: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub label: usize,
    pub gestures: usize,
    pub matched: usize,
}

impl ClassScore {
    pub fn dr(&self) -> f64 {
        if self.gestures == 0 {
            0.0
        } else {
            self.matched as f64 / self.gestures as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub mor: f64,
    pub ji: f64,
    pub dr: f64,
    pub fp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dr: f64,
    pub fp: f64,
    pub ji: f64,
    pub delay: Option<DelayStats>,
    /// Standard deviations of the per-sequence DR, FP and JI.
    pub dr_std: f64,
    pub fp_std: f64,
    pub ji_std: f64,
    pub gestures: usize,
    pub detections: usize,
    pub matched: usize,
    pub per_class: Vec<ClassScore>,
    /// False positives grouped by the category of their predicted label.
    pub fp_by_category: BTreeMap<String, usize>,
    pub ji_mor: Vec<CurvePoint>,
    pub per_sequence: Vec<SequenceScore>,
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

fn run_protocol(s: &SequenceInput<'_>, protocol: Protocol) -> Result<MatchResult> {
    match protocol {
        Protocol::Overlap { mor } => match_detections(s.gt, s.det, mor),
        Protocol::TimeWindow { fps } => match_shrec19(s.gt, s.det, fps),
    }
}

/// Scores a corpus. `categories` maps labels to categories for the
/// false-positive breakdown; `sweep` lists MOR values for the JI curve.
pub fn evaluate(
    sequences: &[SequenceInput<'_>],
    protocol: Protocol,
    categories: &BTreeMap<usize, Category>,
    sweep: &[f64],
) -> Result<EvalReport> {
    let matches: Vec<MatchResult> = sequences
        .iter()
        .map(|s| run_protocol(s, protocol))
        .collect::<Result<_>>()?;
    let dr = detection_rate(&matches)?;
    let fp = false_positive_score(&matches)?;
    let ji = corpus_jaccard(&matches)?;

    let mut per_sequence = Vec::with_capacity(sequences.len());
    let (mut drs, mut fps, mut jis) = (Vec::new(), Vec::new(), Vec::new());
    let mut per_class: BTreeMap<usize, ClassScore> = BTreeMap::new();
    let mut fp_by_category: BTreeMap<String, usize> = BTreeMap::new();
    for c in categories.values() {
        fp_by_category.insert(c.as_str().to_string(), 0);
    }
    for (s, m) in sequences.iter().zip(&matches) {
        let seq_ji = (!s.gt.is_empty()).then(|| sequence_jaccard(m).expect("non-empty"));
        if !s.gt.is_empty() {
            drs.push(m.matched() as f64 / s.gt.len() as f64);
            fps.push(m.false_positives() as f64 / s.gt.len() as f64);
            jis.push(seq_ji.unwrap());
        }
        for (g, hit) in s.gt.iter().zip(&m.gt_match) {
            let c = per_class.entry(g.label).or_insert(ClassScore {
                label: g.label,
                gestures: 0,
                matched: 0,
            });
            c.gestures += 1;
            c.matched += usize::from(hit.is_some());
        }
        for (d, hit) in s.det.iter().zip(&m.det_matched) {
            if !hit {
                let cat = categories.get(&d.label).map_or("unknown", |c| c.as_str());
                *fp_by_category.entry(cat.to_string()).or_default() += 1;
            }
        }
        per_sequence.push(SequenceScore {
            id: s.id.to_string(),
            gestures: s.gt.len(),
            detections: s.det.len(),
            matched: m.matched(),
            false_positives: m.false_positives(),
            ji: seq_ji,
        });
    }

    let mut ji_mor = Vec::with_capacity(sweep.len());
    if !sweep.is_empty() {
        let lowest = sweep.iter().cloned().fold(f64::INFINITY, f64::min);
        let base: Vec<MatchResult> = sequences
            .iter()
            .map(|s| match_detections(s.gt, s.det, lowest))
            .collect::<Result<_>>()?;
        for &mor in sweep {
            check_mor(mor)?;
            let at: Vec<MatchResult> = base.iter().map(|m| m.filtered(mor)).collect();
            ji_mor.push(CurvePoint {
                mor,
                ji: corpus_jaccard(&at)?,
                dr: detection_rate(&at)?,
                fp: false_positive_score(&at)?,
            });
        }
    }

    Ok(EvalReport {
        dr,
        fp,
        ji,
        delay: delay_stats(&matches).ok(),
        dr_std: std_dev(&drs),
        fp_std: std_dev(&fps),
        ji_std: std_dev(&jis),
        gestures: matches.iter().map(|m| m.gt_match.len()).sum(),
        detections: matches.iter().map(|m| m.det_matched.len()).sum(),
        matched: matches.iter().map(MatchResult::matched).sum(),
        per_class: per_class.into_values().collect(),
        fp_by_category,
        ji_mor,
        per_sequence,
    })
}

/// `start:end:step`, inclusive of `end` up to rounding.
pub fn parse_sweep(range: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = range
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("bad sweep '{range}', expected start:end:step")))?;
    let [start, end, step] = parts[..] else {
        return Err(Error::config(format!("bad sweep '{range}', expected start:end:step")));
    };
    if !(step > 0.0) || start > end {
        return Err(Error::config(format!("bad sweep '{range}'")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    let values: Vec<f64> = (0..=n).map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9).collect();
    for &v in &values {
        check_mor(v)?;
    }
    Ok(values)
}

impl EvalReport {
    pub fn aggregate_csv(&self) -> String {
        let mut s = String::from("metric,value,std\n");
        writeln!(s, "dr,{:.6},{:.6}", self.dr, self.dr_std).unwrap();
        writeln!(s, "fp,{:.6},{:.6}", self.fp, self.fp_std).unwrap();
        writeln!(s, "ji,{:.6},{:.6}", self.ji, self.ji_std).unwrap();
        match self.delay {
            Some(d) => {
                writeln!(s, "delay_mean,{:.6},", d.mean).unwrap();
                writeln!(s, "delay_median,{:.6},", d.median).unwrap();
            }
            None => s.push_str("delay_mean,,\ndelay_median,,\n"),
        }
        writeln!(s, "gestures,{},", self.gestures).unwrap();
        writeln!(s, "detections,{},", self.detections).unwrap();
        writeln!(s, "matched,{},", self.matched).unwrap();
        s
    }

    pub fn per_class_csv(&self, names: &BTreeMap<usize, String>) -> String {
        let mut s = String::from("label,name,gestures,matched,dr\n");
        for c in &self.per_class {
            let name = names.get(&c.label).map_or("", String::as_str);
            writeln!(s, "{},{},{},{},{:.6}", c.label, name, c.gestures, c.matched, c.dr()).unwrap();
        }
        s
    }

    pub fn fp_by_category_csv(&self) -> String {
        let mut s = String::from("category,false_positives,fp_score\n");
        for (cat, n) in &self.fp_by_category {
            writeln!(s, "{cat},{n},{:.6}", *n as f64 / self.gestures.max(1) as f64).unwrap();
        }
        s
    }

    pub fn ji_mor_csv(&self) -> String {
        let mut s = String::from("mor,ji,dr,fp\n");
        for p in &self.ji_mor {
            writeln!(s, "{},{:.6},{:.6},{:.6}", p.mor, p.ji, p.dr, p.fp).unwrap();
        }
        s
    }

    pub fn per_sequence_csv(&self) -> String {
        let mut s = String::from("sequence_id,gestures,detections,matched,false_positives,ji\n");
        for q in &self.per_sequence {
            let ji = q.ji.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{},{},{}",
                q.id, q.gestures, q.detections, q.matched, q.false_positives, ji
            )
            .unwrap();
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

/// Minimal SVG line chart of JI against MOR.
pub fn ji_mor_svg(points: &[CurvePoint]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let x = |m: f64| pad + m * (w - 2.0 * pad);
    let y = |v: f64| h - pad - v * (h - 2.0 * pad);
    let path: Vec<String> = points
        .iter()
        .map(|p| format!("{:.1},{:.1}", x(p.mor), y(p.ji)))
        .collect();
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\">minimum overlap ratio</text>\n\
         <text x=\"12\" y=\"{cy}\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">Jaccard index</text>\n\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{pts}\"/>\n</svg>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        ty = h - 8.0,
        cy = h / 2.0,
        pts = path.join(" "),
    )
}

/// Minimal SVG bar chart of per-class detection rate.
pub fn per_class_svg(classes: &[ClassScore], names: &BTreeMap<usize, String>) -> String {
    let (h, pad, bar) = (320.0, 40.0, 28.0);
    let w = pad * 2.0 + bar * classes.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, c) in classes.iter().enumerate() {
        let bh = c.dr() * (h - 2.0 * pad);
        let x = pad + i as f64 * bar;
        let label = names.get(&c.label).cloned().unwrap_or_else(|| c.label.to_string());
        writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"steelblue\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"middle\">{label}</text>",
            x + 2.0,
            h - pad - bh,
            bar - 4.0,
            x + bar / 2.0,
            h - pad + 12.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(label: usize, s: usize, e: usize) -> GestureAnnotation {
        GestureAnnotation::new(label, s, e, Category::DynamicCoarse)
    }

    fn d(label: usize, s: usize, e: usize) -> DetectionEvent {
        DetectionEvent {
            label,
            pred_start_frame: s,
            pred_end_frame: e,
            first_emit_frame: s + 8,
        }
    }

    #[test]
    fn overlap_and_duration_rules() {
        let gt = [g(3, 100, 120)];
        let m = match_detections(&gt, &[d(3, 105, 125)], 0.5).unwrap();
        assert_eq!(m.gt_match, vec![Some(0)]);
        assert!((m.pairs[0].overlap_ratio - 16.0 / 21.0).abs() < 1e-15);
        let m = match_detections(&gt, &[d(3, 100, 149)], 0.5).unwrap();
        assert_eq!(m.gt_match, vec![None]);
        assert_eq!(m.false_positives(), 1);
        let m = match_detections(&gt, &[d(2, 100, 120)], 0.5).unwrap();
        assert_eq!(m.false_positives(), 1);
    }

    #[test]
    fn invalid_mor() {
        assert!(matches!(match_detections(&[], &[], 0.0), Err(Error::InvalidMor(_))));
        assert!(matches!(match_detections(&[], &[], 1.5), Err(Error::InvalidMor(_))));
    }

    #[test]
    fn rates() {
        let mut ms = Vec::new();
        for i in 0..25 {
            let mut m = MatchResult {
                gt_match: vec![None],
                det_matched: vec![],
                pairs: vec![],
            };
            if i < 23 {
                m.gt_match[0] = Some(0);
                m.det_matched.push(true);
                m.pairs.push(MatchedPair {
                    gt: 0,
                    det: 0,
                    intersection: 1,
                    gt_len: 1,
                    overlap_ratio: 1.0,
                    jaccard: 1.0,
                    delay: 8,
                });
            }
            ms.push(m);
        }
        assert!((detection_rate(&ms).unwrap() - 0.92).abs() < 1e-15);
        assert_eq!(false_positive_score(&ms).unwrap(), 0.0);
        assert!(matches!(detection_rate(&[]), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn false_positive_score_may_exceed_one() {
        let gt: Vec<_> = (0..16).map(|i| g(1, i * 20, i * 20 + 9)).collect();
        let det: Vec<_> = (0..18).map(|i| d(2, i * 20, i * 20 + 9)).collect();
        let m = match_detections(&gt, &det, 0.5).unwrap();
        assert_eq!(false_positive_score(&[m]).unwrap(), 1.125);
        let det: Vec<_> = (0..2).map(|i| d(2, i * 20, i * 20 + 9)).collect();
        let m = match_detections(&gt, &det, 0.5).unwrap();
        assert_eq!(false_positive_score(&[m]).unwrap(), 0.125);
    }

    #[test]
    fn jaccard_one_third() {
        let ji = jaccard_index(&[g(1, 10, 19)], &[d(1, 15, 24)], None).unwrap();
        assert!((ji - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard_index(&[g(1, 10, 19)], &[d(1, 10, 19)], None).unwrap(), 1.0);
        // a stricter filter drops the pair
        assert_eq!(jaccard_index(&[g(1, 10, 19)], &[d(1, 15, 24)], Some(0.6)).unwrap(), 0.0);
    }

    #[test]
    fn delays() {
        let m = match_detections(&[g(1, 10, 40), g(2, 60, 90)], &[d(1, 12, 40), d(2, 61, 88)], 0.5).unwrap();
        let s = delay_stats(&[m]).unwrap();
        assert_eq!((s.mean, s.median, s.count), (8.0, 8.0, 2));
        assert!(matches!(delay_stats(&[]), Err(Error::NoMatches)));
    }

    #[test]
    fn time_window_rule() {
        let gt = [g(1, 100, 150)];
        assert_eq!(match_shrec19(&gt, &[d(1, 160, 180)], 50.0).unwrap().matched(), 1);
        assert_eq!(match_shrec19(&gt, &[d(1, 280, 300)], 50.0).unwrap().matched(), 0);
        assert_eq!(match_shrec19(&gt, &[d(1, 149, 400)], 50.0).unwrap().matched(), 1);
        assert!(matches!(match_shrec19(&gt, &[], 0.0), Err(Error::InvalidFps(_))));
    }

    #[test]
    fn sweep_parsing() {
        let v = parse_sweep("0.05:1.0:0.05").unwrap();
        assert_eq!(v.len(), 20);
        assert_eq!(v[0], 0.05);
        assert_eq!(*v.last().unwrap(), 1.0);
        assert!(parse_sweep("0:1:0.1").is_err());
        assert!(parse_sweep("0.1:0.2").is_err());
    }

    #[test]
    fn report_blocks() {
        let gt = [g(1, 10, 40), g(2, 60, 90)];
        let det = [d(1, 12, 40), d(3, 100, 120)];
        let mut cats = BTreeMap::new();
        cats.insert(3, Category::Static);
        let seqs = [SequenceInput {
            id: "a",
            gt: &gt,
            det: &det,
        }];
        let r = evaluate(&seqs, Protocol::Overlap { mor: 0.5 }, &cats, &[0.25, 0.5, 1.0]).unwrap();
        assert_eq!((r.dr, r.fp), (0.5, 0.5));
        assert_eq!(r.fp_by_category.get("static"), Some(&1));
        assert_eq!(r.ji_mor.len(), 3);
        assert!(r.ji_mor[0].ji >= r.ji_mor[2].ji);
        assert!(r.aggregate_csv().starts_with("metric,value,std\ndr,0.500000"));
        assert_eq!(r.per_sequence_csv().lines().count(), 2);
    }
}
