//! Pose streams, gesture annotations and their on-disk formats.
//!
//! The canonical format is line oriented:
//!
//! ```text
//! #SOURCE subject-07
//! 26 17 60
//! x0 y0 z0 x1 y1 z1 ...      (one line per frame, 3J decimals)
//! ...
//! #ANNOTATIONS
//! 3 10 40 static             (label start end category)
//! ```
//!
//! The `#SOURCE` line is optional on input; without it the source id is the
//! file stem. Frame indices are implicit (line order, starting at 0).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;

pub type Point3 = [f64; 3];

pub const DEFAULT_JOINTS: usize = 26;
pub const NON_GESTURE: usize = 0;

const SOURCE_TAG: &str = "#SOURCE";
const ANNOTATIONS_TAG: &str = "#ANNOTATIONS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Static,
    DynamicCoarse,
    DynamicFine,
    Periodic,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Static,
        Category::DynamicCoarse,
        Category::DynamicFine,
        Category::Periodic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Static => "static",
            Category::DynamicCoarse => "dynamic_coarse",
            Category::DynamicFine => "dynamic_fine",
            Category::Periodic => "periodic",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "static" => Ok(Category::Static),
            "dynamic_coarse" | "dynamic" => Ok(Category::DynamicCoarse),
            "dynamic_fine" => Ok(Category::DynamicFine),
            "periodic" => Ok(Category::Periodic),
            other => Err(format!("unknown gesture category '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub joints: Vec<Point3>,
    pub index: usize,
}

impl PoseFrame {
    pub fn new(joints: Vec<Point3>, index: usize) -> Self {
        Self { joints, index }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.joints.len() as f64;
        let mut c = [0.0; 3];
        for j in &self.joints {
            for a in 0..3 {
                c[a] += j[a];
            }
        }
        c.map(|v| v / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GestureAnnotation {
    pub label: usize,
    pub start_frame: usize,
    pub end_frame: usize,
    pub category: Category,
}

impl GestureAnnotation {
    pub fn new(label: usize, start_frame: usize, end_frame: usize, category: Category) -> Self {
        Self {
            label,
            start_frame,
            end_frame,
            category,
        }
    }

    /// Number of frames covered, both ends inclusive.
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start_frame..=self.end_frame).contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub frames: Vec<PoseFrame>,
    pub annotations: Vec<GestureAnnotation>,
    pub fps: f64,
    /// Number of classes L, non-gesture included.
    pub num_classes: usize,
    pub source_id: String,
}

impl PoseSequence {
    /// Builds a sequence and checks every invariant.
    pub fn new(
        frames: Vec<PoseFrame>,
        annotations: Vec<GestureAnnotation>,
        fps: f64,
        num_classes: usize,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let seq = Self {
            frames,
            annotations,
            fps,
            num_classes,
            source_id: source_id.into(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames.first().map_or(0, PoseFrame::joint_count)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::invariant(format!("fps must be positive, got {}", self.fps)));
        }
        if self.num_classes < 2 {
            return Err(Error::invariant(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.frames.is_empty() {
            return Err(Error::invariant("sequence has no frames"));
        }
        let j = self.joint_count();
        if j < 2 {
            return Err(Error::invariant(format!("need at least 2 joints, got {j}")));
        }
        for (pos, frame) in self.frames.iter().enumerate() {
            if frame.joints.len() != j {
                return Err(Error::invariant(format!(
                    "frame {pos} has {} joints, expected {j}",
                    frame.joints.len()
                )));
            }
            if frame.index != pos {
                return Err(Error::invariant(format!(
                    "frame at position {pos} carries index {}",
                    frame.index
                )));
            }
            if frame.joints.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invariant(format!("frame {pos} has a non-finite coordinate")));
            }
        }
        validate_annotations(&self.annotations, self.frames.len(), self.num_classes)
    }

    /// Ground-truth class of every frame (0 outside annotations).
    pub fn frame_labels(&self) -> Vec<usize> {
        let mut labels = vec![NON_GESTURE; self.frames.len()];
        for a in &self.annotations {
            labels[a.start_frame..=a.end_frame].fill(a.label);
        }
        labels
    }
}

pub fn validate_annotations(
    annotations: &[GestureAnnotation],
    len: usize,
    num_classes: usize,
) -> Result<()> {
    let mut prev_end: Option<usize> = None;
    for (i, a) in annotations.iter().enumerate() {
        if a.label == NON_GESTURE || a.label >= num_classes {
            return Err(Error::invariant(format!(
                "annotation {i}: label {} outside 1..{}",
                a.label,
                num_classes - 1
            )));
        }
        if a.start_frame > a.end_frame {
            return Err(Error::invariant(format!(
                "annotation {i}: start {} after end {}",
                a.start_frame, a.end_frame
            )));
        }
        if a.end_frame >= len {
            return Err(Error::invariant(format!(
                "annotation {i}: end frame {} beyond sequence of {len} frames",
                a.end_frame
            )));
        }
        if let Some(pe) = prev_end {
            if a.start_frame <= pe {
                return Err(Error::invariant(format!(
                    "annotation {i}: starts at {} but previous annotation ends at {pe}",
                    a.start_frame
                )));
            }
        }
        prev_end = Some(a.end_frame);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub category: Option<Category>,
}

/// Class table shared by a corpus. Class 0 is always the non-gesture class
/// and has no category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub classes: Vec<ClassInfo>,
    pub joints: usize,
    #[serde(default = "default_joint_scheme")]
    pub joint_scheme: String,
}

fn default_joint_scheme() -> String {
    "wrist+5x5".to_string()
}

impl Dictionary {
    pub fn new(gestures: Vec<(String, Category)>, joints: usize) -> Result<Self> {
        let mut classes = vec![ClassInfo {
            name: "non_gesture".to_string(),
            category: None,
        }];
        classes.extend(gestures.into_iter().map(|(name, c)| ClassInfo {
            name,
            category: Some(c),
        }));
        let d = Self {
            classes,
            joints,
            joint_scheme: default_joint_scheme(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn category(&self, label: usize) -> Option<Category> {
        self.classes.get(label).and_then(|c| c.category)
    }

    pub fn name(&self, label: usize) -> &str {
        self.classes.get(label).map_or("?", |c| c.name.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::invariant("dictionary needs at least one gesture class"));
        }
        if self.classes[0].category.is_some() {
            return Err(Error::invariant("class 0 must be the non-gesture class"));
        }
        if let Some(i) = self.classes[1..].iter().position(|c| c.category.is_none()) {
            return Err(Error::invariant(format!("class {} has no category", i + 1)));
        }
        if self.joints < 2 {
            return Err(Error::invariant("dictionary needs at least 2 joints"));
        }
        Ok(())
    }

    /// Rebuilds a dictionary from the annotations of a corpus. Classes that
    /// never occur are named `class_<k>` and default to `static`.
    pub fn infer(corpus: &[PoseSequence]) -> Result<Self> {
        let first = corpus.first().ok_or(Error::EmptyCorpus)?;
        let l = corpus.iter().map(|s| s.num_classes).max().unwrap_or(2);
        let mut cats: BTreeMap<usize, Category> = BTreeMap::new();
        for a in corpus.iter().flat_map(|s| &s.annotations) {
            cats.entry(a.label).or_insert(a.category);
        }
        let gestures = (1..l)
            .map(|k| {
                (
                    format!("class_{k}"),
                    cats.get(&k).copied().unwrap_or(Category::Static),
                )
            })
            .collect();
        Dictionary::new(gestures, first.joint_count())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("dictionary serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let d: Dictionary = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }
}

/// Layout options for the external benchmark adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub fps: f64,
    pub joints: usize,
    /// Values stored per joint; positions are the first three.
    pub values_per_joint: usize,
    /// Non-coordinate columns at the start of every frame row (frame ids, timestamps).
    pub leading_columns: usize,
    pub num_classes: usize,
    /// Annotation file, one line per sequence: `id;LABEL;start;end;LABEL;start;end;...`.
    /// Relative paths resolve against the sequence file's directory.
    pub annotations: Option<PathBuf>,
    #[serde(default, rename = "class")]
    pub classes: Vec<ClassMapping>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub external: String,
    pub label: usize,
    pub category: Category,
}

impl AdapterConfig {
    pub fn shrec22() -> Self {
        Self {
            fps: 60.0,
            joints: 26,
            values_per_joint: 3,
            leading_columns: 0,
            num_classes: 17,
            annotations: None,
            classes: Vec::new(),
        }
    }

    pub fn shrec19() -> Self {
        Self {
            fps: 50.0,
            joints: 22,
            values_per_joint: 7,
            leading_columns: 1,
            num_classes: 6,
            annotations: None,
            classes: Vec::new(),
        }
    }

    /// Parses an adapter config, filling unspecified keys from `base`.
    pub fn from_toml(text: &str, base: AdapterConfig) -> Result<Self> {
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::config(e.to_string()))?;
        let over: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        merged.extend(over);
        let cfg: AdapterConfig = merged.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::config(format!("adapter fps must be positive, got {}", self.fps)));
        }
        if self.joints < 2 || self.values_per_joint < 3 {
            return Err(Error::config("adapter needs joints >= 2 and values_per_joint >= 3"));
        }
        for c in &self.classes {
            if c.label == NON_GESTURE || c.label >= self.num_classes {
                return Err(Error::config(format!(
                    "class '{}' maps to {}, outside 1..{}",
                    c.external,
                    c.label,
                    self.num_classes - 1
                )));
            }
        }
        Ok(())
    }

    fn lookup(&self, external: &str) -> Option<&ClassMapping> {
        self.classes.iter().find(|c| c.external == external)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Format {
    Canonical,
    Shrec22(AdapterConfig),
    Shrec19(AdapterConfig),
}

pub fn parse_sequence(path: &Path, format: &Format) -> Result<PoseSequence> {
    let text = read_text(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match format {
        Format::Canonical => parse_canonical(&text, &stem),
        Format::Shrec22(cfg) | Format::Shrec19(cfg) => {
            let annotations = match &cfg.annotations {
                Some(p) => {
                    let p = if p.is_relative() {
                        path.parent().unwrap_or(Path::new(".")).join(p)
                    } else {
                        p.clone()
                    };
                    let ann_text = read_text(&p)?;
                    parse_external_annotations(&ann_text, &stem, cfg)?
                }
                None => Vec::new(),
            };
            parse_external_frames(&text, &stem, annotations, cfg)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    match fs::read_to_string(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::FileNotFound(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

/// Parses the canonical text format. `default_source` is used when the
/// text carries no `#SOURCE` line.
pub fn parse_canonical(text: &str, default_source: &str) -> Result<PoseSequence> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (mut line_no, mut line) = lines.next().ok_or_else(|| Error::parse(0, "empty input"))?;
    let mut source_id = default_source.to_string();
    if let Some(rest) = line.strip_prefix(SOURCE_TAG) {
        source_id = rest.trim().to_string();
        (line_no, line) = lines
            .next()
            .ok_or_else(|| Error::parse(line_no, "missing header after #SOURCE"))?;
    }

    let header: Vec<&str> = line.split_whitespace().collect();
    if header.len() != 3 {
        return Err(Error::parse(line_no, "header must be `J L fps`"));
    }
    let joints: usize = parse_token(header[0], line_no, "joint count")?;
    let num_classes: usize = parse_token(header[1], line_no, "class count")?;
    let fps: f64 = parse_token(header[2], line_no, "fps")?;
    if joints < 2 {
        return Err(Error::invariant(format!("need at least 2 joints, got {joints}")));
    }

    let mut frames = Vec::new();
    let mut annotations = Vec::new();
    let mut in_annotations = false;
    for (line_no, line) in lines {
        if line == ANNOTATIONS_TAG {
            if in_annotations {
                return Err(Error::parse(line_no, "duplicate #ANNOTATIONS block"));
            }
            in_annotations = true;
            continue;
        }
        if in_annotations {
            annotations.push(parse_annotation_line(line, line_no)?);
        } else {
            let joints_row = parse_frame_row(line, line_no, joints, 3, 0, |t| t.split_whitespace())?;
            frames.push(PoseFrame::new(joints_row, frames.len()));
        }
    }
    if !in_annotations {
        return Err(Error::parse(text.lines().count(), "missing #ANNOTATIONS block"));
    }
    PoseSequence::new(frames, annotations, fps, num_classes, source_id)
}

fn parse_token<T: FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::parse(line, format!("invalid {what} '{tok}'")))
}

fn parse_annotation_line(line: &str, line_no: usize) -> Result<GestureAnnotation> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 4 {
        return Err(Error::parse(line_no, "annotation must be `label start end category`"));
    }
    let category = toks[3]
        .parse::<Category>()
        .map_err(|e| Error::parse(line_no, e))?;
    Ok(GestureAnnotation::new(
        parse_token(toks[0], line_no, "label")?,
        parse_token(toks[1], line_no, "start frame")?,
        parse_token(toks[2], line_no, "end frame")?,
        category,
    ))
}

fn parse_frame_row<'a, I>(
    line: &'a str,
    line_no: usize,
    joints: usize,
    values_per_joint: usize,
    leading: usize,
    split: impl Fn(&'a str) -> I,
) -> Result<Vec<Point3>>
where
    I: Iterator<Item = &'a str>,
{
    let values: Vec<f64> = split(line)
        .skip(leading)
        .map(|t| parse_token::<f64>(t, line_no, "coordinate"))
        .collect::<Result<_>>()?;
    let expected = joints * values_per_joint;
    if values.len() != expected {
        return Err(Error::parse(
            line_no,
            format!("expected {expected} values per frame, found {}", values.len()),
        ));
    }
    Ok(values
        .chunks_exact(values_per_joint)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}

fn external_tokens(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| c == ';' || c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
}

fn parse_external_frames(
    text: &str,
    stem: &str,
    annotations: Vec<GestureAnnotation>,
    cfg: &AdapterConfig,
) -> Result<PoseSequence> {
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let joints = parse_frame_row(
            line,
            i + 1,
            cfg.joints,
            cfg.values_per_joint,
            cfg.leading_columns,
            external_tokens,
        )?;
        frames.push(PoseFrame::new(joints, frames.len()));
    }
    if frames.is_empty() {
        return Err(Error::parse(0, "no frames"));
    }
    PoseSequence::new(frames, annotations, cfg.fps, cfg.num_classes, stem)
}

/// Extracts the annotations of sequence `id` from a benchmark annotation file.
pub fn parse_external_annotations(
    text: &str,
    id: &str,
    cfg: &AdapterConfig,
) -> Result<Vec<GestureAnnotation>> {
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let toks: Vec<&str> = external_tokens(line).collect();
        if toks.first() != Some(&id) {
            continue;
        }
        let rest = &toks[1..];
        if rest.len() % 3 != 0 {
            return Err(Error::parse(line_no, "annotation entries must be LABEL;start;end triples"));
        }
        let mut out = Vec::with_capacity(rest.len() / 3);
        for triple in rest.chunks_exact(3) {
            let m = cfg
                .lookup(triple[0])
                .ok_or_else(|| Error::parse(line_no, format!("unmapped label '{}'", triple[0])))?;
            out.push(GestureAnnotation::new(
                m.label,
                parse_token(triple[1], line_no, "start frame")?,
                parse_token(triple[2], line_no, "end frame")?,
                m.category,
            ));
        }
        out.sort_by_key(|a| a.start_frame);
        return Ok(out);
    }
    Ok(Vec::new())
}

pub fn format_canonical(seq: &PoseSequence) -> String {
    let j = seq.joint_count();
    let mut out = String::with_capacity(seq.frames.len() * j * 3 * 12 + 64);
    if !seq.source_id.is_empty() {
        let _ = writeln!(out, "{SOURCE_TAG} {}", seq.source_id);
    }
    let _ = writeln!(out, "{} {} {}", j, seq.num_classes, seq.fps);
    for frame in &seq.frames {
        let mut first = true;
        for v in frame.joints.iter().flatten() {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out.push_str(ANNOTATIONS_TAG);
    out.push('\n');
    for a in &seq.annotations {
        let _ = writeln!(out, "{} {} {} {}", a.label, a.start_frame, a.end_frame, a.category);
    }
    out
}

pub fn write_sequence(seq: &PoseSequence, path: &Path) -> Result<()> {
    write_atomic(path, format_canonical(seq).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitPolicy {
    /// Keeps corpus order: the first `round(n * train_fraction)` sequences train.
    ByIndex { train_fraction: f64 },
    /// Assigns whole subjects (source ids) to one side.
    BySubject { train_fraction: f64 },
}

pub fn split_train_test(
    corpus: Vec<PoseSequence>,
    policy: SplitPolicy,
    seed: u64,
) -> Result<(Vec<PoseSequence>, Vec<PoseSequence>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    match policy {
        SplitPolicy::ByIndex { train_fraction } => {
            check_fraction(train_fraction)?;
            let n_train = (corpus.len() as f64 * train_fraction).round() as usize;
            let mut train = corpus;
            let test = train.split_off(n_train.min(train.len()));
            Ok((train, test))
        }
        SplitPolicy::BySubject { train_fraction } => {
            check_fraction(train_fraction)?;
            let subjects: BTreeSet<&str> = corpus.iter().map(|s| s.source_id.as_str()).collect();
            if subjects.len() < 2 {
                return Err(Error::SingleSubject);
            }
            let mut subjects: Vec<String> = subjects.into_iter().map(str::to_string).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            subjects.shuffle(&mut rng);
            let k = subjects.len();
            let n_train = ((k as f64 * train_fraction).round() as usize).clamp(1, k - 1);
            let train_subjects: BTreeSet<String> = subjects.into_iter().take(n_train).collect();
            let (train, test) = corpus
                .into_iter()
                .partition(|s| train_subjects.contains(&s.source_id));
            Ok((train, test))
        }
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::config(format!("train fraction must be in [0, 1], got {f}")))
    }
}

/// Loads every `*.seq` file of a directory in file-name order.
pub fn load_dir(dir: &Path) -> Result<Vec<PoseSequence>> {
    let mut paths = sequence_files(dir)?;
    paths.sort();
    paths
        .iter()
        .map(|p| parse_sequence(p, &Format::Canonical))
        .collect()
}

pub fn sequence_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::FileNotFound(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "seq") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
