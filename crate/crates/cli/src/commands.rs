use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use handstream::checkpoint;
use handstream::infer::{format_detections, parse_detections, Attribution, DetectionEvent, StreamState};
use handstream::io_util::write_atomic;
use handstream::metrics::{self, evaluate, EvalReport, Protocol, SequenceInput};
use handstream::model::ModelParams;
use handstream::pose_io::{write_sequence, Category, Dictionary, PoseSequence};
use handstream::seeds::sub_seed;
use handstream::synth::{generate_corpus, SynthConfig};
use handstream::train::{self, HeadSet, OnOffPolicy, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::data::{self, DataSource};
use crate::manifest::{Latency, Timings};
use crate::DataError;

pub const DICTIONARY_FILE: &str = "dictionary.toml";
pub const DETECTIONS_FILE: &str = "detections.txt";

/// A fully resolved command: everything needed to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Run {
    Generate(GenerateRun),
    Split(SplitRun),
    Train(TrainRun),
    Infer(InferRun),
    Eval(EvalRun),
    Ablate(AblateRun),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRun {
    pub synth: SynthConfig,
    pub count: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRun {
    pub data: DataSource,
    pub by_subject: bool,
    pub train_fraction: f64,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub data: DataSource,
    pub train: TrainConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRun {
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub attribution: Attribution,
    /// Expected window length; checked against the checkpoint when set.
    pub window: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolName {
    /// Overlap-ratio matching at `--mor`.
    Shrec22,
    /// Matching within 2.5 s of the ground truth.
    Shrec19,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub gt: DataSource,
    pub detections: PathBuf,
    pub protocol: ProtocolName,
    pub mor: f64,
    /// Frame rate for the time-window rule; defaults to the ground truth's.
    pub fps: Option<f64>,
    pub sweep: Vec<f64>,
    pub per_class: bool,
    pub fp_by_category: bool,
    pub plots: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRun {
    pub train_data: DataSource,
    pub test_data: DataSource,
    pub train: TrainConfig,
    pub head_sets: Vec<HeadSet>,
    pub policies: Vec<OnOffPolicy>,
    pub seeds: Vec<u64>,
    pub mor: f64,
    pub out: PathBuf,
}

/// What a run touched, for the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub timings: Timings,
}

impl Run {
    pub fn name(&self) -> &'static str {
        match self {
            Run::Generate(_) => "generate",
            Run::Split(_) => "split",
            Run::Train(_) => "train",
            Run::Infer(_) => "infer",
            Run::Eval(_) => "eval",
            Run::Ablate(_) => "ablate",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Run::Generate(r) => &r.out,
            Run::Split(r) => &r.out,
            Run::Train(r) => &r.out,
            Run::Infer(r) => &r.out,
            Run::Eval(r) => &r.out,
            Run::Ablate(r) => &r.out,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Run::Generate(r) => r.out = out,
            Run::Split(r) => r.out = out,
            Run::Train(r) => r.out = out,
            Run::Infer(r) => r.out = out,
            Run::Eval(r) => r.out = out,
            Run::Ablate(r) => r.out = out,
        }
    }

    pub fn execute(&self) -> Result<Outcome> {
        std::fs::create_dir_all(self.out()).with_context(|| format!("creating {}", self.out().display()))?;
        match self {
            Run::Generate(r) => generate(r),
            Run::Split(r) => split(r),
            Run::Train(r) => train_run(r),
            Run::Infer(r) => infer(r),
            Run::Eval(r) => eval(r),
            Run::Ablate(r) => ablate(r),
        }
    }
}

fn training_seeds(seed: u64) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("seed".to_string(), seed),
        ("init".to_string(), sub_seed(seed, 0, train::STREAM_INIT)),
        ("policy".to_string(), sub_seed(seed, 0, train::STREAM_POLICY)),
        ("shuffle".to_string(), sub_seed(seed, 0, train::STREAM_SHUFFLE)),
    ])
}

fn copy_dictionary(from: &Path, to: &Path, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let src = from.join(DICTIONARY_FILE);
    if src.is_file() {
        let dst = to.join(DICTIONARY_FILE);
        write_atomic(&dst, &std::fs::read(&src)?)?;
        outputs.push(dst);
    }
    Ok(())
}

fn load_dictionary(dir: &Path) -> Result<Option<Dictionary>> {
    let p = dir.join(DICTIONARY_FILE);
    if !p.is_file() {
        return Ok(None);
    }
    Ok(Some(Dictionary::from_toml(&std::fs::read_to_string(&p)?)?))
}

fn corpus(data: &DataSource) -> Result<Vec<PoseSequence>> {
    Ok(data.load()?.into_iter().map(|(_, s)| s).collect())
}

// ---------------------------------------------------------------------------

fn generate(r: &GenerateRun) -> Result<Outcome> {
    let sequences = generate_corpus(&r.synth, r.count)?;
    let mut out = Outcome {
        seeds: BTreeMap::from([("seed".to_string(), r.synth.seed)]),
        ..Outcome::default()
    };
    for (i, seq) in sequences.iter().enumerate() {
        let path = r.out.join(format!("seq-{i:04}.seq"));
        write_sequence(seq, &path)?;
        out.outputs.push(path);
    }
    let dict = r.out.join(DICTIONARY_FILE);
    write_atomic(&dict, r.synth.dictionary().to_toml().as_bytes())?;
    out.outputs.push(dict);
    Ok(out)
}

fn split(r: &SplitRun) -> Result<Outcome> {
    let named = r.data.load()?;
    let policy = if r.by_subject {
        handstream::pose_io::SplitPolicy::BySubject {
            train_fraction: r.train_fraction,
        }
    } else {
        handstream::pose_io::SplitPolicy::ByIndex {
            train_fraction: r.train_fraction,
        }
    };
    let seqs: Vec<PoseSequence> = named.iter().map(|(_, s)| s.clone()).collect();
    let (train_set, _) = handstream::pose_io::split_train_test(seqs, policy, r.seed)?;
    // both policies keep corpus order, so the split can be replayed on the named list
    let in_train: Vec<bool> = if r.by_subject {
        let subjects: BTreeSet<&str> = train_set.iter().map(|s| s.source_id.as_str()).collect();
        named.iter().map(|(_, s)| subjects.contains(s.source_id.as_str())).collect()
    } else {
        (0..named.len()).map(|i| i < train_set.len()).collect()
    };
    let mut out = Outcome {
        seeds: BTreeMap::from([("seed".to_string(), r.seed)]),
        inputs: vec![r.data.dir.clone()],
        ..Outcome::default()
    };
    for side in ["train", "test"] {
        std::fs::create_dir_all(r.out.join(side))?;
        copy_dictionary(&r.data.dir, &r.out.join(side), &mut out.outputs)?;
    }
    for ((name, seq), train) in named.iter().zip(in_train) {
        let path = r.out.join(if train { "train" } else { "test" }).join(format!("{name}.seq"));
        write_sequence(seq, &path)?;
        out.outputs.push(path);
    }
    Ok(out)
}

fn train_run(r: &TrainRun) -> Result<Outcome> {
    let corpus = corpus(&r.data)?;
    let t0 = Instant::now();
    let outcome = train::train_to_dir(&corpus, &r.train, &r.out, |e| {
        let val = e.val_accuracy.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
        eprintln!(
            "epoch {:>3} loss {:.5} acc {:.4}{val}",
            e.epoch, e.total_loss, e.window_accuracy
        );
    })?;
    let train_s = t0.elapsed().as_secs_f64();
    eprintln!(
        "{} training windows, {} validation windows, best epoch {}",
        outcome.train_windows, outcome.val_windows, outcome.best_epoch
    );
    let mut out = Outcome {
        seeds: training_seeds(r.train.seed),
        inputs: vec![r.data.dir.clone()],
        outputs: ["best.ckpt", "final.ckpt", "epochs.csv", "train.toml"]
            .iter()
            .map(|f| r.out.join(f))
            .collect(),
        timings: Timings {
            train_s: Some(train_s),
            ..Timings::default()
        },
    };
    copy_dictionary(&r.data.dir, &r.out, &mut out.outputs)?;
    Ok(out)
}

/// Streams one sequence frame by frame, recording the cost of every step in ms.
fn stream(seq: &PoseSequence, params: &ModelParams<f32>, attribution: Attribution, ms: &mut Vec<f64>) -> Result<Vec<DetectionEvent>> {
    let mut state = StreamState::new(params, attribution);
    let mut events = Vec::new();
    for f in &seq.frames {
        let t0 = Instant::now();
        let step = state.step(f, params)?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
        events.extend(step.closed);
    }
    events.extend(state.finish());
    Ok(events)
}

fn infer(r: &InferRun) -> Result<Outcome> {
    let params = checkpoint::load(&r.checkpoint)?;
    let window = params.spec().window;
    if let Some(w) = r.window {
        if w != window {
            return Err(crate::UsageError(format!(
                "--w {w} does not match the checkpoint window {window} ({})",
                r.checkpoint.display()
            ))
            .into());
        }
    }
    let named = r.data.load()?;
    let mut ms = Vec::new();
    let mut lines = Vec::new();
    for (name, seq) in &named {
        let events = stream(seq, &params, r.attribution, &mut ms)?;
        lines.extend(events.into_iter().map(|e| (name.as_str(), e)));
    }
    let text = format_detections(lines.iter().map(|(n, e)| (*n, e)));
    let path = r.out.join(DETECTIONS_FILE);
    write_atomic(&path, text.as_bytes())?;
    let latency = Latency::from_ms(ms);
    if let Some(l) = latency {
        eprintln!(
            "{} frames: p50 {:.3} ms, p95 {:.3} ms, max {:.3} ms",
            l.frames, l.p50_ms, l.p95_ms, l.max_ms
        );
    }
    Ok(Outcome {
        inputs: vec![r.checkpoint.clone(), r.data.dir.clone()],
        outputs: vec![path],
        timings: Timings {
            per_frame: latency,
            ..Timings::default()
        },
        ..Outcome::default()
    })
}

fn detections_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(DETECTIONS_FILE)
    } else {
        p.to_path_buf()
    }
}

fn eval(r: &EvalRun) -> Result<Outcome> {
    let gt = r.gt.load()?;
    let det_path = detections_path(&r.detections);
    let text = match std::fs::read_to_string(&det_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            anyhow::bail!(handstream::Error::FileNotFound(det_path))
        }
        Err(e) => return Err(e.into()),
    };
    let dets = parse_detections(&text).with_context(|| format!("reading {}", det_path.display()))?;
    let known: BTreeSet<&str> = gt.iter().map(|(n, _)| n.as_str()).collect();
    if let Some(stray) = dets.keys().find(|k| !known.contains(k.as_str())) {
        return Err(DataError(format!("detections for unknown sequence '{stray}' in {}", det_path.display())).into());
    }
    let empty = Vec::new();
    let inputs: Vec<SequenceInput<'_>> = gt
        .iter()
        .map(|(name, seq)| SequenceInput {
            id: name,
            gt: &seq.annotations,
            det: dets.get(name).unwrap_or(&empty),
        })
        .collect();

    let dict = load_dictionary(&r.gt.dir)?;
    let (names, categories) = class_tables(dict.as_ref(), &gt);
    let protocol = match r.protocol {
        ProtocolName::Shrec22 => Protocol::Overlap { mor: r.mor },
        ProtocolName::Shrec19 => Protocol::TimeWindow {
            fps: r.fps.unwrap_or(gt[0].1.fps),
        },
    };
    let report = evaluate(&inputs, protocol, &categories, &r.sweep)?;

    let mut outputs = Vec::new();
    let mut emit = |file: &str, body: String| -> Result<()> {
        let p = r.out.join(file);
        write_atomic(&p, body.as_bytes())?;
        outputs.push(p);
        Ok(())
    };
    emit("aggregate.csv", report.aggregate_csv())?;
    emit("per_sequence.csv", report.per_sequence_csv())?;
    if r.per_class {
        emit("per_class.csv", report.per_class_csv(&names))?;
    }
    if r.fp_by_category {
        emit("fp_by_category.csv", report.fp_by_category_csv())?;
    }
    if !r.sweep.is_empty() {
        emit("ji_mor.csv", report.ji_mor_csv())?;
    }
    if r.plots {
        if !r.sweep.is_empty() {
            emit("ji_mor.svg", metrics::ji_mor_svg(&report.ji_mor))?;
        }
        if r.per_class {
            emit("per_class.svg", metrics::per_class_svg(&report.per_class, &names))?;
        }
    }
    print!("{}", summary(&report));
    Ok(Outcome {
        inputs: vec![r.gt.dir.clone(), det_path],
        outputs,
        ..Outcome::default()
    })
}

fn summary(r: &EvalReport) -> String {
    let mut s = format!(
        "DR {:.4}  FP {:.4}  JI {:.4}  ({} gestures, {} detections, {} matched)\n",
        r.dr, r.fp, r.ji, r.gestures, r.detections, r.matched
    );
    if let Some(d) = r.delay {
        writeln!(s, "delay mean {:.2} frames, median {:.2} frames", d.mean, d.median).unwrap();
    }
    s
}

/// Class names and categories, from the dictionary when there is one,
/// otherwise from the ground-truth annotations.
fn class_tables(
    dict: Option<&Dictionary>,
    gt: &[(String, PoseSequence)],
) -> (BTreeMap<usize, String>, BTreeMap<usize, Category>) {
    let mut names = BTreeMap::new();
    let mut categories = BTreeMap::new();
    if let Some(d) = dict {
        for (label, c) in d.classes.iter().enumerate() {
            names.insert(label, c.name.clone());
            if let Some(cat) = c.category {
                categories.insert(label, cat);
            }
        }
    }
    for a in gt.iter().flat_map(|(_, s)| &s.annotations) {
        categories.entry(a.label).or_insert(a.category);
    }
    (names, categories)
}

fn ablate(r: &AblateRun) -> Result<Outcome> {
    let train_set = corpus(&r.train_data)?;
    let test_set = r.test_data.load()?;
    let mut rows = String::from("head_set,on_off_policy,seed,dr,fp,ji,train_s\n");
    let mut groups: BTreeMap<(usize, usize), Vec<[f64; 3]>> = BTreeMap::new();
    let mut seeds = BTreeMap::new();
    let t_all = Instant::now();
    for (hi, &head_set) in r.head_sets.iter().enumerate() {
        for (pi, &policy) in r.policies.iter().enumerate() {
            for &seed in &r.seeds {
                let cfg = TrainConfig {
                    head_set,
                    on_off_policy: policy,
                    seed,
                    ..r.train.clone()
                };
                let t0 = Instant::now();
                let params = train::train(&train_set, &cfg)?.best_params;
                let train_s = t0.elapsed().as_secs_f64();
                let report = score(&test_set, &params, r.mor)?;
                eprintln!(
                    "{head_set} {policy} seed {seed}: DR {:.4} FP {:.4} JI {:.4}",
                    report.dr, report.fp, report.ji
                );
                writeln!(
                    rows,
                    "{head_set},{policy},{seed},{:.6},{:.6},{:.6},{train_s:.2}",
                    report.dr, report.fp, report.ji
                )
                .unwrap();
                groups.entry((hi, pi)).or_default().push([report.dr, report.fp, report.ji]);
                seeds.insert(format!("run-{head_set}-{policy}-{seed}"), seed);
            }
        }
    }
    let mut summary = String::from("head_set,on_off_policy,runs,dr_mean,dr_std,fp_mean,fp_std,ji_mean,ji_std\n");
    for ((hi, pi), runs) in &groups {
        write!(summary, "{},{},{}", r.head_sets[*hi], r.policies[*pi], runs.len()).unwrap();
        for k in 0..3 {
            let (mean, std) = mean_std(runs.iter().map(|v| v[k]));
            write!(summary, ",{mean:.6},{std:.6}").unwrap();
        }
        summary.push('\n');
    }
    let per_run = r.out.join("ablation.csv");
    let agg = r.out.join("ablation_summary.csv");
    write_atomic(&per_run, rows.as_bytes())?;
    write_atomic(&agg, summary.as_bytes())?;
    Ok(Outcome {
        seeds,
        inputs: vec![r.train_data.dir.clone(), r.test_data.dir.clone()],
        outputs: vec![per_run, agg],
        timings: Timings {
            train_s: Some(t_all.elapsed().as_secs_f64()),
            ..Timings::default()
        },
    })
}

fn score(test: &[(String, PoseSequence)], params: &ModelParams<f32>, mor: f64) -> Result<EvalReport> {
    let mut ms = Vec::new();
    let dets: Vec<Vec<DetectionEvent>> = test
        .iter()
        .map(|(_, s)| stream(s, params, Attribution::Center, &mut ms))
        .collect::<Result<_>>()?;
    let inputs: Vec<SequenceInput<'_>> = test
        .iter()
        .zip(&dets)
        .map(|((name, s), d)| SequenceInput {
            id: name,
            gt: &s.annotations,
            det: d,
        })
        .collect();
    Ok(evaluate(&inputs, Protocol::Overlap { mor }, &BTreeMap::new(), &[])?)
}

fn mean_std(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}

pub fn read_synth_config(path: Option<&Path>, seed: Option<u64>) -> Result<SynthConfig> {
    let mut cfg = match path {
        Some(p) => SynthConfig::from_toml(&data::read_config(p)?).with_context(|| format!("in {}", p.display()))?,
        None => SynthConfig::benchmark(0),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => TrainConfig::from_toml(&data::read_config(p)?).with_context(|| format!("in {}", p.display()))?,
        None => TrainConfig::default(),
    };
    Ok(cfg)
}
