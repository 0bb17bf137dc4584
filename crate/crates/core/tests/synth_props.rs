use handstream::pose_io::{PoseSequence, NON_GESTURE};
use handstream::synth::{generate_corpus, generate_sequence, SynthCategory, SynthConfig, TrajectoryShape};

fn label_counts(corpus: &[PoseSequence], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in corpus {
        for a in &s.annotations {
            counts[a.label] += 1;
        }
    }
    counts
}

/// Config with `n` gesture classes cycling through the benchmark templates.
fn many_classes(n: usize, gestures: usize) -> SynthConfig {
    let mut cfg = SynthConfig::benchmark(21);
    let base = cfg.templates.clone();
    cfg.templates = (0..n)
        .map(|i| {
            let mut t = base[i % base.len()].clone();
            t.name = format!("{}_{i}", t.name);
            t
        })
        .collect();
    cfg.gestures = [gestures, gestures];
    cfg.length = [420, 440];
    cfg
}

#[test]
fn sixteen_classes_match_benchmark_cardinalities() {
    let cfg = many_classes(16, 4);
    let corpus = generate_corpus(&cfg, 144).unwrap();
    let counts = label_counts(&corpus, 17);
    assert_eq!(counts[NON_GESTURE], 0);
    assert!(counts[1..].iter().all(|&c| c == 36), "{counts:?}");
}

#[test]
fn five_classes_sixty_sequences_are_balanced() {
    let corpus = generate_corpus(&many_classes(5, 3), 60).unwrap();
    let counts = label_counts(&corpus, 6);
    assert!(counts[1..].iter().all(|&c| c == 36), "{counts:?}");
}

#[test]
fn uneven_totals_stay_within_one() {
    let mut cfg = many_classes(6, 3);
    cfg.gestures = [2, 4];
    let corpus = generate_corpus(&cfg, 37).unwrap();
    let counts = label_counts(&corpus, 7);
    let (lo, hi) = (counts[1..].iter().min().unwrap(), counts[1..].iter().max().unwrap());
    assert!(hi - lo <= 1, "{counts:?}");
}

#[test]
fn single_sequence_corpus() {
    let corpus = generate_corpus(&SynthConfig::benchmark(2), 1).unwrap();
    assert_eq!(corpus.len(), 1);
    corpus[0].validate().unwrap();
    assert_eq!(corpus[0], generate_sequence(&SynthConfig::benchmark(2), 0).unwrap());
}

#[test]
fn generation_is_a_pure_function_of_seed_and_index() {
    let cfg = SynthConfig::benchmark(4);
    let a = generate_sequence(&cfg, 7).unwrap();
    let b = generate_sequence(&cfg, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_sequence(&cfg, 8).unwrap());
    assert_ne!(a, generate_sequence(&SynthConfig::benchmark(5), 7).unwrap());
}

#[test]
fn annotations_keep_margins_and_never_overlap() {
    let cfg = SynthConfig::benchmark(8);
    for s in generate_corpus(&cfg, 30).unwrap() {
        s.validate().unwrap();
        let first = s.annotations.first().unwrap();
        let last = s.annotations.last().unwrap();
        assert!(first.start_frame >= cfg.margin);
        assert!(last.end_frame + cfg.margin < s.len());
        for pair in s.annotations.windows(2) {
            assert!(pair[1].start_frame > pair[0].end_frame + cfg.min_gap - 1);
        }
    }
}

/// Algebraic least-squares circle fit in the x-y plane: solves
/// `x^2 + y^2 + D x + E y + F = 0` through the 3x3 normal equations.
fn fit_circle(points: &[[f64; 2]]) -> ([f64; 2], f64) {
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for p in points {
        let row = [p[0], p[1], 1.0];
        let rhs = -(p[0] * p[0] + p[1] * p[1]);
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * rhs;
        }
    }
    // Gaussian elimination with partial pivoting
    let mut m = [[0.0f64; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&ata[i]);
        m[i][3] = atb[i];
    }
    for c in 0..3 {
        let piv = (c..3).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
        m.swap(c, piv);
        for r in 0..3 {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..4 {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    let (d, e, f) = (m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]);
    let center = [-d / 2.0, -e / 2.0];
    (center, (center[0].powi(2) + center[1].powi(2) - f).sqrt())
}

#[test]
fn circle_template_traces_its_amplitude() {
    let mut cfg = SynthConfig::benchmark(13);
    let mut circle = cfg.templates[2].clone();
    assert_eq!(circle.shape, Some(TrajectoryShape::Circle));
    circle.amplitude = 0.1;
    circle.duration = [80, 80];
    cfg.templates = vec![circle.clone()];
    cfg.gestures = [1, 1];
    cfg.length = [200, 200];
    let seq = generate_sequence(&cfg, 0).unwrap();
    let a = seq.annotations[0];
    let track: Vec<[f64; 2]> = seq.frames[a.start_frame..=a.end_frame]
        .iter()
        .map(|f| {
            let c = f.centroid();
            [c[0], c[1]]
        })
        .collect();
    let (center, radius) = fit_circle(&track);
    // the centroid averages 26 independent joint jitters
    let centroid_std = circle.jitter / (26f64).sqrt();
    let bound = 4.0 * centroid_std;
    assert!((radius - 0.1).abs() <= bound, "radius {radius}, bound {bound}");
    let worst = track
        .iter()
        .map(|p| (((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt() - radius).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 6.0 * centroid_std, "worst residual {worst}");
}

fn displacement(s: &PoseSequence, f: usize) -> f64 {
    let (a, b) = (s.frames[f - 1].centroid(), s.frames[f].centroid());
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt()
}

#[test]
fn static_gestures_move_less_than_typical_non_gesture_motion() {
    let mut cfg = SynthConfig::benchmark(17);
    cfg.templates.retain(|t| t.category == SynthCategory::Static);
    let corpus = generate_corpus(&cfg, 20).unwrap();
    let mut still = Vec::new();
    let mut free = Vec::new();
    for s in &corpus {
        let labels = s.frame_labels();
        for f in 1..s.len() {
            match (labels[f - 1], labels[f]) {
                (0, 0) => free.push(displacement(s, f)),
                (a, b) if a != 0 && a == b => still.push(displacement(s, f)),
                _ => {}
            }
        }
    }
    assert!(still.len() >= 1000 && free.len() >= 1000, "{} / {}", still.len(), free.len());
    free.sort_by(f64::total_cmp);
    let median = free[free.len() / 2];
    let mean_still = still.iter().sum::<f64>() / still.len() as f64;
    assert!(mean_still < median, "static mean {mean_still} vs non-gesture median {median}");
    let below = still.iter().filter(|&&d| d < median).count() as f64 / still.len() as f64;
    assert!(below > 0.9, "only {below} of static frames below the median");
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = SynthConfig::benchmark(3);
    assert_eq!(SynthConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn impossible_layout_is_a_config_error() {
    let mut cfg = SynthConfig::benchmark(3);
    cfg.length = [100, 100];
    assert!(matches!(generate_sequence(&cfg, 0), Err(handstream::Error::Config(_))));
}
