//! Random valid pose sequences for format round trips.

use handstream::pose_io::{Category, GestureAnnotation, PoseFrame, PoseSequence};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const CATEGORIES: [Category; 4] = [
    Category::Static,
    Category::DynamicCoarse,
    Category::DynamicFine,
    Category::Periodic,
];

pub fn coordinate(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..6) {
        0 => 0.0,
        1 => -0.0,
        2 => rng.random_range(-1e-300..1e-300),
        3 => rng.random_range(-1e12..1e12),
        4 => f64::from_bits(rng.random::<u64>() & !(0x7ffu64 << 52) | (0x3ffu64 << 52)) - 1.5,
        _ => rng.random_range(-1.0..1.0),
    }
}

pub fn random_sequence(rng: &mut ChaCha8Rng) -> PoseSequence {
    let joints = rng.random_range(2..=30);
    let len = rng.random_range(1..=60);
    let classes = rng.random_range(2..=20);
    let frames = (0..len)
        .map(|i| PoseFrame::new((0..joints).map(|_| [coordinate(rng), coordinate(rng), coordinate(rng)]).collect(), i))
        .collect();
    let mut annotations = Vec::new();
    let mut cursor = 0;
    while cursor < len && rng.random_bool(0.6) {
        let start = rng.random_range(cursor..len);
        let end = rng.random_range(start..len.min(start + 15));
        annotations.push(GestureAnnotation::new(
            rng.random_range(1..classes),
            start,
            end,
            CATEGORIES[rng.random_range(0..4)],
        ));
        cursor = end + 1;
    }
    let fps = [30.0, 50.0, 60.0, rng.random_range(1.0..240.0)][rng.random_range(0..4)];
    let id = format!("subject-{}", rng.random_range(0..1000));
    PoseSequence::new(frames, annotations, fps, classes, id).unwrap()
}

pub fn bits(seq: &PoseSequence) -> Vec<u64> {
    seq.frames.iter().flat_map(|f| f.joints.iter().flatten().map(|v| v.to_bits())).collect()
}
