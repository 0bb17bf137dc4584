//! Random joint windows and rigid transforms for the view properties.

use handstream::features::{jcd, m_fast, m_slow, MotionVariant, Window};
use handstream::pose_io::PoseFrame;
use handstream::tensor::Matrix;
use proptest::prelude::*;

pub type Frames = Vec<Vec<[f64; 3]>>;

pub fn to_frames(raw: &Frames) -> Vec<PoseFrame> {
    raw.iter().enumerate().map(|(i, j)| PoseFrame::new(j.clone(), i)).collect()
}

pub fn window_strategy(coord: impl Strategy<Value = f64> + Clone) -> impl Strategy<Value = Frames> {
    (2usize..8, 2usize..=8).prop_flat_map(move |(joints, half)| {
        prop::collection::vec(prop::collection::vec([coord.clone(), coord.clone(), coord.clone()], joints), 2 * half)
    })
}

/// Multiples of 1/1024 in `[-bound, bound) / 1024`.
pub fn dyadic(bound: i32) -> impl Strategy<Value = f64> + Clone {
    (-bound..bound).prop_map(|k| k as f64 / 1024.0)
}

/// Rotation matrix of the unit quaternion `q / |q|`.
pub fn rotation(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn transform(raw: &Frames, r: &[[f64; 3]; 3], t: [f64; 3]) -> Frames {
    raw.iter()
        .map(|f| {
            f.iter()
                .map(|p| std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i]))
                .collect()
        })
        .collect()
}

pub fn translate(raw: &Frames, t: [f64; 3]) -> Frames {
    raw.iter()
        .map(|f| f.iter().map(|p| std::array::from_fn(|i| p[i] + t[i])).collect())
        .collect()
}

pub fn views(raw: &Frames) -> (Matrix<f64>, Matrix<f64>, Matrix<f64>) {
    let frames = to_frames(raw);
    let w = Window::new(&frames, frames.len() - 1).unwrap();
    (
        jcd(&w),
        m_slow(&w, MotionVariant::Displacement),
        m_fast(&w, MotionVariant::Displacement),
    )
}
