//! Real-time hand gesture classification and segmentation on 3D pose streams.
//!
//! A sliding window of `W` frames is described by three views (pairwise joint
//! distances, one-frame and two-frame joint displacements). Independent
//! convolutional encoders embed each view, and four task heads share that
//! embedding during training: a static/dynamic/non-gesture classifier, the
//! fine-grained gesture classifier, and two regressors for the in-window
//! start and end index of a gesture. The regressors are gated per window:
//! they only contribute to the loss when the window actually contains a
//! gesture boundary. At run time only the fine-grained head is evaluated and
//! its per-frame labels are smoothed with a `W`-frame majority vote.

pub mod checkpoint;
pub mod error;
pub mod features;
pub mod infer;
pub mod io_util;
pub mod metrics;
pub mod model;
pub mod pose_io;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
