//! Self-describing parameter files.
//!
//! Layout: the magic line `HANDSTREAM-CKPT 1\n`, a little-endian `u32` header
//! length, a JSON header (model spec, window, joints, classes, feature
//! settings, group table), then every group's values as little-endian `f32`
//! in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MotionVariant;
use crate::io_util::write_atomic;
use crate::model::{GroupInfo, ModelParams, ModelSpec};

const MAGIC: &[u8] = b"HANDSTREAM-CKPT 1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub window: usize,
    pub joints: usize,
    pub num_classes: usize,
    pub motion: MotionVariant,
    pub overlap_threshold: f64,
    pub param_count: usize,
    pub spec: ModelSpec,
    pub groups: Vec<GroupInfo>,
}

impl CheckpointHeader {
    pub fn of(params: &ModelParams<f32>) -> Self {
        let spec = params.spec();
        Self {
            window: spec.window,
            joints: spec.joints,
            num_classes: spec.num_classes,
            motion: spec.features.motion,
            overlap_threshold: spec.overlap_threshold,
            param_count: params.param_count(),
            spec: spec.clone(),
            groups: params.groups().to_vec(),
        }
    }
}

pub fn to_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let header = serde_json::to_vec(&CheckpointHeader::of(params)).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + 4 * params.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for group in params.values() {
        for v in group {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing magic line"))?;
    if rest.len() < 4 {
        return Err(bad("truncated header length"));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..len]).map_err(|e| bad(format!("header: {e}")))?;
    let spec = &header.spec;
    if spec.window != header.window
        || spec.joints != header.joints
        || spec.num_classes != header.num_classes
        || spec.features.motion != header.motion
        || spec.overlap_threshold != header.overlap_threshold
    {
        return Err(bad("header fields disagree with the embedded model spec"));
    }
    let mut body = &rest[len..];
    let mut values = Vec::with_capacity(header.groups.len());
    for g in &header.groups {
        let n = g.numel();
        if body.len() < 4 * n {
            return Err(bad(format!("group {} truncated", g.name)));
        }
        let (chunk, tail) = body.split_at(4 * n);
        values.push(
            chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f32>>(),
        );
        body = tail;
    }
    if !body.is_empty() {
        return Err(bad(format!("{} trailing bytes", body.len())));
    }
    let params = ModelParams::from_groups(spec, values)?;
    if params.groups() != header.groups.as_slice() {
        return Err(bad("group table does not match the model layout"));
    }
    if params.values().iter().flatten().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter"));
    }
    Ok(params)
}

pub fn save(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(params))
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}
