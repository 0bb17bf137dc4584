//! Multi-view encoders, task heads, and their hand-written gradients.
//!
//! Each view (JCD, slow motion, fast motion) has its own encoder: a stack of
//! 1D convolutions over time, adaptive average pooling to `W/2` steps and a
//! 1x1 projection to 8 channels. The three embeddings are concatenated along
//! channels into `g_t` (`W/2 x 24`). Every head runs its own 1D conv trunk
//! over `g_t`, averages over time and ends in a fully-connected layer.
//!
//! Internally every activation is stored channel-major (`channels x time`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{check_window_len, pair_count, FeatureConfig, Task, TaskLabels, TaskMask, ViewSet};
use crate::tensor::{Matrix, Real, Strided, StridedMut};

pub const EMBED_CHANNELS: usize = 8;
pub const NUM_VIEWS: usize = 3;
pub const VIEW_NAMES: [&str; NUM_VIEWS] = ["jcd", "slow", "fast"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Elu,
}

impl Activation {
    #[inline]
    fn apply<F: Real>(self, z: F) -> F {
        match self {
            Activation::Relu => z.max(F::zero()),
            Activation::LeakyRelu => {
                if z > F::zero() {
                    z
                } else {
                    F::of(0.01) * z
                }
            }
            Activation::Elu => {
                if z > F::zero() {
                    z
                } else {
                    z.exp_m1()
                }
            }
        }
    }

    /// Derivative given the pre-activation `z` and output `y`.
    #[inline]
    fn derivative<F: Real>(self, z: F, y: F) -> F {
        match self {
            Activation::Relu => {
                if z > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::LeakyRelu => {
                if z > F::zero() {
                    F::one()
                } else {
                    F::of(0.01)
                }
            }
            Activation::Elu => {
                if z > F::zero() {
                    F::one()
                } else {
                    y + F::one()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl ConvSpec {
    pub fn new(channels: usize, kernel: usize) -> Self {
        Self {
            channels,
            kernel,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub convs: Vec<ConvSpec>,
    pub activation: Activation,
    /// Temporal length after adaptive pooling; must be `W/2`.
    pub pooled_len: usize,
    /// Channels of the projected embedding; must be 8.
    pub embed_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub convs: Vec<ConvSpec>,
    pub activation: Activation,
}

/// Full architecture description, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub window: usize,
    pub joints: usize,
    pub num_classes: usize,
    pub features: FeatureConfig,
    pub overlap_threshold: f64,
    pub encoders: [EncoderSpec; NUM_VIEWS],
    pub head: HeadSpec,
    /// Adds the binary boundary classifier used by the head-set ablation.
    pub gc_head: bool,
}

impl ModelSpec {
    pub fn new(window: usize, joints: usize, num_classes: usize) -> Self {
        let encoder = EncoderSpec {
            convs: vec![ConvSpec::new(16, 3), ConvSpec::new(16, 3)],
            activation: Activation::Elu,
            pooled_len: window / 2,
            embed_channels: EMBED_CHANNELS,
        };
        Self {
            window,
            joints,
            num_classes,
            features: FeatureConfig::default(),
            overlap_threshold: 0.5,
            encoders: [encoder.clone(), encoder.clone(), encoder],
            head: HeadSpec {
                convs: vec![ConvSpec::new(16, 3), ConvSpec::new(16, 3)],
                activation: Activation::Elu,
            },
            gc_head: false,
        }
    }

    pub fn view_shape(&self, view: usize) -> (usize, usize) {
        let w = self.window;
        let motion_rows = self.features.motion.rows_per_joint() * self.joints;
        match view {
            0 => (pair_count(self.joints), w),
            1 => (motion_rows, w - 1),
            _ => (motion_rows, w / 2 - 1),
        }
    }

    pub fn half(&self) -> usize {
        self.window / 2
    }

    pub fn output_arity(&self, task: Task) -> usize {
        match task {
            Task::Sdn => 3,
            Task::Fine => self.num_classes,
            Task::Start | Task::End | Task::Gc => 1,
        }
    }

    pub fn heads(&self) -> Vec<Task> {
        Task::ALL
            .into_iter()
            .filter(|&t| t != Task::Gc || self.gc_head)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_window_len(self.window).map_err(|e| Error::Spec(e.to_string()))?;
        if self.joints < 2 {
            return Err(Error::Spec("need at least 2 joints".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec("need at least 2 classes".into()));
        }
        for (v, enc) in self.encoders.iter().enumerate() {
            let name = VIEW_NAMES[v];
            let (_, mut len) = self.view_shape(v);
            for c in &enc.convs {
                len = conv_out_len(len, c).ok_or_else(|| {
                    Error::Spec(format!("{name} encoder: conv {c:?} does not fit the input"))
                })?;
            }
            if len == 0 {
                return Err(Error::Spec(format!("{name} encoder collapses time to zero")));
            }
            if enc.pooled_len != self.half() || enc.embed_channels != EMBED_CHANNELS {
                return Err(Error::Spec(format!(
                    "{name} encoder maps to ({}, {}), expected ({}, {EMBED_CHANNELS})",
                    enc.pooled_len,
                    enc.embed_channels,
                    self.half()
                )));
            }
        }
        let mut len = self.half();
        for c in &self.head.convs {
            len = conv_out_len(len, c)
                .filter(|&l| l > 0)
                .ok_or_else(|| Error::Spec(format!("head conv {c:?} does not fit g_t")))?;
        }
        Ok(())
    }
}

fn conv_out_len(len: usize, c: &ConvSpec) -> Option<usize> {
    if c.channels == 0 || c.kernel == 0 || c.stride == 0 {
        return None;
    }
    let padded = len + 2 * (c.kernel / 2);
    if padded < c.kernel {
        return None;
    }
    Some((padded - c.kernel) / c.stride + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl GroupInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lin: usize,
    lout: usize,
    act: Option<Activation>,
}

impl ConvLayer {
    fn cols(&self) -> usize {
        self.cin * self.k
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayout {
    in_rows: usize,
    in_len: usize,
    convs: Vec<ConvLayer>,
    pool_out: usize,
    proj: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
struct HeadLayout {
    convs: Vec<ConvLayer>,
    fc_w: usize,
    fc_b: usize,
    fc_in: usize,
    fc_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    groups: Vec<GroupInfo>,
    encoders: Vec<EncoderLayout>,
    heads: [Option<HeadLayout>; 5],
    /// Index of the first head parameter group; everything before belongs to the encoders.
    first_head_group: usize,
}

struct LayoutBuilder {
    groups: Vec<GroupInfo>,
}

impl LayoutBuilder {
    fn group(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.groups.push(GroupInfo { name, shape });
        self.groups.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, lin: usize, c: &ConvSpec, act: Option<Activation>) -> ConvLayer {
        let w = self.group(format!("{prefix}.w"), vec![c.channels, cin, c.kernel]);
        let b = self.group(format!("{prefix}.b"), vec![c.channels]);
        ConvLayer {
            w,
            b,
            cin,
            cout: c.channels,
            k: c.kernel,
            stride: c.stride,
            pad: c.kernel / 2,
            lin,
            lout: conv_out_len(lin, c).expect("validated model spec"),
            act,
        }
    }
}

impl Layout {
    fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut lb = LayoutBuilder { groups: Vec::new() };
        let mut encoders = Vec::with_capacity(NUM_VIEWS);
        for (v, enc) in spec.encoders.iter().enumerate() {
            let (in_rows, in_len) = spec.view_shape(v);
            let (mut cin, mut len) = (in_rows, in_len);
            let mut convs = Vec::new();
            for (i, c) in enc.convs.iter().enumerate() {
                let layer = lb.conv(&format!("enc.{}.conv{i}", VIEW_NAMES[v]), cin, len, c, Some(enc.activation));
                cin = layer.cout;
                len = layer.lout;
                convs.push(layer);
            }
            let proj = lb.conv(
                &format!("enc.{}.proj", VIEW_NAMES[v]),
                cin,
                enc.pooled_len,
                &ConvSpec::new(enc.embed_channels, 1),
                None,
            );
            encoders.push(EncoderLayout {
                in_rows,
                in_len,
                convs,
                pool_out: enc.pooled_len,
                proj,
            });
        }
        let first_head_group = lb.groups.len();
        let mut heads: [Option<HeadLayout>; 5] = Default::default();
        for task in spec.heads() {
            let (mut cin, mut len) = (NUM_VIEWS * EMBED_CHANNELS, spec.half());
            let mut convs = Vec::new();
            for (i, c) in spec.head.convs.iter().enumerate() {
                let layer = lb.conv(&format!("head.{}.conv{i}", task.name()), cin, len, c, Some(spec.head.activation));
                cin = layer.cout;
                len = layer.lout;
                convs.push(layer);
            }
            let out = spec.output_arity(task);
            let fc_w = lb.group(format!("head.{}.fc.w", task.name()), vec![out, cin]);
            let fc_b = lb.group(format!("head.{}.fc.b", task.name()), vec![out]);
            heads[task.index()] = Some(HeadLayout {
                convs,
                fc_w,
                fc_b,
                fc_in: cin,
                fc_out: out,
            });
        }
        Ok(Self {
            groups: lb.groups,
            encoders,
            heads,
            first_head_group,
        })
    }

    fn head(&self, task: Task) -> Option<&HeadLayout> {
        self.heads[task.index()].as_ref()
    }
}

/// All learnable weights, stored as named flat groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    spec: ModelSpec,
    layout: Layout,
    values: Vec<Vec<F>>,
}

pub fn init_params<F: Real>(spec: &ModelSpec, seed: u64) -> Result<ModelParams<F>> {
    let layout = Layout::build(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values: Vec<Vec<F>> = layout.groups.iter().map(|g| vec![F::zero(); g.numel()]).collect();

    let mut fill = |idx: usize, fan_in: usize, gain: f64| {
        let std = (gain / fan_in as f64).sqrt();
        for v in values[idx].iter_mut() {
            *v = F::of(std * unit.sample(&mut rng));
        }
    };
    for enc in &layout.encoders {
        for c in &enc.convs {
            fill(c.w, c.cols(), 2.0);
        }
        fill(enc.proj.w, enc.proj.cols(), 1.0);
    }
    for head in layout.heads.iter().flatten() {
        for c in &head.convs {
            fill(c.w, c.cols(), 2.0);
        }
        fill(head.fc_w, head.fc_in, 1.0);
    }
    Ok(ModelParams {
        spec: spec.clone(),
        layout,
        values,
    })
}

impl<F: Real> ModelParams<F> {
    pub fn from_groups(spec: &ModelSpec, values: Vec<Vec<F>>) -> Result<Self> {
        let layout = Layout::build(spec)?;
        if values.len() != layout.groups.len()
            || values.iter().zip(&layout.groups).any(|(v, g)| v.len() != g.numel())
        {
            return Err(Error::Spec("parameter groups do not match the spec".into()));
        }
        Ok(Self {
            spec: spec.clone(),
            layout,
            values,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn groups(&self) -> &[GroupInfo] {
        &self.layout.groups
    }

    pub fn values(&self) -> &[Vec<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<F>] {
        &mut self.values
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.layout.groups.iter().position(|g| g.name == name)
    }

    pub fn group(&self, name: &str) -> Option<&[F]> {
        self.group_index(name).map(|i| self.values[i].as_slice())
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut [F]> {
        self.group_index(name).map(move |i| self.values[i].as_mut_slice())
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Indices of the groups owned by one head.
    pub fn head_groups(&self, task: Task) -> Vec<usize> {
        let prefix = format!("head.{}.", task.name());
        (0..self.layout.groups.len())
            .filter(|&i| self.layout.groups[i].name.starts_with(&prefix))
            .collect()
    }

    /// Indices of the shared encoder groups.
    pub fn encoder_groups(&self) -> std::ops::Range<usize> {
        0..self.layout.first_head_group
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            values: self
                .values
                .iter()
                .map(|g| g.iter().map(|v| G::of(v.real_f64())).collect())
                .collect(),
        }
    }
}

/// Gradients laid out exactly like [`ModelParams`] values.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub groups: Vec<Vec<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(params: &ModelParams<F>) -> Self {
        Self {
            groups: params.values.iter().map(|g| vec![F::zero(); g.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for v in self.groups.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn reset(&mut self) {
        for g in &mut self.groups {
            g.fill(F::zero());
        }
    }

    pub fn is_zero(&self, groups: impl IntoIterator<Item = usize>) -> bool {
        groups
            .into_iter()
            .all(|i| self.groups[i].iter().all(|v| v.to_bits_eq_zero()))
    }
}

trait BitZero {
    fn to_bits_eq_zero(&self) -> bool;
}

impl<F: Real> BitZero for F {
    /// Exactly +0.0; negative zero or subnormal residue does not count.
    fn to_bits_eq_zero(&self) -> bool {
        *self == F::zero() && self.is_sign_positive()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<F> {
    /// Multi-view embedding, `W/2` rows by 24 channels.
    pub g_t: Matrix<F>,
    pub sdn_logits: Vec<F>,
    pub fine_logits: Vec<F>,
    pub start_pred: F,
    pub end_pred: F,
    pub gc_logit: Option<F>,
}

impl<F: Real> ForwardOutput<F> {
    pub fn task_output(&self, task: Task) -> Option<Vec<F>> {
        match task {
            Task::Sdn => Some(self.sdn_logits.clone()),
            Task::Fine => Some(self.fine_logits.clone()),
            Task::Start => Some(vec![self.start_pred]),
            Task::End => Some(vec![self.end_pred]),
            Task::Gc => self.gc_logit.map(|v| vec![v]),
        }
    }
}

/// Per-task loss weights, the set of heads being trained, and optional
/// per-class weights for the fine-grained cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective<F> {
    pub weights: [F; 5],
    pub active: [bool; 5],
    pub class_weights: Option<Vec<F>>,
}

impl<F: Real> Objective<F> {
    /// Uniform weights, all four gated tasks on, GC off.
    pub fn uniform() -> Self {
        Self {
            weights: [F::one(); 5],
            active: [true, true, true, true, false],
            class_weights: None,
        }
    }

    pub fn only(task: Task) -> Self {
        let mut o = Self::uniform();
        o.active = [false; 5];
        o.active[task.index()] = true;
        o
    }

    fn enabled(&self, task: Task, mask: &TaskMask) -> bool {
        self.active[task.index()] && mask.get(task) && self.weights[task.index()] != F::zero()
    }
}

/// Aggregate loss plus the unweighted loss of every task that was switched on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F> {
    pub total: F,
    pub per_task: [Option<F>; 5],
    /// Arg-max of the fine-grained logits, when that head was evaluated.
    pub fine_prediction: Option<usize>,
}

impl<F: Real> LossBreakdown<F> {
    pub fn zero() -> Self {
        Self {
            total: F::zero(),
            per_task: [None; 5],
            fine_prediction: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Layer kernels
// ---------------------------------------------------------------------------

struct ConvCache<F> {
    cols: Vec<F>,
    z: Vec<F>,
    y: Vec<F>,
}

fn im2col<F: Real>(l: &ConvLayer, x: &[F]) -> Vec<F> {
    let mut cols = vec![F::zero(); l.cols() * l.lout];
    for i in 0..l.cin {
        let xr = &x[i * l.lin..(i + 1) * l.lin];
        for kk in 0..l.k {
            let row = &mut cols[(i * l.k + kk) * l.lout..(i * l.k + kk + 1) * l.lout];
            for (t, slot) in row.iter_mut().enumerate() {
                let src = (t * l.stride + kk) as isize - l.pad as isize;
                if src >= 0 && (src as usize) < l.lin {
                    *slot = xr[src as usize];
                }
            }
        }
    }
    cols
}

fn col2im<F: Real>(l: &ConvLayer, dcols: &[F]) -> Vec<F> {
    let mut dx = vec![F::zero(); l.cin * l.lin];
    for i in 0..l.cin {
        for kk in 0..l.k {
            let row = &dcols[(i * l.k + kk) * l.lout..(i * l.k + kk + 1) * l.lout];
            for (t, &g) in row.iter().enumerate() {
                let src = (t * l.stride + kk) as isize - l.pad as isize;
                if src >= 0 && (src as usize) < l.lin {
                    dx[i * l.lin + src as usize] += g;
                }
            }
        }
    }
    dx
}

fn conv_forward<F: Real>(l: &ConvLayer, values: &[Vec<F>], x: &[F]) -> ConvCache<F> {
    let cols = im2col(l, x);
    let bias = &values[l.b];
    let mut z = Vec::with_capacity(l.cout * l.lout);
    for &b in bias {
        z.extend(std::iter::repeat_n(b, l.lout));
    }
    F::gemm(
        l.cout,
        l.cols(),
        l.lout,
        Strided::row_major(&values[l.w], l.cols()),
        Strided::row_major(&cols, l.lout),
        F::one(),
        StridedMut::row_major(&mut z, l.lout),
    );
    let y = match l.act {
        Some(a) => z.iter().map(|&v| a.apply(v)).collect(),
        None => z.clone(),
    };
    ConvCache { cols, z, y }
}

/// Backpropagates `dy` through one conv layer, accumulating parameter
/// gradients. Returns the input gradient when `need_dx`.
fn conv_backward<F: Real>(
    l: &ConvLayer,
    values: &[Vec<F>],
    cache: &ConvCache<F>,
    mut dy: Vec<F>,
    grads: &mut Gradients<F>,
    need_dx: bool,
) -> Option<Vec<F>> {
    if let Some(a) = l.act {
        for ((d, &z), &y) in dy.iter_mut().zip(&cache.z).zip(&cache.y) {
            *d *= a.derivative(z, y);
        }
    }
    let dz = dy;
    for (o, db) in grads.groups[l.b].iter_mut().enumerate() {
        *db += dz[o * l.lout..(o + 1) * l.lout].iter().copied().sum::<F>();
    }
    F::gemm(
        l.cout,
        l.lout,
        l.cols(),
        Strided::row_major(&dz, l.lout),
        Strided::transposed(&cache.cols, l.lout),
        F::one(),
        StridedMut::row_major(&mut grads.groups[l.w], l.cols()),
    );
    if !need_dx {
        return None;
    }
    let mut dcols = vec![F::zero(); l.cols() * l.lout];
    F::gemm(
        l.cols(),
        l.cout,
        l.lout,
        Strided::transposed(&values[l.w], l.cols()),
        Strided::row_major(&dz, l.lout),
        F::zero(),
        StridedMut::row_major(&mut dcols, l.lout),
    );
    Some(col2im(l, &dcols))
}

fn pool_bounds(i: usize, lin: usize, lout: usize) -> (usize, usize) {
    let s = i * lin / lout;
    let e = ((i + 1) * lin).div_ceil(lout);
    (s, e)
}

fn adaptive_pool<F: Real>(x: &[F], channels: usize, lin: usize, lout: usize) -> Vec<F> {
    let mut out = vec![F::zero(); channels * lout];
    for c in 0..channels {
        let xr = &x[c * lin..(c + 1) * lin];
        for i in 0..lout {
            let (s, e) = pool_bounds(i, lin, lout);
            let sum: F = xr[s..e].iter().copied().sum();
            out[c * lout + i] = sum / F::of((e - s) as f64);
        }
    }
    out
}

fn adaptive_pool_backward<F: Real>(dout: &[F], channels: usize, lin: usize, lout: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); channels * lin];
    for c in 0..channels {
        for i in 0..lout {
            let (s, e) = pool_bounds(i, lin, lout);
            let g = dout[c * lout + i] / F::of((e - s) as f64);
            for v in &mut dx[c * lin + s..c * lin + e] {
                *v += g;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Encoders and heads
// ---------------------------------------------------------------------------

struct EncoderCache<F> {
    convs: Vec<ConvCache<F>>,
    proj: ConvCache<F>,
}

fn encoder_forward<F: Real>(enc: &EncoderLayout, values: &[Vec<F>], input: &[F]) -> EncoderCache<F> {
    let mut convs: Vec<ConvCache<F>> = Vec::with_capacity(enc.convs.len());
    for l in &enc.convs {
        let x = convs.last().map_or(input, |c| c.y.as_slice());
        let cache = conv_forward(l, values, x);
        convs.push(cache);
    }
    let (ch, len) = enc
        .convs
        .last()
        .map_or((enc.in_rows, enc.in_len), |l| (l.cout, l.lout));
    let last = convs.last().map_or(input, |c| c.y.as_slice());
    let pooled = adaptive_pool(last, ch, len, enc.pool_out);
    let proj = conv_forward(&enc.proj, values, &pooled);
    EncoderCache { convs, proj }
}

fn encoder_backward<F: Real>(
    enc: &EncoderLayout,
    values: &[Vec<F>],
    cache: &EncoderCache<F>,
    d_embed: Vec<F>,
    grads: &mut Gradients<F>,
) {
    let dp = conv_backward(&enc.proj, values, &cache.proj, d_embed, grads, true).expect("dx requested");
    let (ch, len) = enc
        .convs
        .last()
        .map_or((enc.in_rows, enc.in_len), |l| (l.cout, l.lout));
    let mut dy = adaptive_pool_backward(&dp, ch, len, enc.pool_out);
    for (i, l) in enc.convs.iter().enumerate().rev() {
        match conv_backward(l, values, &cache.convs[i], dy, grads, i > 0) {
            Some(dx) => dy = dx,
            None => break,
        }
    }
}

struct HeadCache<F> {
    convs: Vec<ConvCache<F>>,
    pooled: Vec<F>,
    out: Vec<F>,
}

fn head_forward<F: Real>(head: &HeadLayout, values: &[Vec<F>], g: &[F], g_len: usize) -> HeadCache<F> {
    let mut convs: Vec<ConvCache<F>> = Vec::with_capacity(head.convs.len());
    for l in &head.convs {
        let x = convs.last().map_or(g, |c| c.y.as_slice());
        convs.push(conv_forward(l, values, x));
    }
    let len = head.convs.last().map_or(g_len, |l| l.lout);
    let last = convs.last().map_or(g, |c| c.y.as_slice());
    let inv = F::one() / F::of(len as f64);
    let pooled: Vec<F> = (0..head.fc_in)
        .map(|c| last[c * len..(c + 1) * len].iter().copied().sum::<F>() * inv)
        .collect();
    let w = &values[head.fc_w];
    let out = (0..head.fc_out)
        .map(|o| {
            values[head.fc_b][o]
                + w[o * head.fc_in..(o + 1) * head.fc_in]
                    .iter()
                    .zip(&pooled)
                    .map(|(&a, &b)| a * b)
                    .sum::<F>()
        })
        .collect();
    HeadCache { convs, pooled, out }
}

/// Returns the gradient with respect to `g_t` (channel-major).
fn head_backward<F: Real>(
    head: &HeadLayout,
    values: &[Vec<F>],
    cache: &HeadCache<F>,
    dout: &[F],
    g_len: usize,
    grads: &mut Gradients<F>,
) -> Vec<F> {
    let n = head.fc_in;
    let mut dpooled = vec![F::zero(); n];
    for (o, &d) in dout.iter().enumerate() {
        grads.groups[head.fc_b][o] += d;
        let wrow = &values[head.fc_w][o * n..(o + 1) * n];
        let grow = &mut grads.groups[head.fc_w][o * n..(o + 1) * n];
        for c in 0..n {
            grow[c] += d * cache.pooled[c];
            dpooled[c] += d * wrow[c];
        }
    }
    let len = head.convs.last().map_or(g_len, |l| l.lout);
    let inv = F::one() / F::of(len as f64);
    let mut dy: Vec<F> = dpooled
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d * inv, len))
        .collect();
    for (i, l) in head.convs.iter().enumerate().rev() {
        dy = conv_backward(l, values, &cache.convs[i], dy, grads, true).expect("dx requested");
    }
    dy
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Numerically stable softmax cross-entropy; returns (loss, d loss / d logits).
pub fn softmax_cross_entropy<F: Real>(logits: &[F], target: usize) -> (F, Vec<F>) {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    let loss = sum.ln() + max - logits[target];
    let mut grad: Vec<F> = exps.iter().map(|&e| e / sum).collect();
    grad[target] -= F::one();
    (loss, grad)
}

pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the first one on ties.
pub fn argmax<F: Real>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Regression target for an in-window index, normalised to [0, 1].
pub fn index_target<F: Real>(index: usize, window: usize) -> F {
    F::of(index as f64 / (window - 1) as f64)
}

/// Maps a regression output back to a frame index in `[0, W-1]`.
pub fn index_from_prediction<F: Real>(pred: F, window: usize) -> usize {
    let v = pred.real_f64() * (window - 1) as f64;
    v.round().clamp(0.0, (window - 1) as f64) as usize
}

/// Loss of one head and its gradient with respect to the head output,
/// both unweighted. `None` when the labels give that head nothing to fit.
pub fn task_loss<F: Real>(
    task: Task,
    output: &[F],
    labels: &TaskLabels,
    window: usize,
    class_weights: Option<&[F]>,
) -> Option<(F, Vec<F>)> {
    match task {
        Task::Sdn => Some(softmax_cross_entropy(output, labels.sdn.index())),
        Task::Fine => {
            let (mut loss, mut grad) = softmax_cross_entropy(output, labels.fine);
            if let Some(w) = class_weights {
                let cw = w[labels.fine];
                loss *= cw;
                grad.iter_mut().for_each(|g| *g *= cw);
            }
            Some((loss, grad))
        }
        Task::Start | Task::End => {
            let idx = if task == Task::Start {
                labels.start_index
            } else {
                labels.end_index
            }?;
            let diff = output[0] - index_target::<F>(idx, window);
            Some((diff * diff, vec![F::of(2.0) * diff]))
        }
        Task::Gc => {
            let z = output[0];
            let y = if labels.has_boundary() { F::one() } else { F::zero() };
            let loss = z.max(F::zero()) - z * y + (-z.abs()).exp().ln_1p();
            let sig = F::one() / (F::one() + (-z).exp());
            Some((loss, vec![sig - y]))
        }
    }
}

// ---------------------------------------------------------------------------
// Public passes
// ---------------------------------------------------------------------------

fn check_views<F: Real>(params: &ModelParams<F>, views: &ViewSet<F>) -> Result<()> {
    for (v, enc) in params.layout.encoders.iter().enumerate() {
        let got = views.get(v).shape();
        if got != (enc.in_rows, enc.in_len) {
            return Err(Error::shape(format!(
                "{} view is {got:?}, model expects ({}, {})",
                VIEW_NAMES[v], enc.in_rows, enc.in_len
            )));
        }
    }
    Ok(())
}

fn encode_all<F: Real>(params: &ModelParams<F>, views: &ViewSet<F>) -> (Vec<EncoderCache<F>>, Vec<F>) {
    let caches: Vec<EncoderCache<F>> = params
        .layout
        .encoders
        .iter()
        .enumerate()
        .map(|(v, enc)| encoder_forward(enc, &params.values, views.get(v).as_slice()))
        .collect();
    let mut g = Vec::with_capacity(NUM_VIEWS * EMBED_CHANNELS * params.spec.half());
    for c in &caches {
        g.extend_from_slice(&c.proj.y);
    }
    (caches, g)
}

/// Embedding of a single view as a `W/2 x 8` matrix.
pub fn encode_view<F: Real>(params: &ModelParams<F>, view: usize, input: &Matrix<F>) -> Result<Matrix<F>> {
    let enc = params
        .layout
        .encoders
        .get(view)
        .ok_or_else(|| Error::shape(format!("no view {view}")))?;
    if input.shape() != (enc.in_rows, enc.in_len) {
        return Err(Error::shape(format!("view {view} input {:?}", input.shape())));
    }
    let cache = encoder_forward(enc, &params.values, input.as_slice());
    Ok(time_major(&cache.proj.y, EMBED_CHANNELS, enc.pool_out))
}

fn time_major<F: Real>(x: &[F], channels: usize, len: usize) -> Matrix<F> {
    let mut m = Matrix::zeros(len, channels);
    for c in 0..channels {
        for t in 0..len {
            m.set(t, c, x[c * len + t]);
        }
    }
    m
}

pub fn forward<F: Real>(params: &ModelParams<F>, views: &ViewSet<F>) -> Result<ForwardOutput<F>> {
    check_views(params, views)?;
    let half = params.spec.half();
    let (_, g) = encode_all(params, views);
    let run = |task: Task| {
        params
            .layout
            .head(task)
            .map(|h| head_forward(h, &params.values, &g, half).out)
    };
    let sdn_logits = run(Task::Sdn).expect("sdn head");
    let fine_logits = run(Task::Fine).expect("fine head");
    let start_pred = run(Task::Start).expect("start head")[0];
    let end_pred = run(Task::End).expect("end head")[0];
    let gc_logit = run(Task::Gc).map(|o| o[0]);
    Ok(ForwardOutput {
        g_t: time_major(&g, NUM_VIEWS * EMBED_CHANNELS, half),
        sdn_logits,
        fine_logits,
        start_pred,
        end_pred,
        gc_logit,
    })
}

/// Fine-grained logits only; the inference path.
pub fn forward_fine<F: Real>(params: &ModelParams<F>, views: &ViewSet<F>) -> Result<Vec<F>> {
    check_views(params, views)?;
    let (_, g) = encode_all(params, views);
    let head = params.layout.head(Task::Fine).expect("fine head");
    Ok(head_forward(head, &params.values, &g, params.spec.half()).out)
}

/// Adds the gradient of the gated objective for one window to `grads`.
///
/// Heads that are switched off (by the window mask, the objective's head set,
/// or a zero weight) are never evaluated: their parameters receive no
/// gradient and nothing flows from them into the encoders.
pub fn accumulate_gradients<F: Real>(
    params: &ModelParams<F>,
    views: &ViewSet<F>,
    labels: &TaskLabels,
    mask: &TaskMask,
    objective: &Objective<F>,
    grads: &mut Gradients<F>,
) -> Result<LossBreakdown<F>> {
    check_views(params, views)?;
    let half = params.spec.half();
    let window = params.spec.window;
    let mut breakdown = LossBreakdown::zero();
    let tasks: Vec<Task> = Task::ALL
        .into_iter()
        .filter(|&t| objective.enabled(t, mask) && params.layout.head(t).is_some())
        .collect();
    if tasks.is_empty() {
        return Ok(breakdown);
    }

    let (enc_caches, g) = encode_all(params, views);
    let mut dg: Option<Vec<F>> = None;
    for task in tasks {
        let head = params.layout.head(task).expect("filtered above");
        let cache = head_forward(head, &params.values, &g, half);
        if task == Task::Fine {
            breakdown.fine_prediction = Some(argmax(&cache.out));
        }
        let Some((loss, mut dout)) =
            task_loss(task, &cache.out, labels, window, objective.class_weights.as_deref())
        else {
            continue;
        };
        let w = objective.weights[task.index()];
        breakdown.per_task[task.index()] = Some(loss);
        breakdown.total += w * loss;
        dout.iter_mut().for_each(|d| *d *= w);
        let part = head_backward(head, &params.values, &cache, &dout, half, grads);
        match dg.as_mut() {
            None => dg = Some(part),
            Some(acc) => acc.iter_mut().zip(&part).for_each(|(a, &b)| *a += b),
        }
    }

    if let Some(dg) = dg {
        let per_view = EMBED_CHANNELS * half;
        for (v, enc) in params.layout.encoders.iter().enumerate() {
            let slice = dg[v * per_view..(v + 1) * per_view].to_vec();
            encoder_backward(enc, &params.values, &enc_caches[v], slice, grads);
        }
    }
    Ok(breakdown)
}

/// Gradient of the gated objective for one window, with uniform weights.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    views: &ViewSet<F>,
    labels: &TaskLabels,
    mask: &TaskMask,
) -> Result<(LossBreakdown<F>, Gradients<F>)> {
    backward_with(params, views, labels, mask, &Objective::uniform())
}

pub fn backward_with<F: Real>(
    params: &ModelParams<F>,
    views: &ViewSet<F>,
    labels: &TaskLabels,
    mask: &TaskMask,
    objective: &Objective<F>,
) -> Result<(LossBreakdown<F>, Gradients<F>)> {
    let mut grads = Gradients::zeros_like(params);
    let loss = accumulate_gradients(params, views, labels, mask, objective, &mut grads)?;
    Ok((loss, grads))
}

/// Objective value only, sharing the exact code path of the gradient.
pub fn objective_value<F: Real>(
    params: &ModelParams<F>,
    views: &ViewSet<F>,
    labels: &TaskLabels,
    mask: &TaskMask,
    objective: &Objective<F>,
) -> Result<F> {
    let out = forward(params, views)?;
    let mut total = F::zero();
    for task in Task::ALL {
        if !objective.enabled(task, mask) {
            continue;
        }
        let Some(o) = out.task_output(task) else { continue };
        if let Some((loss, _)) = task_loss(task, &o, labels, params.spec.window, objective.class_weights.as_deref()) {
            total += objective.weights[task.index()] * loss;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Sdn;

    fn views_for(spec: &ModelSpec, seed: u64) -> ViewSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut mk = |v: usize| {
            let (r, c) = spec.view_shape(v);
            Matrix::from_vec(r, c, (0..r * c).map(|_| unit.sample(&mut rng)).collect())
        };
        ViewSet {
            jcd: mk(0),
            m_slow: mk(1),
            m_fast: mk(2),
        }
    }

    #[test]
    fn default_shapes() {
        let spec = ModelSpec::new(16, 26, 17);
        let p: ModelParams<f64> = init_params(&spec, 1).unwrap();
        let out = forward(&p, &views_for(&spec, 2)).unwrap();
        assert_eq!(out.g_t.shape(), (8, 24));
        assert_eq!(out.sdn_logits.len(), 3);
        assert_eq!(out.fine_logits.len(), 17);
        for v in 0..3 {
            let e = encode_view(&p, v, views_for(&spec, 2).get(v)).unwrap();
            assert_eq!(e.shape(), (8, 8));
        }
    }

    #[test]
    fn bad_embedding_width_is_a_spec_error() {
        let mut spec = ModelSpec::new(16, 26, 17);
        spec.encoders[1].embed_channels = 7;
        assert!(matches!(init_params::<f32>(&spec, 0), Err(Error::Spec(_))));
        let mut spec = ModelSpec::new(16, 26, 17);
        spec.encoders[0].pooled_len = 7;
        assert!(matches!(init_params::<f32>(&spec, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::new(16, 26, 7);
        let a: ModelParams<f32> = init_params(&spec, 9).unwrap();
        let b: ModelParams<f32> = init_params(&spec, 9).unwrap();
        let c: ModelParams<f32> = init_params(&spec, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.group("enc.jcd.conv0.b").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_view_shape_is_rejected() {
        let spec = ModelSpec::new(16, 26, 7);
        let p: ModelParams<f64> = init_params(&spec, 1).unwrap();
        let mut v = views_for(&spec, 1);
        v.m_fast = Matrix::zeros(78, 6);
        assert!(matches!(forward(&p, &v), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_final_layer_gives_uniform_sdn() {
        let spec = ModelSpec::new(16, 26, 7);
        let mut p: ModelParams<f64> = init_params(&spec, 1).unwrap();
        p.group_mut("head.sdn.fc.w").unwrap().fill(0.0);
        let views = ViewSet {
            jcd: Matrix::zeros(325, 16),
            m_slow: Matrix::zeros(78, 15),
            m_fast: Matrix::zeros(78, 7),
        };
        let out = forward(&p, &views).unwrap();
        assert_eq!(out.sdn_logits, vec![0.0; 3]);
        for s in softmax(&out.sdn_logits) {
            assert!((s - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for m in [1.0, 2.0, 5.0, 10.0, 30.0] {
            let (l, _) = softmax_cross_entropy(&[m, 0.0, 0.0], 0);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-12);
        // stable for huge logits
        let (l, g) = softmax_cross_entropy(&[1000.0f64, -1000.0], 1);
        assert!((l - 2000.0).abs() < 1e-9);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unit_gradient_of_regression_head_at_target() {
        let labels = TaskLabels {
            sdn: Sdn::Static,
            fine: 1,
            start_index: Some(5),
            end_index: None,
        };
        let t: f64 = index_target(5, 16);
        let (l, g) = task_loss(Task::Start, &[t], &labels, 16, None).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0]);
        assert!(task_loss(Task::End, &[t], &labels, 16, None).is_none());
        assert_eq!(index_from_prediction(t, 16), 5);
        assert_eq!(index_from_prediction(-3.0, 16), 0);
        assert_eq!(index_from_prediction(7.0, 16), 15);
    }

    #[test]
    fn strided_conv_spec_is_supported() {
        let mut spec = ModelSpec::new(8, 3, 3);
        spec.encoders[0].convs = vec![ConvSpec { channels: 4, kernel: 3, stride: 2 }];
        let p: ModelParams<f64> = init_params(&spec, 3).unwrap();
        let out = forward(&p, &views_for(&spec, 3)).unwrap();
        assert_eq!(out.g_t.shape(), (4, 24));
    }
}
