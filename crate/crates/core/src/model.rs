//! A small shared-encoder / multi-head feedforward network with exact
//! reverse-mode gradients.
//!
//! Parameters live in one flat vector: the encoder (shared) block first,
//! then one block per head. Every dense layer stores its weight matrix
//! (`out × in`, row-major) followed by its bias.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::aggregators::GradientBundle;
use crate::error::{Error, Result};
use crate::numerics::{all_finite, Mat, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    MeanSquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub width: usize,
    pub activation: Activation,
}

impl Layer {
    pub fn new(width: usize, activation: Activation) -> Self {
        Layer { width, activation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Hidden layers; the output layer is always linear.
    pub hidden: Vec<Layer>,
    pub output_dim: usize,
    pub loss: LossKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub encoder: Vec<Layer>,
    pub heads: Vec<HeadSpec>,
    pub dropout_p: f64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one head".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        let widths = self
            .encoder
            .iter()
            .chain(self.heads.iter().flat_map(|h| h.hidden.iter()))
            .map(|l| l.width)
            .chain(self.heads.iter().map(|h| h.output_dim));
        if widths.into_iter().any(|w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.heads.len()
    }

    /// Width of the shared representation handed to every head.
    pub fn feature_dim(&self) -> usize {
        self.encoder.last().map_or(self.input_dim, |l| l.width)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    offset: usize,
    fan_in: usize,
    fan_out: usize,
    activation: Activation,
}

impl Dense {
    fn len(&self) -> usize {
        self.fan_out * (self.fan_in + 1)
    }

    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        let s = self.offset + self.fan_in * self.fan_out;
        &p[s..s + self.fan_out]
    }
}

/// Offsets of every dense layer inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    encoder: Vec<Dense>,
    heads: Vec<Vec<Dense>>,
    shared_len: usize,
    head_ranges: Vec<Range<usize>>,
    total_len: usize,
}

impl Layout {
    fn new(spec: &NetworkSpec) -> Self {
        let mut offset = 0;
        let mut fan_in = spec.input_dim;
        let mut encoder = Vec::new();
        for l in &spec.encoder {
            let d = Dense {
                offset,
                fan_in,
                fan_out: l.width,
                activation: l.activation,
            };
            offset += d.len();
            fan_in = l.width;
            encoder.push(d);
        }
        let shared_len = offset;
        let feature = fan_in;
        let mut heads = Vec::new();
        let mut head_ranges = Vec::new();
        for h in &spec.heads {
            let start = offset;
            let mut fan_in = feature;
            let mut layers = Vec::new();
            let out = std::iter::once(Layer::new(h.output_dim, Activation::Identity));
            for l in h.hidden.iter().copied().chain(out) {
                let d = Dense {
                    offset,
                    fan_in,
                    fan_out: l.width,
                    activation: l.activation,
                };
                offset += d.len();
                fan_in = l.width;
                layers.push(d);
            }
            heads.push(layers);
            head_ranges.push(start..offset);
        }
        Layout {
            encoder,
            heads,
            shared_len,
            head_ranges,
            total_len: offset,
        }
    }

    pub fn shared_len(&self) -> usize {
        self.shared_len
    }

    pub fn head_range(&self, task: usize) -> Range<usize> {
        self.head_ranges[task].clone()
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }
}

/// Flat parameter vector partitioned into the shared block and head blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub values: Vec<f64>,
    pub shared_len: usize,
    pub head_ranges: Vec<Range<usize>>,
}

impl Params {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut values = vec![0.0; layout.total_len];
        for d in layout.encoder.iter().chain(layout.heads.iter().flatten()) {
            let std = (1.0 / d.fan_in as f64).sqrt();
            for v in &mut values[d.offset..d.offset + d.fan_in * d.fan_out] {
                *v = std * rng.normal();
            }
        }
        Ok(Params {
            values,
            shared_len: layout.shared_len,
            head_ranges: layout.head_ranges,
        })
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layout = spec.layout();
        Params {
            values: vec![0.0; layout.total_len],
            shared_len: layout.shared_len,
            head_ranges: layout.head_ranges,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shared(&self) -> &[f64] {
        &self.values[..self.shared_len]
    }

    pub fn head(&self, task: usize) -> &[f64] {
        &self.values[self.head_ranges[task].clone()]
    }

    fn check(&self, spec: &NetworkSpec) -> Result<Layout> {
        let layout = spec.layout();
        if self.values.len() != layout.total_len || self.shared_len != layout.shared_len {
            return Err(Error::Shape(format!(
                "params of length {} do not fit a network with {} parameters",
                self.values.len(),
                layout.total_len
            )));
        }
        Ok(layout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Mat),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(m) => Targets::Values(select_rows(m, idx)),
        }
    }
}

pub(crate) fn select_rows(m: &Mat, idx: &[usize]) -> Mat {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Mat::from_vec(idx.len(), m.cols(), data).expect("row selection keeps shape")
}

/// Inputs plus one target set per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Mat,
    pub targets: Vec<Targets>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: select_rows(&self.inputs, idx),
            targets: self.targets.iter().map(|t| t.select(idx)).collect(),
        }
    }

    /// The same inputs with only the targets of `task`.
    pub fn single_task(&self, task: usize) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            targets: vec![self.targets[task].clone()],
        }
    }
}

/// Inverted-dropout scale factors (`0` or `1/(1-p)`) for every hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    pub encoder: Vec<Mat>,
    pub heads: Vec<Vec<Mat>>,
}

impl Masks {
    pub fn sample(spec: &NetworkSpec, rows: usize, rng: &mut Rng) -> Masks {
        let p = spec.dropout_p;
        let keep = 1.0 / (1.0 - p);
        let mut draw = |width: usize| {
            let mut m = Mat::zeros(rows, width);
            for v in m.as_mut_slice() {
                *v = if p > 0.0 && rng.uniform() < p { 0.0 } else { keep };
            }
            m
        };
        let encoder = spec.encoder.iter().map(|l| draw(l.width)).collect();
        let heads = spec
            .heads
            .iter()
            .map(|h| h.hidden.iter().map(|l| draw(l.width)).collect())
            .collect();
        Masks { encoder, heads }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub outputs: Vec<Mat>,
    pub losses: Vec<f64>,
    /// Present in train mode only.
    pub masks: Option<Masks>,
}

struct LayerCache {
    input: Mat,
    pre: Mat,
    act: Mat,
}

struct Trace {
    encoder: Vec<LayerCache>,
    heads: Vec<Vec<LayerCache>>,
    outputs: Vec<Mat>,
}

fn dense_forward(d: &Dense, p: &[f64], x: &Mat, mask: Option<&Mat>) -> (LayerCache, Mat) {
    let w = d.weights(p);
    let b = d.bias(p);
    let rows = x.rows();
    let mut pre = Mat::zeros(rows, d.fan_out);
    for r in 0..rows {
        let xr = x.row(r);
        let out = pre.row_mut(r);
        for (o, (wo, bo)) in out.iter_mut().zip(w.chunks_exact(d.fan_in).zip(b)) {
            *o = bo + wo.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    let mut act = pre.clone();
    act.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = d.activation.apply(*v));
    let mut out = act.clone();
    if let Some(m) = mask {
        out.as_mut_slice()
            .iter_mut()
            .zip(m.as_slice())
            .for_each(|(v, s)| *v *= s);
    }
    (
        LayerCache {
            input: x.clone(),
            pre,
            act,
        },
        out,
    )
}

/// Backprop through one dense layer. `d_out` is the gradient w.r.t. the
/// (masked) layer output; weight/bias gradients are accumulated into `grad`.
fn dense_backward(
    d: &Dense,
    p: &[f64],
    cache: &LayerCache,
    mask: Option<&Mat>,
    d_out: &Mat,
    grad: &mut [f64],
) -> Mat {
    let rows = d_out.rows();
    let mut d_pre = d_out.clone();
    {
        let dp = d_pre.as_mut_slice();
        if let Some(m) = mask {
            dp.iter_mut().zip(m.as_slice()).for_each(|(v, s)| *v *= s);
        }
        for ((v, z), a) in dp.iter_mut().zip(cache.pre.as_slice()).zip(cache.act.as_slice()) {
            *v *= d.activation.derivative(*z, *a);
        }
    }
    let w = d.weights(p);
    let (gw, gb) = grad[d.offset..d.offset + d.len()].split_at_mut(d.fan_in * d.fan_out);
    let mut d_in = Mat::zeros(rows, d.fan_in);
    for r in 0..rows {
        let dr = d_pre.row(r);
        let xr = cache.input.row(r);
        let dir = d_in.row_mut(r);
        for (o, &g) in dr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let wrow = &w[o * d.fan_in..(o + 1) * d.fan_in];
            let gwrow = &mut gw[o * d.fan_in..(o + 1) * d.fan_in];
            for k in 0..d.fan_in {
                gwrow[k] += g * xr[k];
                dir[k] += g * wrow[k];
            }
        }
    }
    d_in
}

fn rotate_rows(z: &Mat, r: &Mat) -> Mat {
    // row form of R z for each sample: z Rᵀ
    z.matmul(&r.transpose()).expect("rotation matches feature width")
}

fn check_rotations(spec: &NetworkSpec, rotations: Option<&[Mat]>) -> Result<()> {
    if let Some(rs) = rotations {
        let f = spec.feature_dim();
        if rs.len() != spec.n_tasks() || rs.iter().any(|r| r.rows() != f || r.cols() != f) {
            return Err(Error::Shape(format!(
                "expected {} rotations of size {f}x{f}",
                spec.n_tasks()
            )));
        }
    }
    Ok(())
}

fn run(
    spec: &NetworkSpec,
    layout: &Layout,
    params: &Params,
    inputs: &Mat,
    masks: Option<&Masks>,
    rotations: Option<&[Mat]>,
) -> Result<Trace> {
    if inputs.cols() != spec.input_dim {
        return Err(Error::Shape(format!(
            "batch has {} columns, network expects {}",
            inputs.cols(),
            spec.input_dim
        )));
    }
    check_rotations(spec, rotations)?;
    let p = &params.values;
    let mut x = inputs.clone();
    let mut encoder = Vec::with_capacity(layout.encoder.len());
    for (i, d) in layout.encoder.iter().enumerate() {
        let (cache, out) = dense_forward(d, p, &x, masks.map(|m| &m.encoder[i]));
        encoder.push(cache);
        x = out;
    }
    let features = x;
    let mut heads = Vec::with_capacity(layout.heads.len());
    let mut outputs = Vec::with_capacity(layout.heads.len());
    for (t, layers) in layout.heads.iter().enumerate() {
        let mut h = match rotations {
            Some(rs) => rotate_rows(&features, &rs[t]),
            None => features.clone(),
        };
        let mut caches = Vec::with_capacity(layers.len());
        let n_hidden = layers.len() - 1;
        for (i, d) in layers.iter().enumerate() {
            let mask = if i < n_hidden { masks.map(|m| &m.heads[t][i]) } else { None };
            let (cache, out) = dense_forward(d, p, &h, mask);
            caches.push(cache);
            h = out;
        }
        heads.push(caches);
        outputs.push(h);
    }
    Ok(Trace {
        encoder,
        heads,
        outputs,
    })
}

/// Mean loss of one task and its gradient w.r.t. the head output.
pub fn task_loss(kind: LossKind, output: &Mat, target: &Targets) -> Result<(f64, Mat)> {
    let rows = output.rows();
    if target.len() != rows {
        return Err(Error::Shape(format!(
            "{} targets for {} outputs",
            target.len(),
            rows
        )));
    }
    let n = rows.max(1) as f64;
    match (kind, target) {
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            let c = output.cols();
            let mut loss = 0.0;
            let mut grad = Mat::zeros(rows, c);
            for (r, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::Shape(format!("label {y} out of {c} classes")));
                }
                let logits = output.row(r);
                let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let sum: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                let lse = mx + sum.ln();
                loss += lse - logits[y];
                let g = grad.row_mut(r);
                for k in 0..c {
                    g[k] = (logits[k] - lse).exp() / n;
                }
                g[y] -= 1.0 / n;
            }
            Ok((loss / n, grad))
        }
        (LossKind::MeanSquaredError, Targets::Values(t)) => {
            if t.cols() != output.cols() {
                return Err(Error::Shape(format!(
                    "regression target width {} vs output {}",
                    t.cols(),
                    output.cols()
                )));
            }
            let denom = n * output.cols().max(1) as f64;
            let mut loss = 0.0;
            let mut grad = Mat::zeros(rows, output.cols());
            for ((g, o), y) in grad
                .as_mut_slice()
                .iter_mut()
                .zip(output.as_slice())
                .zip(t.as_slice())
            {
                let e = o - y;
                loss += e * e;
                *g = 2.0 * e / denom;
            }
            Ok((loss / denom, grad))
        }
        _ => Err(Error::Shape("target kind does not match the head's loss".into())),
    }
}

fn losses_of(spec: &NetworkSpec, outputs: &[Mat], batch: &Batch) -> Result<Vec<(f64, Mat)>> {
    if batch.targets.len() != spec.n_tasks() {
        return Err(Error::Shape(format!(
            "{} target sets for {} heads",
            batch.targets.len(),
            spec.n_tasks()
        )));
    }
    let mut out = Vec::with_capacity(outputs.len());
    for (t, ((o, y), h)) in outputs.iter().zip(&batch.targets).zip(&spec.heads).enumerate() {
        let (l, g) = task_loss(h.loss, o, y)?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { task: t });
        }
        out.push((l, g));
    }
    Ok(out)
}

/// Forward pass. Train mode samples fresh dropout masks from `rng` and
/// returns them; eval mode uses no dropout.
pub fn forward(
    spec: &NetworkSpec,
    params: &Params,
    batch: &Batch,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<ForwardOutput> {
    spec.validate()?;
    let masks = train_mode.then(|| Masks::sample(spec, batch.len(), rng));
    let mut out = forward_with(spec, params, batch, masks.as_ref(), None)?;
    out.masks = masks;
    Ok(out)
}

/// Forward pass with given masks and optional per-task feature rotations.
pub fn forward_with(
    spec: &NetworkSpec,
    params: &Params,
    batch: &Batch,
    masks: Option<&Masks>,
    rotations: Option<&[Mat]>,
) -> Result<ForwardOutput> {
    let layout = params.check(spec)?;
    let trace = run(spec, &layout, params, &batch.inputs, masks, rotations)?;
    let losses = losses_of(spec, &trace.outputs, batch)?
        .into_iter()
        .map(|(l, _)| l)
        .collect();
    Ok(ForwardOutput {
        outputs: trace.outputs,
        losses,
        masks: None,
    })
}

/// Head outputs without dropout.
pub fn predict(
    spec: &NetworkSpec,
    params: &Params,
    inputs: &Mat,
    rotations: Option<&[Mat]>,
) -> Result<Vec<Mat>> {
    let layout = params.check(spec)?;
    Ok(run(spec, &layout, params, inputs, None, rotations)?.outputs)
}

#[derive(Debug, Clone)]
pub struct TaskGradients {
    /// Row `i` is `∂ℓ_i/∂θ_sh`.
    pub shared: GradientBundle,
    /// `∂ℓ_i/∂θ_i` for each head block.
    pub heads: Vec<Vec<f64>>,
    /// Batch-summed gradient of `ℓ_i` w.r.t. the (rotated) head input.
    pub features: Mat,
    pub losses: Vec<f64>,
}

struct HeadPass {
    losses: Vec<f64>,
    heads: Vec<Vec<f64>>,
    d_features: Vec<Mat>,
    feature_sums: Mat,
}

#[allow(clippy::too_many_arguments)]
fn head_pass(
    spec: &NetworkSpec,
    layout: &Layout,
    params: &Params,
    trace: &Trace,
    batch: &Batch,
    masks: Option<&Masks>,
    rotations: Option<&[Mat]>,
    scale: &[f64],
) -> Result<HeadPass> {
    let p = &params.values;
    let lg = losses_of(spec, &trace.outputs, batch)?;
    let f = spec.feature_dim();
    let mut losses = Vec::with_capacity(lg.len());
    let mut heads = Vec::with_capacity(lg.len());
    let mut d_features = Vec::with_capacity(lg.len());
    let mut feature_sums = Mat::zeros(lg.len(), f);
    for (t, (loss, mut d)) in lg.into_iter().enumerate() {
        losses.push(loss);
        d.as_mut_slice().iter_mut().for_each(|v| *v *= scale[t]);
        let mut grad = vec![0.0; layout.total_len];
        let layers = &layout.heads[t];
        let n_hidden = layers.len() - 1;
        for (i, dl) in layers.iter().enumerate().rev() {
            let mask = if i < n_hidden { masks.map(|m| &m.heads[t][i]) } else { None };
            d = dense_backward(dl, p, &trace.heads[t][i], mask, &d, &mut grad);
        }
        for r in 0..d.rows() {
            for (s, v) in feature_sums.row_mut(t).iter_mut().zip(d.row(r)) {
                *s += v;
            }
        }
        if let Some(rs) = rotations {
            // r = R z, so dz = Rᵀ dr; in row form dz_row = dr_row R
            d = d.matmul(&rs[t])?;
        }
        heads.push(grad[layout.head_ranges[t].clone()].to_vec());
        d_features.push(d);
    }
    Ok(HeadPass {
        losses,
        heads,
        d_features,
        feature_sums,
    })
}

fn encoder_pass(
    layout: &Layout,
    params: &Params,
    trace: &Trace,
    masks: Option<&Masks>,
    d_features: Mat,
) -> Vec<f64> {
    let p = &params.values;
    let mut grad = vec![0.0; layout.shared_len];
    let mut d = d_features;
    for (i, dl) in layout.encoder.iter().enumerate().rev() {
        d = dense_backward(dl, p, &trace.encoder[i], masks.map(|m| &m.encoder[i]), &d, &mut grad);
    }
    grad
}

/// One backward pass per task: per-task shared gradients plus head
/// gradients. Must be called with the masks the forward pass used.
pub fn backward_per_task(
    spec: &NetworkSpec,
    params: &Params,
    batch: &Batch,
    masks: Option<&Masks>,
    rotations: Option<&[Mat]>,
) -> Result<TaskGradients> {
    let layout = params.check(spec)?;
    let trace = run(spec, &layout, params, &batch.inputs, masks, rotations)?;
    let ones = vec![1.0; spec.n_tasks()];
    let hp = head_pass(spec, &layout, params, &trace, batch, masks, rotations, &ones)?;
    let rows: Vec<Vec<f64>> = hp
        .d_features
        .into_iter()
        .map(|d| encoder_pass(&layout, params, &trace, masks, d))
        .collect();
    let shared = GradientBundle::from_rows(&rows)?;
    Ok(TaskGradients {
        shared,
        heads: hp.heads,
        features: hp.feature_sums,
        losses: hp.losses,
    })
}

#[derive(Debug, Clone)]
pub struct WeightedGradient {
    /// Gradient of `Σ w_i ℓ_i` over the full parameter vector.
    pub grad: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Gradient of the scalarized loss `Σ w_i ℓ_i` in a single backward pass.
pub fn backward_weighted(
    spec: &NetworkSpec,
    params: &Params,
    batch: &Batch,
    masks: Option<&Masks>,
    rotations: Option<&[Mat]>,
    weights: &[f64],
) -> Result<WeightedGradient> {
    if weights.len() != spec.n_tasks() {
        return Err(Error::Shape(format!(
            "{} weights for {} tasks",
            weights.len(),
            spec.n_tasks()
        )));
    }
    let layout = params.check(spec)?;
    let trace = run(spec, &layout, params, &batch.inputs, masks, rotations)?;
    let hp = head_pass(spec, &layout, params, &trace, batch, masks, rotations, weights)?;
    let mut d = Mat::zeros(batch.len(), spec.feature_dim());
    for df in &hp.d_features {
        d.as_mut_slice()
            .iter_mut()
            .zip(df.as_slice())
            .for_each(|(a, b)| *a += b);
    }
    let shared = encoder_pass(&layout, params, &trace, masks, d);
    let mut grad = vec![0.0; layout.total_len];
    grad[..layout.shared_len].copy_from_slice(&shared);
    for (t, h) in hp.heads.iter().enumerate() {
        grad[layout.head_ranges[t].clone()].copy_from_slice(h);
    }
    Ok(WeightedGradient {
        grad,
        losses: hp.losses,
    })
}

/// Full-length update vector from a shared direction and per-head gradients
/// scaled by `head_weights`.
pub fn assemble_update(
    params: &Params,
    shared_direction: &[f64],
    heads: &[Vec<f64>],
    head_weights: &[f64],
) -> Result<Vec<f64>> {
    if shared_direction.len() != params.shared_len || heads.len() != params.head_ranges.len() {
        return Err(Error::Shape("update pieces do not match the parameter layout".into()));
    }
    let mut out = vec![0.0; params.len()];
    out[..params.shared_len].copy_from_slice(shared_direction);
    for ((range, h), w) in params.head_ranges.iter().zip(heads).zip(head_weights) {
        for (o, g) in out[range.clone()].iter_mut().zip(h) {
            *o = w * g;
        }
    }
    Ok(out)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One bias-corrected Adam step along `direction`, with the decay
/// `p ← p − lr·wd·p` applied outside the moment estimates.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], direction: &[f64]) -> Result<()> {
    if direction.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} direction entries, {} moments",
            params.len(),
            direction.len(),
            state.m.len()
        )));
    }
    if !all_finite(direction) {
        return Err(Error::NonFinite("update direction".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let decay = state.lr * state.weight_decay;
    for i in 0..params.len() {
        let g = direction[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= decay * params[i];
        params[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_head_spec(p: f64) -> NetworkSpec {
        NetworkSpec {
            input_dim: 3,
            encoder: vec![Layer::new(4, Activation::Tanh)],
            heads: vec![
                HeadSpec {
                    hidden: vec![],
                    output_dim: 3,
                    loss: LossKind::CrossEntropy,
                },
                HeadSpec {
                    hidden: vec![Layer::new(2, Activation::Sigmoid)],
                    output_dim: 2,
                    loss: LossKind::MeanSquaredError,
                },
            ],
            dropout_p: p,
        }
    }

    fn batch(rng: &mut Rng, rows: usize) -> Batch {
        let inputs = Mat::from_vec(rows, 3, (0..rows * 3).map(|_| rng.normal()).collect()).unwrap();
        let classes = (0..rows).map(|_| rng.below(3)).collect();
        let values = Mat::from_vec(rows, 2, (0..rows * 2).map(|_| rng.normal()).collect()).unwrap();
        Batch {
            inputs,
            targets: vec![Targets::Classes(classes), Targets::Values(values)],
        }
    }

    #[test]
    fn layout_partitions_exactly() {
        let spec = two_head_spec(0.0);
        let l = spec.layout();
        assert_eq!(l.shared_len(), 4 * 4);
        assert_eq!(l.head_range(0), 16..16 + 3 * 5);
        assert_eq!(l.head_range(1).start, l.head_range(0).end);
        assert_eq!(l.head_range(1).end, l.total_len());
    }

    #[test]
    fn no_dropout_train_equals_eval() {
        let spec = two_head_spec(0.0);
        let mut rng = Rng::new(1);
        let params = Params::init(&spec, &mut rng).unwrap();
        let b = batch(&mut rng, 5);
        let tr = forward(&spec, &params, &b, &mut rng, true).unwrap();
        let ev = forward(&spec, &params, &b, &mut rng, false).unwrap();
        assert_eq!(tr.outputs, ev.outputs);
        assert!(tr.masks.is_some() && ev.masks.is_none());
    }

    #[test]
    fn zero_network_mse_zero_targets() {
        let spec = NetworkSpec {
            input_dim: 2,
            encoder: vec![Layer::new(3, Activation::Tanh)],
            heads: vec![HeadSpec {
                hidden: vec![],
                output_dim: 2,
                loss: LossKind::MeanSquaredError,
            }],
            dropout_p: 0.0,
        };
        let params = Params::zeros(&spec);
        let b = Batch {
            inputs: Mat::from_vec(2, 2, vec![1., 2., 3., 4.]).unwrap(),
            targets: vec![Targets::Values(Mat::zeros(2, 2))],
        };
        let out = forward(&spec, &params, &b, &mut Rng::new(0), false).unwrap();
        assert_eq!(out.losses, vec![0.0]);
    }

    #[test]
    fn uniform_logits_cost_ln_c() {
        let spec = NetworkSpec {
            input_dim: 2,
            encoder: vec![],
            heads: vec![HeadSpec {
                hidden: vec![],
                output_dim: 5,
                loss: LossKind::CrossEntropy,
            }],
            dropout_p: 0.0,
        };
        let params = Params::zeros(&spec);
        let b = Batch {
            inputs: Mat::from_vec(3, 2, vec![1.; 6]).unwrap(),
            targets: vec![Targets::Classes(vec![0, 3, 4])],
        };
        let out = forward(&spec, &params, &b, &mut Rng::new(0), false).unwrap();
        assert!((out.losses[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_loss_names_task() {
        let spec = two_head_spec(0.0);
        let mut rng = Rng::new(2);
        let params = Params::init(&spec, &mut rng).unwrap();
        let mut b = batch(&mut rng, 3);
        if let Targets::Values(m) = &mut b.targets[1] {
            m[(0, 0)] = f64::INFINITY;
        }
        let err = forward(&spec, &params, &b, &mut rng, false).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { task: 1 }));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let spec = two_head_spec(0.0);
        let mut rng = Rng::new(2);
        let params = Params::init(&spec, &mut rng).unwrap();
        let b = Batch {
            inputs: Mat::zeros(2, 5),
            targets: vec![Targets::Classes(vec![0, 0]), Targets::Values(Mat::zeros(2, 2))],
        };
        assert!(matches!(
            forward(&spec, &params, &b, &mut rng, false),
            Err(Error::Shape(_))
        ));
    }

    fn central_difference(
        spec: &NetworkSpec,
        params: &Params,
        b: &Batch,
        masks: Option<&Masks>,
        task: usize,
        idx: usize,
    ) -> f64 {
        let h = 1e-5;
        let mut p = params.clone();
        p.values[idx] += h;
        let up = forward_with(spec, &p, b, masks, None).unwrap().losses[task];
        p.values[idx] -= 2.0 * h;
        let down = forward_with(spec, &p, b, masks, None).unwrap().losses[task];
        (up - down) / (2.0 * h)
    }

    #[test]
    fn per_task_gradients_match_finite_differences() {
        let spec = two_head_spec(0.3);
        let mut rng = Rng::new(7);
        let params = Params::init(&spec, &mut rng).unwrap();
        let b = batch(&mut rng, 6);
        let masks = Masks::sample(&spec, b.len(), &mut rng);
        let g = backward_per_task(&spec, &params, &b, Some(&masks), None).unwrap();
        for t in 0..2 {
            for k in 0..params.shared_len {
                let fd = central_difference(&spec, &params, &b, Some(&masks), t, k);
                assert!((g.shared.row(t)[k] - fd).abs() < 1e-7, "task {t} shared {k}");
            }
            let r = params.head_ranges[t].clone();
            for (j, k) in r.enumerate() {
                let fd = central_difference(&spec, &params, &b, Some(&masks), t, k);
                assert!((g.heads[t][j] - fd).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn weighted_backward_is_weighted_sum() {
        let spec = two_head_spec(0.2);
        let mut rng = Rng::new(9);
        let params = Params::init(&spec, &mut rng).unwrap();
        let b = batch(&mut rng, 4);
        let masks = Masks::sample(&spec, b.len(), &mut rng);
        let w = [0.3, 1.7];
        let per = backward_per_task(&spec, &params, &b, Some(&masks), None).unwrap();
        let tot = backward_weighted(&spec, &params, &b, Some(&masks), None, &w).unwrap();
        for k in 0..params.shared_len {
            let e = w[0] * per.shared.row(0)[k] + w[1] * per.shared.row(1)[k];
            assert!((tot.grad[k] - e).abs() < 1e-12);
        }
        let assembled = assemble_update(
            &params,
            &tot.grad[..params.shared_len],
            &per.heads,
            &w,
        )
        .unwrap();
        for (a, b) in assembled.iter().zip(&tot.grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_heads_give_identical_rows() {
        let head = HeadSpec {
            hidden: vec![],
            output_dim: 2,
            loss: LossKind::MeanSquaredError,
        };
        let spec = NetworkSpec {
            input_dim: 3,
            encoder: vec![Layer::new(4, Activation::Tanh)],
            heads: vec![head.clone(), head],
            dropout_p: 0.0,
        };
        let mut rng = Rng::new(4);
        let mut params = Params::init(&spec, &mut rng).unwrap();
        let h0 = params.head(0).to_vec();
        let r1 = params.head_ranges[1].clone();
        params.values[r1].copy_from_slice(&h0);
        let y = Mat::from_vec(3, 2, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let b = Batch {
            inputs: Mat::from_vec(3, 3, (0..9).map(|_| rng.normal()).collect()).unwrap(),
            targets: vec![Targets::Values(y.clone()), Targets::Values(y)],
        };
        let g = backward_per_task(&spec, &params, &b, None, None).unwrap();
        assert_eq!(g.shared.row(0), g.shared.row(1));
    }

    #[test]
    fn zero_batch_zero_targets_gives_zero_rows() {
        let spec = NetworkSpec {
            input_dim: 3,
            encoder: vec![Layer::new(4, Activation::Tanh)],
            heads: vec![HeadSpec {
                hidden: vec![],
                output_dim: 2,
                loss: LossKind::MeanSquaredError,
            }],
            dropout_p: 0.0,
        };
        let mut rng = Rng::new(4);
        let params = Params::init(&spec, &mut rng).unwrap();
        let b = Batch {
            inputs: Mat::zeros(3, 3),
            targets: vec![Targets::Values(Mat::zeros(3, 2))],
        };
        let g = backward_per_task(&spec, &params, &b, None, None).unwrap();
        assert!(g.shared.row(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adam_examples() {
        let mut s = AdamState::new(1, 0.1, 0.0);
        let mut p = vec![1.0];
        adam_step(&mut s, &mut p, &[1.0]).unwrap();
        // m̂ = v̂ = 1 after bias correction
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);

        let mut s = AdamState::new(2, 0.1, 0.0);
        let mut p = vec![0.5, -2.0];
        adam_step(&mut s, &mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);

        let mut s = AdamState::new(2, 0.1, 0.1);
        let mut p = vec![0.5, -2.0];
        adam_step(&mut s, &mut p, &[0.0, 0.0]).unwrap();
        assert!((p[0] - 0.5 * 0.99).abs() < 1e-15 && (p[1] + 2.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn single_task_adam_decreases_convex_loss() {
        let spec = NetworkSpec {
            input_dim: 4,
            encoder: vec![],
            heads: vec![HeadSpec {
                hidden: vec![],
                output_dim: 1,
                loss: LossKind::MeanSquaredError,
            }],
            dropout_p: 0.0,
        };
        let mut rng = Rng::new(12);
        let mut params = Params::init(&spec, &mut rng).unwrap();
        let x = Mat::from_vec(16, 4, (0..64).map(|_| rng.normal()).collect()).unwrap();
        let y = Mat::from_vec(16, 1, x.row_iter().map(|r| r[0] - 2.0 * r[3] + 0.5).collect()).unwrap();
        let b = Batch {
            inputs: x,
            targets: vec![Targets::Values(y)],
        };
        let mut adam = AdamState::new(params.len(), 0.01, 0.0);
        let mut prev = f64::INFINITY;
        for step in 0..60 {
            let g = backward_weighted(&spec, &params, &b, None, None, &[1.0]).unwrap();
            if step > 5 {
                assert!(g.losses[0] < prev);
            }
            prev = g.losses[0];
            adam_step(&mut adam, &mut params.values, &g.grad).unwrap();
        }
    }
}
