//! Fully-connected conditional denoiser `eps(x, sigma, c)`.
//!
//! All parameters live in one flat `f64` vector ([`ParamVector`]) so that
//! weight interpolation between two checkpoints is a single elementwise
//! blend. Forward and gradient passes are written out by hand for this
//! fixed architecture family and use a fixed summation order, so results
//! are reproducible bit for bit.
//!
//! Parameter layout, in order:
//!
//! 1. condition table: `n_concepts + n_attributes + 1` rows of width
//!    `embed_width`; a token `(c, a)` embeds as `row[c] + row[n_concepts + a]`
//!    and the null condition uses the last row;
//! 2. for every layer, the weight matrix stored input-major
//!    (`w[i * out + o]`) followed by the bias.
//!
//! Network input is `[x * c_in, u, sin(k pi u), cos(k pi u) ...]` with
//! `c_in = 1 / sqrt(sigma^2 + data_std^2)` and `u = ln(sigma) / 4`, followed
//! by the condition embedding in [`CondInput::Concat`] mode. In
//! [`CondInput::Bias`] mode the embedding is instead added to the first
//! layer's pre-activation, which keeps a network without hidden layers
//! linear in its parameters.

pub mod adapter;
pub mod checkpoint;

use std::cell::RefCell;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datasets::Condition;
use crate::error::{Error, Result};
use crate::linalg::{Vec2, DIM};
use crate::rng::{standard_normal2, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                // tanh through a single exp; within 3e-16 of f64::tanh
                let e = (-2.0 * z.abs()).exp();
                ((1.0 - e) / (1.0 + e)).copysign(z)
            }
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `h`.
    #[inline]
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

/// How the condition embedding enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CondInput {
    /// Embedding of the given width concatenated to the input features.
    Concat(usize),
    /// Embedding added to the first layer's pre-activation.
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub sigma_frequencies: usize,
    pub cond_input: CondInput,
    pub n_concepts: usize,
    pub n_attributes: usize,
    pub data_std: f64,
}

impl Architecture {
    /// Two hidden layers of 64 tanh units with a 16-wide concatenated embedding.
    pub fn standard(n_concepts: usize, n_attributes: usize) -> Self {
        Architecture {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            sigma_frequencies: 4,
            cond_input: CondInput::Concat(16),
            n_concepts,
            n_attributes,
            data_std: 1.0,
        }
    }

    /// A single affine layer; the output is linear in the parameters.
    pub fn linear(n_concepts: usize, n_attributes: usize) -> Self {
        Architecture {
            hidden: Vec::new(),
            activation: Activation::Tanh,
            sigma_frequencies: 2,
            cond_input: CondInput::Bias,
            n_concepts,
            n_attributes,
            data_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("architecture: {m}")));
        if self.hidden.contains(&0) {
            return bad("hidden widths must be at least 1");
        }
        if self.n_concepts == 0 || self.n_attributes == 0 {
            return bad("condition table needs at least one concept and one attribute");
        }
        if let CondInput::Concat(0) = self.cond_input {
            return bad("embedding width must be at least 1");
        }
        if !(self.data_std > 0.0) || !self.data_std.is_finite() {
            return bad("data_std must be positive");
        }
        Ok(())
    }

    pub fn table_rows(&self) -> usize {
        self.n_concepts + self.n_attributes + 1
    }

    pub fn null_row(&self) -> usize {
        self.table_rows() - 1
    }

    pub fn embed_width(&self) -> usize {
        match self.cond_input {
            CondInput::Concat(w) => w,
            CondInput::Bias => self.hidden.first().copied().unwrap_or(DIM),
        }
    }

    pub fn sigma_feature_count(&self) -> usize {
        1 + 2 * self.sigma_frequencies
    }

    pub fn input_dim(&self) -> usize {
        let base = DIM + self.sigma_feature_count();
        match self.cond_input {
            CondInput::Concat(w) => base + w,
            CondInput::Bias => base,
        }
    }

    /// `(inputs, outputs)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in self.hidden.iter().chain(std::iter::once(&DIM)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        self.table_rows() * self.embed_width()
            + self.layer_dims().iter().map(|(i, o)| i * o + o).sum::<usize>()
    }

    pub fn check_condition(&self, cond: &Condition) -> Result<()> {
        if let Condition::Token { concept, attribute } = *cond {
            if concept as usize >= self.n_concepts || attribute as usize >= self.n_attributes {
                return Err(Error::ConditionOutOfRange {
                    cond: cond.to_string(),
                    concepts: self.n_concepts,
                    attributes: self.n_attributes,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LayerSlot {
    pub inputs: usize,
    pub outputs: usize,
    pub w: usize,
    pub b: usize,
}

/// Architecture plus precomputed parameter offsets.
#[derive(Debug, PartialEq)]
pub struct Shape {
    arch: Architecture,
    pub(crate) layers: Vec<LayerSlot>,
    embed_width: usize,
    len: usize,
}

impl Shape {
    pub fn new(arch: Architecture) -> Result<Arc<Shape>> {
        arch.validate()?;
        let embed_width = arch.embed_width();
        let mut offset = arch.table_rows() * embed_width;
        let mut layers = Vec::new();
        for (inputs, outputs) in arch.layer_dims() {
            let w = offset;
            let b = w + inputs * outputs;
            offset = b + outputs;
            layers.push(LayerSlot { inputs, outputs, w, b });
        }
        debug_assert_eq!(offset, arch.param_count());
        Ok(Arc::new(Shape {
            arch,
            layers,
            embed_width,
            len: offset,
        }))
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn row_offset(&self, row: usize) -> usize {
        row * self.embed_width
    }

    /// Table rows used by `cond`.
    fn rows(&self, cond: &Condition) -> ([usize; 2], usize) {
        match *cond {
            Condition::Null => ([self.arch.null_row(), 0], 1),
            Condition::Token { concept, attribute } => (
                [concept as usize, self.arch.n_concepts + attribute as usize],
                2,
            ),
        }
    }
}

/// Flat parameter store for one instance of an [`Architecture`].
#[derive(Debug, Clone)]
pub struct ParamVector {
    shape: Arc<Shape>,
    values: Vec<f64>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.shape.arch == other.shape.arch && self.values == other.values
    }
}

impl ParamVector {
    pub fn from_values(shape: Arc<Shape>, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} parameters, got {}",
                shape.len,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("parameter {i} is not finite")));
        }
        Ok(ParamVector { shape, values })
    }

    pub fn zeros(shape: Arc<Shape>) -> Self {
        let values = vec![0.0; shape.len];
        ParamVector { shape, values }
    }

    pub fn shape(&self) -> &Arc<Shape> {
        &self.shape
    }

    pub fn arch(&self) -> &Architecture {
        &self.shape.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn ensure_same_arch(&self, other: &ParamVector) -> Result<()> {
        if self.shape.arch != other.shape.arch {
            return Err(Error::ArchitectureMismatch(
                "parameter vectors instantiate different architectures".into(),
            ));
        }
        Ok(())
    }

    /// Noise prediction for a single input.
    pub fn forward(&self, x: Vec2, sigma: f64, cond: &Condition) -> Result<Vec2> {
        check_sigma(sigma)?;
        self.shape.arch.check_condition(cond)?;
        SCRATCH.with(|s| {
            let mut ws = s.borrow_mut();
            ws.fit(&self.shape);
            Ok(self.forward_ws(&mut ws, x, sigma, cond))
        })
    }

    fn embedding_into(&self, cond: &Condition, out: &mut [f64]) {
        let w = self.shape.embed_width;
        let (rows, n) = self.shape.rows(cond);
        let first = self.shape.row_offset(rows[0]);
        out.copy_from_slice(&self.values[first..first + w]);
        if n == 2 {
            let second = self.shape.row_offset(rows[1]);
            for (o, v) in out.iter_mut().zip(&self.values[second..second + w]) {
                *o += v;
            }
        }
    }

    /// Forward pass keeping every activation in `ws` for a later backward pass.
    fn forward_ws(&self, ws: &mut Workspace, x: Vec2, sigma: f64, cond: &Condition) -> Vec2 {
        let arch = &self.shape.arch;
        let c_in = 1.0 / (sigma * sigma + arch.data_std * arch.data_std).sqrt();
        let u = sigma.ln() / 4.0;
        {
            let input = &mut ws.acts[0];
            input[0] = x[0] * c_in;
            input[1] = x[1] * c_in;
            input[2] = u;
            for k in 0..arch.sigma_frequencies {
                let a = std::f64::consts::PI * (k + 1) as f64 * u;
                input[3 + 2 * k] = a.sin();
                input[4 + 2 * k] = a.cos();
            }
        }
        let ew = self.shape.embed_width;
        ws.emb.resize(ew, 0.0);
        let mut emb = std::mem::take(&mut ws.emb);
        self.embedding_into(cond, &mut emb);
        if let CondInput::Concat(_) = arch.cond_input {
            let start = DIM + arch.sigma_feature_count();
            ws.acts[0][start..start + ew].copy_from_slice(&emb);
        }
        let n_layers = self.shape.layers.len();
        let mut out = [0.0; DIM];
        for (l, slot) in self.shape.layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let input = &before[l][..slot.inputs];
            let z = &mut ws.pre[l][..slot.outputs];
            z.copy_from_slice(&self.values[slot.b..slot.b + slot.outputs]);
            if l == 0 && arch.cond_input == CondInput::Bias {
                for (zo, e) in z.iter_mut().zip(&emb) {
                    *zo += e;
                }
            }
            let w = &self.values[slot.w..slot.w + slot.inputs * slot.outputs];
            for (a, row) in input.iter().zip(w.chunks_exact(slot.outputs)) {
                axpy(*a, row, z);
            }
            if l + 1 < n_layers {
                let h = &mut after[0][..slot.outputs];
                for (hi, zi) in h.iter_mut().zip(z.iter()) {
                    *hi = arch.activation.apply(*zi);
                }
            } else {
                out.copy_from_slice(z);
            }
        }
        ws.emb = emb;
        out
    }

    /// Accumulates `d out . d out/d params` into `grad`, using the activations
    /// left in `ws` by the matching [`forward_ws`](Self::forward_ws) call.
    fn backward_ws(&self, ws: &mut Workspace, cond: &Condition, d_out: Vec2, grad: &mut [f64]) {
        let arch = &self.shape.arch;
        let n_layers = self.shape.layers.len();
        ws.delta[..DIM].copy_from_slice(&d_out);
        for l in (0..n_layers).rev() {
            let slot = self.shape.layers[l];
            let delta = &ws.delta[..slot.outputs];
            let input = &ws.acts[l][..slot.inputs];
            let gw = &mut grad[slot.w..slot.w + slot.inputs * slot.outputs];
            for (a, grow) in input.iter().zip(gw.chunks_exact_mut(slot.outputs)) {
                axpy(*a, delta, grow);
            }
            for (gb, d) in grad[slot.b..slot.b + slot.outputs].iter_mut().zip(delta) {
                *gb += d;
            }
            let w = &self.values[slot.w..slot.w + slot.inputs * slot.outputs];
            if l > 0 {
                let prev = &mut ws.delta_prev[..slot.inputs];
                for (p, row) in prev.iter_mut().zip(w.chunks_exact(slot.outputs)) {
                    *p = dot(row, delta);
                }
                let z = &ws.pre[l - 1][..slot.inputs];
                let h = &ws.acts[l][..slot.inputs];
                for ((p, zi), hi) in prev.iter_mut().zip(z).zip(h) {
                    *p *= arch.activation.derivative(*zi, *hi);
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
            } else {
                let ew = self.shape.embed_width;
                let d_emb = &mut ws.emb[..ew];
                match arch.cond_input {
                    CondInput::Concat(_) => {
                        let start = DIM + arch.sigma_feature_count();
                        for (k, d) in d_emb.iter_mut().enumerate() {
                            *d = dot(&w[(start + k) * slot.outputs..(start + k + 1) * slot.outputs], delta);
                        }
                    }
                    CondInput::Bias => d_emb.copy_from_slice(delta),
                }
                let (rows, n) = self.shape.rows(cond);
                for &row in &rows[..n] {
                    let off = self.shape.row_offset(row);
                    for (g, d) in grad[off..off + ew].iter_mut().zip(d_emb.iter()) {
                        *g += d;
                    }
                }
            }
        }
    }

    /// Mean denoising loss `||eps(x + sigma n, sigma, c) - n||^2` over the
    /// batch and its gradient.
    pub fn loss_and_grad(&self, batch: &[TrainExample]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.values.len()];
        let loss = self.loss_and_grad_into(batch, &mut grad)?;
        Ok((loss, grad))
    }

    /// As [`loss_and_grad`](Self::loss_and_grad), overwriting `grad`.
    pub fn loss_and_grad_into(&self, batch: &[TrainExample], grad: &mut [f64]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if grad.len() != self.values.len() {
            return Err(Error::ArchitectureMismatch("gradient buffer length".into()));
        }
        for ex in batch {
            check_sigma(ex.sigma)?;
            self.shape.arch.check_condition(&ex.cond)?;
        }
        grad.fill(0.0);
        let scale = 1.0 / batch.len() as f64;
        SCRATCH.with(|s| {
            let mut ws = s.borrow_mut();
            ws.fit(&self.shape);
            let mut total = 0.0;
            for (index, ex) in batch.iter().enumerate() {
                let xt = [ex.x[0] + ex.sigma * ex.noise[0], ex.x[1] + ex.sigma * ex.noise[1]];
                let out = self.forward_ws(&mut ws, xt, ex.sigma, &ex.cond);
                let r = [out[0] - ex.noise[0], out[1] - ex.noise[1]];
                let l = r[0] * r[0] + r[1] * r[1];
                if !l.is_finite() {
                    return Err(Error::NonFiniteBatch { index });
                }
                total += l;
                self.backward_ws(&mut ws, &ex.cond, [2.0 * scale * r[0], 2.0 * scale * r[1]], grad);
            }
            if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
                log::warn!("non-finite gradient coordinate {index}");
                return Err(Error::NonFiniteBatch { index: batch.len() - 1 });
            }
            Ok(total * scale)
        })
    }
}

impl ParamVector {
    /// Mean denoising loss without the gradient.
    pub fn loss(&self, batch: &[TrainExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut total = 0.0;
        for (index, ex) in batch.iter().enumerate() {
            let xt = [ex.x[0] + ex.sigma * ex.noise[0], ex.x[1] + ex.sigma * ex.noise[1]];
            let out = self.forward(xt, ex.sigma, &ex.cond)?;
            let l = (out[0] - ex.noise[0]).powi(2) + (out[1] - ex.noise[1]).powi(2);
            if !l.is_finite() {
                return Err(Error::NonFiniteBatch { index });
            }
            total += l;
        }
        Ok(total / batch.len() as f64)
    }
}

/// One denoising example: clean point, condition, noise level and unit noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainExample {
    pub x: Vec2,
    pub cond: Condition,
    pub sigma: f64,
    pub noise: Vec2,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Fan-in scaled weights (variance `1 / fan_in`), zero biases and condition
/// rows with standard deviation 0.01.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ParamVector> {
    let shape = Shape::new(arch.clone())?;
    let mut p = ParamVector::zeros(shape.clone());
    let stream = Stream::new(seed, "init");
    let mut rng = stream.rng(0);
    let mut fill = |slice: &mut [f64], std: f64| {
        for pair in slice.chunks_mut(2) {
            let z = standard_normal2(&mut rng);
            for (v, zi) in pair.iter_mut().zip(z) {
                *v = zi * std;
            }
        }
    };
    let table = arch.table_rows() * shape.embed_width;
    fill(&mut p.values[..table], 0.01);
    for slot in &shape.layers {
        let std = 1.0 / (slot.inputs as f64).sqrt();
        fill(&mut p.values[slot.w..slot.b], std);
    }
    Ok(p)
}

/// Largest relative error between the analytic gradient of the batch loss and
/// central finite differences with step `h`, over every coordinate. The
/// denominator is floored at 1e-6 so coordinates with vanishing gradient
/// compare absolutely.
pub fn max_fd_rel_error(p: &ParamVector, batch: &[TrainExample], h: f64) -> Result<f64> {
    let (_, grad) = p.loss_and_grad(batch)?;
    let mut q = p.clone();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = q.values[i];
        q.values[i] = orig + h;
        let lp = q.loss(batch)?;
        q.values[i] = orig - h;
        let lm = q.loss(batch)?;
        q.values[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let denom = grad[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((grad[i] - fd).abs() / denom);
    }
    Ok(worst)
}

/// `theta_omega = omega * theta_prime + (1 - omega) * theta`; both endpoints
/// are returned exactly.
pub fn interpolate(theta: &ParamVector, theta_prime: &ParamVector, omega: f64) -> Result<ParamVector> {
    theta.ensure_same_arch(theta_prime)?;
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::InvalidArgument(format!(
            "interpolation scale must lie in [0, 1], got {omega}"
        )));
    }
    if omega == 0.0 {
        return Ok(theta.clone());
    }
    if omega == 1.0 {
        return Ok(theta_prime.clone());
    }
    let values = theta
        .values
        .iter()
        .zip(&theta_prime.values)
        .map(|(a, b)| omega * b + (1.0 - omega) * a)
        .collect();
    Ok(ParamVector {
        shape: theta.shape.clone(),
        values,
    })
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four interleaved accumulators in a fixed order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n4 = a.len() / 4 * 4;
    let mut acc = [0.0f64; 4];
    for (ca, cb) in a[..n4].chunks_exact(4).zip(b[..n4].chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a[n4..].iter().zip(&b[n4..]) {
        s += x * y;
    }
    s
}

#[derive(Default)]
struct Workspace {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    emb: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn fit(&mut self, shape: &Shape) {
        let n = shape.layers.len();
        let widest = shape
            .layers
            .iter()
            .map(|s| s.inputs.max(s.outputs))
            .max()
            .unwrap_or(DIM)
            .max(shape.embed_width);
        self.acts.resize_with(n, Vec::new);
        self.pre.resize_with(n, Vec::new);
        for (l, slot) in shape.layers.iter().enumerate() {
            if self.acts[l].len() < slot.inputs {
                self.acts[l].resize(slot.inputs, 0.0);
            }
            if self.pre[l].len() < slot.outputs {
                self.pre[l].resize(slot.outputs, 0.0);
            }
        }
        for buf in [&mut self.delta, &mut self.delta_prev, &mut self.emb] {
            if buf.len() < widest {
                buf.resize(widest, 0.0);
            }
        }
    }
}

thread_local! {
    static SCRATCH: RefCell<Workspace> = RefCell::new(Workspace::default());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn arch() -> Architecture {
        Architecture::standard(3, 2)
    }

    #[test]
    fn tanh_matches_std() {
        for i in -40_000..=40_000 {
            let z = i as f64 * 5e-4;
            assert!((Activation::Tanh.apply(z) - z.tanh()).abs() <= 3e-16, "z = {z}");
        }
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Tanh.apply(800.0), 1.0);
        assert_eq!(Activation::Tanh.apply(-800.0), -1.0);
    }

    fn random_batch(seed: u64, n: usize, arch: &Architecture) -> Vec<TrainExample> {
        let mut rng = Stream::new(seed, "batch").rng(0);
        (0..n)
            .map(|i| TrainExample {
                x: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
                cond: if i % 3 == 0 {
                    Condition::Null
                } else {
                    Condition::token(
                        rng.random_range(0..arch.n_concepts as u32),
                        rng.random_range(0..arch.n_attributes as u32),
                    )
                },
                sigma: rng.random_range(0.05f64..5.0),
                noise: standard_normal2(&mut rng),
            })
            .collect()
    }

    /// Perturbs every parameter so biases and the table are not trivially small.
    fn jitter(p: &mut ParamVector, seed: u64, amount: f64) {
        let mut rng = Stream::new(seed, "jitter").rng(0);
        for v in p.values_mut() {
            *v += amount * rng.random_range(-1.0..1.0);
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        let a = arch();
        // table 6 x 16, inputs 2 + 9 + 16 = 27
        let expect = 6 * 16 + (27 * 64 + 64) + (64 * 64 + 64) + (64 * 2 + 2);
        assert_eq!(a.param_count(), expect);
        let p = init_params(&a, 1).unwrap();
        assert_eq!(p.len(), expect);
        let lin = Architecture::linear(3, 2);
        // table 6 x 2, inputs 2 + 5
        assert_eq!(lin.param_count(), 6 * 2 + 7 * 2 + 2);
    }

    #[test]
    fn invalid_architectures_rejected() {
        let mut a = arch();
        a.hidden = vec![64, 0];
        assert!(init_params(&a, 0).is_err());
        let mut a = arch();
        a.cond_input = CondInput::Concat(0);
        assert!(init_params(&a, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = arch();
        let p = init_params(&a, 9).unwrap();
        assert_eq!(p, init_params(&a, 9).unwrap());
        assert_ne!(p, init_params(&a, 10).unwrap());
        for slot in &p.shape.layers {
            assert!(p.values[slot.b..slot.b + slot.outputs].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn first_layer_weight_std_follows_fan_in() {
        let mut a = arch();
        a.cond_input = CondInput::Concat(64 - 2 - a.sigma_feature_count());
        let p = init_params(&a, 4).unwrap();
        let slot = p.shape.layers[0];
        assert_eq!(slot.inputs, 64);
        let w = &p.values[slot.w..slot.b];
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = 1.0 / 64f64.sqrt();
        assert!((std / target - 1.0).abs() < 0.1, "{std} vs {target}");
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = ParamVector::zeros(Shape::new(arch()).unwrap());
        assert_eq!(p.forward([1.3, -2.0], 0.4, &Condition::token(1, 1)).unwrap(), [0.0, 0.0]);
        assert_eq!(p.forward([5.0, 2.0], 7.0, &Condition::Null).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_and_checks_inputs() {
        let p = init_params(&arch(), 3).unwrap();
        let c = Condition::token(2, 1);
        let a = p.forward([0.3, 0.1], 0.9, &c).unwrap();
        let b = p.forward([0.3, 0.1], 0.9, &c).unwrap();
        assert_eq!(a, b);
        assert!(p.forward([0.0, 0.0], 1.0, &Condition::token(3, 0)).is_err());
        assert!(p.forward([0.0, 0.0], 1.0, &Condition::token(0, 2)).is_err());
        assert!(p.forward([0.0, 0.0], 0.0, &c).is_err());
    }

    #[test]
    fn null_output_ignores_token_rows() {
        let mut p = init_params(&arch(), 3).unwrap();
        jitter(&mut p, 1, 0.3);
        let before = p.forward([0.7, -1.2], 0.5, &Condition::Null).unwrap();
        let token_rows = (p.arch().table_rows() - 1) * p.shape.embed_width;
        for v in &mut p.values_mut()[..token_rows] {
            *v += 1.5;
        }
        assert_eq!(before, p.forward([0.7, -1.2], 0.5, &Condition::Null).unwrap());
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_grad() {
        let a = arch();
        let p = ParamVector::zeros(Shape::new(a.clone()).unwrap());
        let batch: Vec<_> = random_batch(2, 6, &a)
            .into_iter()
            .map(|e| TrainExample { noise: [0.0, 0.0], ..e })
            .collect();
        let (loss, grad) = p.loss_and_grad(&batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_gives_same_mean() {
        let a = arch();
        let mut p = init_params(&a, 5).unwrap();
        jitter(&mut p, 2, 0.05);
        let batch = random_batch(3, 8, &a);
        let double: Vec<_> = batch.iter().chain(batch.iter()).copied().collect();
        let (l1, g1) = p.loss_and_grad(&batch).unwrap();
        let (l2, g2) = p.loss_and_grad(&double).unwrap();
        assert!((l1 - l2).abs() <= 1e-14 * l1.abs().max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-13 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let p = init_params(&arch(), 5).unwrap();
        assert!(p.loss_and_grad(&[]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (k, a) in [arch(), Architecture::linear(3, 2), {
            let mut s = arch();
            s.activation = Activation::Silu;
            s.hidden = vec![16, 8];
            s
        }]
        .into_iter()
        .enumerate()
        {
            let mut p = init_params(&a, 11 + k as u64).unwrap();
            jitter(&mut p, 3 + k as u64, 0.1);
            let batch = random_batch(7 + k as u64, 8, &a);
            let err = max_fd_rel_error(&p, &batch, 1e-5).unwrap();
            assert!(err < 1e-4, "arch {k}: {err}");
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = arch();
        let t0 = init_params(&a, 1).unwrap();
        let t1 = init_params(&a, 2).unwrap();
        assert_eq!(interpolate(&t0, &t1, 0.0).unwrap(), t0);
        assert_eq!(interpolate(&t0, &t1, 1.0).unwrap(), t1);
        let zeros = ParamVector::zeros(t0.shape.clone());
        let twos = ParamVector::from_values(t0.shape.clone(), vec![2.0; t0.len()]).unwrap();
        let mid = interpolate(&zeros, &twos, 0.5).unwrap();
        assert!(mid.values().iter().all(|&v| v == 1.0));
        assert!(interpolate(&t0, &t1, 1.5).is_err());
        assert!(interpolate(&t0, &t1, -0.1).is_err());
        let other = init_params(&Architecture::linear(3, 2), 1).unwrap();
        assert!(interpolate(&t0, &other, 0.5).is_err());
    }

    #[test]
    fn interpolation_at_zero_forward_is_exact() {
        let a = arch();
        let t0 = init_params(&a, 1).unwrap();
        let t1 = init_params(&a, 2).unwrap();
        let tw = interpolate(&t0, &t1, 0.0).unwrap();
        let c = Condition::token(0, 1);
        assert_eq!(tw.forward([1.0, 2.0], 0.3, &c).unwrap(), t0.forward([1.0, 2.0], 0.3, &c).unwrap());
    }

    #[test]
    fn from_values_validates() {
        let shape = Shape::new(arch()).unwrap();
        assert!(ParamVector::from_values(shape.clone(), vec![0.0; 3]).is_err());
        let mut v = vec![0.0; shape.len()];
        v[5] = f64::NAN;
        assert!(ParamVector::from_values(shape, v).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn interpolation_is_symmetric(omega in 0.0f64..=1.0, s0 in 0u64..50, s1 in 50u64..100) {
                let a = Architecture::standard(2, 2);
                let t0 = init_params(&a, s0).unwrap();
                let t1 = init_params(&a, s1).unwrap();
                let ab = interpolate(&t0, &t1, omega).unwrap();
                let ba = interpolate(&t1, &t0, 1.0 - omega).unwrap();
                for (x, y) in ab.values().iter().zip(ba.values()) {
                    prop_assert!((x - y).abs() <= 1e-15);
                }
            }

            #[test]
            fn interpolation_is_affine(w0 in 0.0f64..=1.0, w1 in 0.0f64..=1.0) {
                let a = Architecture::standard(2, 2);
                let t0 = init_params(&a, 1).unwrap();
                let t1 = init_params(&a, 2).unwrap();
                let p = interpolate(&t0, &t1, w0).unwrap();
                let q = interpolate(&t0, &t1, w1).unwrap();
                let m = interpolate(&t0, &t1, 0.5 * (w0 + w1)).unwrap();
                for ((x, y), z) in p.values().iter().zip(q.values()).zip(m.values()) {
                    prop_assert!((0.5 * (x + y) - z).abs() <= 1e-12);
                }
            }
        }
    }
}
