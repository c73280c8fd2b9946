//! Mixture density network over 2D step displacements.
//!
//! A feed-forward net with ReLU hidden layers maps a window of past
//! displacements to the parameters of a mixture of bivariate Gaussians over
//! the next displacement. The head emits `6 * I` values per input, grouped by
//! parameter kind:
//!
//! ```text
//! [logit_0..I | mu_x_0..I | mu_y_0..I | log_sigma_x_0..I | log_sigma_y_0..I | rho_0..I]
//! ```
//!
//! mapped through softmax, identity, exp, exp and tanh respectively.
//!
//! Inputs and targets are standardized with a per-coordinate [`Scaler`] stored
//! in the model; [`MdnModel::forward`] takes physical displacements and returns
//! the mixture in physical units, so [`nll_loss`] is a physical-unit likelihood.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Displacements per input window.
pub const WINDOW_STEPS: usize = 32;
/// Input width of the standard model: 32 two-dimensional displacements.
pub const WINDOW_INPUTS: usize = 2 * WINDOW_STEPS;
/// Head outputs per mixture component.
pub const PARAMS_PER_COMPONENT: usize = 6;

/// Scale of the head layer's He-uniform limit.
pub const HEAD_INIT_SCALE: f64 = 0.1;

const LOG_SIGMA_BOUND: f64 = 20.0;
const RHO_PRE_BOUND: f64 = 7.0;
const LOG_FLOOR: f64 = 1e-300;
/// Rows per GEMM block when evaluating large sets.
const EVAL_BLOCK: usize = 4096;

const CHECKPOINT_MAGIC: &[u8; 8] = b"VNFMDNCK";
const CHECKPOINT_VERSION: u32 = 1;

/// A 2D displacement in meters per time step.
pub type Vec2 = [f64; 2];

/// The next-step displacement a window is trained to predict.
pub type StepTarget = Vec2;

/// Flattened window of consecutive displacements `[dx0, dy0, dx1, dy1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow(Vec<f64>);

impl FeatureWindow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "window must hold an even, nonzero number of values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("window contains a non-finite value"));
        }
        Ok(FeatureWindow(values))
    }

    pub fn from_deltas(deltas: &[Vec2]) -> Result<Self> {
        FeatureWindow::new(deltas.iter().flat_map(|d| d.iter().copied()).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec2,
    pub std: Vec2,
    pub rho: f64,
}

impl Component {
    pub fn log_density(&self, t: Vec2) -> f64 {
        let dx = (t[0] - self.mean[0]) / self.std[0];
        let dy = (t[1] - self.mean[1]) / self.std[1];
        let one_m = 1.0 - self.rho * self.rho;
        let q = (dx * dx - 2.0 * self.rho * dx * dy + dy * dy) / one_m;
        -(2.0 * PI).ln() - self.std[0].ln() - self.std[1].ln() - 0.5 * one_m.ln() - 0.5 * q
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let c = (1.0 - self.rho * self.rho).max(0.0).sqrt();
        [
            self.mean[0] + self.std[0] * z1,
            self.mean[1] + self.std[1] * (self.rho * z1 + c * z2),
        ]
    }
}

/// A bivariate Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub components: Vec<Component>,
}

impl MixtureParams {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let m = MixtureParams { components };
        m.validate()?;
        Ok(m)
    }

    /// A single Gaussian with the given moments.
    pub fn gaussian(mean: Vec2, std: Vec2, rho: f64) -> Result<Self> {
        MixtureParams::new(vec![Component {
            weight: 1.0,
            mean,
            std,
            rho,
        }])
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let mut total = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            if !(0.0..=1.0).contains(&c.weight) {
                return Err(Error::invalid(format!("component {i} weight {} not in [0, 1]", c.weight)));
            }
            if !(c.std[0] > 0.0 && c.std[1] > 0.0 && c.std.iter().all(|s| s.is_finite())) {
                return Err(Error::invalid(format!("component {i} has non-positive sigma")));
            }
            if !(c.rho.abs() < 1.0) {
                return Err(Error::invalid(format!("component {i} has |rho| >= 1")));
            }
            if !c.mean.iter().all(|m| m.is_finite()) {
                return Err(Error::invalid(format!("component {i} has a non-finite mean")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn log_density(&self, t: StepTarget) -> f64 {
        log_sum_exp(self.components.iter().map(|c| c.weight.ln() + c.log_density(t)))
    }

    /// Mixture density at `t`.
    pub fn density(&self, t: StepTarget) -> f64 {
        self.components.iter().map(|c| c.weight * c.log_density(t).exp()).sum()
    }

    pub fn mean(&self) -> Vec2 {
        self.components.iter().fold([0.0, 0.0], |acc, c| {
            [acc[0] + c.weight * c.mean[0], acc[1] + c.weight * c.mean[1]]
        })
    }

    /// Draws a component by weight, then a correlated bivariate normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StepTarget {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                return c.sample(rng);
            }
        }
        // Rounding left `acc` just below `u`: take the last component that carries weight.
        let c = self.components.iter().rev().find(|c| c.weight > 0.0).unwrap_or(&self.components[0]);
        c.sample(rng)
    }
}

/// Mixture density at `target`.
pub fn density(params: &MixtureParams, target: StepTarget) -> f64 {
    params.density(target)
}

/// Draws one displacement from `params`.
pub fn sample<R: Rng + ?Sized>(params: &MixtureParams, rng: &mut R) -> StepTarget {
    params.sample(rng)
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-coordinate standardization of displacements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec2,
    pub std: Vec2,
}

impl Default for Scaler {
    fn default() -> Self {
        Scaler {
            mean: [0.0, 0.0],
            std: [1.0, 1.0],
        }
    }
}

impl Scaler {
    /// Fits mean and std of every displacement appearing in `set`.
    pub fn fit(set: &WindowSet) -> Scaler {
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        let mut n = 0usize;
        let mut push = |x: f64, y: f64| {
            sum[0] += x;
            sum[1] += y;
            sq[0] += x * x;
            sq[1] += y * y;
        };
        for row in set.inputs.rows() {
            for d in row.as_slice().expect("standard layout").chunks_exact(2) {
                push(d[0], d[1]);
                n += 1;
            }
        }
        for row in set.targets.rows() {
            push(row[0], row[1]);
            n += 1;
        }
        if n == 0 {
            return Scaler::default();
        }
        let nf = n as f64;
        let mut out = Scaler::default();
        for k in 0..2 {
            out.mean[k] = sum[k] / nf;
            let var = (sq[k] / nf - out.mean[k] * out.mean[k]).max(0.0);
            let sd = var.sqrt();
            out.std[k] = if sd > 1e-12 { sd } else { 1.0 };
        }
        out
    }

    fn log_det(&self) -> f64 {
        self.std[0].ln() + self.std[1].ln()
    }
}

/// Windows and their next-step targets, stored row-wise in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl WindowSet {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() || targets.ncols() != 2 {
            return Err(Error::invalid("inputs and targets disagree in shape"));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("window set contains a non-finite value"));
        }
        Ok(WindowSet { inputs, targets })
    }

    pub fn from_pairs(pairs: &[(FeatureWindow, StepTarget)]) -> Result<Self> {
        let width = pairs.first().map_or(WINDOW_INPUTS, |p| p.0.len());
        let mut inputs = Array2::zeros((pairs.len(), width));
        let mut targets = Array2::zeros((pairs.len(), 2));
        for (i, (w, t)) in pairs.iter().enumerate() {
            if w.len() != width {
                return Err(Error::invalid("windows of different widths in one set"));
            }
            inputs.row_mut(i).assign(&ndarray::aview1(w.values()));
            targets[[i, 0]] = t[0];
            targets[[i, 1]] = t[1];
        }
        WindowSet::new(inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> WindowSet {
        WindowSet {
            inputs: self.inputs.select(Axis(0), rows),
            targets: self.targets.select(Axis(0), rows),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> WindowSet {
        WindowSet {
            inputs: self.inputs.slice(s![start..end, ..]).to_owned(),
            targets: self.targets.slice(s![start..end, ..]).to_owned(),
        }
    }

    /// Concatenates two sets of the same width.
    pub fn concat(&self, other: &WindowSet) -> Result<WindowSet> {
        let inputs = ndarray::concatenate(Axis(0), &[self.inputs.view(), other.inputs.view()])
            .map_err(|e| Error::invalid(e.to_string()))?;
        let targets = ndarray::concatenate(Axis(0), &[self.targets.view(), other.targets.view()])
            .map_err(|e| Error::invalid(e.to_string()))?;
        Ok(WindowSet { inputs, targets })
    }
}

/// Layer sizes of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub components: usize,
}

impl Default for Architecture {
    /// 64 inputs, ReLU layers of 512 and 128, and a 12-wide head (two components).
    fn default() -> Self {
        Architecture {
            input_dim: WINDOW_INPUTS,
            hidden: vec![512, 128],
            components: 2,
        }
    }
}

impl Architecture {
    pub fn head_dim(&self) -> usize {
        PARAMS_PER_COMPONENT * self.components
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.input_dim % 2 != 0 {
            return Err(Error::invalid("input width must be a positive even number"));
        }
        if self.components == 0 {
            return Err(Error::invalid("at least one mixture component is required"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden layers must be nonempty"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.head_dim())) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdnModel {
    arch: Architecture,
    layers: Vec<Dense>,
    scaler: Scaler,
    seed: u64,
}

/// Gradient of the mean NLL, one entry per layer.
pub type Gradients = Vec<Dense>;

struct ForwardCache {
    /// Input to each layer (normalized inputs first), post-activation.
    activations: Vec<Array2<f64>>,
    head: Array2<f64>,
}

impl MdnModel {
    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    /// The head's limit is scaled by [`HEAD_INIT_SCALE`], so an untrained
    /// model emits nearly the same mixture for every window.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::seeded(seed);
        let dims = arch.layer_dims();
        let head = dims.len() - 1;
        let layers = dims
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, fan_out))| {
                let gain = if i == head { HEAD_INIT_SCALE } else { 1.0 };
                let limit = gain * (6.0 / fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_in, fan_out), |_| r.random_range(-limit..limit));
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(MdnModel {
            arch,
            layers,
            scaler: Scaler::default(),
            seed,
        })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layer_dims().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect();
        Ok(MdnModel {
            arch,
            layers,
            scaler: Scaler::default(),
            seed: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn components(&self) -> usize {
        self.arch.components
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    pub fn set_scaler(&mut self, scaler: Scaler) {
        self.scaler = scaler;
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn normalize_inputs(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        let mut z = inputs.to_owned();
        let (m, sd) = (self.scaler.mean, self.scaler.std);
        for mut row in z.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - m[j % 2]) / sd[j % 2];
            }
        }
        z
    }

    fn forward_cached(&self, inputs: ArrayView2<f64>) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut x = self.normalize_inputs(inputs);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weights);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(x);
            x = z;
        }
        ForwardCache { activations, head: x }
    }

    /// Raw head outputs for a batch of physical-unit windows.
    pub fn head_outputs(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        self.forward_cached(inputs).head
    }

    /// Normalized-space mixture encoded in one head row.
    fn normalized_mixture(&self, head: &[f64]) -> MixtureParams {
        let k = self.arch.components;
        let logits = &head[..k];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let components = (0..k)
            .map(|i| Component {
                weight: exps[i] / total,
                mean: [head[k + i], head[2 * k + i]],
                std: [
                    head[3 * k + i].clamp(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND).exp(),
                    head[4 * k + i].clamp(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND).exp(),
                ],
                rho: head[5 * k + i].clamp(-RHO_PRE_BOUND, RHO_PRE_BOUND).tanh(),
            })
            .collect();
        MixtureParams { components }
    }

    fn to_physical(&self, mut m: MixtureParams) -> MixtureParams {
        let sc = &self.scaler;
        for c in &mut m.components {
            for k in 0..2 {
                c.mean[k] = sc.mean[k] + sc.std[k] * c.mean[k];
                c.std[k] *= sc.std[k];
            }
        }
        m
    }

    /// Mixture over the next displacement given one window, in physical units.
    pub fn forward(&self, window: &FeatureWindow) -> Result<MixtureParams> {
        if window.len() != self.arch.input_dim {
            return Err(Error::invalid(format!(
                "window has {} values, model expects {}",
                window.len(),
                self.arch.input_dim
            )));
        }
        let view = ArrayView2::from_shape((1, window.len()), window.values()).expect("row shape");
        Ok(self.forward_batch(view).pop().expect("one row"))
    }

    /// Mixtures for every row of `inputs` (physical units).
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Vec<MixtureParams> {
        let head = self.head_outputs(inputs);
        head.rows()
            .into_iter()
            .map(|row| self.to_physical(self.normalized_mixture(row.as_slice().expect("standard layout"))))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        MdnModel::read_from(&mut r)
    }

    /// Writes the checkpoint layout documented in the crate README.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.arch.input_dim as u32).to_le_bytes())?;
        w.write_all(&(self.arch.components as u32).to_le_bytes())?;
        w.write_all(&(self.arch.hidden.len() as u32).to_le_bytes())?;
        for &h in &self.arch.hidden {
            w.write_all(&(h as u32).to_le_bytes())?;
        }
        for v in [self.scaler.mean[0], self.scaler.mean[1], self.scaler.std[0], self.scaler.std[1]] {
            w.write_all(&v.to_le_bytes())?;
        }
        for layer in &self.layers {
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint truncated before magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an MDN checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let seed = read_u64(r)?;
        let input_dim = read_u32(r)? as usize;
        let components = read_u32(r)? as usize;
        let n_hidden = read_u32(r)? as usize;
        if n_hidden > 64 {
            return Err(Error::Format(format!("implausible hidden layer count {n_hidden}")));
        }
        let hidden = (0..n_hidden).map(|_| read_u32(r).map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
        let arch = Architecture {
            input_dim,
            hidden,
            components,
        };
        arch.validate().map_err(|e| Error::Format(e.to_string()))?;
        let scaler = Scaler {
            mean: [read_f64(r)?, read_f64(r)?],
            std: [read_f64(r)?, read_f64(r)?],
        };
        let mut model = MdnModel::zeros(arch)?;
        model.seed = seed;
        model.scaler = scaler;
        for layer in &mut model.layers {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = read_f64(r)?;
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(model)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

/// Per-row NLL in normalized target space plus the gradient w.r.t. the head.
fn head_loss_and_grad(model: &MdnModel, head: &Array2<f64>, targets: ArrayView2<f64>, grad: Option<&mut Array2<f64>>) -> Vec<f64> {
    let k = model.arch.components;
    let sc = model.scaler;
    let log_floor = LOG_FLOOR.ln();
    let mut losses = Vec::with_capacity(head.nrows());
    let mut grad = grad;
    for (r, hrow) in head.rows().into_iter().enumerate() {
        let h = hrow.as_slice().expect("standard layout");
        let mix = model.normalized_mixture(h);
        let t = [
            (targets[[r, 0]] - sc.mean[0]) / sc.std[0],
            (targets[[r, 1]] - sc.mean[1]) / sc.std[1],
        ];
        let log_terms: Vec<f64> = mix
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(t))
            .collect();
        let lse = log_sum_exp(log_terms.iter().copied());
        let floored = lse < log_floor || !lse.is_finite();
        losses.push(if floored { -log_floor } else { -lse });
        let Some(g) = grad.as_deref_mut() else { continue };
        let mut grow = g.row_mut(r);
        if floored {
            grow.fill(0.0);
            continue;
        }
        for (i, c) in mix.components.iter().enumerate() {
            let gamma = (log_terms[i] - lse).exp();
            let dx = (t[0] - c.mean[0]) / c.std[0];
            let dy = (t[1] - c.mean[1]) / c.std[1];
            let rho = c.rho;
            let one_m = 1.0 - rho * rho;
            let q = dx * dx - 2.0 * rho * dx * dy + dy * dy;
            grow[i] = c.weight - gamma;
            grow[k + i] = -gamma * (dx - rho * dy) / (c.std[0] * one_m);
            grow[2 * k + i] = -gamma * (dy - rho * dx) / (c.std[1] * one_m);
            let sx_free = h[3 * k + i].abs() < LOG_SIGMA_BOUND;
            let sy_free = h[4 * k + i].abs() < LOG_SIGMA_BOUND;
            grow[3 * k + i] = if sx_free { -gamma * (-1.0 + dx * (dx - rho * dy) / one_m) } else { 0.0 };
            grow[4 * k + i] = if sy_free { -gamma * (-1.0 + dy * (dy - rho * dx) / one_m) } else { 0.0 };
            let r_free = h[5 * k + i].abs() < RHO_PRE_BOUND;
            grow[5 * k + i] = if r_free {
                -gamma * (rho + dx * dy - rho * q / one_m)
            } else {
                0.0
            };
        }
    }
    losses
}

/// Mean negative log-likelihood of the targets under the model, in physical units.
pub fn nll_loss(model: &MdnModel, batch: &WindowSet) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("loss of an empty batch"));
    }
    check_width(model, batch)?;
    let mut total = 0.0;
    let mut start = 0;
    while start < batch.len() {
        let end = (start + EVAL_BLOCK).min(batch.len());
        let head = model.head_outputs(batch.inputs.slice(s![start..end, ..]));
        let losses = head_loss_and_grad(model, &head, batch.targets.slice(s![start..end, ..]), None);
        total += losses.iter().sum::<f64>();
        start = end;
    }
    Ok(total / batch.len() as f64 + model.scaler.log_det())
}

fn check_width(model: &MdnModel, batch: &WindowSet) -> Result<()> {
    if batch.inputs.ncols() != model.arch.input_dim {
        return Err(Error::invalid(format!(
            "batch windows have {} values, model expects {}",
            batch.inputs.ncols(),
            model.arch.input_dim
        )));
    }
    Ok(())
}

/// Mean NLL and its exact gradient with respect to every weight and bias.
pub fn backward(model: &MdnModel, batch: &WindowSet) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("gradient of an empty batch"));
    }
    check_width(model, batch)?;
    let n = batch.len() as f64;
    let cache = model.forward_cached(batch.inputs.view());
    let mut delta = Array2::zeros(cache.head.raw_dim());
    let losses = head_loss_and_grad(model, &cache.head, batch.targets.view(), Some(&mut delta));
    delta /= n;
    let loss = losses.iter().sum::<f64>() / n + model.scaler.log_det();

    let mut grads: Vec<Dense> = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate().rev() {
        let input = &cache.activations[i];
        let weights = input.t().dot(&delta);
        let bias = delta.sum_axis(Axis(0));
        if i > 0 {
            let mut back = delta.dot(&layer.weights.t());
            // `input` is the ReLU output of the previous layer.
            Zip::from(&mut back).and(input).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = back;
        }
        grads.push(Dense { weights, bias });
    }
    grads.reverse();
    Ok((loss, grads))
}

/// RMSprop: `acc = decay*acc + (1-decay)*g^2; w -= lr * g / (sqrt(acc) + eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    #[serde(skip)]
    accumulators: Vec<Dense>,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp::new(1e-4, 0.9, 1e-7)
    }
}

impl RmsProp {
    pub fn new(learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        RmsProp {
            learning_rate,
            decay,
            epsilon,
            accumulators: Vec::new(),
        }
    }

    pub fn accumulators(&self) -> &[Dense] {
        &self.accumulators
    }

    pub fn step(&mut self, model: &mut MdnModel, grads: &Gradients) {
        if self.accumulators.len() != model.layers.len() {
            self.accumulators = model
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect();
        }
        let (lr, rho, eps) = (self.learning_rate, self.decay, self.epsilon);
        for ((layer, acc), g) in model.layers.iter_mut().zip(&mut self.accumulators).zip(grads) {
            Zip::from(&mut layer.weights)
                .and(&mut acc.weights)
                .and(&g.weights)
                .for_each(|w, a, &g| {
                    *a = rho * *a + (1.0 - rho) * g * g;
                    *w -= lr * g / (a.sqrt() + eps);
                });
            Zip::from(&mut layer.bias).and(&mut acc.bias).and(&g.bias).for_each(|w, a, &g| {
                *a = rho * *a + (1.0 - rho) * g * g;
                *w -= lr * g / (a.sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 512,
            seed: 0,
        }
    }
}

/// Hyperparameters shared by offline training and in-simulation training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdnSettings {
    pub components: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for MdnSettings {
    fn default() -> Self {
        MdnSettings {
            components: 2,
            learning_rate: 1e-4,
            decay: 0.9,
            epsilon: 1e-7,
            epochs: 15,
            batch_size: 512,
        }
    }
}

impl MdnSettings {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            components: self.components,
            ..Architecture::default()
        }
    }

    pub fn optimizer(&self) -> RmsProp {
        RmsProp::new(self.learning_rate, self.decay, self.epsilon)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.batch_size == 0 {
            return Err(Error::Config("mdn components and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.epsilon > 0.0 && (0.0..1.0).contains(&self.decay)) {
            return Err(Error::Config("mdn learning_rate, decay or epsilon out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

/// Trains with shuffled minibatches; returns one entry per epoch, preceded by
/// the losses of the untrained model as epoch 0.
///
/// Epoch-0 train loss is a full pass; later train losses are the sample-weighted
/// mean of the minibatch losses seen during that epoch.
pub fn train(
    model: &mut MdnModel,
    train_set: &WindowSet,
    val_set: &WindowSet,
    config: &TrainConfig,
    optimizer: &mut RmsProp,
) -> Result<Vec<EpochLoss>> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let batch_size = if train_set.len() < config.batch_size {
        warn!(
            "training set has {} windows, fewer than one batch of {}; clamping batch size",
            train_set.len(),
            config.batch_size
        );
        train_set.len()
    } else {
        config.batch_size
    };
    let mut curve = vec![EpochLoss {
        epoch: 0,
        train_nll: nll_loss(model, train_set)?,
        val_nll: nll_loss(model, val_set)?,
    }];
    let mut shuffle_rng = rng::stream(config.seed, 0x5348_5546, 0);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch = train_set.select(chunk);
            let (loss, grads) = backward(model, &batch)?;
            optimizer.step(model, &grads);
            weighted += loss * chunk.len() as f64;
        }
        curve.push(EpochLoss {
            epoch,
            train_nll: weighted / train_set.len() as f64,
            val_nll: nll_loss(model, val_set)?,
        });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn tiny_arch() -> Architecture {
        Architecture {
            input_dim: 4,
            hidden: vec![3],
            components: 1,
        }
    }

    fn random_set(n: usize, width: usize, seed: u64) -> WindowSet {
        let mut r = rng::seeded(seed);
        let inputs = Array2::from_shape_fn((n, width), |_| r.random_range(-1.5..1.5));
        let targets = Array2::from_shape_fn((n, 2), |_| r.random_range(-1.0..1.0));
        WindowSet::new(inputs, targets).unwrap()
    }

    #[test]
    fn default_architecture_shapes() {
        let m = MdnModel::new(Architecture::default(), 1).unwrap();
        let shapes: Vec<_> = m.layers().iter().map(|l| l.weights.dim()).collect();
        assert_eq!(shapes, vec![(64, 512), (512, 128), (128, 12)]);
    }

    #[test]
    fn zero_model_outputs_unit_mixture() {
        let m = MdnModel::zeros(Architecture::default()).unwrap();
        let w = FeatureWindow::new(vec![0.3; 64]).unwrap();
        let mix = m.forward(&w).unwrap();
        assert_eq!(mix.len(), 2);
        for c in &mix.components {
            assert_eq!(c.weight, 0.5);
            assert_eq!(c.mean, [0.0, 0.0]);
            assert_eq!(c.std, [1.0, 1.0]);
            assert_eq!(c.rho, 0.0);
        }
    }

    #[test]
    fn forward_rejects_bad_windows() {
        let m = MdnModel::zeros(Architecture::default()).unwrap();
        assert!(FeatureWindow::new(vec![f64::NAN; 64]).is_err());
        assert!(FeatureWindow::new(vec![0.0; 3]).is_err());
        assert!(m.forward(&FeatureWindow::new(vec![0.0; 10]).unwrap()).is_err());
    }

    #[test]
    fn density_examples() {
        let g = MixtureParams::gaussian([0.0, 0.0], [1.0, 1.0], 0.0).unwrap();
        assert!((g.density([0.0, 0.0]) - 0.159_154_943_091_895_35).abs() < 1e-15);
        let c = g.components[0];
        let twice = MixtureParams::new(vec![
            Component { weight: 0.5, ..c },
            Component { weight: 0.5, ..c },
        ])
        .unwrap();
        for t in [[0.0, 0.0], [0.7, -1.2], [3.0, 2.0]] {
            assert!((twice.density(t) - g.density(t)).abs() < 1e-15);
            assert!((g.log_density(t) - g.density(t).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_examples() {
        let m = MdnModel::zeros(Architecture::default()).unwrap();
        let set = WindowSet::new(Array2::zeros((1, 64)), Array2::zeros((1, 2))).unwrap();
        assert!((nll_loss(&m, &set).unwrap() - (2.0 * PI).ln()).abs() < 1e-12);

        let set = random_set(5, 4, 9);
        let doubled = set.concat(&set).unwrap();
        let m = MdnModel::new(tiny_arch(), 3).unwrap();
        let a = nll_loss(&m, &set).unwrap();
        let b = nll_loss(&m, &doubled).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(nll_loss(&m, &set.slice(0, 0)).is_err());
    }

    #[test]
    fn sharp_component_on_target_gives_negative_loss() {
        let mut m = MdnModel::zeros(tiny_arch()).unwrap();
        // log sigma bias of -5 on both axes; target at the mean (0, 0).
        let head = m.layers_mut().last_mut().unwrap();
        head.bias[3] = -5.0;
        head.bias[4] = -5.0;
        let set = WindowSet::new(Array2::zeros((3, 4)), Array2::zeros((3, 2))).unwrap();
        assert!(nll_loss(&m, &set).unwrap() < -5.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let set = random_set(6, 4, 21);
        let mut m = MdnModel::new(tiny_arch(), 5).unwrap();
        let (_, grads) = backward(&m, &set).unwrap();
        let h = 1e-5;
        for li in 0..m.layers().len() {
            let (rows, cols) = m.layers()[li].weights.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let orig = m.layers()[li].weights[[r, c]];
                    m.layers_mut()[li].weights[[r, c]] = orig + h;
                    let up = nll_loss(&m, &set).unwrap();
                    m.layers_mut()[li].weights[[r, c]] = orig - h;
                    let down = nll_loss(&m, &set).unwrap();
                    m.layers_mut()[li].weights[[r, c]] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = grads[li].weights[[r, c]];
                    assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "layer {li} w[{r},{c}]: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn doubling_batch_keeps_gradient() {
        let set = random_set(7, 4, 2);
        let m = MdnModel::new(tiny_arch(), 8).unwrap();
        let (_, g1) = backward(&m, &set).unwrap();
        let (_, g2) = backward(&m, &set.concat(&set).unwrap()).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.weights.iter().zip(b.weights.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_loss() {
        let set = random_set(40, 4, 4);
        let val = random_set(10, 4, 5);
        let mut m = MdnModel::new(tiny_arch(), 6).unwrap();
        let before = m.clone();
        let mut opt = RmsProp::new(0.0, 0.9, 1e-7);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 1,
        };
        let curve = train(&mut m, &set, &val, &cfg, &mut opt).unwrap();
        assert_eq!(m, before);
        for e in &curve {
            assert_eq!(e.val_nll, curve[0].val_nll);
            assert!((e.train_nll - curve[0].train_nll).abs() < 1e-12);
        }
        assert!(opt.accumulators().iter().all(|a| a.weights.iter().all(|v| *v >= 0.0)));
    }

    #[test]
    fn training_is_deterministic_and_clamps_batch() {
        let set = random_set(30, 4, 4);
        let val = random_set(10, 4, 5);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 512,
            seed: 3,
        };
        let run = || {
            let mut m = MdnModel::new(tiny_arch(), 6).unwrap();
            train(&mut m, &set, &val, &cfg, &mut RmsProp::default()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train_nll.to_bits(), y.train_nll.to_bits());
            assert_eq!(x.val_nll.to_bits(), y.val_nll.to_bits());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = MdnModel::new(tiny_arch(), 77).unwrap();
        m.set_scaler(Scaler {
            mean: [0.5, -1.0],
            std: [2.0, 3.0],
        });
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = MdnModel::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(MdnModel::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        assert!(MdnModel::read_from(&mut &buf[..buf.len() - 3]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(MdnModel::read_from(&mut long.as_slice()).is_err());
    }

    #[test]
    fn sample_degenerate_and_correlated() {
        let mut r = rng::seeded(12);
        let g = MixtureParams::gaussian([3.0, -2.0], [1e-9, 1e-9], 0.0).unwrap();
        let s = g.sample(&mut r);
        assert!((s[0] - 3.0).abs() < 1e-6 && (s[1] + 2.0).abs() < 1e-6);

        let g = MixtureParams::gaussian([0.0, 0.0], [1.0, 2.0], 0.9).unwrap();
        let n = 100_000;
        let pts: Vec<Vec2> = (0..n).map(|_| g.sample(&mut r)).collect();
        let mean = |k: usize| pts.iter().map(|p| p[k]).sum::<f64>() / n as f64;
        let (mx, my) = (mean(0), mean(1));
        let cov = pts.iter().map(|p| (p[0] - mx) * (p[1] - my)).sum::<f64>() / n as f64;
        let vx = pts.iter().map(|p| (p[0] - mx).powi(2)).sum::<f64>() / n as f64;
        let vy = pts.iter().map(|p| (p[1] - my).powi(2)).sum::<f64>() / n as f64;
        let corr = cov / (vx * vy).sqrt();
        assert!((corr - 0.9).abs() < 0.01, "corr {corr}");
    }

    #[test]
    fn mixture_validation() {
        let c = Component {
            weight: 0.6,
            mean: [0.0, 0.0],
            std: [1.0, 1.0],
            rho: 0.0,
        };
        assert!(MixtureParams::new(vec![c]).is_err());
        assert!(MixtureParams::new(vec![c, Component { weight: 0.4, rho: 1.0, ..c }]).is_err());
        assert!(MixtureParams::new(vec![c, Component { weight: 0.4, std: [0.0, 1.0], ..c }]).is_err());
        assert!(MixtureParams::new(vec![]).is_err());
        assert!(MixtureParams::new(vec![c, Component { weight: 0.4, ..c }]).is_ok());
    }
}
