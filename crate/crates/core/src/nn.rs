//! Dense network substrate: affine, batch normalization, ReLU and dropout
//! layers with hand-written backward passes, plus the Adam optimizer.
//!
//! Batches are row-major: one sample per row. Affine weights are stored
//! `out × in`, so a layer computes `Y = X·Wᵀ + b`.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BATCHNORM_MOMENTUM: f64 = 0.1;
pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine {
        weights: Array2<f64>,
        bias: Array1<f64>,
    },
    BatchNorm {
        gamma: Array1<f64>,
        beta: Array1<f64>,
        running_mean: Array1<f64>,
        running_var: Array1<f64>,
        momentum: f64,
        eps: f64,
    },
    Relu,
    Dropout {
        rate: f64,
    },
}

impl Layer {
    pub fn affine(weights: Array2<f64>, bias: Array1<f64>) -> Self {
        Layer::Affine { weights, bias }
    }

    pub fn batch_norm(width: usize) -> Self {
        Layer::BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: BATCHNORM_MOMENTUM,
            eps: BATCHNORM_EPS,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Affine { .. } => "affine",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Relu => "relu",
            Layer::Dropout { .. } => "dropout",
        }
    }

    /// Fixed input width, if the layer has one.
    fn width_in(&self) -> Option<usize> {
        match self {
            Layer::Affine { weights, .. } => Some(weights.ncols()),
            Layer::BatchNorm { gamma, .. } => Some(gamma.len()),
            _ => None,
        }
    }

    fn width_out(&self) -> Option<usize> {
        match self {
            Layer::Affine { weights, .. } => Some(weights.nrows()),
            Layer::BatchNorm { gamma, .. } => Some(gamma.len()),
            _ => None,
        }
    }
}

/// Per-layer values kept for the backward pass.
#[derive(Debug, Clone)]
enum Cache {
    Affine { input: Array2<f64> },
    BatchNorm { normalized: Array2<f64>, inv_std: Array1<f64> },
    Relu { active: Array2<bool> },
    Dropout { mask: Option<Array2<f64>> },
}

#[derive(Debug, Clone)]
pub struct ForwardTape {
    mode: Mode,
    caches: Vec<Cache>,
}

impl ForwardTape {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Affine { weights: Array2<f64>, bias: Array1<f64> },
    BatchNorm { gamma: Array1<f64>, beta: Array1<f64> },
    None,
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<LayerGrad>);

impl Gradients {
    /// Flat views in the same order as [`Network::params_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.0 {
            match g {
                LayerGrad::Affine { weights, bias } => {
                    out.push(weights.as_slice().expect("standard layout"));
                    out.push(bias.as_slice().expect("standard layout"));
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.push(gamma.as_slice().expect("standard layout"));
                    out.push(beta.as_slice().expect("standard layout"));
                }
                LayerGrad::None => {}
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(−√(6/fan_in), √(6/fan_in))`, for layers feeding a ReLU.
    HeUniform,
    /// `U(−√(6/(fan_in+fan_out)), …)`, for linear heads.
    GlorotUniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Affine { inputs: usize, outputs: usize, init: Init },
    BatchNorm { width: usize },
    Relu,
    Dropout { rate: f64 },
}

/// Hidden blocks `affine → batchnorm → ReLU → dropout` followed by a plain
/// affine output layer.
pub fn dense_stack(input: usize, hidden: &[usize], output: usize, dropout: f64) -> Vec<LayerSpec> {
    let mut spec = Vec::with_capacity(hidden.len() * 4 + 1);
    let mut width = input;
    for &h in hidden {
        spec.push(LayerSpec::Affine {
            inputs: width,
            outputs: h,
            init: Init::HeUniform,
        });
        spec.push(LayerSpec::BatchNorm { width: h });
        spec.push(LayerSpec::Relu);
        spec.push(LayerSpec::Dropout { rate: dropout });
        width = h;
    }
    spec.push(LayerSpec::Affine {
        inputs: width,
        outputs: output,
        init: Init::GlorotUniform,
    });
    spec
}

/// An ordered list of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

pub fn init_network(spec: &[LayerSpec], seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.len());
    for s in spec {
        let layer = match *s {
            LayerSpec::Affine { inputs, outputs, init } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::InvalidArgument("layer widths must be at least 1".into()));
                }
                let bound = match init {
                    Init::HeUniform => (6.0 / inputs as f64).sqrt(),
                    Init::GlorotUniform => (6.0 / (inputs + outputs) as f64).sqrt(),
                };
                let weights = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..bound));
                Layer::affine(weights, Array1::zeros(outputs))
            }
            LayerSpec::BatchNorm { width } => {
                if width == 0 {
                    return Err(Error::InvalidArgument("layer widths must be at least 1".into()));
                }
                Layer::batch_norm(width)
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
                }
                Layer::Dropout { rate }
            }
        };
        layers.push(layer);
    }
    Network::new(layers)
}

fn shape_err(i: usize, layer: &Layer, expected: usize, found: usize) -> Error {
    Error::Shape(format!(
        "layer {i} ({}) expects width {expected}, got {found}",
        layer.kind()
    ))
}

impl Network {
    /// Checks that consecutive layer widths agree.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            if let (Some(w), Some(expect)) = (width, layer.width_in()) {
                if w != expect {
                    return Err(shape_err(i, layer, expect, w));
                }
            }
            if let Layer::Affine { weights, bias } = layer {
                if bias.len() != weights.nrows() {
                    return Err(Error::Shape(format!("layer {i}: bias length mismatch")));
                }
            }
            if let Some(w) = layer.width_out() {
                width = Some(w);
            }
        }
        if width.is_none() {
            return Err(Error::InvalidArgument("network has no parametric layer".into()));
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers.iter().find_map(Layer::width_in).expect("validated")
    }

    pub fn output_dim(&self) -> usize {
        self.layers.iter().rev().find_map(Layer::width_out).expect("validated")
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm { .. }))
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Affine { weights, bias } => {
                    out.push(weights.as_slice().expect("standard layout"));
                    out.push(bias.as_slice().expect("standard layout"));
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma.as_slice().expect("standard layout"));
                    out.push(beta.as_slice().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    /// Trainable tensors in layer order (weights before bias, gamma before beta).
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Affine { weights, bias } => {
                    out.push(weights.as_slice_mut().expect("standard layout"));
                    out.push(bias.as_slice_mut().expect("standard layout"));
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma.as_slice_mut().expect("standard layout"));
                    out.push(beta.as_slice_mut().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        let d = self.input_dim();
        if x.ncols() != d {
            return Err(Error::Shape(format!("network expects {d} input columns, got {}", x.ncols())));
        }
        Ok(())
    }

    /// Runs the batch through every layer. In train mode batch-norm layers use
    /// batch statistics and update their running estimates, and dropout draws
    /// fresh masks from `rng`; inference mode is deterministic.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        x: &Array2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardTape)> {
        self.check_input(x)?;
        if mode == Mode::Train && x.nrows() < 2 && self.has_batch_norm() {
            return Err(Error::InvalidArgument(
                "batch normalization in train mode needs a batch of at least 2".into(),
            ));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (out, cache) = layer_forward(layer, h, mode, rng);
            caches.push(cache);
            h = out;
        }
        Ok((h, ForwardTape { mode, caches }))
    }

    /// Inference-mode forward pass without a tape.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Affine { weights, bias } => h.dot(&weights.t()) + bias,
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                    ..
                } => {
                    let scale = Zip::from(gamma).and(running_var).map_collect(|g, v| g / (v + eps).sqrt());
                    let shift = beta - &(&scale * running_mean);
                    h * &scale + &shift
                }
                Layer::Relu => h.mapv_into(|v| v.max(0.0)),
                Layer::Dropout { .. } => h,
            };
        }
        Ok(h)
    }

    /// Propagates `grad_out = ∂L/∂output` back through a train-mode tape.
    pub fn backward(&self, tape: &ForwardTape, grad_out: &Array2<f64>) -> Result<(Array2<f64>, Gradients)> {
        if tape.mode != Mode::Train {
            return Err(Error::TapeMismatch("backward requires a train-mode tape".into()));
        }
        if tape.caches.len() != self.layers.len() {
            return Err(Error::TapeMismatch(format!(
                "tape has {} layers, network has {}",
                tape.caches.len(),
                self.layers.len()
            )));
        }
        if grad_out.ncols() != self.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient has {} columns, network emits {}",
                grad_out.ncols(),
                self.output_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            let (gin, pg) = layer_backward(layer, cache, g)?;
            grads.push(pg);
            g = gin;
        }
        grads.reverse();
        Ok((g, Gradients(grads)))
    }
}

fn layer_forward<R: Rng + ?Sized>(layer: &mut Layer, h: Array2<f64>, mode: Mode, rng: &mut R) -> (Array2<f64>, Cache) {
    match layer {
        Layer::Affine { weights, bias } => {
            let out = h.dot(&weights.t()) + &*bias;
            (out, Cache::Affine { input: h })
        }
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum,
            eps,
        } => match mode {
            Mode::Train => {
                let b = h.nrows() as f64;
                let mean = h.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = h - &mean;
                let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
                let inv_std = var.mapv(|v| 1.0 / (v + *eps).sqrt());
                let normalized = centered * &inv_std;
                let out = &normalized * &*gamma + &*beta;
                let m = *momentum;
                // running variance tracks the unbiased estimate
                Zip::from(&mut *running_mean).and(&mean).for_each(|r, &v| *r = (1.0 - m) * *r + m * v);
                Zip::from(&mut *running_var)
                    .and(&var)
                    .for_each(|r, &v| *r = (1.0 - m) * *r + m * v * b / (b - 1.0));
                (out, Cache::BatchNorm { normalized, inv_std })
            }
            Mode::Inference => {
                let inv_std = running_var.mapv(|v| 1.0 / (v + *eps).sqrt());
                let normalized = (h - &*running_mean) * &inv_std;
                let out = &normalized * &*gamma + &*beta;
                (out, Cache::BatchNorm { normalized, inv_std })
            }
        },
        Layer::Relu => {
            let active = h.mapv(|v| v > 0.0);
            (h.mapv_into(|v| v.max(0.0)), Cache::Relu { active })
        }
        Layer::Dropout { rate } => {
            if mode == Mode::Inference || *rate == 0.0 {
                return (h, Cache::Dropout { mask: None });
            }
            let keep = 1.0 / (1.0 - *rate);
            let mask = h.mapv(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep });
            (h * &mask, Cache::Dropout { mask: Some(mask) })
        }
    }
}

fn layer_backward(layer: &Layer, cache: &Cache, g: Array2<f64>) -> Result<(Array2<f64>, LayerGrad)> {
    match (layer, cache) {
        (Layer::Affine { weights, .. }, Cache::Affine { input }) => {
            let dw = g.t().dot(input).as_standard_layout().into_owned();
            let db = g.sum_axis(Axis(0));
            let dx = g.dot(weights);
            Ok((dx, LayerGrad::Affine { weights: dw, bias: db }))
        }
        (Layer::BatchNorm { gamma, .. }, Cache::BatchNorm { normalized, inv_std }) => {
            let b = g.nrows() as f64;
            let dgamma = (&g * normalized).sum_axis(Axis(0));
            let dbeta = g.sum_axis(Axis(0));
            // ∂L/∂x = inv_std/B · (B·ĝ − Σĝ − x̂·Σ(ĝ⊙x̂)),  ĝ = g⊙γ
            let ghat = g * gamma;
            let sum_g = ghat.sum_axis(Axis(0));
            let sum_gx = (&ghat * normalized).sum_axis(Axis(0));
            let dx = ((ghat * b - &sum_g) - &(normalized * &sum_gx)) * &(inv_std / b);
            Ok((dx, LayerGrad::BatchNorm { gamma: dgamma, beta: dbeta }))
        }
        (Layer::Relu, Cache::Relu { active }) => {
            let mut dx = g;
            Zip::from(&mut dx).and(active).for_each(|v, &a| {
                if !a {
                    *v = 0.0
                }
            });
            Ok((dx, LayerGrad::None))
        }
        (Layer::Dropout { .. }, Cache::Dropout { mask }) => {
            let dx = match mask {
                Some(m) => g * m,
                None => g,
            };
            Ok((dx, LayerGrad::None))
        }
        (layer, _) => Err(Error::TapeMismatch(format!(
            "cached values do not belong to a {} layer",
            layer.kind()
        ))),
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update. Moments are allocated on the first call and the
    /// tensor shapes must stay fixed afterwards. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape(format!("tensor {i}: {} parameters, {} gradients", p.len(), g.len())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor: i });
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len() || self.first.iter().zip(&grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::Shape("optimizer state does not match parameter shapes".into()));
        }

        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Mean over samples of the squared L2 norm of `a − b`, with its gradient w.r.t. `a`.
pub fn mse_with_grad(a: &Array2<f64>, b: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("mse operands {:?} and {:?}", a.dim(), b.dim())));
    }
    let n = a.nrows().max(1) as f64;
    let diff = a - b;
    let value = diff.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}
