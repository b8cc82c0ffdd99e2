//! Training loops, ensembles and model persistence.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::architectures::{
    ael_pass, supervised_pass, vael_pass, ArchitectureSpec, ArchitectureTag, LossParts, ModelNets, LATENT_DIM,
};
use crate::data::{split, SplitIndices, Standardizer, CONSTANT_COLUMN_EPSILON};
use crate::error::{Error, Result};
use crate::io::write_atomic_str;
use crate::nn::{AdamState, Gradients, Layer, Network};
use crate::projection::ProjectionPair;

/// Fraction of rows held out per run.
pub const TEST_FRACTION: f64 = 0.2;

pub const MODEL_FORMAT: &str = "projlearn-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub seed: u64,
    pub architecture: ArchitectureSpec,
}

impl TrainingConfig {
    pub fn new(architecture: ArchitectureSpec, seed: u64) -> Self {
        TrainingConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.001,
            dropout_rate: 0.25,
            seed,
            architecture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        self.architecture.validate()
    }
}

/// A trained encoder/decoder pair with the standardizers of both spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ArchitectureSpec,
    pub nets: ModelNets,
    pub data_standardizer: Standardizer,
    pub projection_standardizer: Standardizer,
    /// Sample-weighted mean batch loss of each epoch.
    pub loss_history: Vec<LossParts>,
    pub config: TrainingConfig,
    pub seed: u64,
    pub train_seconds: f64,
}

impl TrainedModel {
    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Projects data rows (original units) to 2D (original projection units).
    pub fn encode(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let xs = self.data_standardizer.apply(x)?;
        let ys = self.encode_standardized(&xs)?;
        self.projection_standardizer.invert(&ys)
    }

    /// Maps 2D points (original projection units) back to data space.
    pub fn decode(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        let ys = self.projection_standardizer.apply(y)?;
        let xs = self.decode_standardized(&ys)?;
        self.data_standardizer.invert(&xs)
    }

    pub fn encode_standardized(&self, xs: &Array2<f64>) -> Result<Array2<f64>> {
        self.nets.encode_standardized(self.spec.tag, xs)
    }

    pub fn decode_standardized(&self, ys: &Array2<f64>) -> Result<Array2<f64>> {
        self.nets.decode_standardized(ys)
    }

    /// `epoch,loss,reconstruction,latent,kl` with 1-based epochs.
    pub fn training_log_csv(&self) -> String {
        let mut out = String::from("epoch,loss,reconstruction,latent,kl\n");
        for (i, p) in self.loss_history.iter().enumerate() {
            out.push_str(&format!("{},{},{},{},{}\n", i + 1, p.total, p.reconstruction, p.latent, p.kl));
        }
        out
    }
}

// Independent generator streams within one run.
const STREAM_ENCODER_INIT: u64 = 1;
const STREAM_DECODER_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_ENCODER_DROPOUT: u64 = 4;
const STREAM_DECODER_DROPOUT: u64 = 5;
const STREAM_EPSILON: u64 = 6;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    rand::Rng::random(&mut stream_rng(seed, stream))
}

fn select_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

/// Per-epoch batches; a trailing batch of one row is dropped because batch
/// normalization needs at least two samples.
fn epoch_batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size).filter(|b| b.len() >= 2)
}

fn apply_update(opt: &mut AdamState, net: &mut Network, grads: &Gradients) -> Result<()> {
    opt.step(net.params_mut(), grads.tensors())
}

fn check_finite(parts: &LossParts, epoch: usize, batch: usize) -> Result<()> {
    if parts.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { epoch, batch })
    }
}

fn numerical(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFiniteGradient { .. } => Error::NonFiniteLoss { epoch, batch },
        e => e,
    }
}

/// Trains one model on the rows in `indices.train`.
///
/// Errors report 1-based epoch and batch numbers.
pub fn train(pair: &ProjectionPair, indices: &SplitIndices, cfg: &TrainingConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let spec = &cfg.architecture;
    let (n, d) = (pair.data().n(), pair.data().d());
    if spec.input_dim != d {
        return Err(Error::Shape(format!(
            "architecture expects {} input dimensions, dataset has {d}",
            spec.input_dim
        )));
    }
    if indices.train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 training rows, got {}",
            indices.train.len()
        )));
    }
    if let Some(&bad) = indices.train.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!("training index {bad} out of range for {n} rows")));
    }

    let start = Instant::now();
    let x_train = select_rows(pair.data().values(), &indices.train);
    let y_train = select_rows(pair.coords(), &indices.train);
    let data_standardizer = Standardizer::fit(&x_train, CONSTANT_COLUMN_EPSILON)?;
    let projection_standardizer = Standardizer::fit(&y_train, CONSTANT_COLUMN_EPSILON)?;
    let xs = data_standardizer.apply(&x_train)?;
    let ys = projection_standardizer.apply(&y_train)?;

    let seed = cfg.seed;
    let mut nets = ModelNets::init(
        spec,
        cfg.dropout_rate,
        stream_seed(seed, STREAM_ENCODER_INIT),
        stream_seed(seed, STREAM_DECODER_INIT),
    )?;
    let loss_history = match spec.tag {
        ArchitectureTag::Pr => train_pr(&mut nets, &xs, &ys, cfg)?,
        ArchitectureTag::Ael | ArchitectureTag::Vael => train_end_to_end(&mut nets, &xs, &ys, cfg)?,
    };
    Ok(TrainedModel {
        spec: spec.clone(),
        nets,
        data_standardizer,
        projection_standardizer,
        loss_history,
        config: cfg.clone(),
        seed,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

fn accumulate(acc: &mut LossParts, p: &LossParts, w: f64) {
    acc.total += w * p.total;
    acc.reconstruction += w * p.reconstruction;
    acc.latent += w * p.latent;
    acc.kl += w * p.kl;
}

fn scaled(acc: LossParts, total_weight: f64) -> LossParts {
    LossParts {
        total: acc.total / total_weight,
        reconstruction: acc.reconstruction / total_weight,
        latent: acc.latent / total_weight,
        kl: acc.kl / total_weight,
    }
}

fn train_end_to_end(nets: &mut ModelNets, xs: &Array2<f64>, ys: &Array2<f64>, cfg: &TrainingConfig) -> Result<Vec<LossParts>> {
    let spec = &cfg.architecture;
    let mut order: Vec<usize> = (0..xs.nrows()).collect();
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream_rng(cfg.seed, STREAM_ENCODER_DROPOUT);
    let mut eps_rng = stream_rng(cfg.seed, STREAM_EPSILON);
    let mut enc_opt = AdamState::new(cfg.learning_rate);
    let mut dec_opt = AdamState::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = LossParts::default();
        let mut seen = 0.0;
        for (b, rows) in epoch_batches(&order, cfg.batch_size).enumerate() {
            let batch = b + 1;
            let x = select_rows(xs, rows);
            let y = select_rows(ys, rows);
            let pass = match spec.tag {
                ArchitectureTag::Vael => {
                    let eps = Array2::from_shape_simple_fn((rows.len(), LATENT_DIM), || {
                        StandardNormal.sample(&mut eps_rng)
                    });
                    vael_pass(nets, &x, &y, spec.alpha, spec.beta, &eps, &mut dropout_rng)?
                }
                _ => ael_pass(nets, &x, &y, spec.omega, &mut dropout_rng)?,
            };
            check_finite(&pass.loss, epoch, batch)?;
            apply_update(&mut enc_opt, &mut nets.encoder, &pass.encoder_grads).map_err(|e| numerical(e, epoch, batch))?;
            apply_update(&mut dec_opt, &mut nets.decoder, &pass.decoder_grads).map_err(|e| numerical(e, epoch, batch))?;
            let w = rows.len() as f64;
            accumulate(&mut acc, &pass.loss, w);
            seen += w;
        }
        history.push(scaled(acc, seen));
    }
    Ok(history)
}

/// Runs one standalone network over the shared batch schedule.
fn train_supervised(
    net: &mut Network,
    input: &Array2<f64>,
    target: &Array2<f64>,
    cfg: &TrainingConfig,
    dropout_stream: u64,
) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..input.nrows()).collect();
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream_rng(cfg.seed, dropout_stream);
    let mut opt = AdamState::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut acc, mut seen) = (0.0, 0.0);
        for (b, rows) in epoch_batches(&order, cfg.batch_size).enumerate() {
            let batch = b + 1;
            let (loss, grads) = supervised_pass(net, &select_rows(input, rows), &select_rows(target, rows), &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            apply_update(&mut opt, net, &grads).map_err(|e| numerical(e, epoch, batch))?;
            acc += rows.len() as f64 * loss;
            seen += rows.len() as f64;
        }
        history.push(acc / seen);
    }
    Ok(history)
}

fn train_pr(nets: &mut ModelNets, xs: &Array2<f64>, ys: &Array2<f64>, cfg: &TrainingConfig) -> Result<Vec<LossParts>> {
    let projector = train_supervised(&mut nets.encoder, xs, ys, cfg, STREAM_ENCODER_DROPOUT)?;
    let reconstructor = train_supervised(&mut nets.decoder, ys, xs, cfg, STREAM_DECODER_DROPOUT)?;
    Ok(projector
        .into_iter()
        .zip(reconstructor)
        .map(|(p, r)| LossParts {
            total: p + r,
            reconstruction: r,
            latent: p,
            kl: 0.0,
        })
        .collect())
}

/// One trained run together with the split it was trained on.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub model: TrainedModel,
    pub split: SplitIndices,
}

/// Trains `runs` models in parallel; run `k` uses seed `cfg.seed + k` for
/// both its split and its initialization.
pub fn train_ensemble(pair: &ProjectionPair, cfg: &TrainingConfig, runs: usize) -> Result<Vec<EnsembleRun>> {
    if runs < 1 {
        return Err(Error::InvalidArgument("runs must be at least 1".into()));
    }
    cfg.validate()?;
    (0..runs as u64)
        .into_par_iter()
        .map(|k| {
            let seed = cfg.seed.wrapping_add(k);
            let split = split(pair.data().n(), TEST_FRACTION, seed)?;
            let run_cfg = TrainingConfig { seed, ..cfg.clone() };
            let model = train(pair, &split, &run_cfg)?;
            Ok(EnsembleRun { model, split })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerRecord {
    Affine {
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        momentum: f64,
        eps: f64,
    },
    Relu,
    Dropout {
        rate: f64,
    },
}

impl From<&Layer> for LayerRecord {
    fn from(layer: &Layer) -> Self {
        match layer {
            Layer::Affine { weights, bias } => LayerRecord::Affine {
                rows: weights.nrows(),
                cols: weights.ncols(),
                weights: weights.iter().copied().collect(),
                bias: bias.to_vec(),
            },
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                momentum,
                eps,
            } => LayerRecord::BatchNorm {
                gamma: gamma.to_vec(),
                beta: beta.to_vec(),
                running_mean: running_mean.to_vec(),
                running_var: running_var.to_vec(),
                momentum: *momentum,
                eps: *eps,
            },
            Layer::Relu => LayerRecord::Relu,
            Layer::Dropout { rate } => LayerRecord::Dropout { rate: *rate },
        }
    }
}

impl LayerRecord {
    fn into_layer(self) -> std::result::Result<Layer, String> {
        Ok(match self {
            LayerRecord::Affine { rows, cols, weights, bias } => {
                let weights = Array2::from_shape_vec((rows, cols), weights)
                    .map_err(|_| format!("affine weights do not have {rows}x{cols} entries"))?;
                Layer::affine(weights, Array1::from(bias))
            }
            LayerRecord::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                momentum,
                eps,
            } => {
                let w = gamma.len();
                if [beta.len(), running_mean.len(), running_var.len()].iter().any(|&l| l != w) {
                    return Err("batch norm vectors differ in length".into());
                }
                Layer::BatchNorm {
                    gamma: Array1::from(gamma),
                    beta: Array1::from(beta),
                    running_mean: Array1::from(running_mean),
                    running_var: Array1::from(running_var),
                    momentum,
                    eps,
                }
            }
            LayerRecord::Relu => Layer::Relu,
            LayerRecord::Dropout { rate } => Layer::Dropout { rate },
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    spec: ArchitectureSpec,
    config: TrainingConfig,
    seed: u64,
    data_standardizer: Standardizer,
    projection_standardizer: Standardizer,
    loss_history: Vec<LossParts>,
    train_seconds: f64,
    encoder: Vec<LayerRecord>,
    decoder: Vec<LayerRecord>,
}

pub fn model_to_json(model: &TrainedModel) -> String {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        spec: model.spec.clone(),
        config: model.config.clone(),
        seed: model.seed,
        data_standardizer: model.data_standardizer.clone(),
        projection_standardizer: model.projection_standardizer.clone(),
        loss_history: model.loss_history.clone(),
        train_seconds: model.train_seconds,
        encoder: model.nets.encoder.layers().iter().map(LayerRecord::from).collect(),
        decoder: model.nets.decoder.layers().iter().map(LayerRecord::from).collect(),
    };
    serde_json::to_string(&file).expect("model serialization cannot fail")
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    write_atomic_str(path, &model_to_json(model))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text).map_err(|e| match e {
        Error::Corrupt { message, .. } => Error::Corrupt {
            path: path.to_path_buf(),
            message,
        },
        e => e,
    })
}

/// Parses a model file. The version is checked before the body so files
/// from other versions report a version error rather than a parse error.
pub fn model_from_json(text: &str) -> Result<TrainedModel> {
    let corrupt = |message: String| Error::Corrupt {
        path: "<memory>".into(),
        message,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(MODEL_FORMAT) {
        return Err(corrupt("not a projlearn model file".into()));
    }
    let found = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("missing version".into()))?;
    if found != MODEL_VERSION as u64 {
        return Err(Error::Version {
            expected: MODEL_VERSION,
            found: u32::try_from(found).unwrap_or(u32::MAX),
        });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    let build = |records: Vec<LayerRecord>| -> Result<Network> {
        let layers = records
            .into_iter()
            .map(LayerRecord::into_layer)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(corrupt)?;
        Network::new(layers).map_err(|e| corrupt(e.to_string()))
    };
    let nets = ModelNets {
        encoder: build(file.encoder)?,
        decoder: build(file.decoder)?,
    };
    let spec = file.spec;
    if nets.encoder.input_dim() != spec.input_dim
        || nets.encoder.output_dim() != spec.encoder_output_dim()
        || nets.decoder.input_dim() != spec.latent_dim
        || nets.decoder.output_dim() != spec.input_dim
        || file.data_standardizer.dim() != spec.input_dim
        || file.projection_standardizer.dim() != spec.latent_dim
    {
        return Err(corrupt("network shapes do not match the architecture".into()));
    }
    Ok(TrainedModel {
        spec,
        nets,
        data_standardizer: file.data_standardizer,
        projection_standardizer: file.projection_standardizer,
        loss_history: file.loss_history,
        config: file.config,
        seed: file.seed,
        train_seconds: file.train_seconds,
    })
}
