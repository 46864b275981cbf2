//! Loss, Adam, the per-seed training loop and per-epoch logging.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{MetricAccumulator, MetricReport};
use crate::domain::{crop_patch, log_values, DatasetManifest, Release, Split};
use crate::error::{ensure_len, Error, Result};
use crate::features::{FeatureTensor, Normalizer};
use crate::formats::{read_fpg, read_ftr};
use crate::gnn::{backward, forward, init_params, mse_and_grad, GraphContext, Gradients, Hyperparams, ModelParams, OutputScale};
use crate::postprocess::{default_tau, QuantileMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            shuffle_seed: 11,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be > 0"));
        }
        Ok(())
    }
}

/// Mean over cells of the squared log-space difference.
pub fn loss_mse_log(pred: &[f64], truth: &[f64]) -> Result<f64> {
    ensure_len("loss patches", truth.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::invalid("loss over an empty patch"));
    }
    let mut sum = 0.0;
    for (index, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if !p.is_finite() || !t.is_finite() {
            return Err(Error::NonFinite { index });
        }
        sum += (p - t) * (p - t);
    }
    Ok(sum / pred.len() as f64)
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when a gradient
/// entry is not finite.
pub fn adam_step(params: &mut ModelParams<f32>, grads: &Gradients<f32>, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for (name, g) in grads.tensors() {
        if let Some(k) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite gradient in tensor {name} at element {k}")));
        }
    }
    if params.parameter_count() != grads.parameter_count() || params.parameter_count() != state.m.parameter_count() {
        return Err(Error::ShapeMismatch {
            context: "adam parameter count".into(),
            expected: params.parameter_count(),
            actual: grads.parameter_count(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, (_, g)), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        for k in 0..p.len() {
            let gk = g[k] as f64;
            let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
            let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = cfg.learning_rate * (mk / c1) / ((vk / c2).sqrt() + cfg.adam_eps);
            p[k] = (p[k] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// One patch example: normalized features, log-space target and the linear
/// truth used for metrics.
#[derive(Debug, Clone)]
pub struct Sample {
    pub release: Release,
    pub features: FeatureTensor,
    pub target: Vec<f64>,
    pub truth: Vec<f64>,
    pub in_domain: Vec<bool>,
}

/// Raw features and patch-restricted truth for one split.
pub fn load_split(manifest: &DatasetManifest, dir: &Path, split: Split, eps_log: f64) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .par_iter()
        .map(|entry| {
            let fp = read_fpg(&dir.join(&entry.footprint))?;
            let features = read_ftr(&dir.join(&entry.features))?;
            if features.side != manifest.patch_side {
                return Err(Error::ShapeMismatch {
                    context: format!("feature patch side of release {}", entry.release.id),
                    expected: manifest.patch_side,
                    actual: features.side,
                });
            }
            let patch = crop_patch(&fp.values, &fp.grid, &entry.release, manifest.patch_side)?;
            Ok(Sample {
                release: entry.release,
                features,
                target: log_values(&patch.values, eps_log)?,
                truth: patch.values,
                in_domain: patch.in_domain,
            })
        })
        .collect()
}

/// Training and validation samples with the normalizer fitted on the
/// training features.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub normalizer: Normalizer,
    pub feature_hash: u64,
    pub eps_log: f64,
    /// Linear-space activity threshold.
    pub tau: f64,
    pub side: usize,
}

impl TrainingData {
    pub fn load(manifest_path: &Path, eps_log: f64, tau: Option<f64>) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let train = load_split(&manifest, dir, Split::Train, eps_log)?;
        let validation = load_split(&manifest, dir, Split::Validation, eps_log)?;
        Self::from_samples(train, validation, eps_log, tau)
    }

    pub fn from_samples(mut train: Vec<Sample>, mut validation: Vec<Sample>, eps_log: f64, tau: Option<f64>) -> Result<Self> {
        if train.is_empty() || validation.is_empty() {
            return Err(Error::invalid("training and validation splits must be non-empty"));
        }
        let first = &train[0].features;
        let (feature_hash, side) = (first.channel_hash, first.side);
        for s in train.iter().chain(&validation) {
            if s.features.channel_hash != feature_hash {
                return Err(Error::Incompatible(format!(
                    "release {} has feature hash {:016x}, expected {feature_hash:016x}",
                    s.release.id, s.features.channel_hash
                )));
            }
        }
        let normalizer = Normalizer::fit(train.iter().map(|s| &s.features))?;
        for s in train.iter_mut().chain(validation.iter_mut()) {
            s.features = normalizer.apply(&s.features)?;
        }
        let tau = match tau {
            Some(t) => t,
            None => {
                let nonzero: Vec<f64> = train.iter().flat_map(|s| s.truth.iter().copied()).filter(|&v| v > 0.0).collect();
                default_tau(&nonzero)?
            }
        };
        Ok(TrainingData {
            train,
            validation,
            normalizer,
            feature_hash,
            eps_log,
            tau,
            side,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub nmae: f64,
    pub mse: f64,
    pub acc: f64,
    pub iou: f64,
    pub r2: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_loss,nmae,mse,acc,iou,r2";

pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            l.epoch, l.train_loss, l.val_loss, l.nmae, l.mse, l.acc, l.iou, l.r2
        );
    }
    out
}

/// Log-space predictions for a set of samples, in sample order.
pub fn predict_log(params: &ModelParams<f32>, samples: &[Sample], ctx: &GraphContext) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| {
            let (y, _) = forward(params, &s.features, ctx)?;
            Ok(y.into_iter().map(f64::from).collect())
        })
        .collect()
}

/// Validation loss over all patch cells and log-space metrics over the
/// in-domain cells, binarized at `ln(tau + eps_log)`.
pub fn evaluate(params: &ModelParams<f32>, samples: &[Sample], ctx: &GraphContext, tau: f64, eps_log: f64) -> Result<(f64, MetricReport)> {
    let preds = predict_log(params, samples, ctx)?;
    let active = (tau + eps_log).ln();
    let mut loss = 0.0;
    let mut acc = MetricAccumulator::default();
    for (s, p) in samples.iter().zip(&preds) {
        loss += loss_mse_log(p, &s.target)?;
        let (pp, tt): (Vec<f64>, Vec<f64>) = p
            .iter()
            .zip(&s.target)
            .zip(&s.in_domain)
            .filter(|(_, &m)| m)
            .map(|((&a, &b), _)| (a, b))
            .unzip();
        acc.add(&pp, &tt, active)?;
    }
    Ok((loss / samples.len() as f64, acc.report()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Decoder output rescaling that starts predictions at the mean and spread
/// of the training targets.
fn target_scale(train: &[Sample]) -> OutputScale {
    let n: usize = train.iter().map(|s| s.target.len()).sum();
    let mean = train.iter().flat_map(|s| &s.target).sum::<f64>() / n as f64;
    let var = train.iter().flat_map(|s| &s.target).map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64;
    OutputScale {
        scale: var.sqrt().max(1e-6),
        offset: mean,
    }
}

fn sample_gradient(params: &ModelParams<f32>, s: &Sample, ctx: &GraphContext) -> Result<(f64, Gradients<f32>)> {
    let (y, cache) = forward(params, &s.features, ctx)?;
    let (loss, grad) = mse_and_grad(&y, &s.target);
    Ok((loss, backward(params, &cache, ctx, &grad)?))
}

/// Trains one member. `on_epoch` sees each log line as it is produced.
pub fn train_model(
    data: &TrainingData,
    seed: u64,
    cfg: &TrainConfig,
    hyper: Hyperparams,
    ctx: &GraphContext,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.side != ctx.side {
        return Err(Error::ShapeMismatch {
            context: "training patch side vs mesh".into(),
            expected: ctx.side,
            actual: data.side,
        });
    }
    let mut params: ModelParams<f32> = init_params(seed, hyper)?;
    params.output = target_scale(&data.train);
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let parts: Vec<(f64, Gradients<f32>)> = idx
                .par_iter()
                .map(|&k| sample_gradient(&params, &data.train[k], ctx))
                .collect::<Result<_>>()?;
            let mut parts = parts.into_iter();
            let (mut loss, mut grads) = parts.next().expect("non-empty batch");
            for (l, g) in parts {
                loss += l;
                grads.add_assign(&g);
            }
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    message: format!("batch loss is {loss}"),
                });
            }
            grads.scale(1.0 / idx.len() as f32);
            adam_step(&mut params, &grads, &mut adam, cfg).map_err(|e| Error::Diverged {
                epoch,
                batch,
                message: e.to_string(),
            })?;
            epoch_loss += loss;
        }
        let (val_loss, m) = evaluate(&params, &data.validation, ctx, data.tau, data.eps_log)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: 0,
                message: format!("validation loss is {val_loss}"),
            });
        }
        let log = EpochLog {
            epoch,
            train_loss: epoch_loss / data.train.len() as f64,
            val_loss,
            nmae: m.nmae,
            mse: m.mse,
            acc: m.accuracy,
            iou: m.iou,
            r2: m.r2,
        };
        on_epoch(&log);
        logs.push(log);
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        logs,
        best_epoch: best.2,
    })
}

/// Quantile map from pooled in-domain validation predictions to the
/// matching log-space truth.
pub fn fit_quantile_map(params: &ModelParams<f32>, samples: &[Sample], ctx: &GraphContext, n_q: usize) -> Result<QuantileMap> {
    let preds = predict_log(params, samples, ctx)?;
    let mut pool_p = Vec::new();
    let mut pool_t = Vec::new();
    for (s, p) in samples.iter().zip(&preds) {
        for ((&a, &b), &m) in p.iter().zip(&s.target).zip(&s.in_domain) {
            if m {
                pool_p.push(a);
                pool_t.push(b);
            }
        }
    }
    QuantileMap::fit(&pool_p, &pool_t, n_q)
}
