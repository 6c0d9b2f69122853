//! Adam training loop, evaluation and checkpoints.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use jscc_autodiff::{AutodiffError, Graph, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{Awgn, ChannelConfig};
use crate::data::{make_batches, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::losses::{reconstruction_loss, vae_loss, LossConfig};
use crate::metrics::{psnr_from_mse, ssim_per_image};
use crate::model::{Mode, Model, ModelKind, ModelSpec};
use crate::seed;

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    64
}
fn default_lr_initial() -> f64 {
    1e-3
}
fn default_lr_after() -> f64 {
    1e-4
}
fn default_switch() -> usize {
    350
}
fn default_snr() -> f64 {
    10.0
}
fn default_power() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_initial")]
    pub lr_initial: f64,
    #[serde(default = "default_lr_after")]
    pub lr_after: f64,
    #[serde(default = "default_switch")]
    pub lr_switch_epoch: usize,
    #[serde(default = "default_snr", with = "crate::channel::snr_serde")]
    pub train_snr_db: f64,
    /// Average channel power per complex symbol.
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConfig,
    /// Whether evaluation draws the latent (VAE) instead of using its mean.
    #[serde(default = "yes")]
    pub eval_sample_latent: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr_initial: default_lr_initial(),
            lr_after: default_lr_after(),
            lr_switch_epoch: default_switch(),
            train_snr_db: default_snr(),
            power: default_power(),
            seed: 0,
            loss: LossConfig::default(),
            eval_sample_latent: true,
        }
    }
}

impl TrainConfig {
    /// Reduced schedule for CPU runs: 30 epochs with the rate drop at 10.
    pub fn desk() -> Self {
        Self {
            lr_switch_epoch: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [("lr_initial", self.lr_initial), ("lr_after", self.lr_after)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        self.loss.validate()?;
        crate::channel::snr_to_sigma2(self.train_snr_db, self.power)?;
        Ok(())
    }

    pub fn channel(&self, k: usize) -> Result<ChannelConfig> {
        ChannelConfig::new(self.power, self.train_snr_db, k)
    }

    pub fn eval_mode(&self) -> Mode {
        Mode::Eval {
            sample_latent: self.eval_sample_latent,
        }
    }
}

/// Step schedule: `lr_initial` before `lr_switch_epoch`, `lr_after` from then on.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_switch_epoch {
        cfg.lr_initial
    } else {
        cfg.lr_after
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, Tensor<f32>>,
        grads: &IndexMap<String, Tensor<f32>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Config(format!(
                    "gradient {:?} does not match parameter `{name}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    pub eval_psnr_db: Option<f64>,
    pub eval_ssim: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Mean per-image PSNR and SSIM of `model` on `data` over `channel`.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    channel: &ChannelConfig,
    mode: Mode,
    seed: u64,
    batch_size: usize,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let ssim_params = crate::metrics::SsimParams::default();
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    let indices: Vec<usize> = (0..data.len()).collect();
    for (b, chunk) in indices.chunks(batch_size.max(1)).enumerate() {
        let x = data.batch(chunk);
        let t = model.transmit(&x, channel, mode, seed::derive(seed, &[b as u64]))?;
        let per = data.image_len();
        for (a, bb) in x.data().chunks(per).zip(t.x_hat.data().chunks(per)) {
            let mse = a.iter().zip(bb).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>() / per as f64;
            psnr_sum += psnr_from_mse(mse, 1.0);
        }
        let mut g = Graph::<f64>::new(0);
        let xi = g.input("x", x.cast())?;
        let yi = g.input("x_hat", t.x_hat.cast())?;
        let s = ssim_per_image(&mut g, xi, yi, &ssim_params)?;
        ssim_sum += g.value(s).data().iter().sum::<f64>();
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        psnr_db: psnr_sum / n,
        ssim: ssim_sum / n,
    })
}

/// Mean PSNR of predicting the pixelwise mean of `reference` for every
/// image of `data`.
pub fn mean_image_baseline_psnr(reference: &Dataset, data: &Dataset) -> f64 {
    let mean = reference.mean_image();
    let per = data.image_len();
    let total: f64 = data
        .pixels()
        .chunks(per)
        .map(|img| {
            let mse = img.iter().zip(mean.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / per as f64;
            psnr_from_mse(mse, 1.0)
        })
        .sum();
    total / data.len() as f64
}

fn non_finite(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Autodiff(AutodiffError::NonFinite { node }) => Error::NonFiniteLoss {
            epoch,
            batch,
            value: format!("non-finite value at {node}"),
        },
        other => other,
    }
}

/// Trains `model` in place and returns the per-epoch history. With `eval`
/// given, each epoch ends with an evaluation at the training SNR.
///
/// `start_epoch` lets a run resume from a checkpoint; the schedule and the
/// shuffling continue from that epoch.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if data.shape() != model.spec().input_shape {
        return Err(Error::Config(format!(
            "dataset images {:?} do not match model input {:?}",
            data.shape(),
            model.spec().input_shape
        )));
    }
    let channel = cfg.channel(model.spec().k)?;
    let plan = BatchPlan {
        batch_size: cfg.batch_size,
        seed: seed::derive(cfg.seed, &[0xba7c]),
        drop_last: false,
        shuffle: true,
    };
    let mut adam = Adam::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg);
        let batches = make_batches(data.len(), &plan, epoch)?;
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let stream = seed::derive(cfg.seed, &[epoch as u64, b as u64]);
            let mut g = Graph::<f32>::new(seed::derive(stream, &[1]));
            let mut awgn = Awgn::new(seed::derive(stream, &[2]));
            let step = (|| -> Result<_> {
                let x = g.input("x", data.batch(idx))?;
                let f = model.forward(&mut g, x, &channel, Mode::Train, &mut awgn)?;
                let loss = match model.spec().kind {
                    ModelKind::Ae => reconstruction_loss(&mut g, x, f.x_hat, &cfg.loss)?,
                    ModelKind::Vae => vae_loss(&mut g, x, f.x_hat, f.sampler.map(|(m, l, _)| (m, l)), &cfg.loss)?,
                };
                Ok((f, loss))
            })();
            let (f, loss) = step.map_err(|e| non_finite(epoch, b, e))?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    value: value.to_string(),
                });
            }
            g.backward(loss).map_err(|e| non_finite(epoch, b, e.into()))?;
            let mut grads = IndexMap::new();
            for (name, id) in &f.params {
                if let Some(grad) = g.grad(*id) {
                    grads.insert(name.clone(), grad.clone());
                }
            }
            model.update_running_stats(&g, &f);
            adam.step(model.params_mut(), &grads, lr)?;
            loss_sum += value;
        }
        let (eval_psnr_db, eval_ssim) = match eval {
            Some(e) if !e.is_empty() => {
                let r = evaluate(model, e, &channel, cfg.eval_mode(), seed::derive(cfg.seed, &[0xe7a1]), cfg.batch_size)?;
                (Some(r.psnr_db), Some(r.ssim))
            }
            _ => (None, None),
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            eval_psnr_db,
            eval_ssim,
        });
    }
    Ok(history)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"JSCCVAE1";
const DTYPE: &str = "f32";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelSpec,
    train: TrainConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Concatenated little-endian tensor data in model order.
pub fn tensor_payload(model: &Model) -> Vec<u8> {
    model.tensors().flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes())).collect()
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let payload = tensor_payload(&ckpt.model);
    let header = Header {
        dtype: DTYPE.into(),
        model: ckpt.model.spec().clone(),
        train: ckpt.train,
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        tensors: ckpt
            .model
            .tensors()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let fail = |d: String| Error::checkpoint(path, d);
    if bytes.len() < 16 {
        return Err(fail(format!("truncated: {} bytes cannot hold the preamble", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic; not a JSCCVAE1 checkpoint".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if header_len > body.len() as u64 {
        return Err(fail(format!("truncated: header of {header_len} bytes, {} available", body.len())));
    }
    let (json, payload) = body.split_at(header_len as usize);
    let header: Header =
        serde_json::from_slice(json).map_err(|e| fail(format!("unreadable header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(fail(format!(
            "tensors are stored as {}, this build loads {DTYPE} only",
            header.dtype
        )));
    }
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    if payload.len() < expected {
        return Err(fail(format!("truncated: manifest needs {expected} payload bytes, found {}", payload.len())));
    }
    if payload.len() > expected {
        return Err(fail(format!("{} bytes of trailing data after the tensors", payload.len() - expected)));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(fail("tensor payload checksum mismatch".into()));
    }
    let mut tensors = IndexMap::new();
    let mut offset = 0;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f32> = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| fail(format!("tensor `{}`: {e}", entry.name)))?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(fail(format!("manifest lists `{}` twice", entry.name)));
        }
    }
    let model = Model::from_tensors(header.model, tensors).map_err(|e| fail(format!("manifest mismatch: {e}")))?;
    let order: Vec<&String> = model.tensors().map(|(n, _)| n).collect();
    if order.iter().zip(&header.tensors).any(|(a, b)| **a != b.name) {
        return Err(fail("manifest order differs from the model layout".into()));
    }
    Ok(Checkpoint {
        model,
        train: header.train,
        epoch: header.epoch,
        history: header.history,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(349, &cfg), 1e-3);
        assert_eq!(lr_at_epoch(350, &cfg), 1e-4);
        let zero = TrainConfig {
            lr_switch_epoch: 0,
            ..cfg
        };
        assert_eq!(lr_at_epoch(0, &zero), 1e-4);
    }

    fn scalar_param(v: f32) -> IndexMap<String, Tensor<f32>> {
        IndexMap::from([("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = scalar_param(0.7);
        let mut adam = Adam::default();
        adam.step(&mut p, &scalar_param(0.0), 1e-3).unwrap();
        assert_eq!(p["w"].data(), &[0.7]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3f32, 0.5, -20.0] {
            let mut p = scalar_param(0.0);
            Adam::default().step(&mut p, &scalar_param(g), 1e-2).unwrap();
            let moved = p["w"].data()[0] as f64;
            assert!((moved.abs() - 1e-2).abs() < 1e-5, "{moved}");
            assert_eq!(moved.signum(), -(g as f64).signum());
        }
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut p = scalar_param(1.0);
        let mut adam = Adam::default();
        let mut last = 1.0;
        for _ in 0..200 {
            adam.step(&mut p, &scalar_param(0.3), 1e-3).unwrap();
            let now = p["w"].data()[0];
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_after: 0.0, ..TrainConfig::default() }.validate().is_err());
        TrainConfig::desk().validate().unwrap();
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }
}
