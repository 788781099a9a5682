//! Clean-speech prior: a Gaussian VAE over power spectra.
//!
//! Encoder: `x -> tanh(W1 x + b1) -> (mu, logvar)`.
//! Decoder: `z -> tanh(W2 z + b2) -> log sigma^2`, exponentiated so the
//! decoded variance is strictly positive.
//!
//! All batch functions here are frame-major: one frame per row (T x F).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{PowerSpectrogram, StftConfig};

/// Frames whose total power falls below this are dropped from training data.
pub const SILENCE_FLOOR: f64 = 1e-10;

const CHECKPOINT_MAGIC: &[u8; 8] = b"VAENMFCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite loss at frame {frame}")]
    NonFiniteLoss { frame: usize },
    #[error("empty {0} dataset")]
    EmptyDataset(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, frame {frame}")]
    Diverged {
        epoch: usize,
        frame: usize,
        history: Box<TrainingHistory>,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VaeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
}

impl Default for VaeDims {
    fn default() -> Self {
        Self {
            input_dim: 513,
            hidden_dim: 128,
            latent_dim: 16,
        }
    }
}

impl VaeDims {
    pub fn for_stft(stft: &StftConfig) -> Self {
        Self {
            input_dim: stft.bins(),
            ..Self::default()
        }
    }
}

/// Affine layer, `y = W x + b` with `W` stored out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform Glorot initialisation, zero bias.
    fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || rng.random_range(-a..a)),
            bias: Array1::zeros(outputs),
        }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    fn backward(&self, x: &ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub enc_hidden: Dense,
    pub enc_mean: Dense,
    pub enc_logvar: Dense,
    pub dec_hidden: Dense,
    pub dec_out: Dense,
}

impl VaeParams {
    pub fn zeros(dims: VaeDims) -> Self {
        let VaeDims {
            input_dim: f,
            hidden_dim: h,
            latent_dim: d,
        } = dims;
        Self {
            enc_hidden: Dense::zeros(f, h),
            enc_mean: Dense::zeros(h, d),
            enc_logvar: Dense::zeros(h, d),
            dec_hidden: Dense::zeros(d, h),
            dec_out: Dense::zeros(h, f),
        }
    }

    pub fn init<R: Rng + ?Sized>(dims: VaeDims, rng: &mut R) -> Self {
        let VaeDims {
            input_dim: f,
            hidden_dim: h,
            latent_dim: d,
        } = dims;
        Self {
            enc_hidden: Dense::glorot(f, h, rng),
            enc_mean: Dense::glorot(h, d, rng),
            enc_logvar: Dense::glorot(h, d, rng),
            dec_hidden: Dense::glorot(d, h, rng),
            dec_out: Dense::glorot(h, f, rng),
        }
    }

    pub fn dims(&self) -> VaeDims {
        VaeDims {
            input_dim: self.enc_hidden.inputs(),
            hidden_dim: self.enc_hidden.outputs(),
            latent_dim: self.enc_mean.outputs(),
        }
    }

    /// Layers in checkpoint order.
    pub fn layers(&self) -> [&Dense; 5] {
        [
            &self.enc_hidden,
            &self.enc_mean,
            &self.enc_logvar,
            &self.dec_hidden,
            &self.dec_out,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut Dense; 5] {
        [
            &mut self.enc_hidden,
            &mut self.enc_mean,
            &mut self.enc_logvar,
            &mut self.dec_hidden,
            &mut self.dec_out,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, cols: usize, what: &str, expected: usize) -> Result<()> {
        if cols != expected {
            return Err(VaeError::Dimension(format!(
                "{what} has {cols} columns, network expects {expected}"
            )));
        }
        Ok(())
    }

    /// Posterior parameters for T frames given as a T x F matrix.
    pub fn encode_frames(&self, frames: ArrayView2<f64>) -> Result<LatentBatch> {
        self.check_input(frames.ncols(), "frame batch", self.dims().input_dim)?;
        let h = self.enc_hidden.forward(&frames).mapv(f64::tanh);
        let hv = h.view();
        Ok(LatentBatch {
            mean: self.enc_mean.forward(&hv),
            logvar: self.enc_logvar.forward(&hv),
        })
    }

    pub fn encode(&self, frames: &PowerSpectrogram) -> Result<LatentBatch> {
        self.encode_frames(frames.data.t())
    }

    /// Decoded variances, T x F, strictly positive.
    pub fn decode_frames(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(z.ncols(), "latent batch", self.dims().latent_dim)?;
        let h = self.dec_hidden.forward(&z).mapv(f64::tanh);
        Ok(self.dec_out.forward(&h.view()).mapv(f64::exp))
    }

    pub fn decode(&self, z: ArrayView2<f64>) -> Result<PowerSpectrogram> {
        Ok(PowerSpectrogram {
            data: self.decode_frames(z)?.reversed_axes(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    /// T x D
    pub mean: Array2<f64>,
    /// T x D
    pub logvar: Array2<f64>,
}

/// Reparameterised draw `mean + exp(logvar / 2) * eps`.
pub fn sample_latent<R: Rng + ?Sized>(batch: &LatentBatch, rng: &mut R) -> Array2<f64> {
    let eps = standard_normal(batch.mean.dim(), rng);
    reparameterize(batch, &eps)
}

fn reparameterize(batch: &LatentBatch, eps: &Array2<f64>) -> Array2<f64> {
    let mut z = batch.mean.clone();
    Zip::from(&mut z)
        .and(&batch.logvar)
        .and(eps)
        .for_each(|z, &lv, &e| *z += (0.5 * lv).exp() * e);
    z
}

pub fn standard_normal<R: Rng + ?Sized>(dim: (usize, usize), rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

/// Which part of the negative ELBO to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Full,
    Reconstruction,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboLoss {
    /// Summed Itakura-Saito style term `x / sigma^2 + ln sigma^2`.
    pub reconstruction: f64,
    /// Summed closed-form KL to the standard normal prior.
    pub kl: f64,
}

impl ElboLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.kl
    }
}

/// Closed-form `KL(N(mu, exp(lv)) || N(0, 1))` for one coordinate.
pub fn kl_standard_normal(mu: f64, logvar: f64) -> f64 {
    0.5 * (logvar.exp() + mu * mu - 1.0 - logvar)
}

/// Negative ELBO over a T x F batch with one reparameterised sample per frame,
/// plus its gradient with respect to every weight.
pub fn elbo_loss<R: Rng + ?Sized>(
    params: &VaeParams,
    frames: ArrayView2<f64>,
    rng: &mut R,
) -> Result<(ElboLoss, VaeParams)> {
    let eps = standard_normal((frames.nrows(), params.dims().latent_dim), rng);
    loss_with_noise(params, frames, &eps, LossTerm::Full)
}

/// Same as [`elbo_loss`] with the standard-normal draws supplied explicitly.
pub fn loss_with_noise(
    params: &VaeParams,
    frames: ArrayView2<f64>,
    eps: &Array2<f64>,
    term: LossTerm,
) -> Result<(ElboLoss, VaeParams)> {
    let dims = params.dims();
    params.check_input(frames.ncols(), "frame batch", dims.input_dim)?;
    if eps.dim() != (frames.nrows(), dims.latent_dim) {
        return Err(VaeError::Dimension(format!(
            "noise is {:?}, expected ({}, {})",
            eps.dim(),
            frames.nrows(),
            dims.latent_dim
        )));
    }

    // Forward.
    let h1 = params.enc_hidden.forward(&frames).mapv(f64::tanh);
    let mu = params.enc_mean.forward(&h1.view());
    let lv = params.enc_logvar.forward(&h1.view());
    let latent = LatentBatch { mean: mu, logvar: lv };
    let z = reparameterize(&latent, eps);
    let h2 = params.dec_hidden.forward(&z.view()).mapv(f64::tanh);
    let log_var = params.dec_out.forward(&h2.view());

    let recon_rows: Vec<f64> = frames
        .outer_iter()
        .zip(log_var.outer_iter())
        .map(|(x, o)| x.iter().zip(o.iter()).map(|(&x, &o)| x * (-o).exp() + o).sum())
        .collect();
    let kl_rows: Vec<f64> = latent
        .mean
        .outer_iter()
        .zip(latent.logvar.outer_iter())
        .map(|(m, l)| m.iter().zip(l.iter()).map(|(&m, &l)| kl_standard_normal(m, l)).sum())
        .collect();
    if let Some(frame) = recon_rows.iter().zip(&kl_rows).position(|(r, k)| !(r + k).is_finite()) {
        return Err(VaeError::NonFiniteLoss { frame });
    }
    let loss = ElboLoss {
        reconstruction: recon_rows.iter().sum(),
        kl: kl_rows.iter().sum(),
    };

    // Backward.
    let (use_recon, use_kl) = match term {
        LossTerm::Full => (1.0, 1.0),
        LossTerm::Reconstruction => (1.0, 0.0),
        LossTerm::Kl => (0.0, 1.0),
    };
    let mut grad = VaeParams::zeros(dims);

    let mut d_out = log_var.clone();
    Zip::from(&mut d_out)
        .and(&frames)
        .for_each(|d, &x| *d = use_recon * (1.0 - x * (-*d).exp()));
    let mut d_h2 = params.dec_out.backward(&h2.view(), &d_out, &mut grad.dec_out);
    Zip::from(&mut d_h2).and(&h2).for_each(|d, &h| *d *= 1.0 - h * h);
    let d_z = params.dec_hidden.backward(&z.view(), &d_h2, &mut grad.dec_hidden);

    let mut d_mu = d_z.clone();
    Zip::from(&mut d_mu)
        .and(&latent.mean)
        .for_each(|d, &m| *d += use_kl * m);
    let mut d_lv = d_z;
    Zip::from(&mut d_lv).and(&latent.logvar).and(eps).for_each(|d, &l, &e| {
        *d = *d * e * 0.5 * (0.5 * l).exp() + use_kl * 0.5 * (l.exp() - 1.0);
    });

    let mut d_h1 = params.enc_mean.backward(&h1.view(), &d_mu, &mut grad.enc_mean);
    d_h1 += &params.enc_logvar.backward(&h1.view(), &d_lv, &mut grad.enc_logvar);
    Zip::from(&mut d_h1).and(&h1).for_each(|d, &h| *d *= 1.0 - h * h);
    params.enc_hidden.backward(&frames, &d_h1, &mut grad.enc_hidden);

    Ok((loss, grad))
}

/// Removes frames (rows) whose total power is below [`SILENCE_FLOOR`].
pub fn drop_silent_frames(frames: ArrayView2<f64>) -> Array2<f64> {
    let keep: Vec<usize> = frames
        .outer_iter()
        .enumerate()
        .filter(|(_, row)| row.sum() >= SILENCE_FLOOR)
        .map(|(i, _)| i)
        .collect();
    frames.select(Axis(0), &keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without improvement before the learning rate is halved.
    pub lr_patience: usize,
    /// Epochs without improvement before training stops.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Minimum relative decrease of the validation loss that counts as progress.
    pub min_rel_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-4,
            lr_patience: 10,
            early_stop_patience: 20,
            max_epochs: 500,
            min_rel_improvement: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(VaeError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(VaeError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return Err(VaeError::InvalidConfig("patience values must be positive".into()));
        }
        if self.max_epochs > 0 && (self.lr_patience >= self.max_epochs || self.early_stop_patience >= self.max_epochs) {
            // Allowed, but the rule can never fire.
            log::debug!("patience >= max_epochs; plateau rules will not trigger");
        }
        if self.min_rel_improvement.is_nan() || self.min_rel_improvement < 0.0 {
            return Err(VaeError::InvalidConfig("min_rel_improvement must be >= 0".into()));
        }
        Ok(())
    }
}

/// Outcome of feeding one epoch's validation loss to [`PlateauTracker`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlateauEvent {
    pub improved: bool,
    pub halve_lr: bool,
    pub stop: bool,
}

/// Reduce-on-plateau scheduler and early stopping, sharing one notion of
/// "improvement": a decrease of at least `min_rel` relative to the best loss.
#[derive(Debug, Clone)]
pub struct PlateauTracker {
    best: f64,
    lr_bad: usize,
    stop_bad: usize,
    lr_patience: usize,
    stop_patience: usize,
    min_rel: f64,
}

impl PlateauTracker {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            best: f64::INFINITY,
            lr_bad: 0,
            stop_bad: 0,
            lr_patience: config.lr_patience,
            stop_patience: config.early_stop_patience,
            min_rel: config.min_rel_improvement,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> PlateauEvent {
        let improved = if self.best.is_finite() {
            val_loss < self.best - self.min_rel * self.best.abs()
        } else {
            val_loss < self.best
        };
        let mut event = PlateauEvent {
            improved,
            ..Default::default()
        };
        if improved {
            self.best = val_loss;
            self.lr_bad = 0;
            self.stop_bad = 0;
            return event;
        }
        self.lr_bad += 1;
        self.stop_bad += 1;
        if self.lr_bad > self.lr_patience {
            event.halve_lr = true;
            self.lr_bad = 0;
        }
        if self.stop_bad >= self.stop_patience {
            event.stop = true;
        }
        event
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
    pub lr_halved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainingHistory {
    fn empty() -> Self {
        Self {
            epochs: Vec::new(),
            best_epoch: 0,
            stop_reason: StopReason::MaxEpochs,
        }
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map(|e| e.val_loss)
    }
}

/// Where a set of weights came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Provenance {
    Scratch,
    FinetunedFrom(String),
    PersonalizedFor(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Scratch => write!(f, "scratch"),
            Provenance::FinetunedFrom(id) => write!(f, "finetuned-from:{id}"),
            Provenance::PersonalizedFor(spk) => write!(f, "personalized-for:{spk}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "scratch" {
            Ok(Provenance::Scratch)
        } else if let Some(id) = s.strip_prefix("finetuned-from:") {
            Ok(Provenance::FinetunedFrom(id.to_string()))
        } else if let Some(spk) = s.strip_prefix("personalized-for:") {
            Ok(Provenance::PersonalizedFor(spk.to_string()))
        } else {
            Err(format!("unknown provenance tag {s:?}"))
        }
    }
}

impl From<Provenance> for String {
    fn from(p: Provenance) -> Self {
        p.to_string()
    }
}

impl TryFrom<String> for Provenance {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: VaeParams,
    pub train_config: TrainConfig,
    pub stft: StftConfig,
    pub history: TrainingHistory,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    train_config: TrainConfig,
    stft: StftConfig,
    history: TrainingHistory,
    provenance: Provenance,
}

impl Checkpoint {
    /// Binary layout: magic, version, (F, D, hidden) as u32, the ten weight
    /// blocks as little-endian f64 in row-major layer order, then a u64 length
    /// followed by a JSON metadata trailer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.params.dims();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for d in [dims.input_dim, dims.latent_dim, dims.hidden_dim] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for layer in self.params.layers() {
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = CheckpointMeta {
            train_config: self.train_config,
            stft: self.stft,
            history: self.history.clone(),
            provenance: self.provenance.clone(),
        };
        let trailer = serde_json::to_vec_pretty(&meta).expect("metadata serialises");
        out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        out.extend_from_slice(&trailer);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = ByteCursor { bytes, pos: 0 };
        if cursor.take(8)? != CHECKPOINT_MAGIC {
            return Err(VaeError::BadMagic);
        }
        let version = cursor.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(VaeError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let dims = VaeDims {
            input_dim: cursor.u32()? as usize,
            latent_dim: cursor.u32()? as usize,
            hidden_dim: cursor.u32()? as usize,
        };
        if dims.input_dim == 0 || dims.latent_dim == 0 || dims.hidden_dim == 0 {
            return Err(VaeError::Corrupt(format!("zero dimension in {dims:?}")));
        }
        let mut params = VaeParams::zeros(dims);
        for layer in params.layers_mut() {
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *v = cursor.f64()?;
            }
        }
        let len = cursor.u64()? as usize;
        let trailer = cursor.take(len)?;
        if cursor.pos != bytes.len() {
            return Err(VaeError::Corrupt("trailing bytes after metadata".into()));
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(trailer).map_err(|e| VaeError::Corrupt(format!("metadata: {e}")))?;
        if meta.stft.bins() != dims.input_dim {
            return Err(VaeError::Corrupt(format!(
                "stft config has {} bins but weights expect {}",
                meta.stft.bins(),
                dims.input_dim
            )));
        }
        Ok(Self {
            params,
            train_config: meta.train_config,
            stft: meta.stft,
            history: meta.history,
            provenance: meta.provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| VaeError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Starting point for [`train`].
pub enum TrainInit<'a> {
    Scratch {
        dims: VaeDims,
        stft: StftConfig,
    },
    /// Fine-tuning or personalisation: start from existing weights.
    FromCheckpoint {
        checkpoint: &'a Checkpoint,
        provenance: Provenance,
    },
}

struct Adam {
    m: VaeParams,
    v: VaeParams,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(dims: VaeDims) -> Self {
        Self {
            m: VaeParams::zeros(dims),
            v: VaeParams::zeros(dims),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut VaeParams, grad: &VaeParams, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let layers = params
            .layers_mut()
            .into_iter()
            .zip(grad.layers())
            .zip(self.m.layers_mut())
            .zip(self.v.layers_mut());
        for (((p, g), m), v) in layers {
            let step = |p: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            };
            Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(step);
            Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(step);
        }
    }
}

const VALIDATION_SEED_SALT: u64 = 0x5641_4c49_4441_5445;

/// Mean per-frame negative ELBO, with one fixed-seed latent sample per frame.
pub fn validation_loss(params: &VaeParams, frames: ArrayView2<f64>, config: &TrainConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ VALIDATION_SEED_SALT);
    let mut total = 0.0;
    let chunk = config.batch_size.max(1);
    for (i, batch) in frames.axis_chunks_iter(Axis(0), chunk).enumerate() {
        let eps = standard_normal((batch.nrows(), params.dims().latent_dim), &mut rng);
        let (loss, _) = loss_with_noise(params, batch, &eps, LossTerm::Full).map_err(|e| match e {
            VaeError::NonFiniteLoss { frame } => VaeError::NonFiniteLoss {
                frame: frame + i * chunk,
            },
            other => other,
        })?;
        total += loss.total();
    }
    Ok(total / frames.nrows() as f64)
}

/// Minibatch Adam training with plateau LR halving and early stopping.
///
/// Both frame sets are T x F. Silent frames are dropped first. The returned
/// checkpoint holds the weights of the best validation epoch (or the initial
/// weights when no epoch ran).
pub fn train(
    train_frames: ArrayView2<f64>,
    val_frames: ArrayView2<f64>,
    config: &TrainConfig,
    init: TrainInit<'_>,
) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut params, stft, provenance) = match init {
        TrainInit::Scratch { dims, stft } => {
            if dims.input_dim != stft.bins() {
                return Err(VaeError::Dimension(format!(
                    "input_dim {} != stft bins {}",
                    dims.input_dim,
                    stft.bins()
                )));
            }
            (VaeParams::init(dims, &mut rng), stft, Provenance::Scratch)
        }
        TrainInit::FromCheckpoint { checkpoint, provenance } => {
            (checkpoint.params.clone(), checkpoint.stft, provenance)
        }
    };
    let dims = params.dims();
    params.check_input(train_frames.ncols(), "training frames", dims.input_dim)?;
    params.check_input(val_frames.ncols(), "validation frames", dims.input_dim)?;
    let train_frames = drop_silent_frames(train_frames);
    let val_frames = drop_silent_frames(val_frames);
    if train_frames.nrows() == 0 {
        return Err(VaeError::EmptyDataset("training"));
    }
    if val_frames.nrows() == 0 {
        return Err(VaeError::EmptyDataset("validation"));
    }

    let mut history = TrainingHistory::empty();
    let mut best_params = params.clone();
    let mut tracker = PlateauTracker::new(config);
    let mut adam = Adam::new(dims);
    let mut lr = config.learning_rate;
    let mut order: Vec<usize> = (0..train_frames.nrows()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch = train_frames.select(Axis(0), idx);
            let result = elbo_loss(&params, batch.view(), &mut rng);
            let (loss, mut grad) = match result {
                Ok(v) => v,
                Err(VaeError::NonFiniteLoss { frame }) => {
                    history.stop_reason = StopReason::Diverged;
                    return Err(VaeError::Diverged {
                        epoch,
                        frame: idx[frame],
                        history: Box::new(history),
                    });
                }
                Err(e) => return Err(e),
            };
            epoch_loss += loss.total();
            let scale = 1.0 / idx.len() as f64;
            for layer in grad.layers_mut() {
                layer.weight *= scale;
                layer.bias *= scale;
            }
            adam.update(&mut params, &grad, lr);
        }
        let val_loss = match validation_loss(&params, val_frames.view(), config) {
            Ok(v) => v,
            Err(VaeError::NonFiniteLoss { frame }) => {
                history.stop_reason = StopReason::Diverged;
                return Err(VaeError::Diverged {
                    epoch,
                    frame,
                    history: Box::new(history),
                });
            }
            Err(e) => return Err(e),
        };
        let event = tracker.observe(val_loss);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train_frames.nrows() as f64,
            val_loss,
            learning_rate: lr,
            lr_halved: event.halve_lr,
        });
        log::debug!(
            "epoch {epoch}: train {:.4} val {val_loss:.4} lr {lr:.3e}",
            epoch_loss / train_frames.nrows() as f64
        );
        if event.improved {
            best_params = params.clone();
            history.best_epoch = epoch;
        }
        if event.halve_lr {
            lr *= 0.5;
        }
        if event.stop {
            history.stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    Ok(Checkpoint {
        params: best_params,
        train_config: *config,
        stft,
        history,
        provenance,
    })
}
