//! Per-utterance inference with Monte Carlo EM.
//!
//! Model, for bin `f` of frame `t`:
//!
//! ```text
//! y_ft | z_t ~ CN(0, V_ft),   V_ft = g_t * d(z_t)_f + (W H)_ft,   z_t ~ N(0, I)
//! ```
//!
//! The E-step runs one random-walk Metropolis-Hastings chain per frame over
//! `z_t`; the M-step updates `H`, `W` and then `g` from Monte Carlo averages
//! over the retained chain states. Speech is recovered with the Wiener gain
//! `g s / (g s + n)` averaged over the final retained samples.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::ComplexSpectrogram;
use crate::nmf::{self, NmfError, NmfParams};
use crate::vae::{self, VaeError, VaeParams};

/// Floor applied to the mixture variance before any division.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Floor applied to the gain after each update.
pub const GAIN_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum McemError {
    #[error("invalid MCEM config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite MH target at frame {frame}")]
    NonFiniteTarget { frame: usize },
    #[error("no retained samples; run an E-step first")]
    NoSamples,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Nmf(#[from] NmfError),
}

pub type Result<T> = std::result::Result<T, McemError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McemConfig {
    pub n_em_iters: usize,
    pub mh_iters_per_estep: usize,
    pub burn_in: usize,
    /// Retained chain states per E-step (the last `n_samples` of the chain).
    pub n_samples: usize,
    /// Standard deviation of the isotropic random-walk step. The default of
    /// 0.1 is a proposal variance of 0.01.
    pub proposal_std: f64,
    pub nmf_rank: usize,
    pub seed: u64,
}

impl Default for McemConfig {
    fn default() -> Self {
        Self {
            n_em_iters: 200,
            mh_iters_per_estep: 40,
            burn_in: 30,
            n_samples: 10,
            proposal_std: 0.1,
            nmf_rank: nmf::DEFAULT_RANK,
            seed: 0,
        }
    }
}

impl McemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_em_iters == 0 || self.mh_iters_per_estep == 0 || self.n_samples == 0 || self.nmf_rank == 0 {
            return Err(McemError::InvalidConfig(
                "iteration counts, sample count and rank must be positive".into(),
            ));
        }
        if self.burn_in + self.n_samples > self.mh_iters_per_estep {
            return Err(McemError::InvalidConfig(format!(
                "burn_in {} + n_samples {} exceeds mh_iters_per_estep {}",
                self.burn_in, self.n_samples, self.mh_iters_per_estep
            )));
        }
        if !(self.proposal_std >= 0.0 && self.proposal_std.is_finite()) {
            return Err(McemError::InvalidConfig("proposal_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceState {
    /// Per-frame gain, length T.
    pub g: Array1<f64>,
    pub nmf: NmfParams,
    /// Current chain state, T x D.
    pub z_chain: Array2<f64>,
    /// Retained chain states from the latest E-step, each T x D.
    pub retained_samples: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct EnhancementOutput {
    pub enhanced_spec: ComplexSpectrogram,
    /// F x T gain applied to the noisy coefficients, in [0, 1].
    pub wiener_gain: Array2<f64>,
    pub final_state: InferenceState,
    /// Mixture log-likelihood at the posterior-mean latent after each EM iteration.
    pub loglik_trace: Vec<f64>,
    pub acceptance_rate: f64,
}

/// Noisy power `|y|^2` in frame-major (T x F) layout.
fn frame_power(y: &ComplexSpectrogram) -> Array2<f64> {
    y.data.t().mapv(|c| c.norm_sqr())
}

fn check_dims(y: &ComplexSpectrogram, vae: &VaeParams) -> Result<()> {
    let f = vae.dims().input_dim;
    if y.bins() != f {
        return Err(McemError::Dimension(format!(
            "spectrogram has {} bins, VAE expects {f}",
            y.bins()
        )));
    }
    Ok(())
}

fn check_state(state: &InferenceState, y_pow: &Array2<f64>, latent_dim: usize) -> Result<()> {
    let (t, f) = y_pow.dim();
    if state.g.len() != t || state.nmf.bins() != f || state.nmf.frames() != t || state.z_chain.dim() != (t, latent_dim)
    {
        return Err(McemError::Dimension(format!(
            "state (g {}, W {:?}, H {:?}, z {:?}) does not fit a {t}-frame, {f}-bin mixture",
            state.g.len(),
            state.nmf.w.dim(),
            state.nmf.h.dim(),
            state.z_chain.dim()
        )));
    }
    Ok(())
}

/// `V = g_t * speech + noise`, all T x F, floored.
fn mixture_variance(g: &Array1<f64>, speech_tf: &Array2<f64>, noise_tf: &ArrayView2<f64>) -> Array2<f64> {
    let mut v = speech_tf.clone();
    Zip::from(v.rows_mut())
        .and(g)
        .for_each(|mut row, &gt| row.mapv_inplace(|s| s * gt));
    Zip::from(&mut v)
        .and(noise_tf)
        .for_each(|v, &n| *v = (*v + n).max(VARIANCE_FLOOR));
    v
}

/// Per-frame `sum_f -ln V - |y|^2 / V` (without the `-ln pi` constant).
fn frame_loglik(v: &Array2<f64>, y_pow: &Array2<f64>) -> Vec<f64> {
    v.outer_iter()
        .zip(y_pow.outer_iter())
        .map(|(v, y)| v.iter().zip(y.iter()).map(|(&v, &y)| -v.ln() - y / v).sum())
        .collect()
}

/// Standard-normal log density of each row of `z`, up to its constant.
pub fn log_prior(z: ArrayView2<f64>) -> Vec<f64> {
    z.outer_iter()
        .map(|row| -0.5 * row.iter().map(|v| v * v).sum::<f64>())
        .collect()
}

/// Complex Gaussian log-likelihood of the mixture given latents `z` (T x D).
pub fn mixture_loglik(
    y: &ComplexSpectrogram,
    z: ArrayView2<f64>,
    state: &InferenceState,
    vae: &VaeParams,
) -> Result<f64> {
    check_dims(y, vae)?;
    let y_pow = frame_power(y);
    let mut probe = state.clone();
    probe.z_chain = z.to_owned();
    check_state(&probe, &y_pow, vae.dims().latent_dim)?;
    let speech = vae.decode_frames(z)?;
    let noise = nmf::noise_variance(&state.nmf);
    let v = mixture_variance(&state.g, &speech, &noise.t());
    let per_frame = frame_loglik(&v, &y_pow);
    let bins = (y_pow.len()) as f64;
    Ok(per_frame.iter().sum::<f64>() - bins * PI.ln())
}

/// Warm start: encoder mean of `|y|^2`, unit gain, random NMF.
pub fn init_state(y: &ComplexSpectrogram, vae: &VaeParams, config: &McemConfig) -> Result<InferenceState> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_state_with_rng(y, vae, config, &mut rng)
}

fn init_state_with_rng<R: Rng + ?Sized>(
    y: &ComplexSpectrogram,
    vae: &VaeParams,
    config: &McemConfig,
    rng: &mut R,
) -> Result<InferenceState> {
    config.validate()?;
    check_dims(y, vae)?;
    let y_pow = frame_power(y);
    let z_chain = vae.encode_frames(y_pow.view())?.mean;
    Ok(InferenceState {
        g: Array1::ones(y.frames()),
        nmf: nmf::init_nmf(y.bins(), y.frames(), config.nmf_rank, rng)?,
        z_chain,
        retained_samples: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EStepStats {
    pub proposals: usize,
    pub accepted: usize,
}

impl EStepStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

struct Target<'a> {
    vae: &'a VaeParams,
    y_pow: &'a Array2<f64>,
    noise_tf: ArrayView2<'a, f64>,
    g: &'a Array1<f64>,
}

impl Target<'_> {
    fn eval(&self, z: &Array2<f64>) -> Result<Vec<f64>> {
        let speech = self.vae.decode_frames(z.view())?;
        let v = mixture_variance(self.g, &speech, &self.noise_tf);
        let lik = frame_loglik(&v, self.y_pow);
        let out: Vec<f64> = lik.iter().zip(log_prior(z.view())).map(|(l, p)| l + p).collect();
        if let Some(frame) = out.iter().position(|v| !v.is_finite()) {
            return Err(McemError::NonFiniteTarget { frame });
        }
        Ok(out)
    }
}

/// Advances every frame's chain `mh_iters_per_estep` steps and keeps the last
/// `n_samples` states in `state.retained_samples`.
pub fn e_step<R: Rng + ?Sized>(
    state: &mut InferenceState,
    y: &ComplexSpectrogram,
    vae: &VaeParams,
    config: &McemConfig,
    rng: &mut R,
) -> Result<EStepStats> {
    config.validate()?;
    check_dims(y, vae)?;
    let y_pow = frame_power(y);
    check_state(state, &y_pow, vae.dims().latent_dim)?;
    let noise = nmf::noise_variance(&state.nmf);
    let g = state.g.clone();
    let target = Target {
        vae,
        y_pow: &y_pow,
        noise_tf: noise.t(),
        g: &g,
    };

    let (frames, dim) = state.z_chain.dim();
    let mut current = target.eval(&state.z_chain)?;
    let mut stats = EStepStats {
        proposals: 0,
        accepted: 0,
    };
    let keep_from = config.mh_iters_per_estep - config.n_samples;
    state.retained_samples.clear();
    for step in 0..config.mh_iters_per_estep {
        let noise = vae::standard_normal((frames, dim), rng);
        let proposal = &state.z_chain + &(noise * config.proposal_std);
        let proposed = target.eval(&proposal)?;
        for t in 0..frames {
            let u: f64 = rng.random();
            stats.proposals += 1;
            if u.ln() < proposed[t] - current[t] {
                state.z_chain.row_mut(t).assign(&proposal.row(t));
                current[t] = proposed[t];
                stats.accepted += 1;
            }
        }
        if step >= keep_from {
            state.retained_samples.push(state.z_chain.clone());
        }
    }
    Ok(stats)
}

/// Monte Carlo averages over retained samples, all F x T.
struct Moments {
    vinv: Array2<f64>,
    vinv2: Array2<f64>,
    s_vinv: Array2<f64>,
    s_vinv2: Array2<f64>,
}

fn moments(state: &InferenceState, vae: &VaeParams, noise_tf: &ArrayView2<f64>) -> Result<Moments> {
    let (t, f) = noise_tf.dim();
    let mut m = Moments {
        vinv: Array2::zeros((t, f)),
        vinv2: Array2::zeros((t, f)),
        s_vinv: Array2::zeros((t, f)),
        s_vinv2: Array2::zeros((t, f)),
    };
    for z in &state.retained_samples {
        let speech = vae.decode_frames(z.view())?;
        let v = mixture_variance(&state.g, &speech, noise_tf);
        Zip::from(&mut m.vinv)
            .and(&mut m.vinv2)
            .and(&mut m.s_vinv)
            .and(&mut m.s_vinv2)
            .and(&speech)
            .and(&v)
            .for_each(|a1, a2, b1, b2, &s, &v| {
                let inv = 1.0 / v;
                let inv2 = inv * inv;
                *a1 += inv;
                *a2 += inv2;
                *b1 += s * inv;
                *b2 += s * inv2;
            });
    }
    let scale = 1.0 / state.retained_samples.len() as f64;
    for a in [&mut m.vinv, &mut m.vinv2, &mut m.s_vinv, &mut m.s_vinv2] {
        *a *= scale;
    }
    // Into F x T for the NMF updates.
    Ok(Moments {
        vinv: m.vinv.reversed_axes(),
        vinv2: m.vinv2.reversed_axes(),
        s_vinv: m.s_vinv.reversed_axes(),
        s_vinv2: m.s_vinv2.reversed_axes(),
    })
}

/// Updates `H`, then `W`, then `g` from a single set of Monte Carlo statistics.
pub fn m_step(state: &mut InferenceState, y: &ComplexSpectrogram, vae: &VaeParams) -> Result<()> {
    check_dims(y, vae)?;
    if state.retained_samples.is_empty() {
        return Err(McemError::NoSamples);
    }
    let y_pow_tf = frame_power(y);
    check_state(state, &y_pow_tf, vae.dims().latent_dim)?;
    let y_pow = y_pow_tf.t().to_owned();
    let noise = nmf::noise_variance(&state.nmf);
    let m = moments(state, vae, &noise.t())?;

    let updated = nmf::update_h(&state.nmf, &y_pow, &m.vinv, &m.vinv2)?;
    let updated = nmf::update_w(&updated, &y_pow, &m.vinv, &m.vinv2)?;

    // g_t <- g_t * [sum_f |y|^2 E[s V^-2] / sum_f E[s V^-1]]^(1/2)
    let mut g = state.g.clone();
    for (t, gt) in g.iter_mut().enumerate() {
        let num: f64 = y_pow
            .column(t)
            .iter()
            .zip(m.s_vinv2.column(t))
            .map(|(y, s)| y * s)
            .sum();
        let den: f64 = m.s_vinv.column(t).sum();
        let ratio = if den > 0.0 { num / den } else { 1.0 };
        *gt = (*gt * ratio.sqrt()).max(GAIN_FLOOR);
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(McemError::NonFinite("gain update"));
    }
    state.nmf = updated;
    state.g = g;
    Ok(())
}

/// Wiener gain `g s / (g s + n)` averaged over speech-variance samples.
///
/// `speech_samples` are T x F; `noise_var` is F x T; the result is F x T.
pub fn averaged_wiener_gain(g: &Array1<f64>, speech_samples: &[Array2<f64>], noise_var: &Array2<f64>) -> Array2<f64> {
    let mut acc = Array2::<f64>::zeros(noise_var.t().dim());
    for speech in speech_samples {
        Zip::from(&mut acc)
            .and(speech)
            .and(noise_var.t())
            .and_broadcast(g.view().insert_axis(Axis(1)))
            .for_each(|a, &s, &n, &gt| {
                let sp = gt * s;
                let den = sp + n;
                *a += if den > 0.0 { sp / den } else { 0.0 };
            });
    }
    if !speech_samples.is_empty() {
        acc /= speech_samples.len() as f64;
    }
    acc.mapv_inplace(|v| v.clamp(0.0, 1.0));
    acc.reversed_axes()
}

/// Single-variance Wiener gain, F x T in and out.
pub fn wiener_gain(speech_var: &Array2<f64>, noise_var: &Array2<f64>) -> Array2<f64> {
    let mut out = speech_var.clone();
    Zip::from(&mut out).and(noise_var).for_each(|s, &n| {
        let den = *s + n;
        *s = if den > 0.0 { (*s / den).clamp(0.0, 1.0) } else { 0.0 };
    });
    out
}

/// Applies an F x T real gain to every bin, keeping the noisy phase.
pub fn apply_gain(y: &ComplexSpectrogram, gain: &Array2<f64>) -> ComplexSpectrogram {
    let mut data = y.data.clone();
    Zip::from(&mut data)
        .and(gain)
        .for_each(|c, &w| *c *= Complex64::new(w, 0.0));
    ComplexSpectrogram {
        data,
        config: y.config,
        num_samples: y.num_samples,
    }
}

fn posterior_mean(samples: &[Array2<f64>]) -> Array2<f64> {
    let mut mean = samples[0].clone();
    for s in &samples[1..] {
        mean += s;
    }
    mean / samples.len() as f64
}

/// Full inference and Wiener reconstruction for one noisy spectrogram.
pub fn run_mcem(y: &ComplexSpectrogram, vae: &VaeParams, config: &McemConfig) -> Result<EnhancementOutput> {
    config.validate()?;
    check_dims(y, vae)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = init_state_with_rng(y, vae, config, &mut rng)?;
    if y.frames() == 0 {
        return Ok(EnhancementOutput {
            enhanced_spec: y.clone(),
            wiener_gain: Array2::zeros((y.bins(), 0)),
            final_state: state,
            loglik_trace: Vec::new(),
            acceptance_rate: 0.0,
        });
    }

    let mut trace = Vec::with_capacity(config.n_em_iters);
    let mut proposals = 0;
    let mut accepted = 0;
    for iter in 0..config.n_em_iters {
        let stats = e_step(&mut state, y, vae, config, &mut rng)?;
        proposals += stats.proposals;
        accepted += stats.accepted;
        m_step(&mut state, y, vae)?;
        let ll = mixture_loglik(y, posterior_mean(&state.retained_samples).view(), &state, vae)?;
        log::trace!(
            "mcem iter {iter}: loglik {ll:.3}, acceptance {:.3}",
            stats.acceptance_rate()
        );
        trace.push(ll);
    }

    let speech: Vec<Array2<f64>> = state
        .retained_samples
        .iter()
        .map(|z| vae.decode_frames(z.view()))
        .collect::<std::result::Result<_, _>>()?;
    let noise = nmf::noise_variance(&state.nmf);
    let gain = averaged_wiener_gain(&state.g, &speech, &noise);
    if !gain.iter().all(|v| v.is_finite()) {
        return Err(McemError::NonFinite("Wiener gain"));
    }
    let enhanced = apply_gain(y, &gain);
    if !enhanced.data.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
        return Err(McemError::NonFinite("enhanced spectrogram"));
    }
    Ok(EnhancementOutput {
        enhanced_spec: enhanced,
        wiener_gain: gain,
        final_state: state,
        loglik_trace: trace,
        acceptance_rate: if proposals == 0 {
            0.0
        } else {
            accepted as f64 / proposals as f64
        },
    })
}
