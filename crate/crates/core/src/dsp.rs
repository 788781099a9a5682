//! Audio I/O, resampling and the STFT front-end.
//!
//! Framing convention: the signal is padded with `window_len - hop` zeros on
//! both sides, then cut into frames every `hop` samples until the padded
//! signal is covered. For a signal of `L > 0` samples this yields
//!
//! ```text
//! T = ceil(L / hop) + window_len / hop - 1
//! ```
//!
//! frames, and every original sample is seen by exactly `window_len / hop`
//! frames, so the weighted overlap-add inverse is exact over the whole
//! signal. An empty signal gives zero frames.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sample rate every pipeline entry point expects.
pub const PIPELINE_RATE_HZ: u32 = 16_000;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("wav i/o: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported wav encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("expected mono audio, found {0} channels")]
    Multichannel(u16),
    #[error("expected {expected} Hz audio, found {found} Hz (resample first)")]
    SampleRate { expected: u32, found: u32 },
    #[error("invalid stft config: {0}")]
    InvalidConfig(String),
    #[error("spectrogram has {found} bins but config expects {expected}")]
    ConfigMismatch { expected: usize, found: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
}

pub type Result<T> = std::result::Result<T, DspError>;

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl WaveformBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Fails unless the buffer is at the pipeline rate and fully finite.
    pub fn check_pipeline_ready(&self) -> Result<()> {
        if self.sample_rate_hz != PIPELINE_RATE_HZ {
            return Err(DspError::SampleRate {
                expected: PIPELINE_RATE_HZ,
                found: self.sample_rate_hz,
            });
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(DspError::NonFinite(i));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 64 ms Hann window with a 16 ms hop at 16 kHz.
    fn default() -> Self {
        Self {
            window_len: 1024,
            hop: 256,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        let cfg = Self {
            window_len,
            hop,
            window: WindowKind::Hann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || self.hop == 0 {
            return Err(DspError::InvalidConfig(format!(
                "window {} / hop {} must be positive",
                self.window_len, self.hop
            )));
        }
        if !self.window_len.is_multiple_of(2) {
            return Err(DspError::InvalidConfig("window length must be even".into()));
        }
        if !self.window_len.is_multiple_of(self.hop) || self.window_len / self.hop < 2 {
            return Err(DspError::InvalidConfig(format!(
                "hop {} must divide window {} with at least 2x overlap",
                self.hop, self.window_len
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Frames produced for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        if len == 0 {
            0
        } else {
            len.div_ceil(self.hop) + self.window_len / self.hop - 1
        }
    }

    fn pad(&self) -> usize {
        self.window_len - self.hop
    }

    /// Periodic Hann window.
    pub fn window_coefficients(&self) -> Vec<f64> {
        let n = self.window_len as f64;
        (0..self.window_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
            .collect()
    }
}

/// F x T complex STFT coefficients, plus the length of the signal they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Array2<Complex64>,
    pub config: StftConfig,
    pub num_samples: usize,
}

impl ComplexSpectrogram {
    pub fn bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }
}

/// F x T non-negative power values.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    pub data: Array2<f64>,
}

impl PowerSpectrogram {
    pub fn bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<WaveformBuffer> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::Multichannel(spec.channels));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (fmt, bits) => {
            return Err(DspError::UnsupportedEncoding(format!(
                "{fmt:?} {bits}-bit (only PCM16 and float32 are supported)"
            )))
        }
    };
    Ok(WaveformBuffer::new(samples, spec.sample_rate))
}

/// Writes 16-bit PCM and returns the number of samples that had to be clipped.
pub fn write_wav(buffer: &WaveformBuffer, path: impl AsRef<Path>) -> Result<usize> {
    if let Some(i) = buffer.samples.iter().position(|s| !s.is_finite()) {
        return Err(DspError::NonFinite(i));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    let mut clipped = 0;
    for &s in &buffer.samples {
        if !(-1.0..=1.0).contains(&s) {
            clipped += 1;
        }
        let q = (s.clamp(-1.0, 1.0) * 32768.0)
            .round()
            .clamp(i16::MIN as f64, i16::MAX as f64);
        writer.write_sample(q as i16)?;
    }
    writer.finalize()?;
    if clipped > 0 {
        log::warn!("clipped {clipped} samples writing {}", path.as_ref().display());
    }
    Ok(clipped)
}

// Kaiser-windowed sinc resampler parameters.
const RESAMPLE_ZERO_CROSSINGS: usize = 32;
const RESAMPLE_KAISER_BETA: f64 = 8.0;
const RESAMPLE_ROLLOFF: f64 = 0.96;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational polyphase resampler with a Kaiser-windowed sinc kernel.
///
/// The kernel spans 32 zero crossings of the low-pass sinc on each side
/// (64 per phase, measured at the lower of the two rates). Near the signal
/// edges the taps that fall inside the signal are renormalised to unit sum,
/// so constant signals pass through unchanged.
pub fn resample(buffer: &WaveformBuffer, target_hz: u32) -> Result<WaveformBuffer> {
    let src_hz = buffer.sample_rate_hz;
    if src_hz == 0 {
        return Err(DspError::InvalidRate(src_hz));
    }
    if target_hz == 0 {
        return Err(DspError::InvalidRate(target_hz));
    }
    if src_hz == target_hz {
        return Ok(buffer.clone());
    }
    let g = gcd(src_hz as u64, target_hz as u64);
    let up = target_hz as u64 / g;
    let down = src_hz as u64 / g;

    let n_in = buffer.samples.len();
    let n_out = ((n_in as u64 * up).div_ceil(down)) as usize;
    // Cutoff in cycles per input sample.
    let cutoff = 0.5 * RESAMPLE_ROLLOFF * (up as f64 / down as f64).min(1.0);
    let half_width = RESAMPLE_ZERO_CROSSINGS as f64 / (2.0 * cutoff);
    let reach = half_width.ceil() as i64;
    let i0_beta = bessel_i0(RESAMPLE_KAISER_BETA);

    // One tap set per fractional phase r/up, covering input offsets
    // k in (i - reach, i + reach], tau = (i + r/up) - k.
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|r| {
            let frac = r as f64 / up as f64;
            (-reach + 1..=reach)
                .map(|off| {
                    let tau = frac - off as f64;
                    let ratio = tau / half_width;
                    if ratio.abs() >= 1.0 {
                        0.0
                    } else {
                        let kaiser = bessel_i0(RESAMPLE_KAISER_BETA * (1.0 - ratio * ratio).sqrt()) / i0_beta;
                        2.0 * cutoff * sinc(2.0 * cutoff * tau) * kaiser
                    }
                })
                .collect()
        })
        .collect();
    let total: Vec<f64> = phases.iter().map(|p| p.iter().sum()).collect();

    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n * down;
        let i = (pos / up) as i64;
        let r = (pos % up) as usize;
        let taps = &phases[r];
        let mut acc = 0.0;
        let mut inside = 0.0;
        for (j, &h) in taps.iter().enumerate() {
            let k = i - reach + 1 + j as i64;
            if k >= 0 && (k as usize) < n_in {
                acc += h * buffer.samples[k as usize];
                inside += h;
            }
        }
        // Inside the signal `inside` equals the full tap sum; at the edges it
        // renormalises the truncated kernel.
        out.push(if inside.abs() > 1e-3 {
            acc / inside
        } else {
            acc / total[r]
        });
    }
    Ok(WaveformBuffer::new(out, target_hz))
}

pub fn resample_to_16k(buffer: &WaveformBuffer) -> Result<WaveformBuffer> {
    resample(buffer, PIPELINE_RATE_HZ)
}

/// Cached FFT plans for one STFT configuration.
pub struct StftProcessor {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftProcessor {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: config.window_coefficients(),
            forward: planner.plan_fft_forward(config.window_len),
            inverse: planner.plan_fft_inverse(config.window_len),
            config,
        })
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    /// Forward transform of a buffer at any rate; see [`stft`] for the
    /// pipeline-checked entry point.
    pub fn analyze(&self, samples: &[f64]) -> ComplexSpectrogram {
        let cfg = self.config;
        let n = cfg.window_len;
        let frames = cfg.num_frames(samples.len());
        let pad = cfg.pad() as i64;
        let mut data = Array2::zeros((cfg.bins(), frames));
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let start = (t * cfg.hop) as i64 - pad;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = start + i as i64;
                let x = if idx >= 0 && (idx as usize) < samples.len() {
                    samples[idx as usize]
                } else {
                    0.0
                };
                *slot = Complex64::new(x * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for f in 0..cfg.bins() {
                data[[f, t]] = buf[f];
            }
        }
        ComplexSpectrogram {
            data,
            config: cfg,
            num_samples: samples.len(),
        }
    }

    /// Weighted overlap-add inverse, normalised by the summed squared window.
    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
        let cfg = self.config;
        if spec.config != cfg {
            return Err(DspError::InvalidConfig(format!(
                "spectrogram config {:?} does not match processor {:?}",
                spec.config, cfg
            )));
        }
        if spec.bins() != cfg.bins() {
            return Err(DspError::ConfigMismatch {
                expected: cfg.bins(),
                found: spec.bins(),
            });
        }
        let n = cfg.window_len;
        let frames = spec.frames();
        let padded_len = if frames == 0 { 0 } else { (frames - 1) * cfg.hop + n };
        let mut acc = vec![0.0; padded_len];
        let mut norm = vec![0.0; padded_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let scale = 1.0 / n as f64;
        for t in 0..frames {
            for (slot, &c) in buf.iter_mut().zip(spec.data.column(t)) {
                *slot = c;
            }
            // Hermitian extension; DC and Nyquist are forced real.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            for f in 1..n / 2 {
                buf[n - f] = buf[f].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * cfg.hop;
            for i in 0..n {
                acc[start + i] += buf[i].re * scale * self.window[i];
                norm[start + i] += self.window[i] * self.window[i];
            }
        }
        let pad = cfg.pad();
        let out = (0..spec.num_samples)
            .map(|i| {
                let j = i + pad;
                if j < padded_len && norm[j] > 1e-12 {
                    acc[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect();
        Ok(out)
    }
}

pub fn stft(buffer: &WaveformBuffer, config: StftConfig) -> Result<ComplexSpectrogram> {
    buffer.check_pipeline_ready()?;
    Ok(StftProcessor::new(config)?.analyze(&buffer.samples))
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<WaveformBuffer> {
    let samples = StftProcessor::new(spec.config)?.synthesize(spec)?;
    Ok(WaveformBuffer::new(samples, PIPELINE_RATE_HZ))
}

pub fn power(spec: &ComplexSpectrogram) -> PowerSpectrogram {
    PowerSpectrogram {
        data: spec.data.mapv(|c| c.norm_sqr()),
    }
}
