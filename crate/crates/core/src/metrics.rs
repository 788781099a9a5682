//! Objective quality measures and the per-utterance / aggregate report.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::dsp::WaveformBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: reference {reference}, estimate {estimate}")]
    LengthMismatch { reference: usize, estimate: usize },
    #[error("sample rate mismatch: {0} vs {1}")]
    RateMismatch(u32, u32),
    #[error("reference signal is silent")]
    SilentReference,
    #[error("report needs at least one row")]
    EmptyReport,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_pair(reference: &WaveformBuffer, estimate: &WaveformBuffer) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(MetricsError::LengthMismatch {
            reference: reference.len(),
            estimate: estimate.len(),
        });
    }
    if reference.sample_rate_hz != estimate.sample_rate_hz {
        return Err(MetricsError::RateMismatch(
            reference.sample_rate_hz,
            estimate.sample_rate_hz,
        ));
    }
    Ok(())
}

/// Scale-invariant SDR in dB. Returns `+inf` when the estimate is an exact
/// scaled copy of the reference.
pub fn si_sdr(reference: &WaveformBuffer, estimate: &WaveformBuffer) -> Result<f64> {
    check_pair(reference, estimate)?;
    let s = &reference.samples;
    let e = &estimate.samples;
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(MetricsError::SilentReference);
    }
    let alpha = s.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / ss;
    let target: f64 = alpha * alpha * ss;
    let residual: f64 = s.iter().zip(e).map(|(a, b)| (b - alpha * a).powi(2)).sum();
    if residual == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / residual).log10())
}

// Critical-band centre frequencies and bandwidths (Hz), 25 bands.
const BAND_CENTRES: [f64; 25] = [
    50.0, 120.0, 190.0, 260.0, 330.0, 400.0, 470.0, 540.0, 617.372, 703.378, 798.717, 904.128, 1020.38, 1148.30,
    1288.72, 1442.54, 1610.70, 1794.16, 1993.93, 2211.08, 2446.71, 2701.97, 2978.04, 3276.17, 3597.63,
];
const BAND_WIDTHS: [f64; 25] = [
    70.0, 70.0, 70.0, 70.0, 70.0, 70.0, 70.0, 77.3724, 86.0056, 95.3398, 105.411, 116.256, 127.914, 140.423, 153.823,
    168.154, 183.457, 199.776, 217.153, 235.631, 255.255, 276.072, 298.126, 321.465, 346.136,
];

pub const FWSSNR_MIN_DB: f64 = -10.0;
pub const FWSSNR_MAX_DB: f64 = 35.0;
const FWSSNR_GAMMA: f64 = 0.2;
/// Reference frames quieter than this, relative to the loudest frame, are skipped.
const SILENT_FRAME_REL: f64 = 1e-8;

/// Frequency-weighted segmental SNR analyser for one sample rate.
pub struct FwSsnr {
    frame_len: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// 25 Gaussian band weightings over the first `n_fft / 2` bins.
    filters: Vec<Vec<f64>>,
}

impl FwSsnr {
    /// 32 ms Hann frames with a 16 ms hop.
    pub fn new(sample_rate_hz: u32) -> Self {
        let frame_len = (0.032 * sample_rate_hz as f64).round() as usize;
        let hop = frame_len / 2;
        let n_fft = (2 * frame_len).next_power_of_two();
        let half = n_fft / 2;
        let max_freq = sample_rate_hz as f64 / 2.0;
        let min_factor = (-30.0f64 / (2.0 * 2.303)).exp();
        let filters = BAND_CENTRES
            .iter()
            .zip(&BAND_WIDTHS)
            .map(|(&centre, &width)| {
                let f0 = (centre / max_freq * half as f64).floor();
                let bw = width / max_freq * half as f64;
                let norm = BAND_WIDTHS[0].ln() - width.ln();
                (0..half)
                    .map(|j| {
                        let v = (-11.0 * ((j as f64 - f0) / bw).powi(2) + norm).exp();
                        if v > min_factor {
                            v
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let window = (0..frame_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * (i as f64 + 1.0) / (frame_len as f64 + 1.0)).cos())
            .collect();
        Self {
            frame_len,
            hop,
            window,
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            filters,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn band_filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Band energies of one frame: filters applied to the magnitude spectrum.
    fn band_energies(&self, frame: &[f64]) -> Vec<f64> {
        let n_fft = self.fft.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        for (i, (&x, &w)) in frame.iter().zip(&self.window).enumerate() {
            buf[i] = Complex64::new(x * w, 0.0);
        }
        self.fft.process(&mut buf);
        let mag: Vec<f64> = buf[..n_fft / 2].iter().map(|c| c.norm()).collect();
        self.filters
            .iter()
            .map(|filt| filt.iter().zip(&mag).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn frames<'a>(&self, x: &'a [f64]) -> Vec<std::borrow::Cow<'a, [f64]>> {
        if x.len() < self.frame_len {
            let mut padded = x.to_vec();
            padded.resize(self.frame_len, 0.0);
            return vec![padded.into()];
        }
        (0..=(x.len() - self.frame_len) / self.hop)
            .map(|k| x[k * self.hop..k * self.hop + self.frame_len].into())
            .collect()
    }

    pub fn evaluate(&self, reference: &WaveformBuffer, estimate: &WaveformBuffer) -> Result<f64> {
        check_pair(reference, estimate)?;
        let ref_frames = self.frames(&reference.samples);
        let est_frames = self.frames(&estimate.samples);
        let energy: Vec<f64> = ref_frames.iter().map(|f| f.iter().map(|v| v * v).sum()).collect();
        let loudest = energy.iter().cloned().fold(0.0, f64::max);
        if loudest == 0.0 {
            return Err(MetricsError::SilentReference);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for ((r, e), &en) in ref_frames.iter().zip(&est_frames).zip(&energy) {
            if en < SILENT_FRAME_REL * loudest {
                continue;
            }
            total += fwssnr_frame(&self.band_energies(r), &self.band_energies(e));
            count += 1;
        }
        Ok(total / count as f64)
    }
}

/// Weighted, clipped band SNR of a single frame from its band energies.
pub fn fwssnr_frame(ref_bands: &[f64], est_bands: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&r, &e) in ref_bands.iter().zip(est_bands) {
        let weight = r.powf(FWSSNR_GAMMA);
        let err = (r - e).powi(2);
        let snr = if err == 0.0 {
            FWSSNR_MAX_DB
        } else {
            (10.0 * (r * r / err).log10()).clamp(FWSSNR_MIN_DB, FWSSNR_MAX_DB)
        };
        num += weight * snr;
        den += weight;
    }
    if den == 0.0 {
        FWSSNR_MIN_DB
    } else {
        num / den
    }
}

pub fn fwssnr(reference: &WaveformBuffer, estimate: &WaveformBuffer) -> Result<f64> {
    FwSsnr::new(reference.sample_rate_hz).evaluate(reference, estimate)
}

/// Runs an external PESQ tool. `{ref}` and `{est}` in the whitespace-separated
/// template are replaced by the two paths; the last token on stdout is parsed
/// as the score. Any failure yields `None`.
pub fn pesq_external(reference: &Path, estimate: &Path, template: &str) -> Option<f64> {
    let mut parts = template.split_whitespace().map(|tok| {
        tok.replace("{ref}", &reference.to_string_lossy())
            .replace("{est}", &estimate.to_string_lossy())
    });
    let program = parts.next()?;
    let output = match Command::new(&program).args(parts).output() {
        Ok(o) => o,
        Err(e) => {
            log::warn!("pesq command {program:?} failed to start: {e}");
            return None;
        }
    };
    if !output.status.success() {
        log::warn!("pesq command exited with {}", output.status);
        return None;
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let value = stdout.split_whitespace().last()?.parse::<f64>().ok();
    if value.is_none() {
        log::warn!("could not parse pesq output {stdout:?}");
    }
    value.filter(|v| v.is_finite())
}

fn ser_float<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&format_float(*v))
    }
}

fn ser_opt_float<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => ser_float(v, s),
        None => s.serialize_none(),
    }
}

fn format_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceMetrics {
    pub utterance_id: String,
    pub speaker_id: String,
    pub group: String,
    #[serde(serialize_with = "ser_float")]
    pub si_sdr_noisy: f64,
    #[serde(serialize_with = "ser_float")]
    pub si_sdr_enhanced: f64,
    #[serde(serialize_with = "ser_float")]
    pub fwssnr_noisy: f64,
    #[serde(serialize_with = "ser_float")]
    pub fwssnr_enhanced: f64,
    #[serde(serialize_with = "ser_opt_float")]
    pub pesq_noisy: Option<f64>,
    #[serde(serialize_with = "ser_opt_float")]
    pub pesq_enhanced: Option<f64>,
}

/// `enhanced - noisy`, with equal values (including two infinities) giving 0.
fn delta(noisy: f64, enhanced: f64) -> f64 {
    if noisy == enhanced {
        0.0
    } else {
        enhanced - noisy
    }
}

impl UtteranceMetrics {
    pub fn delta_si_sdr(&self) -> f64 {
        delta(self.si_sdr_noisy, self.si_sdr_enhanced)
    }

    pub fn delta_fwssnr(&self) -> f64 {
        delta(self.fwssnr_noisy, self.fwssnr_enhanced)
    }

    pub fn delta_pesq(&self) -> Option<f64> {
        Some(delta(self.pesq_noisy?, self.pesq_enhanced?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSem {
    #[serde(serialize_with = "ser_float")]
    pub mean: f64,
    /// Standard error of the mean; 0 for a single value.
    #[serde(serialize_with = "ser_float")]
    pub sem: f64,
    pub n: usize,
}

impl MeanSem {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sem = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Some(Self { mean, sem, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    /// Group label, or `overall`.
    pub scope: String,
    pub delta_si_sdr: MeanSem,
    pub delta_fwssnr: MeanSem,
    pub delta_pesq: Option<MeanSem>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<UtteranceMetrics>,
    pub aggregates: Vec<AggregateRow>,
}

fn aggregate(scope: &str, rows: &[&UtteranceMetrics]) -> AggregateRow {
    let si: Vec<f64> = rows.iter().map(|r| r.delta_si_sdr()).collect();
    let fw: Vec<f64> = rows.iter().map(|r| r.delta_fwssnr()).collect();
    let pesq: Vec<f64> = rows.iter().filter_map(|r| r.delta_pesq()).collect();
    AggregateRow {
        scope: scope.to_string(),
        delta_si_sdr: MeanSem::of(&si).expect("non-empty"),
        delta_fwssnr: MeanSem::of(&fw).expect("non-empty"),
        delta_pesq: MeanSem::of(&pesq),
    }
}

/// Per-group (sorted by name) and overall mean and SEM of each delta.
pub fn build_report(rows: Vec<UtteranceMetrics>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyReport);
    }
    let mut groups: Vec<&str> = rows.iter().map(|r| r.group.as_str()).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut aggregates: Vec<AggregateRow> = groups
        .iter()
        .map(|g| {
            let members: Vec<&UtteranceMetrics> = rows.iter().filter(|r| r.group == *g).collect();
            aggregate(g, &members)
        })
        .collect();
    aggregates.push(aggregate("overall", &rows.iter().collect::<Vec<_>>()));
    Ok(MetricsReport { rows, aggregates })
}

impl MetricsReport {
    pub fn has_pesq(&self) -> bool {
        self.rows
            .iter()
            .any(|r| r.pesq_noisy.is_some() || r.pesq_enhanced.is_some())
    }

    pub fn aggregate(&self, scope: &str) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.scope == scope)
    }

    /// Per-utterance table, a blank line, then the aggregate block. PESQ
    /// columns appear only when some row carries a PESQ value.
    pub fn to_csv(&self) -> String {
        let pesq = self.has_pesq();
        let opt = |v: Option<f64>| v.map(format_float).unwrap_or_else(|| "unavailable".into());
        let mut out = String::from(
            "utterance_id,speaker_id,group,si_sdr_noisy,si_sdr_enhanced,delta_si_sdr,fwssnr_noisy,fwssnr_enhanced,delta_fwssnr",
        );
        if pesq {
            out.push_str(",pesq_noisy,pesq_enhanced,delta_pesq");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.utterance_id,
                r.speaker_id,
                r.group,
                format_float(r.si_sdr_noisy),
                format_float(r.si_sdr_enhanced),
                format_float(r.delta_si_sdr()),
                format_float(r.fwssnr_noisy),
                format_float(r.fwssnr_enhanced),
                format_float(r.delta_fwssnr()),
            );
            if pesq {
                let _ = write!(
                    out,
                    ",{},{},{}",
                    opt(r.pesq_noisy),
                    opt(r.pesq_enhanced),
                    opt(r.delta_pesq())
                );
            }
            out.push('\n');
        }
        out.push('\n');
        out.push_str("scope,n,delta_si_sdr_mean,delta_si_sdr_sem,delta_fwssnr_mean,delta_fwssnr_sem");
        if pesq {
            out.push_str(",delta_pesq_mean,delta_pesq_sem");
        }
        out.push('\n');
        for a in &self.aggregates {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                a.scope,
                a.delta_si_sdr.n,
                format_float(a.delta_si_sdr.mean),
                format_float(a.delta_si_sdr.sem),
                format_float(a.delta_fwssnr.mean),
                format_float(a.delta_fwssnr.sem),
            );
            if pesq {
                let _ = write!(
                    out,
                    ",{},{}",
                    opt(a.delta_pesq.map(|p| p.mean)),
                    opt(a.delta_pesq.map(|p| p.sem))
                );
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
