//! Synthetic harmonic "speech": voiced syllables whose harmonics follow a
//! speaker-specific formant envelope.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vaenmf::dsp::WaveformBuffer;

pub const RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    /// Typical voices.
    A,
    /// Shifted statistics: displaced formants, tremor and breathiness.
    B,
}

#[derive(Debug, Clone)]
pub struct Voice {
    pub f0: f64,
    /// (centre Hz, bandwidth Hz, linear gain)
    pub formants: Vec<(f64, f64, f64)>,
    pub tilt_db_per_khz: f64,
    pub tremor_depth: f64,
    pub breath: f64,
}

impl Voice {
    pub fn for_speaker(pop: Population, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + index * 7 + pop as u64 * 1000);
        match pop {
            Population::A => {
                let shift = rng.random_range(0.92..1.08);
                Voice {
                    f0: rng.random_range(100.0..220.0),
                    formants: vec![
                        (600.0 * shift, 120.0, 1.0),
                        (1500.0 * shift, 180.0, 0.5),
                        (2600.0 * shift, 250.0, 0.25),
                    ],
                    tilt_db_per_khz: 3.0,
                    tremor_depth: 0.0,
                    breath: 0.02,
                }
            }
            Population::B => {
                // Large per-speaker spread on top of a common displacement.
                let s1 = rng.random_range(0.6..1.5);
                let s2 = rng.random_range(0.6..1.5);
                Voice {
                    f0: rng.random_range(160.0..320.0),
                    formants: vec![
                        (420.0 * s1, 90.0, 1.0),
                        (2100.0 * s2, 150.0, 0.8),
                        (3600.0 * s2, 300.0, 0.5),
                    ],
                    tilt_db_per_khz: 1.0,
                    tremor_depth: rng.random_range(0.03..0.08),
                    breath: rng.random_range(0.05..0.12),
                }
            }
        }
    }

    fn envelope(&self, f: f64, vowel: &[f64]) -> f64 {
        let peaks: f64 = self
            .formants
            .iter()
            .zip(vowel)
            .map(|(&(c, bw, g), &v)| g * (-0.5 * ((f - c * v) / bw).powi(2)).exp())
            .sum();
        (peaks + 0.01) * 10f64.powf(-self.tilt_db_per_khz * f / 1000.0 / 20.0)
    }
}

/// One utterance of roughly `duration_s` seconds, peak-normalised to 0.5.
pub fn utterance(voice: &Voice, duration_s: f64, seed: u64) -> WaveformBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (duration_s * RATE as f64) as usize;
    let mut out = Vec::with_capacity(total);
    let dt = 1.0 / RATE as f64;
    let mut phase = 0.0f64;
    while out.len() < total {
        let syl = ((rng.random_range(0.12..0.3) * RATE as f64) as usize).min(total - out.len());
        let vowel: Vec<f64> = voice.formants.iter().map(|_| rng.random_range(0.85..1.15)).collect();
        let f0_start = voice.f0 * rng.random_range(0.9..1.1);
        let f0_end = f0_start * rng.random_range(0.9..1.1);
        let n_harm = ((7600.0 / f0_start.max(f0_end) * 1.1) as usize).max(1);
        let amps: Vec<f64> = (1..=n_harm)
            .map(|h| voice.envelope(h as f64 * (f0_start + f0_end) / 2.0, &vowel))
            .collect();
        let level = rng.random_range(0.5..1.0);
        for i in 0..syl {
            let u = i as f64 / syl as f64;
            let t = out.len() as f64 * dt;
            let tremor = 1.0 + voice.tremor_depth * (2.0 * PI * 5.0 * t).sin();
            let f0 = (f0_start + (f0_end - f0_start) * u) * tremor;
            phase = (phase + 2.0 * PI * f0 * dt) % (2.0 * PI);
            let env = level * (PI * u).sin().powf(0.5) * tremor;
            let mut x = 0.0;
            for (h, a) in amps.iter().enumerate() {
                x += a * ((h + 1) as f64 * phase).sin();
            }
            x += voice.breath * rng.random_range(-1.0..1.0) * amps[0];
            out.push(env * x);
        }
        let gap = ((rng.random_range(0.03..0.08) * RATE as f64) as usize).min(total - out.len());
        for _ in 0..gap {
            out.push(1e-3 * rng.random_range(-1.0..1.0));
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    WaveformBuffer::new(out, RATE)
}

pub fn white_noise(duration_s: f64, seed: u64) -> WaveformBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * RATE as f64) as usize;
    WaveformBuffer::new((0..n).map(|_| rng.random_range(-0.3..0.3)).collect(), RATE)
}
