//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p vaenmf-cli --test acceptance`.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vaenmf::corpus::{self, SNR_CHOICES_DB};
use vaenmf::dsp::{self, ComplexSpectrogram, StftConfig, WaveformBuffer};
use vaenmf::mcem::{self, InferenceState, McemConfig};
use vaenmf::metrics::{self, FwSsnr, UtteranceMetrics};
use vaenmf::nmf::{self, NmfParams};
use vaenmf::vae::{
    self, Checkpoint, LossTerm, PlateauTracker, Provenance, StopReason, TrainConfig, TrainInit, VaeDims, VaeParams,
};

use common::synth::{utterance, white_noise, Population, Voice};
use common::{quick_config, write_config, Fixture};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_rms(reference: &[f64], estimate: &[f64]) -> f64 {
    let err: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
    let norm: f64 = reference.iter().map(|a| a * a).sum();
    (err / norm).sqrt()
}

fn max_rel_change(before: &[f64], after: &[f64]) -> f64 {
    before
        .iter()
        .zip(after)
        .map(|(a, b)| ((a - b) / a).abs())
        .fold(0.0, f64::max)
}

fn stft_default() -> StftConfig {
    StftConfig::default()
}

// Shared toy model: three population-A speakers, ten 10 s utterances each
// (about 5 min); the last utterance of each speaker is held out.
const TOY_SPEAKERS: u64 = 3;
const TOY_UTTERANCES: u64 = 10;
const TOY_SECONDS: f64 = 10.0;

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 30,
        seed: 1,
        ..Default::default()
    }
}

fn voice_frames(pop: Population, speaker: u64, secs: f64, count: u64, seed: u64) -> Array2<f64> {
    let voice = Voice::for_speaker(pop, speaker);
    let parts: Vec<_> = (0..count)
        .map(|u| corpus::waveform_frames(&utterance(&voice, secs, seed + u), stft_default()).unwrap())
        .collect();
    corpus::concat_frames(&parts, stft_default().bins()).unwrap()
}

fn toy_model() -> &'static Checkpoint {
    static MODEL: OnceLock<Checkpoint> = OnceLock::new();
    MODEL.get_or_init(|| {
        let bins = stft_default().bins();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for s in 0..TOY_SPEAKERS {
            let voice = Voice::for_speaker(Population::A, s);
            for u in 0..TOY_UTTERANCES {
                let frames =
                    corpus::waveform_frames(&utterance(&voice, TOY_SECONDS, s * 100 + u), stft_default()).unwrap();
                if u + 1 == TOY_UTTERANCES {
                    val.push(frames);
                } else {
                    train.push(frames);
                }
            }
        }
        let train = corpus::concat_frames(&train, bins).unwrap();
        let val = corpus::concat_frames(&val, bins).unwrap();
        let stft = stft_default();
        vae::train(
            train.view(),
            val.view(),
            &toy_train_config(),
            TrainInit::Scratch {
                dims: VaeDims::for_stft(&stft),
                stft,
            },
        )
        .unwrap()
    })
}

/// 3 s of a population-A voice plus white noise at 0 dB.
struct NoisyFixture {
    clean: WaveformBuffer,
    noise: WaveformBuffer,
    noisy: WaveformBuffer,
    y: ComplexSpectrogram,
}

fn noisy_fixture() -> &'static NoisyFixture {
    static FIXTURE: OnceLock<NoisyFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let clean = utterance(&Voice::for_speaker(Population::A, 1), 3.0, 999);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mix = corpus::synthesize_mixture(&clean, &white_noise(3.0, 5), 0.0, &mut rng).unwrap();
        let y = dsp::stft(&mix.noisy, stft_default()).unwrap();
        NoisyFixture {
            clean,
            noise: mix.scaled_noise,
            noisy: mix.noisy,
            y,
        }
    })
}

fn enhance(y: &ComplexSpectrogram, params: &VaeParams, cfg: &McemConfig) -> (WaveformBuffer, mcem::EnhancementOutput) {
    let out = mcem::run_mcem(y, params, cfg).unwrap();
    (dsp::istft(&out.enhanced_spec).unwrap(), out)
}

fn delta_si_sdr(clean: &WaveformBuffer, noisy: &WaveformBuffer, enhanced: &WaveformBuffer) -> f64 {
    metrics::si_sdr(clean, enhanced).unwrap() - metrics::si_sdr(clean, noisy).unwrap()
}

fn stft_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = WaveformBuffer::new((0..16_000).map(|_| rng.random_range(-1.0..1.0)).collect(), 16_000);
    let back = dsp::istft(&dsp::stft(&x, stft_default()).unwrap()).unwrap();
    if back.len() != x.len() {
        return Err(format!("length {} != {}", back.len(), x.len()));
    }
    let err = rel_rms(&x.samples, &back.samples);
    check(err < 1e-10, format!("relative RMS error {err:.3e}"))
}

fn entry(p: &mut VaeParams, layer: usize, bias: bool, i: usize) -> &mut f64 {
    let dense = p.layers_mut().into_iter().nth(layer).unwrap();
    if bias {
        &mut dense.bias.as_slice_mut().unwrap()[i]
    } else {
        &mut dense.weight.as_slice_mut().unwrap()[i]
    }
}

fn gradient_check() -> Outcome {
    let dims = VaeDims {
        input_dim: 8,
        hidden_dim: 4,
        latent_dim: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = VaeParams::init(dims, &mut rng);
    let frames = Array2::from_shape_simple_fn((6, 8), || rng.random_range(0.1..2.0));
    let eps = vae::standard_normal((6, 2), &mut rng);
    let loss = |p: &VaeParams| {
        vae::loss_with_noise(p, frames.view(), &eps, LossTerm::Full)
            .unwrap()
            .0
            .total()
    };
    let (_, grad) = vae::loss_with_noise(&params, frames.view(), &eps, LossTerm::Full).unwrap();
    let h = 1e-5;
    let names = ["enc_hidden", "enc_mean", "enc_logvar", "dec_hidden", "dec_out"];
    let mut worst = 0.0f64;
    let mut report = Vec::new();
    for (l, g) in grad.layers().into_iter().enumerate() {
        for bias in [false, true] {
            let analytic: Vec<f64> = if bias {
                g.bias.to_vec()
            } else {
                g.weight.iter().copied().collect()
            };
            let numeric: Vec<f64> = (0..analytic.len())
                .map(|i| {
                    let mut plus = params.clone();
                    *entry(&mut plus, l, bias, i) += h;
                    let mut minus = params.clone();
                    *entry(&mut minus, l, bias, i) -= h;
                    (loss(&plus) - loss(&minus)) / (2.0 * h)
                })
                .collect();
            let diff: f64 = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).powi(2))
                .sum::<f64>()
                .sqrt();
            let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
            let rel = if na.max(nn) == 0.0 { 0.0 } else { diff / na.max(nn) };
            worst = worst.max(rel);
            if rel >= 1e-4 {
                report.push(format!(
                    "{}.{}: {rel:.2e}",
                    names[l],
                    if bias { "bias" } else { "weight" }
                ));
            }
        }
    }
    check(
        report.is_empty(),
        format!(
            "worst block relative error {worst:.2e}{}",
            report.iter().map(|r| format!("; {r}")).collect::<String>()
        ),
    )
}

fn plateau_fixture() -> Result<(), String> {
    // Tracker level: one improvement, then a flat loss.
    let cfg = TrainConfig::default();
    let mut tracker = PlateauTracker::new(&cfg);
    let mut halved = Vec::new();
    let mut stopped = None;
    for epoch in 1..=100 {
        let event = tracker.observe(if epoch == 1 {
            5.0
        } else {
            5.0 + 1e-3 * (epoch % 3) as f64
        });
        if event.halve_lr {
            halved.push(epoch);
        }
        if event.stop {
            stopped = Some(epoch);
            break;
        }
    }
    let expected_halve = 1 + cfg.lr_patience + 1;
    let expected_stop = 1 + cfg.early_stop_patience;
    if halved != [expected_halve] || stopped != Some(expected_stop) {
        return Err(format!("tracker halved at {halved:?}, stopped at {stopped:?}"));
    }

    // Training level: an unreachable improvement threshold forces a plateau
    // right after the first epoch.
    let stft = StftConfig::new(64, 16).unwrap();
    let frames = corpus::waveform_frames(&utterance(&Voice::for_speaker(Population::A, 0), 2.0, 7), stft).unwrap();
    let (train, val) = corpus::split_tail_frames(&frames, 0.2);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        lr_patience: 2,
        early_stop_patience: 4,
        max_epochs: 50,
        min_rel_improvement: 1e9,
        seed: 3,
        ..Default::default()
    };
    let ck = vae::train(
        train.view(),
        val.view(),
        &cfg,
        TrainInit::Scratch {
            dims: VaeDims::for_stft(&stft),
            stft,
        },
    )
    .map_err(|e| e.to_string())?;
    let h = &ck.history;
    let halved: Vec<usize> = h.epochs.iter().filter(|e| e.lr_halved).map(|e| e.epoch).collect();
    let lr_ok = h.epochs.iter().all(|e| {
        let expected = if e.epoch > 4 { 5e-4 } else { 1e-3 };
        e.learning_rate == expected
    });
    if h.stop_reason != StopReason::EarlyStop || h.epochs.len() != 5 || halved != [4] || h.best_epoch != 1 || !lr_ok {
        return Err(format!(
            "training stopped after {} epochs ({:?}), halved at {halved:?}, best epoch {}",
            h.epochs.len(),
            h.stop_reason,
            h.best_epoch
        ));
    }
    Ok(())
}

fn training_sanity() -> Outcome {
    let ck = toy_model();
    let h = &ck.history;
    let first = h.epochs[0].val_loss;
    let best = h.best_val_loss().ok_or("no best epoch")?;
    plateau_fixture()?;
    check(
        best < first,
        format!(
            "epoch-1 validation loss {first:.2}, best {best:.2} at epoch {}; plateau events as configured",
            h.best_epoch
        ),
    )
}

fn m_step_fixed_point() -> Outcome {
    let (f, t, d, k) = (10, 12, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = VaeParams::init(
        VaeDims {
            input_dim: f,
            hidden_dim: 6,
            latent_dim: d,
        },
        &mut rng,
    );
    let g = Array1::from_shape_simple_fn(t, || rng.random_range(0.5..2.0));
    let nmf_params = NmfParams::new(
        Array2::from_shape_simple_fn((f, k), || rng.random_range(0.1..1.0)),
        Array2::from_shape_simple_fn((k, t), || rng.random_range(0.1..1.0)),
    )
    .unwrap();
    let z = vae::standard_normal((t, d), &mut rng);

    // |y|^2 equals g_t s_ft + (WH)_ft exactly; phases are arbitrary.
    let speech = params.decode_frames(z.view()).unwrap();
    let noise = nmf_params.w.dot(&nmf_params.h);
    let window = (f - 1) * 2;
    let mut y = ComplexSpectrogram {
        data: Array2::zeros((f, t)),
        config: StftConfig::new(window, window / 2).unwrap(),
        num_samples: 0,
    };
    for ((fi, ti), c) in y.data.indexed_iter_mut() {
        let v = g[ti] * speech[[ti, fi]] + noise[[fi, ti]];
        *c = Complex64::from_polar(v.sqrt(), rng.random_range(-3.0..3.0));
    }

    let mut state = InferenceState {
        g: g.clone(),
        nmf: nmf_params.clone(),
        z_chain: z,
        retained_samples: Vec::new(),
    };
    // With a zero-length proposal the E-step keeps the chain where it is.
    let cfg = McemConfig {
        n_em_iters: 1,
        mh_iters_per_estep: 4,
        burn_in: 2,
        n_samples: 2,
        proposal_std: 0.0,
        nmf_rank: k,
        seed: 5,
    };
    mcem::e_step(&mut state, &y, &params, &cfg, &mut rng).map_err(|e| e.to_string())?;
    mcem::m_step(&mut state, &y, &params).map_err(|e| e.to_string())?;
    let dg = max_rel_change(g.as_slice().unwrap(), state.g.as_slice().unwrap());
    let dw = max_rel_change(nmf_params.w.as_slice().unwrap(), state.nmf.w.as_slice().unwrap());
    let dh = max_rel_change(nmf_params.h.as_slice().unwrap(), state.nmf.h.as_slice().unwrap());
    let worst = dg.max(dw).max(dh);
    check(
        worst < 1e-12,
        format!("max relative change g {dg:.1e}, W {dw:.1e}, H {dh:.1e}"),
    )
}

fn nmf_monotonicity() -> Outcome {
    let (f, t, k) = (20, 30, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y_pow = Array2::from_shape_simple_fn((f, t), || {
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        a * a + b * b + 1e-3
    });
    let mut params = nmf::init_nmf(f, t, k, &mut rng).unwrap();
    let stats = |p: &NmfParams| {
        let v = nmf::noise_variance(p);
        (v.mapv(|x| 1.0 / x), v.mapv(|x| 1.0 / (x * x)))
    };
    let mut trace = vec![nmf::is_divergence(&y_pow, &nmf::noise_variance(&params))];
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..50 {
        let (vinv, vinv2) = stats(&params);
        params = nmf::update_h(&params, &y_pow, &vinv, &vinv2).unwrap();
        let (vinv, vinv2) = stats(&params);
        params = nmf::update_w(&params, &y_pow, &vinv, &vinv2).unwrap();
        let d = nmf::is_divergence(&y_pow, &nmf::noise_variance(&params));
        let prev = *trace.last().unwrap();
        worst = worst.max((d - prev) / prev.abs());
        trace.push(d);
    }
    check(
        worst <= 1e-8,
        format!(
            "divergence {:.3} -> {:.3}, largest relative step increase {worst:.2e}",
            trace[0], trace[50]
        ),
    )
}

fn mcem_trend() -> Outcome {
    let fx = noisy_fixture();
    let cfg = McemConfig {
        n_em_iters: 50,
        seed: 3,
        ..Default::default()
    };
    let out = mcem::run_mcem(&fx.y, &toy_model().params, &cfg).map_err(|e| e.to_string())?;
    let trace = &out.loglik_trace;
    let hi = trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = trace.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = 0.005 * (hi - lo);
    let worst_drop = trace.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    let acc = out.acceptance_rate;
    check(
        trace.len() == 50 && worst_drop <= tol && acc > 0.1 && acc < 0.9,
        format!(
            "trace {:.1} -> {:.1}, largest drop {worst_drop:.3} (tolerance {tol:.3}), acceptance {acc:.3}",
            trace[0],
            trace[trace.len() - 1]
        ),
    )
}

fn enhancement_floor() -> Outcome {
    let fx = noisy_fixture();
    let s = dsp::power(&dsp::stft(&fx.clean, stft_default()).unwrap()).data;
    let n = dsp::power(&dsp::stft(&fx.noise, stft_default()).unwrap()).data;
    let mut gain = s.clone();
    Zip::from(&mut gain).and(&n).for_each(|g, &nv| {
        let den = *g + nv;
        *g = if den > 0.0 { *g / den } else { 0.0 };
    });
    let oracle = dsp::istft(&mcem::apply_gain(&fx.y, &gain)).unwrap();
    let oracle_delta = delta_si_sdr(&fx.clean, &fx.noisy, &oracle);

    let cfg = McemConfig {
        seed: 3,
        ..Default::default()
    };
    let (enhanced, _) = enhance(&fx.y, &toy_model().params, &cfg);
    let d_si = delta_si_sdr(&fx.clean, &fx.noisy, &enhanced);
    let d_fw = metrics::fwssnr(&fx.clean, &enhanced).unwrap() - metrics::fwssnr(&fx.clean, &fx.noisy).unwrap();
    check(
        oracle_delta >= 5.0 && d_si > 0.0 && d_fw > 0.0,
        format!("oracle Wiener dSI-SDR {oracle_delta:.2} dB; MCEM dSI-SDR {d_si:.2} dB, dfwSSNR {d_fw:.2} dB"),
    )
}

fn adaptation_trend() -> Outcome {
    let stft = stft_default();
    let bins = stft.bins();
    let cfg = toy_train_config();
    let pre = toy_model();

    // Small mixed corpus: two population-A and three population-B speakers.
    let small: Vec<_> = [
        (Population::A, 10),
        (Population::A, 11),
        (Population::B, 10),
        (Population::B, 11),
        (Population::B, 12),
    ]
    .iter()
    .map(|&(p, s)| voice_frames(p, s, 10.0, 2, 5000 + s))
    .collect();
    let (train, val) = corpus::split_tail_frames(&corpus::concat_frames(&small, bins).unwrap(), 0.1);
    let scratch = vae::train(
        train.view(),
        val.view(),
        &cfg,
        TrainInit::Scratch {
            dims: VaeDims::for_stft(&stft),
            stft,
        },
    )
    .map_err(|e| e.to_string())?;
    let finetuned = vae::train(
        train.view(),
        val.view(),
        &cfg,
        TrainInit::FromCheckpoint {
            checkpoint: pre,
            provenance: Provenance::FinetunedFrom("toy".into()),
        },
    )
    .map_err(|e| e.to_string())?;

    let mcem_cfg = McemConfig {
        n_em_iters: 50,
        seed: 3,
        ..Default::default()
    };
    let mut sums = [0.0f64; 3];
    let mut count = 0.0;
    for spk in 0..3u64 {
        let voice = Voice::for_speaker(Population::B, spk);
        let (train, val) = corpus::split_tail_frames(
            &voice_frames(Population::B, spk, 15.0, 1, 777 + spk),
            corpus::PERSONAL_VAL_FRACTION,
        );
        let personal = vae::train(
            train.view(),
            val.view(),
            &cfg,
            TrainInit::FromCheckpoint {
                checkpoint: pre,
                provenance: Provenance::PersonalizedFor(format!("B{spk}")),
            },
        )
        .map_err(|e| e.to_string())?;
        for u in 0..2u64 {
            let clean = utterance(&voice, 3.0, 9000 + spk * 10 + u);
            let mut rng = ChaCha8Rng::seed_from_u64(u);
            let mix = corpus::synthesize_mixture(&clean, &white_noise(4.0, u + 50), 0.0, &mut rng).unwrap();
            let y = dsp::stft(&mix.noisy, stft).unwrap();
            for (i, model) in [&personal, &finetuned, &scratch].into_iter().enumerate() {
                let (enhanced, _) = enhance(&y, &model.params, &mcem_cfg);
                sums[i] += delta_si_sdr(&clean, &mix.noisy, &enhanced);
            }
            count += 1.0;
        }
    }
    let [p, f, s] = sums.map(|v| v / count);
    check(
        p >= f && f >= s,
        format!("population B mean dSI-SDR: personalized {p:.2}, fine-tuned {f:.2}, scratch {s:.2} dB"),
    )
}

fn mixture_snr() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n_clean = rng.random_range(4_000..40_000);
        let n_noise = rng.random_range(2_000..60_000);
        let clean = WaveformBuffer::new((0..n_clean).map(|_| rng.random_range(-0.5..0.5)).collect(), 16_000);
        let noise = WaveformBuffer::new((0..n_noise).map(|_| rng.random_range(-1.0..1.0)).collect(), 16_000);
        let target = if case % 2 == 0 {
            SNR_CHOICES_DB[case / 2 % SNR_CHOICES_DB.len()]
        } else {
            rng.random_range(-10.0..20.0)
        };
        let mix = corpus::synthesize_mixture(&clean, &noise, target, &mut rng).map_err(|e| e.to_string())?;
        let p_clean: f64 = clean.samples.iter().map(|v| v * v).sum();
        let p_noise: f64 = mix
            .noisy
            .samples
            .iter()
            .zip(&clean.samples)
            .map(|(y, s)| (y - s).powi(2))
            .sum();
        worst = worst.max((10.0 * (p_clean / p_noise).log10() - target).abs());
    }
    check(
        worst < 0.01,
        format!("largest deviation {worst:.2e} dB over 100 mixtures"),
    )
}

fn orthogonal(s: &[f64], rng: &mut ChaCha8Rng, energy: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    let proj: f64 = raw.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let n: Vec<f64> = raw.iter().zip(s).map(|(a, b)| a - proj * b).collect();
    let nn: f64 = n.iter().map(|v| v * v).sum();
    n.iter().map(|v| v * (energy / nn).sqrt()).collect()
}

/// Magnitude of the zero-padded DFT at bins `0..n_fft/2`.
fn dft_magnitude(x: &[f64], n_fft: usize) -> Vec<f64> {
    (0..n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in x.iter().enumerate() {
                let phi = -2.0 * std::f64::consts::PI * (i * k % n_fft) as f64 / n_fft as f64;
                re += v * phi.cos();
                im += v * phi.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s: Vec<f64> = (0..8000)
        .map(|i| (i as f64 * 0.05).sin() + 0.3 * rng.random_range(-1.0..1.0))
        .collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    let n = orthogonal(&s, &mut rng, ss / 100.0);
    let buf = |v: Vec<f64>| WaveformBuffer::new(v, 16_000);
    let reference = buf(s.clone());
    let mut errors = Vec::new();

    // s + n with n orthogonal and 20 dB below s.
    let est = buf(s.iter().zip(&n).map(|(a, b)| a + b).collect());
    let v = metrics::si_sdr(&reference, &est).unwrap();
    errors.push(("si-sdr 20 dB", (v - 20.0).abs()));
    // Rescaling the estimate leaves it unchanged.
    let est = buf(s.iter().zip(&n).map(|(a, b)| -0.25 * (a + b)).collect());
    let v = metrics::si_sdr(&reference, &est).unwrap();
    errors.push(("si-sdr scaled", (v - 20.0).abs()));
    // 1.3 s + n: target energy 1.69 |s|^2 against |n|^2 = |s|^2 / 100.
    let est = buf(s.iter().zip(&n).map(|(a, b)| 1.3 * a + b).collect());
    let v = metrics::si_sdr(&reference, &est).unwrap();
    errors.push(("si-sdr 1.3 s", (v - 10.0 * 169f64.log10()).abs()));

    // fwSSNR on a single frame against a direct evaluation of the formula.
    let fw = FwSsnr::new(16_000);
    let len = fw.frame_len();
    let r: Vec<f64> = (0..len)
        .map(|i| (i as f64 * 0.11).sin() + 0.4 * (i as f64 * 0.53).cos())
        .collect();
    let e: Vec<f64> = r.iter().map(|v| 0.8 * v + 0.05 * rng.random_range(-1.0..1.0)).collect();
    let n_fft = (2 * len).next_power_of_two();
    let windowed = |x: &[f64]| x.iter().zip(fw.window()).map(|(a, w)| a * w).collect::<Vec<f64>>();
    let mr = dft_magnitude(&windowed(&r), n_fft);
    let me = dft_magnitude(&windowed(&e), n_fft);
    let (mut num, mut den) = (0.0, 0.0);
    for filt in fw.band_filters() {
        let rb: f64 = filt.iter().zip(&mr).map(|(a, b)| a * b).sum();
        let eb: f64 = filt.iter().zip(&me).map(|(a, b)| a * b).sum();
        let snr = (10.0 * (rb * rb / (rb - eb).powi(2)).log10()).clamp(-10.0, 35.0);
        num += rb.powf(0.2) * snr;
        den += rb.powf(0.2);
    }
    let direct = num / den;
    let v = fw.evaluate(&buf(r.clone()), &buf(e)).unwrap();
    errors.push(("fwssnr frame", (v - direct).abs()));

    // Identical noisy and enhanced signals give exactly zero deltas.
    let x = buf(s.iter().zip(&n).map(|(a, b)| a + 3.0 * b).collect());
    let si = metrics::si_sdr(&reference, &x).unwrap();
    let fwx = metrics::fwssnr(&reference, &x).unwrap();
    let row = UtteranceMetrics {
        utterance_id: "u".into(),
        speaker_id: "s".into(),
        group: "g".into(),
        si_sdr_noisy: si,
        si_sdr_enhanced: si,
        fwssnr_noisy: fwx,
        fwssnr_enhanced: fwx,
        pesq_noisy: Some(2.0),
        pesq_enhanced: Some(2.0),
    };
    let zero = row.delta_si_sdr() == 0.0 && row.delta_fwssnr() == 0.0 && row.delta_pesq() == Some(0.0);

    let worst = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail = errors
        .iter()
        .map(|(name, e)| format!("{name} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(worst < 1e-9 && zero, format!("{detail}; zero deltas {zero}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = Fixture::new(dir.path(), "det", 2, 8);
    let run = |tag: &str| {
        let text = quick_config(&[("det", &fx.manifest)], &fx.noise, &dir.path().join(tag), "");
        let cfg = vaenmf_cli::ExperimentConfig::load(write_config(dir.path(), &format!("{tag}.toml"), &text)).unwrap();
        let ck = vaenmf_cli::cmd_train(&cfg).unwrap().checkpoint_path;
        let lists = vaenmf_cli::cmd_mix(&cfg).unwrap();
        (fs::read(ck).unwrap(), fs::read(&lists[0]).unwrap())
    };
    let (ck_a, mix_a) = run("first");
    let (ck_b, mix_b) = run("second");
    check(
        ck_a == ck_b && mix_a == mix_b,
        format!(
            "checkpoint {} bytes identical {}, mixture list {} bytes identical {}",
            ck_a.len(),
            ck_a == ck_b,
            mix_a.len(),
            mix_a == mix_b
        ),
    )
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("stft round trip", Duration::from_secs(1), stft_round_trip),
        ("vae gradient check", Duration::from_secs(10), gradient_check),
        ("training sanity", Duration::from_secs(600), training_sanity),
        ("m-step fixed point", Duration::from_secs(1), m_step_fixed_point),
        ("is-nmf monotonicity", Duration::from_secs(5), nmf_monotonicity),
        ("mcem likelihood trend", Duration::from_secs(15 * 60), mcem_trend),
        ("enhancement floor", Duration::from_secs(15 * 60), enhancement_floor),
        ("adaptation trend", Duration::from_secs(45 * 60), adaptation_trend),
        ("mixture snr", Duration::from_secs(10), mixture_snr),
        ("metric oracles", Duration::from_secs(10), metric_oracles),
        ("determinism", Duration::from_secs(10 * 60), determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {name}: {} ({detail}) [{:.2}s]",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
