//! The `train`, `finetune`, `personalize`, `mix`, `enhance` and `evaluate`
//! commands, plus the pieces the experiment protocols share with them.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::Serialize;
use vaenmf::corpus::{self, Manifest, MixtureSpec, NoiseManifest, SplitPlan};
use vaenmf::dsp::{self, StftConfig, WaveformBuffer};
use vaenmf::mcem::{self, McemConfig};
use vaenmf::metrics::{self, MetricsReport, UtteranceMetrics};
use vaenmf::vae::{self, Checkpoint, Provenance, TrainConfig, TrainInit, VaeDims};

use crate::config::{ExperimentConfig, InitMode};
use crate::error::{runtime, validation, CliError, Result};

pub fn thread_pool(jobs: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(runtime)
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// File-name-safe form of an id.
pub(crate) fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Starting weights for a training job, resolved from the configured init mode.
pub struct InitModel {
    pub checkpoint: Checkpoint,
    /// Identifier recorded in provenance tags (the checkpoint's file stem).
    pub id: String,
}

pub fn load_init(mode: &InitMode) -> Result<Option<InitModel>> {
    let Some(path) = mode.checkpoint() else {
        return Ok(None);
    };
    let checkpoint = Checkpoint::load(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(Some(InitModel { checkpoint, id }))
}

/// STFT settings frames must use: the init checkpoint's when there is one.
pub fn effective_stft(cfg: &ExperimentConfig, init: Option<&InitModel>) -> StftConfig {
    match init {
        Some(m) => {
            if m.checkpoint.stft != cfg.stft {
                log::warn!("using the STFT settings stored in checkpoint {}", m.id);
            }
            m.checkpoint.stft
        }
        None => cfg.stft,
    }
}

pub fn load_checkpoint(path: Option<&Path>) -> Result<Checkpoint> {
    let path = path.ok_or_else(|| validation("checkpoint is required"))?;
    Checkpoint::load(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn frames_for(manifest: &Manifest, ids: &[String], stft: StftConfig) -> Result<Array2<f64>> {
    let subset = manifest.subset(ids).map_err(runtime)?;
    corpus::frames_dataset(&subset, stft).map_err(runtime)
}

/// Training and validation frames of a plan.
pub fn plan_frames(manifest: &Manifest, plan: &SplitPlan, stft: StftConfig) -> Result<(Array2<f64>, Array2<f64>)> {
    let train = frames_for(manifest, &plan.train, stft)?;
    match plan.frame_holdout {
        Some(fraction) => Ok(corpus::split_tail_frames(&train, fraction)),
        None => Ok((train, frames_for(manifest, &plan.validation, stft)?)),
    }
}

/// One training job. `label` names the job; its seed derives from the
/// global seed and the label.
pub fn train_job(
    cfg: &ExperimentConfig,
    train_frames: &Array2<f64>,
    val_frames: &Array2<f64>,
    init: Option<&InitModel>,
    provenance: Option<Provenance>,
    label: &str,
) -> Result<Checkpoint> {
    let config = TrainConfig {
        seed: corpus::derive_seed(cfg.seed, &format!("train:{label}")),
        ..cfg.train
    };
    log::info!(
        "training {label}: {} train / {} validation frames",
        train_frames.nrows(),
        val_frames.nrows()
    );
    let init = match init {
        None => TrainInit::Scratch {
            dims: VaeDims::for_stft(&cfg.stft),
            stft: cfg.stft,
        },
        Some(m) => TrainInit::FromCheckpoint {
            checkpoint: &m.checkpoint,
            provenance: provenance.unwrap_or_else(|| Provenance::FinetunedFrom(m.id.clone())),
        },
    };
    let ck = vae::train(train_frames.view(), val_frames.view(), &config, init).map_err(runtime)?;
    log::info!(
        "trained {label}: {} epochs, best validation loss {:.4} at epoch {}",
        ck.history.epochs.len(),
        ck.history.best_val_loss().unwrap_or(f64::NAN),
        ck.history.best_epoch
    );
    Ok(ck)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    ck.save(path).map_err(runtime)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
    pub checkpoint: Checkpoint,
}

/// Trains on the training corpus with a speaker-level validation holdout and
/// writes `model.ckpt` and `history.json` to the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if matches!(cfg.init, InitMode::Personalize(_)) {
        return Err(validation("personalize init belongs to the personalize command"));
    }
    let name = cfg.train_corpus_name()?;
    let manifest = cfg.load_corpus(&name)?;
    if manifest.is_empty() {
        return Err(CliError::Validation(format!("corpus {name:?} is empty")));
    }
    let init = load_init(&cfg.init)?;
    let stft = effective_stft(cfg, init.as_ref());
    let plan = corpus::make_train_val_split(&manifest, cfg.split.val_fraction, cfg.seed).map_err(validation)?;

    create_dir(&cfg.output_dir)?;
    let (train, val) = plan_frames(&manifest, &plan, stft)?;
    let ck = train_job(cfg, &train, &val, init.as_ref(), None, &name)?;
    let checkpoint_path = cfg.output_dir.join("model.ckpt");
    let history_path = cfg.output_dir.join("history.json");
    save_checkpoint(&ck, &checkpoint_path)?;
    write_text(
        &history_path,
        &serde_json::to_string_pretty(&ck.history).map_err(runtime)?,
    )?;
    log::info!("wrote {}", checkpoint_path.display());
    Ok(TrainOutcome {
        checkpoint_path,
        history_path,
        checkpoint: ck,
    })
}

/// `train` starting from the `finetune:<ckpt>` init checkpoint.
pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    if !matches!(cfg.init, InitMode::Finetune(_)) {
        return Err(validation("finetune needs init = \"finetune:<checkpoint>\" or --init"));
    }
    cmd_train(cfg)
}

pub struct PersonalModels {
    pub speaker: String,
    pub plans: [SplitPlan; 2],
    pub checkpoints: [Checkpoint; 2],
    pub paths: [PathBuf; 2],
}

/// Plans for every speaker of the corpus, validated before anything runs.
pub fn personal_plans(manifest: &Manifest) -> Result<Vec<(String, [SplitPlan; 2])>> {
    manifest
        .speakers()
        .into_keys()
        .map(|spk| {
            let plans = corpus::make_personal_splits(manifest, &spk).map_err(validation)?;
            Ok((spk, plans))
        })
        .collect()
}

/// Trains both personal models of every speaker under `dir/<speaker>/`.
pub fn train_personal_models(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    plans: Vec<(String, [SplitPlan; 2])>,
    init: Option<&InitModel>,
    dir: &Path,
    pool: &ThreadPool,
) -> Result<Vec<PersonalModels>> {
    let stft = effective_stft(cfg, init);
    pool.install(|| {
        plans
            .into_par_iter()
            .map(|(spk, plans)| {
                let mut cks = Vec::with_capacity(2);
                let mut paths = Vec::with_capacity(2);
                for (i, plan) in plans.iter().enumerate() {
                    let (train, val) = plan_frames(manifest, plan, stft)?;
                    let label = format!("personal:{spk}:plan{i}");
                    let ck = train_job(
                        cfg,
                        &train,
                        &val,
                        init,
                        Some(Provenance::PersonalizedFor(spk.clone())),
                        &label,
                    )?;
                    let path = dir.join(file_stem(&spk)).join(format!("plan{i}.ckpt"));
                    save_checkpoint(&ck, &path)?;
                    cks.push(ck);
                    paths.push(path);
                }
                Ok(PersonalModels {
                    speaker: spk,
                    plans,
                    checkpoints: cks.try_into().expect("two plans"),
                    paths: paths.try_into().expect("two plans"),
                })
            })
            .collect()
    })
}

/// Two personal models per speaker of the training corpus.
pub fn cmd_personalize(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if cfg.init.checkpoint().is_none() {
        return Err(validation("personalize needs an init checkpoint"));
    }
    let manifest = cfg.load_corpus(&cfg.train_corpus_name()?)?;
    let init = load_init(&cfg.init)?;
    let plans = personal_plans(&manifest)?;
    let pool = thread_pool(cfg.jobs)?;
    create_dir(&cfg.output_dir)?;
    let models = train_personal_models(
        cfg,
        &manifest,
        plans,
        init.as_ref(),
        &cfg.output_dir.join("personal"),
        &pool,
    )?;
    Ok(models.into_iter().flat_map(|m| m.paths).collect())
}

/// Noise recordings at 16 kHz, keyed by id.
pub struct NoiseBank {
    buffers: HashMap<String, WaveformBuffer>,
}

impl NoiseBank {
    pub fn load(noise: &NoiseManifest, specs: &[MixtureSpec]) -> Result<Self> {
        let mut buffers = HashMap::new();
        for spec in specs {
            if buffers.contains_key(&spec.noise_id) {
                continue;
            }
            let rec = noise
                .get(&spec.noise_id)
                .ok_or_else(|| CliError::Validation(format!("unknown noise id {:?}", spec.noise_id)))?;
            let buf = dsp::read_wav(noise.audio_path(rec)).map_err(runtime)?;
            buffers.insert(spec.noise_id.clone(), dsp::resample_to_16k(&buf).map_err(runtime)?);
        }
        Ok(Self { buffers })
    }

    pub fn get(&self, id: &str) -> Result<&WaveformBuffer> {
        self.buffers
            .get(id)
            .ok_or_else(|| CliError::Runtime(format!("noise {id:?} not loaded")))
    }
}

pub fn load_clean(manifest: &Manifest, id: &str) -> Result<WaveformBuffer> {
    let rec = manifest
        .get(id)
        .ok_or_else(|| CliError::Runtime(format!("unknown utterance {id:?}")))?;
    let buf = dsp::read_wav(manifest.audio_path(rec)).map_err(runtime)?;
    dsp::resample_to_16k(&buf).map_err(runtime)
}

pub fn mix_one(manifest: &Manifest, bank: &NoiseBank, spec: &MixtureSpec) -> Result<(WaveformBuffer, corpus::Mixture)> {
    let clean = load_clean(manifest, &spec.utterance_id)?;
    let mix = corpus::synthesize_from_spec(&clean, bank.get(&spec.noise_id)?, spec).map_err(runtime)?;
    Ok((clean, mix))
}

/// Writes `mixtures/<corpus>.jsonl` and `noisy/<corpus>/<utterance>.wav` for
/// every configured corpus. Returns the list files.
pub fn cmd_mix(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if cfg.corpora.is_empty() {
        return Err(validation("no corpora configured"));
    }
    let noise = cfg.load_noise()?;
    let corpora = cfg
        .corpora
        .keys()
        .map(|name| Ok((name.clone(), cfg.load_corpus(name)?)))
        .collect::<Result<Vec<_>>>()?;
    let pool = thread_pool(cfg.jobs)?;
    create_dir(&cfg.output_dir)?;
    let mut lists = Vec::new();
    for (name, manifest) in corpora {
        let specs = corpus::plan_mixtures(&manifest, &noise, cfg.seed).map_err(validation)?;
        let bank = NoiseBank::load(&noise, &specs)?;
        let wav_dir = cfg.output_dir.join("noisy").join(file_stem(&name));
        create_dir(&wav_dir)?;
        pool.install(|| {
            specs.par_iter().try_for_each(|spec| {
                let (_, mix) = mix_one(&manifest, &bank, spec)?;
                let path = wav_dir.join(format!("{}.wav", file_stem(&spec.utterance_id)));
                let clipped = dsp::write_wav(&mix.noisy, &path).map_err(runtime)?;
                if clipped > 0 {
                    log::warn!("{}: {clipped} samples clipped", path.display());
                }
                Ok::<_, CliError>(())
            })
        })?;
        let list = cfg
            .output_dir
            .join("mixtures")
            .join(format!("{}.jsonl", file_stem(&name)));
        write_text(&list, &corpus::mixture_list_text(&specs))?;
        log::info!("mixed {} utterances of {name}", specs.len());
        lists.push(list);
    }
    Ok(lists)
}

#[derive(Debug, Clone, Serialize)]
pub struct QualityPair {
    pub noisy: f64,
    pub enhanced: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnhanceDiagnostics {
    pub input: PathBuf,
    pub output: PathBuf,
    pub num_samples: usize,
    pub clipped_samples: usize,
    pub acceptance_rate: f64,
    pub loglik_trace: Vec<f64>,
    pub gain: Vec<f64>,
    /// F x K
    pub nmf_w: Vec<Vec<f64>>,
    /// K x T
    pub nmf_h: Vec<Vec<f64>>,
    /// Present when a clean reference was supplied.
    pub si_sdr: Option<QualityPair>,
    pub fwssnr: Option<QualityPair>,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn quality(
    f: fn(&WaveformBuffer, &WaveformBuffer) -> metrics::Result<f64>,
    reference: &WaveformBuffer,
    noisy: &WaveformBuffer,
    enhanced: &WaveformBuffer,
) -> Result<QualityPair> {
    let noisy = f(reference, noisy).map_err(runtime)?;
    let enhanced = f(reference, enhanced).map_err(runtime)?;
    Ok(QualityPair {
        noisy,
        enhanced,
        delta: if noisy == enhanced { 0.0 } else { enhanced - noisy },
    })
}

/// MCEM enhancement of one waveform with the model's STFT settings.
pub fn enhance_waveform(
    noisy: &WaveformBuffer,
    model: &Checkpoint,
    config: &McemConfig,
) -> Result<(WaveformBuffer, mcem::EnhancementOutput)> {
    let y = dsp::stft(noisy, model.stft).map_err(runtime)?;
    let out = mcem::run_mcem(&y, &model.params, config).map_err(runtime)?;
    let enhanced = dsp::istft(&out.enhanced_spec).map_err(runtime)?;
    Ok((enhanced, out))
}

/// Enhances `input` into `output`. With a clean `reference`, the quality
/// deltas are logged and included in the diagnostics; with `diagnostics`,
/// the report is written next to the output as `<output>.diagnostics.json`.
pub fn cmd_enhance(
    cfg: &ExperimentConfig,
    input: &Path,
    output: &Path,
    reference: Option<&Path>,
    diagnostics: bool,
) -> Result<EnhanceDiagnostics> {
    cfg.validate()?;
    for p in std::iter::once(input).chain(reference) {
        if !p.is_file() {
            return Err(CliError::Validation(format!("{} does not exist", p.display())));
        }
    }
    let model = load_checkpoint(cfg.checkpoint.as_deref())?;
    let noisy = dsp::resample_to_16k(&dsp::read_wav(input).map_err(runtime)?).map_err(runtime)?;
    let config = McemConfig {
        seed: cfg.seed,
        ..cfg.mcem
    };
    let (enhanced, out) = enhance_waveform(&noisy, &model, &config)?;
    if let Some(dir) = output.parent() {
        create_dir(dir)?;
    }
    let clipped = dsp::write_wav(&enhanced, output).map_err(runtime)?;

    let (mut si_sdr, mut fwssnr) = (None, None);
    if let Some(r) = reference {
        let clean = dsp::resample_to_16k(&dsp::read_wav(r).map_err(runtime)?).map_err(runtime)?;
        let s = quality(metrics::si_sdr, &clean, &noisy, &enhanced)?;
        let f = quality(metrics::fwssnr, &clean, &noisy, &enhanced)?;
        log::info!("delta SI-SDR {:.2} dB, delta fwSSNR {:.2} dB", s.delta, f.delta);
        si_sdr = Some(s);
        fwssnr = Some(f);
    }
    let diag = EnhanceDiagnostics {
        input: input.to_path_buf(),
        output: output.to_path_buf(),
        num_samples: enhanced.len(),
        clipped_samples: clipped,
        acceptance_rate: out.acceptance_rate,
        loglik_trace: out.loglik_trace,
        gain: out.final_state.g.to_vec(),
        nmf_w: rows(&out.final_state.nmf.w),
        nmf_h: rows(&out.final_state.nmf.h),
        si_sdr,
        fwssnr,
    };
    if diagnostics {
        let mut name = output.as_os_str().to_owned();
        name.push(".diagnostics.json");
        write_text(Path::new(&name), &serde_json::to_string_pretty(&diag).map_err(runtime)?)?;
    }
    Ok(diag)
}

/// Evaluates models on the paired mixtures of one corpus: every model sees
/// the same mixture and MCEM seed for a given utterance.
pub struct Evaluator<'a> {
    cfg: &'a ExperimentConfig,
    manifest: &'a Manifest,
    specs: HashMap<String, MixtureSpec>,
    bank: NoiseBank,
}

impl<'a> Evaluator<'a> {
    pub fn new(cfg: &'a ExperimentConfig, manifest: &'a Manifest, noise: &NoiseManifest) -> Result<Self> {
        let specs = match &cfg.mixture_list {
            Some(path) => corpus::load_mixture_list(path).map_err(validation)?,
            None => corpus::plan_mixtures(manifest, noise, cfg.seed).map_err(validation)?,
        };
        let specs: Vec<MixtureSpec> = specs
            .into_iter()
            .filter(|s| manifest.get(&s.utterance_id).is_some())
            .collect();
        let bank = NoiseBank::load(noise, &specs)?;
        Ok(Self {
            cfg,
            manifest,
            specs: specs.into_iter().map(|s| (s.utterance_id.clone(), s)).collect(),
            bank,
        })
    }

    pub fn check_covers(&self, ids: &[String]) -> Result<()> {
        match ids.iter().find(|id| !self.specs.contains_key(*id)) {
            Some(id) => Err(CliError::Validation(format!("no mixture for utterance {id:?}"))),
            None => Ok(()),
        }
    }

    pub fn evaluate(&self, model: &Checkpoint, ids: &[String], pool: &ThreadPool) -> Result<Vec<UtteranceMetrics>> {
        self.check_covers(ids)?;
        pool.install(|| ids.par_iter().map(|id| self.evaluate_one(model, id)).collect())
    }

    fn evaluate_one(&self, model: &Checkpoint, id: &str) -> Result<UtteranceMetrics> {
        let spec = &self.specs[id];
        let rec = self.manifest.get(id).expect("spec ids are in the manifest");
        let (clean, mix) = mix_one(self.manifest, &self.bank, spec)?;
        let config = McemConfig {
            seed: corpus::derive_seed(self.cfg.seed, &format!("mcem:{id}")),
            ..self.cfg.mcem
        };
        let (enhanced, _) = enhance_waveform(&mix.noisy, model, &config)?;
        let (pesq_noisy, pesq_enhanced) = match &self.cfg.pesq_command {
            Some(cmd) => pesq_pair(cmd, &clean, &mix.noisy, &enhanced)?,
            None => (None, None),
        };
        let row = UtteranceMetrics {
            utterance_id: id.to_string(),
            speaker_id: rec.speaker_id.clone(),
            group: rec.group.to_string(),
            si_sdr_noisy: metrics::si_sdr(&clean, &mix.noisy).map_err(runtime)?,
            si_sdr_enhanced: metrics::si_sdr(&clean, &enhanced).map_err(runtime)?,
            fwssnr_noisy: metrics::fwssnr(&clean, &mix.noisy).map_err(runtime)?,
            fwssnr_enhanced: metrics::fwssnr(&clean, &enhanced).map_err(runtime)?,
            pesq_noisy,
            pesq_enhanced,
        };
        log::debug!("{id}: delta SI-SDR {:.2} dB", row.delta_si_sdr());
        Ok(row)
    }
}

fn pesq_pair(
    command: &str,
    clean: &WaveformBuffer,
    noisy: &WaveformBuffer,
    enhanced: &WaveformBuffer,
) -> Result<(Option<f64>, Option<f64>)> {
    let dir = tempfile::tempdir().map_err(runtime)?;
    let write = |name: &str, buf: &WaveformBuffer| -> Result<PathBuf> {
        let p = dir.path().join(name);
        dsp::write_wav(buf, &p).map_err(runtime)?;
        Ok(p)
    };
    let r = write("ref.wav", clean)?;
    let n = write("noisy.wav", noisy)?;
    let e = write("enhanced.wav", enhanced)?;
    Ok((
        metrics::pesq_external(&r, &n, command),
        metrics::pesq_external(&r, &e, command),
    ))
}

pub fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    write_text(&dir.join(format!("{stem}.csv")), &report.to_csv())?;
    write_text(&dir.join(format!("{stem}.json")), &report.to_json())
}

/// Enhances and scores every utterance of the test corpus with the
/// configured checkpoint; writes `report.csv`, `report.json` and the
/// mixture list used.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let model = load_checkpoint(cfg.checkpoint.as_deref())?;
    let manifest = cfg.load_corpus(&cfg.test_corpus_name()?)?;
    if manifest.is_empty() {
        return Err(validation("test corpus is empty"));
    }
    let noise = cfg.load_noise()?;
    let evaluator = Evaluator::new(cfg, &manifest, &noise)?;
    let ids: Vec<String> = manifest.records().iter().map(|r| r.utterance_id.clone()).collect();
    evaluator.check_covers(&ids)?;
    let pool = thread_pool(cfg.jobs)?;
    create_dir(&cfg.output_dir)?;
    let rows = evaluator.evaluate(&model, &ids, &pool)?;
    let report = metrics::build_report(rows).map_err(runtime)?;
    write_report(&cfg.output_dir, "report", &report)?;
    let specs: Vec<MixtureSpec> = ids.iter().map(|id| evaluator.specs[id].clone()).collect();
    write_text(
        &cfg.output_dir.join("mixtures.jsonl"),
        &corpus::mixture_list_text(&specs),
    )?;
    Ok(report)
}
