//! The three evaluation protocols behind `experiment`.

use std::fmt::Write as _;
use std::path::PathBuf;

use vaenmf::corpus::{self, SplitPlan};
use vaenmf::metrics::{self, MeanSem, MetricsReport, UtteranceMetrics};

use crate::commands::{
    create_dir, effective_stft, file_stem, load_init, personal_plans, plan_frames, save_checkpoint, thread_pool,
    train_job, train_personal_models, write_report, write_text, Evaluator,
};
use crate::config::{ExperimentConfig, PlanKind};
use crate::error::{runtime, validation, CliError, Result};

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// Every checkpoint written, in training order.
    pub models: Vec<PathBuf>,
    /// Labelled reports, in the order they were written.
    pub reports: Vec<(String, MetricsReport)>,
    pub plans: Vec<SplitPlan>,
}

impl ExperimentOutcome {
    pub fn report(&self, label: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|(l, _)| l == label).map(|(_, r)| r)
    }
}

pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    match cfg.plan {
        PlanKind::CrossDatabase => cross_database(cfg),
        PlanKind::CvFold => cv_folds(cfg),
        PlanKind::Personal => personal(cfg),
    }
}

/// Each of two corpora trains one model on its own speaker split; each model
/// is tested on both corpora's test speakers, giving a 2 x 2 grid.
fn cross_database(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    if cfg.corpora.len() != 2 {
        return Err(CliError::Validation(format!(
            "cross-database needs exactly two corpora, found {}",
            cfg.corpora.len()
        )));
    }
    let noise = cfg.load_noise()?;
    let init = load_init(&cfg.init)?;
    let stft = effective_stft(cfg, init.as_ref());
    let names: Vec<String> = cfg.corpora.keys().cloned().collect();
    let manifests = names.iter().map(|n| cfg.load_corpus(n)).collect::<Result<Vec<_>>>()?;
    let plans = manifests
        .iter()
        .map(|m| {
            corpus::make_speaker_split(m, cfg.split.val_fraction, cfg.split.val_fraction, cfg.seed).map_err(validation)
        })
        .collect::<Result<Vec<_>>>()?;
    let evaluators = manifests
        .iter()
        .map(|m| Evaluator::new(cfg, m, &noise))
        .collect::<Result<Vec<_>>>()?;
    for (ev, plan) in evaluators.iter().zip(&plans) {
        ev.check_covers(&plan.test)?;
    }
    let pool = thread_pool(cfg.jobs)?;
    let dir = cfg.output_dir.join("cross-database");
    create_dir(&dir)?;

    let mut outcome = ExperimentOutcome {
        models: Vec::new(),
        reports: Vec::new(),
        plans: plans.clone(),
    };
    let mut grid = String::from("train_corpus,test_corpus");
    grid.push_str(&aggregate_header(cfg.pesq_command.is_some()));
    for (i, train_name) in names.iter().enumerate() {
        let (train, val) = plan_frames(&manifests[i], &plans[i], stft)?;
        let ck = train_job(cfg, &train, &val, init.as_ref(), None, &format!("cross:{train_name}"))?;
        let path = dir.join(format!("{}.ckpt", file_stem(train_name)));
        save_checkpoint(&ck, &path)?;
        outcome.models.push(path);
        for (j, test_name) in names.iter().enumerate() {
            let rows = evaluators[j].evaluate(&ck, &plans[j].test, &pool)?;
            let report = metrics::build_report(rows).map_err(runtime)?;
            let label = format!("{}_on_{}", file_stem(train_name), file_stem(test_name));
            write_report(&dir, &label, &report)?;
            let overall = report.aggregate("overall").expect("overall row");
            let _ = write!(grid, "{train_name},{test_name}");
            grid.push_str(&aggregate_cells(
                overall.delta_si_sdr,
                overall.delta_fwssnr,
                overall.delta_pesq,
                cfg.pesq_command.is_some(),
            ));
            outcome.reports.push((label, report));
        }
    }
    write_text(&dir.join("grid.csv"), &grid)?;
    Ok(outcome)
}

fn aggregate_header(pesq: bool) -> String {
    let mut h = String::from(",n,delta_si_sdr_mean,delta_si_sdr_sem,delta_fwssnr_mean,delta_fwssnr_sem");
    if pesq {
        h.push_str(",delta_pesq_mean,delta_pesq_sem");
    }
    h.push('\n');
    h
}

fn aggregate_cells(si: MeanSem, fw: MeanSem, pesq: Option<MeanSem>, with_pesq: bool) -> String {
    let mut s = format!(",{},{},{},{},{}", si.n, si.mean, si.sem, fw.mean, fw.sem);
    if with_pesq {
        match pesq {
            Some(p) => {
                let _ = write!(s, ",{},{}", p.mean, p.sem);
            }
            None => s.push_str(",unavailable,unavailable"),
        }
    }
    s.push('\n');
    s
}

/// Speaker-independent k-fold cross-validation on the training corpus. Every
/// speaker is tested exactly once; the pooled rows form the final report.
fn cv_folds(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let manifest = cfg.load_corpus(&cfg.train_corpus_name()?)?;
    let noise = cfg.load_noise()?;
    let init = load_init(&cfg.init)?;
    let stft = effective_stft(cfg, init.as_ref());
    let folds = corpus::make_cv_folds(&manifest, cfg.split.k, cfg.split.val_fraction, cfg.seed).map_err(validation)?;
    let evaluator = Evaluator::new(cfg, &manifest, &noise)?;
    for f in &folds {
        evaluator.check_covers(&f.test)?;
    }
    let pool = thread_pool(cfg.jobs)?;
    let dir = cfg.output_dir.join("cv-fold");
    create_dir(&dir)?;

    let mut outcome = ExperimentOutcome {
        models: Vec::new(),
        reports: Vec::new(),
        plans: folds.clone(),
    };
    let mut all_rows = Vec::new();
    for (i, fold) in folds.iter().enumerate() {
        let (train, val) = plan_frames(&manifest, fold, stft)?;
        let ck = train_job(cfg, &train, &val, init.as_ref(), None, &format!("fold{i}"))?;
        let path = dir.join(format!("fold{i}.ckpt"));
        save_checkpoint(&ck, &path)?;
        outcome.models.push(path);
        let rows = evaluator.evaluate(&ck, &fold.test, &pool)?;
        all_rows.extend(rows.iter().cloned());
        let report = metrics::build_report(rows).map_err(runtime)?;
        write_report(&dir, &format!("fold{i}"), &report)?;
        outcome.reports.push((format!("fold{i}"), report));
    }
    let report = metrics::build_report(all_rows).map_err(runtime)?;
    write_report(&dir, "report", &report)?;
    outcome.reports.push(("report".into(), report));
    Ok(outcome)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One row per (speaker, plan) holding that model's mean scores.
fn collapse(label: String, rows: &[UtteranceMetrics]) -> UtteranceMetrics {
    UtteranceMetrics {
        utterance_id: label,
        speaker_id: rows[0].speaker_id.clone(),
        group: rows[0].group.clone(),
        si_sdr_noisy: mean(rows.iter().map(|r| r.si_sdr_noisy)),
        si_sdr_enhanced: mean(rows.iter().map(|r| r.si_sdr_enhanced)),
        fwssnr_noisy: mean(rows.iter().map(|r| r.fwssnr_noisy)),
        fwssnr_enhanced: mean(rows.iter().map(|r| r.fwssnr_enhanced)),
        pesq_noisy: mean_opt(rows.iter().map(|r| r.pesq_noisy)),
        pesq_enhanced: mean_opt(rows.iter().map(|r| r.pesq_enhanced)),
    }
}

/// Two personal models per speaker (monologue-adapted and sentence-adapted),
/// each tested on the recordings it did not see. The `personal` report
/// averages per-model means; `personal-utterances` keeps every utterance.
fn personal(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let manifest = cfg.load_corpus(&cfg.train_corpus_name()?)?;
    let noise = cfg.load_noise()?;
    let init = load_init(&cfg.init)?;
    let plans = personal_plans(&manifest)?;
    if plans.is_empty() {
        return Err(validation("training corpus has no speakers"));
    }
    let evaluator = Evaluator::new(cfg, &manifest, &noise)?;
    for (_, p) in &plans {
        for plan in p {
            evaluator.check_covers(&plan.test)?;
        }
    }
    let pool = thread_pool(cfg.jobs)?;
    let dir = cfg.output_dir.join("personal");
    create_dir(&dir)?;

    let models = train_personal_models(cfg, &manifest, plans, init.as_ref(), &dir, &pool)?;
    let mut outcome = ExperimentOutcome {
        models: Vec::new(),
        reports: Vec::new(),
        plans: Vec::new(),
    };
    let mut utterances = Vec::new();
    let mut averaged = Vec::new();
    for m in models {
        for i in 0..2 {
            let rows = evaluator.evaluate(&m.checkpoints[i], &m.plans[i].test, &pool)?;
            averaged.push(collapse(format!("{}/plan{i}", m.speaker), &rows));
            utterances.extend(rows);
        }
        outcome.models.extend(m.paths.iter().cloned());
        outcome.plans.extend(m.plans.iter().cloned());
    }
    let per_utt = metrics::build_report(utterances).map_err(runtime)?;
    write_report(&dir, "utterances", &per_utt)?;
    let report = metrics::build_report(averaged).map_err(runtime)?;
    write_report(&dir, "report", &report)?;
    outcome.reports.push(("personal".into(), report));
    outcome.reports.push(("personal-utterances".into(), per_utt));
    Ok(outcome)
}
