#![allow(dead_code)]

pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use synth::{utterance, white_noise, Population, Voice};
use vaenmf::corpus::{Group, Manifest, ManifestRecord, NoiseKind, NoiseManifest, NoiseRecord, RecordingType};
use vaenmf::dsp::write_wav;

/// Small on-disk corpus: `speakers` speakers alternating between the two
/// groups, each with two sentences, one read text and one monologue, plus
/// two noise recordings.
pub struct Fixture {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub noise: PathBuf,
}

impl Fixture {
    pub fn new(dir: &Path, name: &str, speakers: u64, seed: u64) -> Self {
        let audio = dir.join(format!("{name}_audio"));
        fs::create_dir_all(&audio).unwrap();
        let mut records = Vec::new();
        for s in 0..speakers {
            let (pop, group) = if s % 2 == 0 {
                (Population::A, Group::Neurotypical)
            } else {
                (Population::B, Group::Pathological)
            };
            let voice = Voice::for_speaker(pop, seed * 100 + s);
            let spk = format!("{name}_spk{s}");
            let items = [
                ("s0", RecordingType::Sentence, 0.6),
                ("s1", RecordingType::Sentence, 0.6),
                ("text", RecordingType::ReadText, 0.8),
                ("mono", RecordingType::Monologue, 1.2),
            ];
            for (k, (tag, kind, secs)) in items.into_iter().enumerate() {
                let id = format!("{spk}_{tag}");
                let wav = utterance(&voice, secs, seed * 1000 + s * 10 + k as u64);
                let rel = PathBuf::from(format!("{name}_audio/{id}.wav"));
                write_wav(&wav, dir.join(&rel)).unwrap();
                records.push(ManifestRecord {
                    utterance_id: id,
                    speaker_id: spk.clone(),
                    group,
                    recording_type: kind,
                    language: "xx".into(),
                    path: rel,
                    duration_s: secs,
                });
            }
        }
        let manifest = dir.join(format!("{name}.jsonl"));
        Manifest::new(records).unwrap().save(&manifest).unwrap();

        let noise = dir.join("noise.jsonl");
        if !noise.exists() {
            let mut noise_records = Vec::new();
            for (i, kind) in [NoiseKind::Cafe, NoiseKind::Street].into_iter().enumerate() {
                let rel = PathBuf::from(format!("noise_{i}.wav"));
                write_wav(&white_noise(2.0, 50 + i as u64), dir.join(&rel)).unwrap();
                noise_records.push(NoiseRecord {
                    id: format!("n{i}"),
                    kind,
                    path: rel,
                });
            }
            NoiseManifest::new(noise_records).unwrap().save(&noise).unwrap();
        }
        Self {
            dir: dir.to_path_buf(),
            manifest,
            noise,
        }
    }
}

/// A fast configuration: small STFT, one epoch, a handful of MCEM steps.
pub fn quick_config(corpora: &[(&str, &Path)], noise: &Path, out: &Path, extra: &str) -> String {
    let mut text = format!(
        "seed = 11\noutput_dir = {:?}\nnoise_manifest = {:?}\n{extra}\n",
        out.display().to_string(),
        noise.display().to_string()
    );
    text.push_str(
        "[stft]\nwindow_len = 256\nhop = 64\n\n[train]\nmax_epochs = 1\nbatch_size = 32\nlearning_rate = 0.001\n\n\
         [mcem]\nn_em_iters = 2\nmh_iters_per_estep = 4\nburn_in = 2\nn_samples = 2\n\n[corpora]\n",
    );
    for (name, path) in corpora {
        text.push_str(&format!("{name} = {:?}\n", path.display().to_string()));
    }
    text
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}
