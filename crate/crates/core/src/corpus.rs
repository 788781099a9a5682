//! Dataset manifests, noisy-mixture synthesis and split planning.
//!
//! Manifests, noise manifests and mixture lists share one on-disk shape: a
//! JSON header line `{"format": "...", "version": 1}` followed by one JSON
//! object per line. An empty file is an empty list.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsp::{self, DspError, StftConfig, WaveformBuffer, PIPELINE_RATE_HZ};
use crate::vae::drop_silent_frames;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "vaenmf-manifest";
pub const NOISE_MANIFEST_FORMAT: &str = "vaenmf-noise-manifest";
pub const MIXTURE_LIST_FORMAT: &str = "vaenmf-mixtures";

/// SNR values mixtures are drawn from, in dB.
pub const SNR_CHOICES_DB: [f64; 3] = [-5.0, 0.0, 5.0];

/// Share of adaptation frames held out for validation in personal plans.
pub const PERSONAL_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("bad header: {0}")]
    Header(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),
    #[error("unknown utterance {0:?}")]
    UnknownUtterance(String),
    #[error("speaker {0:?} appears in more than one group")]
    InconsistentGroup(String),
    #[error("speaker {speaker:?} has no {what} recordings")]
    MissingRecordings { speaker: String, what: &'static str },
    #[error("need at least {needed} speakers, found {found}")]
    NotEnoughSpeakers { needed: usize, found: usize },
    #[error("{0} has zero power; SNR is undefined")]
    ZeroPower(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Neurotypical,
    Pathological,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Neurotypical => "neurotypical",
            Group::Pathological => "pathological",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordingType {
    Sentence,
    ReadText,
    Monologue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub group: Group,
    pub recording_type: RecordingType,
    pub language: String,
    /// Relative paths resolve against the manifest file's directory.
    pub path: PathBuf,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Cafe,
    Car,
    Home,
    Street,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRecord {
    pub id: String,
    pub kind: NoiseKind,
    pub path: PathBuf,
}

/// One noisy mixture, enough to regenerate it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub utterance_id: String,
    pub noise_id: String,
    pub noise_kind: NoiseKind,
    pub snr_db: f64,
    /// Seeds the noise crop offset.
    pub offset_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn read_lines<T: DeserializeOwned>(text: &str, format: &str) -> Result<Vec<T>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Ok(Vec::new());
    };
    let header: Header =
        serde_json::from_str(first).map_err(|e| CorpusError::Header(format!("expected {format} header: {e}")))?;
    if header.format != format {
        return Err(CorpusError::Header(format!(
            "format {:?}, expected {format:?}",
            header.format
        )));
    }
    if header.version != FORMAT_VERSION {
        return Err(CorpusError::Header(format!(
            "version {}, expected {FORMAT_VERSION}",
            header.version
        )));
    }
    lines
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_lines<T: Serialize>(items: &[T], format: &str) -> String {
    let header = Header {
        format: format.to_string(),
        version: FORMAT_VERSION,
    };
    let mut out = serde_json::to_string(&header).expect("header serialises");
    out.push('\n');
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serialises"));
        out.push('\n');
    }
    out
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn resolve(base: &Option<PathBuf>, path: &Path) -> PathBuf {
    match base {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    records: Vec<ManifestRecord>,
    base_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut groups: BTreeMap<&str, Group> = BTreeMap::new();
        for r in &records {
            if r.utterance_id.is_empty() {
                return Err(CorpusError::InvalidRecord {
                    id: String::new(),
                    reason: "empty utterance_id".into(),
                });
            }
            if !seen.insert(r.utterance_id.as_str()) {
                return Err(CorpusError::DuplicateId(r.utterance_id.clone()));
            }
            if r.speaker_id.is_empty() {
                return Err(CorpusError::InvalidRecord {
                    id: r.utterance_id.clone(),
                    reason: "empty speaker_id".into(),
                });
            }
            if !(r.duration_s > 0.0 && r.duration_s.is_finite()) {
                return Err(CorpusError::InvalidRecord {
                    id: r.utterance_id.clone(),
                    reason: format!("duration_s must be positive, got {}", r.duration_s),
                });
            }
            if *groups.entry(&r.speaker_id).or_insert(r.group) != r.group {
                return Err(CorpusError::InconsistentGroup(r.speaker_id.clone()));
            }
        }
        Ok(Self {
            records,
            base_dir: None,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(read_lines(text, MANIFEST_FORMAT)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m = Self::parse(&read_file(path)?)?;
        m.base_dir = path.parent().map(Path::to_path_buf);
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        write_lines(&self.records, MANIFEST_FORMAT)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_text())
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, utterance_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.utterance_id == utterance_id)
    }

    pub fn audio_path(&self, record: &ManifestRecord) -> PathBuf {
        resolve(&self.base_dir, &record.path)
    }

    /// Speaker ids with their group, sorted by id.
    pub fn speakers(&self) -> BTreeMap<String, Group> {
        self.records.iter().map(|r| (r.speaker_id.clone(), r.group)).collect()
    }

    /// The named records, in the order given.
    pub fn subset(&self, ids: &[String]) -> Result<Manifest> {
        let records = ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| CorpusError::UnknownUtterance(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest {
            records,
            base_dir: self.base_dir.clone(),
        })
    }

    fn sorted_records(&self) -> Vec<&ManifestRecord> {
        let mut v: Vec<&ManifestRecord> = self.records.iter().collect();
        v.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        v
    }

    fn ids_of_speakers(&self, speakers: &BTreeSet<&str>) -> Vec<String> {
        self.sorted_records()
            .into_iter()
            .filter(|r| speakers.contains(r.speaker_id.as_str()))
            .map(|r| r.utterance_id.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseManifest {
    records: Vec<NoiseRecord>,
    base_dir: Option<PathBuf>,
}

impl NoiseManifest {
    pub fn new(records: Vec<NoiseRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            records,
            base_dir: None,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(read_lines(text, NOISE_MANIFEST_FORMAT)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m = Self::parse(&read_file(path)?)?;
        m.base_dir = path.parent().map(Path::to_path_buf);
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        write_lines(&self.records, NOISE_MANIFEST_FORMAT)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_text())
    }

    pub fn records(&self) -> &[NoiseRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&NoiseRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn audio_path(&self, record: &NoiseRecord) -> PathBuf {
        resolve(&self.base_dir, &record.path)
    }
}

pub fn parse_mixture_list(text: &str) -> Result<Vec<MixtureSpec>> {
    let specs: Vec<MixtureSpec> = read_lines(text, MIXTURE_LIST_FORMAT)?;
    for s in &specs {
        if !s.snr_db.is_finite() {
            return Err(CorpusError::InvalidRecord {
                id: s.utterance_id.clone(),
                reason: "snr_db must be finite".into(),
            });
        }
    }
    Ok(specs)
}

pub fn mixture_list_text(specs: &[MixtureSpec]) -> String {
    write_lines(specs, MIXTURE_LIST_FORMAT)
}

pub fn load_mixture_list(path: impl AsRef<Path>) -> Result<Vec<MixtureSpec>> {
    parse_mixture_list(&read_file(path.as_ref())?)
}

pub fn save_mixture_list(specs: &[MixtureSpec], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &mixture_list_text(specs))
}

/// Seed for a labelled sub-task: the first 8 bytes of
/// `SHA-256(global_seed LE || label)`.
pub fn derive_seed(global_seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Per-utterance mixing seed, so each utterance gets the same mixture
/// whatever else is in the corpus.
pub fn mixing_seed(global_seed: u64, utterance_id: &str) -> u64 {
    derive_seed(global_seed, utterance_id)
}

/// One [`MixtureSpec`] per clean utterance, in manifest order: a uniformly
/// chosen noise record, an SNR from [`SNR_CHOICES_DB`] and a crop seed.
pub fn plan_mixtures(clean: &Manifest, noise: &NoiseManifest, global_seed: u64) -> Result<Vec<MixtureSpec>> {
    if noise.records.is_empty() {
        return Err(CorpusError::InvalidArgument("noise manifest is empty".into()));
    }
    Ok(clean
        .records
        .iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(mixing_seed(global_seed, &r.utterance_id));
            let n = &noise.records[rng.random_range(0..noise.records.len())];
            MixtureSpec {
                utterance_id: r.utterance_id.clone(),
                noise_id: n.id.clone(),
                noise_kind: n.kind,
                snr_db: SNR_CHOICES_DB[rng.random_range(0..SNR_CHOICES_DB.len())],
                offset_seed: rng.next_u64(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub noisy: WaveformBuffer,
    /// The noise exactly as added: cropped, tiled and scaled.
    pub scaled_noise: WaveformBuffer,
    pub scale: f64,
    pub offset: usize,
}

fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// `clean + s * crop(noise)` with `s` chosen so the whole-utterance SNR equals
/// `snr_db`. The crop starts at a uniform offset and wraps around when the
/// noise is shorter than the clean signal.
pub fn synthesize_mixture<R: Rng + ?Sized>(
    clean: &WaveformBuffer,
    noise: &WaveformBuffer,
    snr_db: f64,
    rng: &mut R,
) -> Result<Mixture> {
    for b in [clean, noise] {
        if b.sample_rate_hz != PIPELINE_RATE_HZ {
            return Err(DspError::SampleRate {
                found: b.sample_rate_hz,
                expected: PIPELINE_RATE_HZ,
            }
            .into());
        }
    }
    if !snr_db.is_finite() {
        return Err(CorpusError::InvalidArgument(format!("snr_db {snr_db} is not finite")));
    }
    let p_clean = mean_power(&clean.samples);
    if p_clean == 0.0 {
        return Err(CorpusError::ZeroPower("clean signal"));
    }
    if mean_power(&noise.samples) == 0.0 {
        return Err(CorpusError::ZeroPower("noise signal"));
    }
    let (n, c) = (noise.len(), clean.len());
    let offset = if n >= c {
        rng.random_range(0..=n - c)
    } else {
        rng.random_range(0..n)
    };
    let crop: Vec<f64> = (0..c).map(|i| noise.samples[(offset + i) % n]).collect();
    let p_noise = mean_power(&crop);
    if p_noise == 0.0 {
        return Err(CorpusError::ZeroPower("noise crop"));
    }
    let scale = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = crop.iter().map(|v| v * scale).collect();
    let noisy = clean.samples.iter().zip(&scaled).map(|(a, b)| a + b).collect();
    Ok(Mixture {
        noisy: WaveformBuffer::new(noisy, PIPELINE_RATE_HZ),
        scaled_noise: WaveformBuffer::new(scaled, PIPELINE_RATE_HZ),
        scale,
        offset,
    })
}

/// Regenerates the mixture a [`MixtureSpec`] describes.
pub fn synthesize_from_spec(clean: &WaveformBuffer, noise: &WaveformBuffer, spec: &MixtureSpec) -> Result<Mixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.offset_seed);
    synthesize_mixture(clean, noise, spec.snr_db, &mut rng)
}

/// `10 log10(P_clean / P_noise)` over the full signals.
pub fn measured_snr_db(clean: &WaveformBuffer, noise: &WaveformBuffer) -> f64 {
    10.0 * (mean_power(&clean.samples) / mean_power(&noise.samples)).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    CrossDatabase,
    CvFold,
    Personal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub fold: Option<usize>,
    /// Target speaker of a personal plan.
    pub speaker: Option<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    /// When set, validation frames are this tail share of the training
    /// frames instead of separate utterances.
    pub frame_holdout: Option<f64>,
}

impl SplitPlan {
    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .all(|id| seen.insert(id.as_str()))
    }

    /// Speaker sets of train, validation and test.
    pub fn speaker_sets(&self, manifest: &Manifest) -> [BTreeSet<String>; 3] {
        let set = |ids: &[String]| {
            ids.iter()
                .filter_map(|id| manifest.get(id).map(|r| r.speaker_id.clone()))
                .collect()
        };
        [set(&self.train), set(&self.validation), set(&self.test)]
    }
}

/// Speakers grouped and shuffled, then dealt round-robin into `k` buckets.
/// Each group continues where the previous one stopped, so groups spread
/// evenly across buckets.
fn speaker_buckets(manifest: &Manifest, k: usize, seed: u64) -> Vec<Vec<String>> {
    let mut by_group: BTreeMap<Group, Vec<String>> = BTreeMap::new();
    for (spk, group) in manifest.speakers() {
        by_group.entry(group).or_default().push(spk);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets = vec![Vec::new(); k];
    let mut dealt = 0;
    for (_, mut speakers) in by_group {
        speakers.shuffle(&mut rng);
        for spk in speakers {
            buckets[dealt % k].push(spk);
            dealt += 1;
        }
    }
    buckets
}

fn val_count(n_speakers: usize, val_fraction: f64) -> usize {
    ((val_fraction * n_speakers as f64).round() as usize).max(1)
}

/// Speaker-independent `k`-fold plans. Fold `i` tests bucket `i`; validation
/// takes `max(1, round(val_fraction * N))` speakers from the following
/// buckets in cyclic order; the rest train.
pub fn make_cv_folds(manifest: &Manifest, k: usize, val_fraction: f64, seed: u64) -> Result<Vec<SplitPlan>> {
    if k < 2 {
        return Err(CorpusError::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(CorpusError::InvalidArgument(format!(
            "val_fraction {val_fraction} outside [0, 1)"
        )));
    }
    let n = manifest.speakers().len();
    if n < k {
        return Err(CorpusError::NotEnoughSpeakers { needed: k, found: n });
    }
    let buckets = speaker_buckets(manifest, k, seed);
    let n_val = val_count(n, val_fraction);
    (0..k)
        .map(|i| {
            let test: BTreeSet<&str> = buckets[i].iter().map(String::as_str).collect();
            let val: BTreeSet<&str> = (1..k)
                .flat_map(|j| buckets[(i + j) % k].iter().map(String::as_str))
                .take(n_val)
                .collect();
            let train: BTreeSet<&str> = buckets
                .iter()
                .flatten()
                .map(String::as_str)
                .filter(|s| !test.contains(s) && !val.contains(s))
                .collect();
            if train.is_empty() {
                return Err(CorpusError::NotEnoughSpeakers {
                    needed: test.len() + n_val + 1,
                    found: n,
                });
            }
            Ok(SplitPlan {
                kind: SplitKind::CvFold,
                fold: Some(i),
                speaker: None,
                train: manifest.ids_of_speakers(&train),
                validation: manifest.ids_of_speakers(&val),
                test: manifest.ids_of_speakers(&test),
                frame_holdout: None,
            })
        })
        .collect()
}

/// Single speaker-independent train/validation/test split of one corpus, with
/// test and validation each taking `round(fraction * N)` speakers (at least one).
pub fn make_speaker_split(manifest: &Manifest, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<SplitPlan> {
    let n = manifest.speakers().len();
    let n_test = val_count(n, test_fraction);
    let n_val = val_count(n, val_fraction);
    if n < n_test + n_val + 1 {
        return Err(CorpusError::NotEnoughSpeakers {
            needed: n_test + n_val + 1,
            found: n,
        });
    }
    // Dealing into n buckets of one keeps the group interleaving of the folds.
    let order: Vec<String> = speaker_buckets(manifest, n, seed).into_iter().flatten().collect();
    let pick = |range: std::ops::Range<usize>| -> BTreeSet<&str> { order[range].iter().map(String::as_str).collect() };
    Ok(SplitPlan {
        kind: SplitKind::CrossDatabase,
        fold: None,
        speaker: None,
        test: manifest.ids_of_speakers(&pick(0..n_test)),
        validation: manifest.ids_of_speakers(&pick(n_test..n_test + n_val)),
        train: manifest.ids_of_speakers(&pick(n_test + n_val..n)),
        frame_holdout: None,
    })
}

/// Training/validation split of a whole corpus for model training. With two
/// or more speakers, `max(1, round(val_fraction * N))` speakers (at most
/// `N - 1`) validate; a single-speaker corpus holds out tail frames instead.
pub fn make_train_val_split(manifest: &Manifest, val_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(CorpusError::InvalidArgument(format!(
            "val_fraction {val_fraction} outside [0, 1)"
        )));
    }
    let n = manifest.speakers().len();
    if n == 0 {
        return Err(CorpusError::NotEnoughSpeakers { needed: 1, found: 0 });
    }
    let mut plan = SplitPlan {
        kind: SplitKind::CrossDatabase,
        fold: None,
        speaker: None,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        frame_holdout: None,
    };
    if n == 1 {
        plan.train = manifest
            .sorted_records()
            .iter()
            .map(|r| r.utterance_id.clone())
            .collect();
        plan.frame_holdout = Some(val_fraction.max(f64::EPSILON));
        return Ok(plan);
    }
    let n_val = val_count(n, val_fraction).min(n - 1);
    let order: Vec<String> = speaker_buckets(manifest, n, seed).into_iter().flatten().collect();
    let val: BTreeSet<&str> = order[..n_val].iter().map(String::as_str).collect();
    let train: BTreeSet<&str> = order[n_val..].iter().map(String::as_str).collect();
    plan.validation = manifest.ids_of_speakers(&val);
    plan.train = manifest.ids_of_speakers(&train);
    Ok(plan)
}

/// Plan A adapts on the monologue and tests on sentences and read text; plan
/// B is the reverse. Adaptation frames are split 90/10 into train/validation.
pub fn make_personal_splits(manifest: &Manifest, speaker_id: &str) -> Result<[SplitPlan; 2]> {
    let records: Vec<&ManifestRecord> = manifest
        .sorted_records()
        .into_iter()
        .filter(|r| r.speaker_id == speaker_id)
        .collect();
    if records.is_empty() {
        return Err(CorpusError::UnknownSpeaker(speaker_id.to_string()));
    }
    let (mono, rest): (Vec<&ManifestRecord>, Vec<&ManifestRecord>) = records
        .into_iter()
        .partition(|r| r.recording_type == RecordingType::Monologue);
    if mono.is_empty() {
        return Err(CorpusError::MissingRecordings {
            speaker: speaker_id.to_string(),
            what: "monologue",
        });
    }
    if rest.is_empty() {
        return Err(CorpusError::MissingRecordings {
            speaker: speaker_id.to_string(),
            what: "sentence or read-text",
        });
    }
    let ids = |v: &[&ManifestRecord]| v.iter().map(|r| r.utterance_id.clone()).collect::<Vec<_>>();
    let plan = |fold, train, test| SplitPlan {
        kind: SplitKind::Personal,
        fold: Some(fold),
        speaker: Some(speaker_id.to_string()),
        train,
        validation: Vec::new(),
        test,
        frame_holdout: Some(PERSONAL_VAL_FRACTION),
    };
    Ok([plan(0, ids(&mono), ids(&rest)), plan(1, ids(&rest), ids(&mono))])
}

/// Splits T x F frames into leading training rows and a trailing validation
/// share. With two or more frames both parts are non-empty.
pub fn split_tail_frames(frames: &Array2<f64>, fraction: f64) -> (Array2<f64>, Array2<f64>) {
    let n = frames.nrows();
    let n_val = if n < 2 {
        0
    } else {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let cut = n - n_val;
    (
        frames.slice(s![..cut, ..]).to_owned(),
        frames.slice(s![cut.., ..]).to_owned(),
    )
}

/// T x F power frames of one waveform (resampled to 16 kHz first), with
/// silent frames removed.
pub fn waveform_frames(buffer: &WaveformBuffer, stft: StftConfig) -> Result<Array2<f64>> {
    let buffer = dsp::resample_to_16k(buffer)?;
    let power = dsp::power(&dsp::stft(&buffer, stft)?);
    Ok(drop_silent_frames(power.data.t()))
}

/// Concatenated training frames of every record, in manifest order.
pub fn frames_dataset(manifest: &Manifest, stft: StftConfig) -> Result<Array2<f64>> {
    let parts = manifest
        .records
        .iter()
        .map(|r| waveform_frames(&dsp::read_wav(manifest.audio_path(r))?, stft))
        .collect::<Result<Vec<_>>>()?;
    concat_frames(&parts, stft.bins())
}

pub fn concat_frames(parts: &[Array2<f64>], bins: usize) -> Result<Array2<f64>> {
    if parts.is_empty() {
        return Ok(Array2::zeros((0, bins)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| CorpusError::InvalidArgument(e.to_string()))
}
