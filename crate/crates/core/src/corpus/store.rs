use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_episodes, read_jsonl, split_phrases, write_jsonl, AlignedUtterance, Episode, EpisodeSpec, LabeledPair,
    PairRecord, Phrase, MAX_PHRASE_WORDS,
};
use crate::dsp::{read_wav, FeatureExtractor, Waveform};
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, TAG_EPISODES, TAG_SPLIT};
use crate::text::Dictionary;

pub const CORPUS_FILE: &str = "corpus.json";
pub const PHRASES_FILE: &str = "phrases.jsonl";
pub const TRAIN_FILE: &str = "train_pairs.jsonl";
pub const EVAL_FILE: &str = "eval_episodes.jsonl";
const FORMAT_VERSION: u32 = 1;

/// Top-level description of a corpus directory. Relative paths resolve
/// against `audio_root`, which itself resolves against the corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub audio_root: PathBuf,
    /// Background noise files mixed into the noisy training branch.
    pub noise: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<PathBuf>,
}

impl CorpusManifest {
    pub fn new(audio_root: PathBuf, noise: Vec<PathBuf>, dictionary: Option<PathBuf>) -> Self {
        CorpusManifest {
            version: FORMAT_VERSION,
            audio_root,
            noise,
            dictionary,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CORPUS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CorpusManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Parse {
                path,
                line: 1,
                reason: format!("unsupported corpus version {}", m.version),
            });
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CORPUS_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn resolve(&self, dir: &Path, rel: &Path) -> PathBuf {
        dir.join(&self.audio_root).join(rel)
    }
}

/// Phrase windows, training pairs and held-out episodes from word-aligned
/// utterances. Anchor texts are split into train and eval keyword sets, so
/// evaluation keywords are unseen during training.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledCorpus {
    pub phrases: Vec<Phrase>,
    pub train: Vec<PairRecord>,
    pub eval: Vec<Episode>,
    pub skipped_anchors: usize,
}

pub fn assemble_corpus(
    utterances: &[AlignedUtterance],
    dict: &Dictionary,
    spec: EpisodeSpec,
    eval_fraction: f64,
    rounds: usize,
    seed: u64,
) -> Result<AssembledCorpus> {
    if !(0.0..=1.0).contains(&eval_fraction) {
        return Err(Error::param("eval_fraction must lie in [0, 1]"));
    }
    if rounds == 0 {
        return Err(Error::param("episode rounds must be at least 1"));
    }
    let mut phrases = Vec::new();
    for u in utterances {
        for n in 1..=MAX_PHRASE_WORDS {
            phrases.extend(split_phrases(u, n, dict)?);
        }
    }
    if phrases.is_empty() {
        return Err(Error::EmptyInput("alignments produced no phrases"));
    }

    let texts: Vec<&str> = phrases
        .iter()
        .map(|p| p.text.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SPLIT]));
    let held_out: BTreeMap<&str, bool> = texts
        .iter()
        .map(|&t| (t, rng.random::<f64>() < eval_fraction))
        .collect();
    let (eval_phrases, train_phrases): (Vec<Phrase>, Vec<Phrase>) =
        phrases.iter().cloned().partition(|p| held_out[p.text.as_str()]);

    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut skipped_anchors = 0;
    for round in 0..rounds as u64 {
        let t = build_episodes(&train_phrases, spec, derive_seed(seed, &[TAG_EPISODES, 0, round]))?;
        let e = build_episodes(&eval_phrases, spec, derive_seed(seed, &[TAG_EPISODES, 1, round]))?;
        if round == 0 {
            skipped_anchors = t.skipped_anchors + e.skipped_anchors;
        }
        train.extend(
            t.episodes
                .into_iter()
                .flat_map(|ep| ep.positives.into_iter().chain(ep.negatives)),
        );
        eval.extend(e.episodes);
    }
    Ok(AssembledCorpus {
        phrases,
        train,
        eval,
        skipped_anchors,
    })
}

pub fn write_corpus(
    dir: &Path,
    manifest: &CorpusManifest,
    phrases: &[Phrase],
    train: &[PairRecord],
    eval: &[Episode],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.save(dir)?;
    write_jsonl(&dir.join(PHRASES_FILE), phrases)?;
    write_jsonl(&dir.join(TRAIN_FILE), train)?;
    write_jsonl(&dir.join(EVAL_FILE), eval)
}

/// Decodes each audio file once and cuts clips from it.
pub(crate) struct AudioCache {
    files: HashMap<PathBuf, Waveform>,
    extractor: Option<FeatureExtractor>,
}

impl AudioCache {
    pub(crate) fn new() -> Self {
        AudioCache {
            files: HashMap::new(),
            extractor: None,
        }
    }

    pub(crate) fn insert(&mut self, path: PathBuf, w: Waveform) {
        self.files.insert(path, w);
    }

    fn file(&mut self, path: &Path) -> Result<&Waveform> {
        if !self.files.contains_key(path) {
            let w = read_wav(path)?;
            self.files.insert(path.to_path_buf(), w);
        }
        Ok(&self.files[path])
    }

    pub(crate) fn clip(&mut self, path: &Path, start: f64, end: f64) -> Result<Waveform> {
        let w = self.file(path)?.segment(start, end)?;
        if w.is_empty() {
            return Err(Error::UnsupportedAudio {
                path: path.to_path_buf(),
                reason: format!("segment {start}..{end} lies outside the recording"),
            });
        }
        Ok(w)
    }

    pub(crate) fn labeled(
        &mut self,
        path: &Path,
        rec: &PairRecord,
        difficulty_override: Option<super::Difficulty>,
    ) -> Result<LabeledPair> {
        let waveform = self.clip(path, rec.clip.start, rec.clip.end)?;
        let sr = waveform.sample_rate;
        let extractor = match self.extractor.take() {
            Some(e) if e.sample_rate() == sr => e,
            _ => FeatureExtractor::new(sr)?,
        };
        let features = extractor.log_mel(&waveform)?;
        self.extractor = Some(extractor);
        Ok(LabeledPair {
            features,
            waveform,
            phonemes: rec.keyword_phonemes.clone(),
            label: rec.label,
            match_type: rec.match_type,
            n_words: rec.clip.n_words,
            difficulty: difficulty_override.or(rec.difficulty),
        })
    }
}

/// A corpus directory decoded into model-ready pairs.
#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub manifest: CorpusManifest,
    pub train: Vec<LabeledPair>,
    /// Episode pairs flattened in order; each carries its episode's
    /// difficulty.
    pub eval: Vec<LabeledPair>,
    pub episodes: Vec<Episode>,
    pub noise: Vec<Waveform>,
}

impl LoadedCorpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = CorpusManifest::load(dir)?;
        let train_records: Vec<PairRecord> = read_jsonl(&dir.join(TRAIN_FILE))?;
        let episodes: Vec<Episode> = read_jsonl(&dir.join(EVAL_FILE))?;
        let mut cache = AudioCache::new();
        let train = train_records
            .iter()
            .map(|r| cache.labeled(&manifest.resolve(dir, &r.clip.audio), r, None))
            .collect::<Result<Vec<_>>>()?;
        let mut eval = Vec::new();
        for ep in &episodes {
            for r in ep.pairs() {
                eval.push(cache.labeled(&manifest.resolve(dir, &r.clip.audio), r, Some(ep.difficulty))?);
            }
        }
        let noise = manifest
            .noise
            .iter()
            .map(|p| read_wav(&manifest.resolve(dir, p)))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoadedCorpus {
            manifest,
            train,
            eval,
            episodes,
            noise,
        })
    }
}
