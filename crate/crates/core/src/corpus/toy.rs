//! Synthetic stand-in corpus: every phoneme is a steady tone, pseudo-words
//! are two phonemes long, and keywords are two-word phrases arranged so that
//! front-sharing, back-sharing and disjoint negatives all occur.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::store::{write_corpus, AudioCache, CorpusManifest};
use super::{build_episodes, classify_negative, Episode, EpisodeSpec, LabeledPair, NegativeClass, PairRecord, Phrase};
use crate::dsp::{write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, TAG_EPISODES, TAG_TOY_AUDIO, TAG_TOY_NOISE, TAG_TOY_PAIRS, TAG_TOY_WORDS};
use crate::text::{phoneme_id, phoneme_symbol, Dictionary, PhonemeSequence};

/// Phonemes the toy language uses, one tone each.
pub const TOY_PHONEMES: [&str; 16] = [
    "AA", "IY", "UW", "EH", "M", "N", "S", "T", "K", "L", "R", "B", "D", "F", "G", "Z",
];
const LOW_HZ: f64 = 250.0;
const HIGH_HZ: f64 = 3500.0;
const KEYWORDS_PER_GROUP: usize = 4;
const WORDS_PER_GROUP: usize = 4;
const NOISE_CLIPS: usize = 4;
const NOISE_SECS: f64 = 2.0;
const FADE_SECS: f64 = 0.01;
const BACKGROUND_STD: f64 = 0.005;

/// Tone frequency of toy phoneme `i`, log-spaced over 250–3500 Hz.
pub fn toy_tone_hz(i: usize) -> f64 {
    let frac = i as f64 / (TOY_PHONEMES.len() - 1) as f64;
    LOW_HZ * (HIGH_HZ / LOW_HZ).powf(frac)
}

fn tone_for(id: usize) -> Result<f64> {
    let sym = phoneme_symbol(id).unwrap_or("?");
    TOY_PHONEMES
        .iter()
        .position(|p| *p == sym)
        .map(toy_tone_hz)
        .ok_or_else(|| Error::param(format!("phoneme {sym} is not part of the toy language")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub n_keywords: usize,
    pub n_samples_per: usize,
    /// Held-out recordings per keyword for evaluation.
    pub n_eval_per: usize,
    /// Episode draws over the held-out recordings.
    pub eval_rounds: usize,
    /// Negative training pairs built from each recording.
    pub negatives_per_recording: usize,
    /// Nominal phoneme duration before tempo jitter.
    pub phone_secs: f64,
    pub seed: u64,
}

impl ToySpec {
    pub fn new(n_keywords: usize, n_samples_per: usize, seed: u64) -> Self {
        ToySpec {
            n_keywords,
            n_samples_per,
            n_eval_per: 5,
            eval_rounds: 3,
            negatives_per_recording: 2,
            phone_secs: 0.1,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyRecording {
    pub phrase: Phrase,
    pub keyword: usize,
    pub waveform: Waveform,
}

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub spec: ToySpec,
    /// Pseudo-word lexicon, in dictionary order of creation.
    pub words: Vec<(String, Vec<usize>)>,
    pub keywords: Vec<PhonemeSequence>,
    pub train_recordings: Vec<ToyRecording>,
    pub eval_recordings: Vec<ToyRecording>,
    pub noise: Vec<Waveform>,
    pub train: Vec<PairRecord>,
    pub eval: Vec<Episode>,
}

fn word_name(mut i: usize) -> String {
    const C: &[u8] = b"bdfgklmnpstvz";
    const V: &[u8] = b"aeiou";
    let base = C.len() * V.len();
    let mut s = String::new();
    loop {
        s.push(C[i % C.len()] as char);
        s.push(V[(i / C.len()) % V.len()] as char);
        i /= base;
        if i == 0 {
            return s;
        }
        i -= 1;
    }
}

/// Four two-phoneme words per group, all eight phonemes of a group distinct.
fn make_words(n_groups: usize, seed: u64) -> Result<Vec<(String, Vec<usize>)>> {
    let ids: Vec<usize> = TOY_PHONEMES
        .iter()
        .map(|p| phoneme_id(p).ok_or_else(|| Error::Contract(format!("{p} missing from inventory"))))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_TOY_WORDS]));
    let mut words: Vec<(String, Vec<usize>)> = Vec::new();
    let mut perm = ids.clone();
    let per_group = 2 * WORDS_PER_GROUP;
    for g in 0..n_groups {
        let offset = (g * per_group) % perm.len();
        if offset == 0 {
            perm.shuffle(&mut rng);
        }
        for w in 0..WORDS_PER_GROUP {
            let pron = vec![perm[offset + 2 * w], perm[offset + 2 * w + 1]];
            if words.iter().any(|(_, p)| *p == pron) {
                // Later groups reuse the inventory; swap the order to stay unique.
                let swapped = vec![pron[1], pron[0]];
                if words.iter().any(|(_, p)| *p == swapped) {
                    return Err(Error::param("toy lexicon exhausted; use fewer keywords"));
                }
                words.push((word_name(words.len()), swapped));
            } else {
                words.push((word_name(words.len()), pron));
            }
        }
    }
    Ok(words)
}

/// Keyword `j` of group `g` over the group's words `a, b, c, d`:
/// `a b`, `a c`, `d b`, `c d`.
fn keyword_words(j: usize) -> (usize, usize) {
    const LAYOUT: [(usize, usize); KEYWORDS_PER_GROUP] = [(0, 1), (0, 2), (3, 1), (2, 3)];
    let g = j / KEYWORDS_PER_GROUP;
    let (x, y) = LAYOUT[j % KEYWORDS_PER_GROUP];
    (g * WORDS_PER_GROUP + x, g * WORDS_PER_GROUP + y)
}

fn fade(i: usize, n: usize, fade_len: usize) -> f64 {
    let edge = i.min(n - 1 - i);
    if edge >= fade_len {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge as f64 / fade_len as f64).cos()
    }
}

fn quantize(x: f64) -> f64 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0
}

/// Tone sequence with tempo jitter, random phase and light background noise,
/// quantised to the 16-bit grid so it survives a WAV round trip unchanged.
fn render(ids: &[usize], phone_secs: f64, rng: &mut ChaCha8Rng, with_margins: bool) -> Result<Waveform> {
    let sr = f64::from(SAMPLE_RATE);
    let tempo: f64 = rng.random_range(0.9..1.1);
    let mut samples = Vec::new();
    let margin = |rng: &mut ChaCha8Rng| (rng.random_range(0.005..0.02) * sr) as usize;
    if with_margins {
        samples.resize(margin(rng), 0.0);
    }
    let fade_len = (FADE_SECS * sr) as usize;
    for &id in ids {
        let hz = tone_for(id)?;
        let n = (phone_secs * tempo * rng.random_range(0.95..1.05) * sr) as usize;
        let amp: f64 = rng.random_range(0.35..0.55);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        samples.extend((0..n).map(|i| amp * fade(i, n, fade_len) * (2.0 * PI * hz * i as f64 / sr + phase).sin()));
    }
    if with_margins {
        let tail = margin(rng);
        samples.extend(std::iter::repeat_n(0.0, tail));
    }
    let background = Normal::new(0.0, BACKGROUND_STD).map_err(|e| Error::param(e.to_string()))?;
    for s in &mut samples {
        *s = quantize(*s + background.sample(rng));
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// Several overlapping random phoneme strings summed together.
fn babble(seed: u64, index: u64, phone_secs: f64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_TOY_NOISE, index]));
    let len = (NOISE_SECS * f64::from(SAMPLE_RATE)) as usize;
    let mut mix = vec![0.0; len];
    let ids: Vec<usize> = TOY_PHONEMES.iter().filter_map(|p| phoneme_id(p)).collect();
    for _ in 0..4 {
        let n_ph = (NOISE_SECS / phone_secs) as usize + 2;
        let seq: Vec<usize> = (0..n_ph).map(|_| ids[rng.random_range(0..ids.len())]).collect();
        let talker = render(&seq, phone_secs, &mut rng, false)?;
        let shift = rng.random_range(0..len);
        for (i, s) in talker.samples.iter().enumerate() {
            mix[(i + shift) % len] += s;
        }
    }
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let samples = mix.iter().map(|v| quantize(0.5 * v / peak)).collect();
    Waveform::new(samples, SAMPLE_RATE)
}

fn record(
    spec: &ToySpec,
    keywords: &[PhonemeSequence],
    split: &str,
    split_tag: u64,
    per: usize,
) -> Result<Vec<ToyRecording>> {
    let mut out = Vec::with_capacity(keywords.len() * per);
    for (k, kw) in keywords.iter().enumerate() {
        for r in 0..per {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[TAG_TOY_AUDIO, split_tag, k as u64, r as u64]));
            let waveform = render(&kw.ids, spec.phone_secs, &mut rng, true)?;
            out.push(ToyRecording {
                phrase: Phrase {
                    text: kw.source_text.clone(),
                    phonemes: kw.clone(),
                    n_words: 2,
                    audio: PathBuf::from(format!("audio/{split}_k{k:02}_r{r:02}.wav")),
                    start: 0.0,
                    end: waveform.duration_secs(),
                },
                keyword: k,
                waveform,
            });
        }
    }
    Ok(out)
}

fn keyword_phrase(kw: &PhonemeSequence) -> Phrase {
    Phrase {
        text: kw.source_text.clone(),
        phonemes: kw.clone(),
        n_words: 2,
        audio: PathBuf::new(),
        start: 0.0,
        end: 0.0,
    }
}

/// Training pairs: each recording as a positive for its own keyword, plus
/// negatives scoring it against other keywords, alternating between the
/// recording's own group and the whole set.
fn training_pairs(spec: &ToySpec, keywords: &[PhonemeSequence], recs: &[ToyRecording]) -> Result<Vec<PairRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[TAG_TOY_PAIRS]));
    let anchors: Vec<Phrase> = keywords.iter().map(keyword_phrase).collect();
    let mut out = Vec::new();
    for rec in recs {
        out.push(PairRecord::new(&anchors[rec.keyword], &rec.phrase, None)?);
        let group = rec.keyword / KEYWORDS_PER_GROUP;
        let group_mates: Vec<usize> = (group * KEYWORDS_PER_GROUP
            ..((group + 1) * KEYWORDS_PER_GROUP).min(keywords.len()))
            .filter(|&j| j != rec.keyword)
            .collect();
        let others: Vec<usize> = (0..keywords.len()).filter(|&j| j != rec.keyword).collect();
        for n in 0..spec.negatives_per_recording {
            let pool = if n % 2 == 0 && !group_mates.is_empty() {
                &group_mates
            } else {
                &others
            };
            let j = pool[rng.random_range(0..pool.len())];
            let kind = match classify_negative(&anchors[j], &rec.phrase, super::DEFAULT_HARD_THRESHOLD)? {
                NegativeClass::Negative(kind) => kind,
                NegativeClass::Rejected => continue,
            };
            out.push(PairRecord::new(&anchors[j], &rec.phrase, Some(kind))?);
        }
    }
    Ok(out)
}

/// Builds the toy corpus for `n_keywords` keywords with `n_samples_per`
/// training recordings each.
pub fn synth_toy_corpus(n_keywords: usize, n_samples_per: usize, seed: u64) -> Result<ToyCorpus> {
    ToyCorpus::build(ToySpec::new(n_keywords, n_samples_per, seed))
}

impl ToyCorpus {
    pub fn build(spec: ToySpec) -> Result<Self> {
        if spec.n_keywords < 2 {
            return Err(Error::param("toy corpus needs at least two keywords"));
        }
        if spec.n_samples_per == 0 {
            return Err(Error::param("toy corpus needs at least one recording per keyword"));
        }
        if spec.phone_secs.is_nan() || spec.phone_secs < 0.03 {
            return Err(Error::param("toy phoneme duration must be at least 30 ms"));
        }
        let n_groups = spec.n_keywords.div_ceil(KEYWORDS_PER_GROUP);
        let words = make_words(n_groups, spec.seed)?;
        let keywords = (0..spec.n_keywords)
            .map(|j| {
                let (x, y) = keyword_words(j);
                let ids = [words[x].1.as_slice(), words[y].1.as_slice()].concat();
                PhonemeSequence::new(ids, format!("{} {}", words[x].0, words[y].0))
            })
            .collect::<Result<Vec<_>>>()?;

        let train_recordings = record(&spec, &keywords, "train", 0, spec.n_samples_per)?;
        let eval_recordings = record(&spec, &keywords, "eval", 1, spec.n_eval_per)?;
        let noise = (0..NOISE_CLIPS as u64)
            .map(|i| babble(spec.seed, i, spec.phone_secs))
            .collect::<Result<Vec<_>>>()?;
        let train = training_pairs(&spec, &keywords, &train_recordings)?;

        let eval_phrases: Vec<Phrase> = eval_recordings.iter().map(|r| r.phrase.clone()).collect();
        let mut eval = Vec::new();
        for round in 0..spec.eval_rounds as u64 {
            let built = build_episodes(
                &eval_phrases,
                EpisodeSpec::default(),
                derive_seed(spec.seed, &[TAG_EPISODES, 2, round]),
            )?;
            eval.extend(built.episodes);
        }
        Ok(ToyCorpus {
            spec,
            words,
            keywords,
            train_recordings,
            eval_recordings,
            noise,
            train,
            eval,
        })
    }

    pub fn dictionary(&self) -> Dictionary {
        let mut d = Dictionary::default();
        for (w, p) in &self.words {
            d.insert(w, p.clone());
        }
        d
    }

    /// Lexicon in CMUdict text format.
    pub fn dictionary_text(&self) -> String {
        let mut s = String::from(";;; toy lexicon\n");
        for (w, p) in &self.words {
            let syms: Vec<&str> = p.iter().filter_map(|&i| phoneme_symbol(i)).collect();
            writeln!(s, "{}  {}", w.to_uppercase(), syms.join(" ")).ok();
        }
        s
    }

    fn cache(&self) -> AudioCache {
        let mut cache = AudioCache::new();
        for r in self.train_recordings.iter().chain(&self.eval_recordings) {
            cache.insert(r.phrase.audio.clone(), r.waveform.clone());
        }
        cache
    }

    pub fn train_pairs(&self) -> Result<Vec<LabeledPair>> {
        let mut cache = self.cache();
        self.train
            .iter()
            .map(|r| cache.labeled(&r.clip.audio, r, None))
            .collect()
    }

    /// Episode pairs flattened in order, each tagged with its episode's
    /// difficulty.
    pub fn eval_pairs(&self) -> Result<Vec<LabeledPair>> {
        let mut cache = self.cache();
        let mut out = Vec::new();
        for ep in &self.eval {
            for r in ep.pairs() {
                out.push(cache.labeled(&r.clip.audio, r, Some(ep.difficulty))?);
            }
        }
        Ok(out)
    }

    /// Writes WAVs, noise, the lexicon and the manifests under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["audio", "noise"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for r in self.train_recordings.iter().chain(&self.eval_recordings) {
            write_wav(&dir.join(&r.phrase.audio), &r.waveform)?;
        }
        let mut noise_paths = Vec::new();
        for (i, w) in self.noise.iter().enumerate() {
            let rel = PathBuf::from(format!("noise/babble_{i:02}.wav"));
            write_wav(&dir.join(&rel), w)?;
            noise_paths.push(rel);
        }
        let dict_path = dir.join("lexicon.dict");
        fs::write(&dict_path, self.dictionary_text()).map_err(|e| Error::io(&dict_path, e))?;
        let phrases: Vec<Phrase> = self
            .train_recordings
            .iter()
            .chain(&self.eval_recordings)
            .map(|r| r.phrase.clone())
            .collect();
        let manifest = CorpusManifest::new(PathBuf::from("."), noise_paths, Some(PathBuf::from("lexicon.dict")));
        write_corpus(dir, &manifest, &phrases, &self.train, &self.eval)
    }
}
