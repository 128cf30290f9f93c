//! Phrase-level training and evaluation data: phrase windows cut from
//! word-aligned utterances, match typing, easy/hard negative mining and
//! 3+3 episodes, with JSON-lines manifests on disk.

mod store;
mod toy;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureMatrix, Waveform};
use crate::error::{Error, Result};
use crate::losses::MatchType;
use crate::text::{g2p, levenshtein, Dictionary, PhonemeSequence};

pub use store::{
    assemble_corpus, write_corpus, AssembledCorpus, CorpusManifest, LoadedCorpus, CORPUS_FILE, EVAL_FILE, PHRASES_FILE,
    TRAIN_FILE,
};
pub use toy::{synth_toy_corpus, toy_tone_hz, ToyCorpus, ToyRecording, ToySpec, TOY_PHONEMES};

/// Largest phrase window, in words.
pub const MAX_PHRASE_WORDS: usize = 4;
/// Phoneme edit distance at or below which a negative counts as hard.
pub const DEFAULT_HARD_THRESHOLD: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordSpan {
    pub w: String,
    pub start: f64,
    pub end: f64,
}

/// One alignment-manifest record: an audio file and its timed words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedUtterance {
    pub audio: PathBuf,
    pub words: Vec<WordSpan>,
}

impl AlignedUtterance {
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0.0;
        for (i, w) in self.words.iter().enumerate() {
            if !(w.start >= 0.0 && w.end > w.start && w.end.is_finite()) {
                return Err(Error::param(format!(
                    "word {i} ({:?}) has span {}..{}",
                    w.w, w.start, w.end
                )));
            }
            if i > 0 && w.start < prev_end {
                return Err(Error::param(format!("word {i} ({:?}) overlaps its predecessor", w.w)));
            }
            prev_end = w.end;
        }
        Ok(())
    }
}

/// A recorded phrase of one to four words: what was said and where the audio
/// lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub text: String,
    pub phonemes: PhonemeSequence,
    pub n_words: usize,
    pub audio: PathBuf,
    pub start: f64,
    pub end: f64,
}

/// Every contiguous `n`-word window of the utterance. Utterances shorter than
/// `n` words yield nothing.
pub fn split_phrases(u: &AlignedUtterance, n: usize, dict: &Dictionary) -> Result<Vec<Phrase>> {
    if !(1..=MAX_PHRASE_WORDS).contains(&n) {
        return Err(Error::param(format!(
            "phrase length {n} outside 1..={MAX_PHRASE_WORDS}"
        )));
    }
    u.validate()?;
    u.words
        .windows(n)
        .map(|win| {
            let text = win.iter().map(|w| w.w.as_str()).collect::<Vec<_>>().join(" ");
            let phonemes = g2p(&text, dict)?;
            Ok(Phrase {
                text: phonemes.source_text.clone(),
                phonemes,
                n_words: n,
                audio: u.audio.clone(),
                start: win[0].start,
                end: win[n - 1].end,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeClass {
    Negative(Difficulty),
    /// Same pronunciation as the anchor, so not a negative at all.
    Rejected,
}

fn classify_distance(d: usize, threshold: usize) -> NegativeClass {
    match d {
        0 => NegativeClass::Rejected,
        d if d <= threshold => NegativeClass::Negative(Difficulty::Hard),
        _ => NegativeClass::Negative(Difficulty::Easy),
    }
}

/// Easy/hard split by phoneme edit distance to the anchor.
pub fn classify_negative(anchor: &Phrase, cand: &Phrase, threshold: usize) -> Result<NegativeClass> {
    if threshold == 0 {
        return Err(Error::param("hard-negative threshold must be at least 1"));
    }
    Ok(classify_distance(
        levenshtein(&anchor.phonemes.ids, &cand.phonemes.ids),
        threshold,
    ))
}

/// How the phonemes actually spoken relate to the enrolled keyword.
pub fn determine_match_type(anchor: &PhonemeSequence, audio: &PhonemeSequence) -> Result<MatchType> {
    if anchor.is_empty() || audio.is_empty() {
        return Err(Error::EmptyInput("match typing needs two nonempty sequences"));
    }
    let (a, b) = (&anchor.ids, &audio.ids);
    if a == b {
        return Ok(MatchType::FullMatch);
    }
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    if prefix > 0 && prefix < a.len().min(b.len()) {
        return Ok(MatchType::PartialFront { boundary_k: prefix });
    }
    let suffix = a.iter().rev().zip(b.iter().rev()).take_while(|(x, y)| x == y).count();
    if suffix > 0 {
        return Ok(MatchType::PartialBack);
    }
    Ok(MatchType::NonMatch)
}

/// Text-side boundary `K` for a pair: all of the keyword for a full match,
/// the shared prefix for a front match, zero otherwise.
pub fn boundary_k(mt: MatchType, keyword_len: usize) -> usize {
    match mt {
        MatchType::FullMatch => keyword_len,
        MatchType::PartialFront { boundary_k } => boundary_k,
        MatchType::NonMatch | MatchType::PartialBack => 0,
    }
}

/// A keyword paired with one recorded phrase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub keyword: String,
    pub keyword_phonemes: PhonemeSequence,
    pub clip: Phrase,
    pub label: u8,
    pub match_type: MatchType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
}

impl PairRecord {
    pub fn new(keyword: &Phrase, clip: &Phrase, difficulty: Option<Difficulty>) -> Result<Self> {
        let match_type = determine_match_type(&keyword.phonemes, &clip.phonemes)?;
        Ok(PairRecord {
            keyword: keyword.text.clone(),
            keyword_phonemes: keyword.phonemes.clone(),
            clip: clip.clone(),
            label: match_type.label(),
            match_type,
            difficulty,
        })
    }

    pub fn boundary_k(&self) -> usize {
        boundary_k(self.match_type, self.keyword_phonemes.len())
    }
}

/// One anchor keyword with positive and negative recordings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub anchor: String,
    pub anchor_phonemes: PhonemeSequence,
    pub difficulty: Difficulty,
    pub positives: Vec<PairRecord>,
    pub negatives: Vec<PairRecord>,
}

impl Episode {
    pub fn pairs(&self) -> impl Iterator<Item = &PairRecord> {
        self.positives.iter().chain(&self.negatives)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    pub hard_threshold: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_pos: 3,
            n_neg: 3,
            hard_threshold: DEFAULT_HARD_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeBuild {
    pub episodes: Vec<Episode>,
    /// Anchors dropped for having fewer than `n_pos` recordings.
    pub skipped_anchors: usize,
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, pool: &[&'a T], n: usize) -> Vec<&'a T> {
    let mut idx = sample(rng, pool.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i]).collect()
}

/// Groups phrases by text and, for every anchor with enough recordings, emits
/// an easy and a hard episode whenever the respective negative pool (phrases
/// of the same word count) is large enough.
pub fn build_episodes(phrases: &[Phrase], spec: EpisodeSpec, seed: u64) -> Result<EpisodeBuild> {
    if spec.n_pos == 0 || spec.n_neg == 0 {
        return Err(Error::param("episodes need at least one positive and one negative"));
    }
    if spec.hard_threshold == 0 {
        return Err(Error::param("hard-negative threshold must be at least 1"));
    }
    let mut by_text: BTreeMap<&str, Vec<&Phrase>> = BTreeMap::new();
    for p in phrases {
        by_text.entry(p.text.as_str()).or_default().push(p);
    }
    let texts: Vec<&str> = by_text.keys().copied().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = EpisodeBuild::default();
    for &anchor in &texts {
        let recordings = &by_text[anchor];
        if recordings.len() < spec.n_pos {
            out.skipped_anchors += 1;
            continue;
        }
        let reference = recordings[0];
        let mut pools: BTreeMap<Difficulty, Vec<&Phrase>> = BTreeMap::new();
        for &other in &texts {
            let cands = &by_text[other];
            if other == anchor || cands[0].n_words != reference.n_words {
                continue;
            }
            if let NegativeClass::Negative(kind) = classify_negative(reference, cands[0], spec.hard_threshold)? {
                pools.entry(kind).or_default().extend(cands.iter().copied());
            }
        }
        for (kind, pool) in pools {
            if pool.len() < spec.n_neg {
                continue;
            }
            let positives = pick(&mut rng, recordings, spec.n_pos)
                .into_iter()
                .map(|clip| PairRecord::new(reference, clip, None))
                .collect::<Result<Vec<_>>>()?;
            let negatives = pick(&mut rng, &pool, spec.n_neg)
                .into_iter()
                .map(|clip| PairRecord::new(reference, clip, Some(kind)))
                .collect::<Result<Vec<_>>>()?;
            out.episodes.push(Episode {
                anchor: anchor.to_string(),
                anchor_phonemes: reference.phonemes.clone(),
                difficulty: kind,
                positives,
                negatives,
            });
        }
    }
    if out.skipped_anchors > 0 {
        log::info!(
            "skipped {} anchors with fewer than {} recordings",
            out.skipped_anchors,
            spec.n_pos
        );
    }
    Ok(out)
}

/// A pair ready for the model: clean features, the waveform for noisy
/// variants, and the keyword it is scored against.
#[derive(Clone, Debug)]
pub struct LabeledPair {
    pub features: FeatureMatrix,
    pub waveform: Waveform,
    pub phonemes: PhonemeSequence,
    pub label: u8,
    pub match_type: MatchType,
    pub n_words: usize,
    pub difficulty: Option<Difficulty>,
}

impl LabeledPair {
    pub fn boundary_k(&self) -> usize {
        boundary_k(self.match_type, self.phonemes.len())
    }
}

/// Reads a JSON-lines file, one record per nonblank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dict() -> Dictionary {
        let text = "\
I  AY1
MEAN  M IY1 N
TO  T UW1
YOU  Y UW1
WE  W IY1
BE  B IY1
A  AH0
BANNER  B AE1 N ER0
FRIEND  F R EH1 N D
GUARD  G AA1 R D
THE  DH AH0
RIVER  R IH1 V ER0
";
        Dictionary::parse(text, Path::new("test.dict")).unwrap()
    }

    fn phrase(text: &str, d: &Dictionary) -> Phrase {
        let phonemes = g2p(text, d).unwrap();
        Phrase {
            text: phonemes.source_text.clone(),
            n_words: text.split_whitespace().count(),
            phonemes,
            audio: PathBuf::from("x.wav"),
            start: 0.0,
            end: 1.0,
        }
    }

    fn utterance(words: &[&str]) -> AlignedUtterance {
        AlignedUtterance {
            audio: PathBuf::from("u.wav"),
            words: words
                .iter()
                .enumerate()
                .map(|(i, w)| WordSpan {
                    w: w.to_string(),
                    start: i as f64 * 0.5,
                    end: i as f64 * 0.5 + 0.4,
                })
                .collect(),
        }
    }

    #[test]
    fn sliding_windows() {
        let d = dict();
        let u = utterance(&["i", "mean", "to"]);
        let two = split_phrases(&u, 2, &d).unwrap();
        assert_eq!(
            two.iter().map(|p| p.text.as_str()).collect::<Vec<_>>(),
            ["i mean", "mean to"]
        );
        assert_eq!((two[1].start, two[1].end), (0.5, 1.4));
        assert_eq!(split_phrases(&u, 1, &d).unwrap().len(), 3);
        assert!(split_phrases(&u, 4, &d).unwrap().is_empty());
        assert!(split_phrases(&u, 5, &d).is_err());
        assert!(split_phrases(&u, 0, &d).is_err());
    }

    #[test]
    fn rejects_overlapping_alignment() {
        let mut u = utterance(&["i", "mean"]);
        u.words[1].start = 0.1;
        assert!(u.validate().is_err());
        assert!(split_phrases(&u, 1, &dict()).is_err());
    }

    #[test]
    fn negatives_follow_edit_distance() {
        let d = dict();
        let friend = phrase("friend", &d);
        assert_eq!(
            classify_negative(&friend, &phrase("frind", &d), 2).unwrap(),
            NegativeClass::Negative(Difficulty::Hard)
        );
        assert_eq!(
            classify_negative(&friend, &phrase("guard", &d), 2).unwrap(),
            NegativeClass::Negative(Difficulty::Easy)
        );
        assert_eq!(classify_negative(&friend, &friend, 2).unwrap(), NegativeClass::Rejected);
        assert!(classify_negative(&friend, &friend, 0).is_err());
    }

    #[test]
    fn match_type_quartet() {
        let d = dict();
        let anchor = g2p("i mean to", &d).unwrap();
        let mt = |t: &str| determine_match_type(&anchor, &g2p(t, &d).unwrap()).unwrap();
        assert_eq!(mt("i mean to"), MatchType::FullMatch);
        assert_eq!(mt("be a banner"), MatchType::NonMatch);
        let k = g2p("i mean", &d).unwrap().len();
        assert_eq!(mt("i mean you"), MatchType::PartialFront { boundary_k: k });
        assert_eq!(mt("we mean to"), MatchType::PartialBack);
        let river = g2p("the river", &d).unwrap();
        assert_eq!(determine_match_type(&river, &river).unwrap(), MatchType::FullMatch);
        assert_eq!(boundary_k(MatchType::FullMatch, river.len()), river.len());
        let empty = PhonemeSequence::new(vec![], "").unwrap();
        assert!(determine_match_type(&empty, &river).is_err());
    }

    fn pool(d: &Dictionary, counts: &[(&str, usize)]) -> Vec<Phrase> {
        let mut out = Vec::new();
        for &(text, n) in counts {
            for i in 0..n {
                let mut p = phrase(text, d);
                p.audio = PathBuf::from(format!("{}_{i}.wav", text.replace(' ', "_")));
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn episodes_have_three_and_three() {
        let d = dict();
        let phrases = pool(
            &d,
            &[
                ("friend", 4),
                ("frind", 3),
                ("guard", 3),
                ("river", 3),
                ("banner", 2),
                ("mean", 3),
            ],
        );
        let spec = EpisodeSpec::default();
        let built = build_episodes(&phrases, spec, 11).unwrap();
        assert_eq!(built.skipped_anchors, 1);
        assert!(!built.episodes.is_empty());
        assert!(built.episodes.iter().all(|e| e.anchor != "banner"));
        for e in &built.episodes {
            assert_eq!(e.positives.len(), 3);
            assert_eq!(e.negatives.len(), 3);
            assert!(e.positives.iter().all(|p| p.clip.text == e.anchor && p.label == 1));
            assert!(e.negatives.iter().all(|p| p.clip.text != e.anchor && p.label == 0));
            assert!(e.negatives.iter().all(|p| p.difficulty == Some(e.difficulty)));
        }
        let friend_hard = built
            .episodes
            .iter()
            .find(|e| e.anchor == "friend" && e.difficulty == Difficulty::Hard)
            .unwrap();
        assert!(friend_hard.negatives.iter().all(|p| p.clip.text == "frind"));
        assert_eq!(build_episodes(&phrases, spec, 11).unwrap(), built);
    }

    #[test]
    fn too_few_recordings_skipped() {
        let d = dict();
        let phrases = pool(&d, &[("friend", 2), ("guard", 3)]);
        let built = build_episodes(&phrases, EpisodeSpec::default(), 1).unwrap();
        assert!(built.episodes.is_empty());
        assert_eq!(built.skipped_anchors, 1);
    }

    #[test]
    fn manifest_round_trip() {
        let d = dict();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let a = phrase("i mean to", &d);
        let recs = vec![
            PairRecord::new(&a, &phrase("i mean you", &d), Some(Difficulty::Hard)).unwrap(),
            PairRecord::new(&a, &a, None).unwrap(),
        ];
        write_jsonl(&path, &recs).unwrap();
        let back: Vec<PairRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in back.iter().zip(&recs) {
            assert_eq!(x.keyword_phonemes.ids, y.keyword_phonemes.ids);
            assert_eq!(x.match_type, y.match_type);
            assert_eq!(x.label, y.label);
        }
        fs::write(&path, "{\"not\": 1}\n").unwrap();
        let err = read_jsonl::<PairRecord>(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    proptest! {
        #[test]
        fn full_match_iff_equal(a in prop::collection::vec(0usize..5, 1..6), b in prop::collection::vec(0usize..5, 1..6)) {
            let sa = PhonemeSequence::new(a.clone(), "").unwrap();
            let sb = PhonemeSequence::new(b.clone(), "").unwrap();
            let mt = determine_match_type(&sa, &sb).unwrap();
            prop_assert_eq!(mt == MatchType::FullMatch, a == b);
            prop_assert_eq!(mt.label() == 1, a == b);
            if let MatchType::PartialFront { boundary_k } = mt {
                prop_assert!(boundary_k > 0 && boundary_k < a.len());
            }
        }

        #[test]
        fn classification_symmetric(a in prop::collection::vec(0usize..6, 1..7), b in prop::collection::vec(0usize..6, 1..7)) {
            let mk = |ids: &Vec<usize>| Phrase {
                text: String::new(),
                phonemes: PhonemeSequence::new(ids.clone(), "").unwrap(),
                n_words: 1,
                audio: PathBuf::new(),
                start: 0.0,
                end: 1.0,
            };
            let (pa, pb) = (mk(&a), mk(&b));
            prop_assert_eq!(classify_negative(&pa, &pb, 2).unwrap(), classify_negative(&pb, &pa, 2).unwrap());
        }
    }
}
