//! Text front end: ARPAbet inventory, CMUdict lookup with a letter-rule
//! fallback, one-hot encoding and edit distance.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The 39 stressless ARPAbet phonemes. Ids are positions in this table; the
/// pad symbol takes the next id.
pub const PHONEMES: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY", "JH", "K",
    "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
];
pub const PAD: &str = "<pad>";
pub const PAD_ID: usize = PHONEMES.len();
/// Inventory size including the pad symbol.
pub const INVENTORY_SIZE: usize = PHONEMES.len() + 1;

pub fn phoneme_id(symbol: &str) -> Option<usize> {
    let base = symbol.trim_end_matches(|c: char| c.is_ascii_digit());
    if base == PAD {
        return Some(PAD_ID);
    }
    PHONEMES.iter().position(|p| *p == base)
}

pub fn phoneme_symbol(id: usize) -> Option<&'static str> {
    match id {
        PAD_ID => Some(PAD),
        _ => PHONEMES.get(id).copied(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    pub source_text: String,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, source_text: impl Into<String>) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&i| i >= INVENTORY_SIZE) {
            return Err(Error::param(format!("phoneme id {bad} outside inventory")));
        }
        Ok(PhonemeSequence {
            ids,
            source_text: source_text.into(),
        })
    }

    /// Parses whitespace-separated ARPAbet symbols, stress digits allowed.
    pub fn from_symbols(symbols: &str, source_text: impl Into<String>) -> Result<Self> {
        let ids = symbols
            .split_whitespace()
            .map(|s| phoneme_id(s).ok_or_else(|| Error::param(format!("unknown phoneme {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, source_text)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn symbols(&self) -> Vec<&'static str> {
        self.ids.iter().filter_map(|&i| phoneme_symbol(i)).collect()
    }

    pub fn symbol_string(&self) -> String {
        self.symbols().join(" ")
    }
}

/// Manifests store a sequence as its space-separated symbols.
impl serde::Serialize for PhonemeSequence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.symbol_string())
    }
}

impl<'de> serde::Deserialize<'de> for PhonemeSequence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        PhonemeSequence::from_symbols(&text, "").map_err(serde::de::Error::custom)
    }
}

/// Uppercase word → first listed pronunciation.
#[derive(Clone, Debug, Default)]
pub struct Dictionary {
    entries: HashMap<String, Vec<usize>>,
}

impl Dictionary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with(";;;") {
                continue;
            }
            let parse_err = |reason: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                reason,
            };
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap_or_default();
            let word = match head.find('(') {
                Some(i) if head.ends_with(')') => &head[..i],
                Some(_) => return Err(parse_err(format!("malformed variant marker in {head:?}"))),
                None => head,
            };
            let ids = parts
                .map(|s| {
                    phoneme_id(s)
                        .filter(|&id| id != PAD_ID)
                        .ok_or_else(|| parse_err(format!("unknown phoneme {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if ids.is_empty() {
                return Err(parse_err(format!("no pronunciation for {word:?}")));
            }
            entries.entry(word.to_uppercase()).or_insert(ids);
        }
        Ok(Dictionary { entries })
    }

    pub fn insert(&mut self, word: &str, ids: Vec<usize>) {
        self.entries.insert(word.to_uppercase(), ids);
    }

    pub fn get(&self, word: &str) -> Option<&[usize]> {
        self.entries.get(&word.to_uppercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Letter-to-sound fallback for words missing from the dictionary.
///
/// Digraphs are matched before single letters and a doubled letter is read
/// once.
const DIGRAPHS: [(&str, &[&str]); 10] = [
    ("CH", &["CH"]),
    ("SH", &["SH"]),
    ("TH", &["TH"]),
    ("PH", &["F"]),
    ("NG", &["NG"]),
    ("CK", &["K"]),
    ("EE", &["IY"]),
    ("OO", &["UW"]),
    ("AI", &["EY"]),
    ("OU", &["AW"]),
];

fn letter_rule(c: char) -> &'static [&'static str] {
    match c {
        'A' => &["AH"],
        'B' => &["B"],
        'C' => &["K"],
        'D' => &["D"],
        'E' => &["EH"],
        'F' => &["F"],
        'G' => &["G"],
        'H' => &["HH"],
        'I' => &["IH"],
        'J' => &["JH"],
        'K' => &["K"],
        'L' => &["L"],
        'M' => &["M"],
        'N' => &["N"],
        'O' => &["AA"],
        'P' => &["P"],
        'Q' => &["K"],
        'R' => &["R"],
        'S' => &["S"],
        'T' => &["T"],
        'U' => &["AH"],
        'V' => &["V"],
        'W' => &["W"],
        'X' => &["K", "S"],
        'Y' => &["Y"],
        'Z' => &["Z"],
        _ => &[],
    }
}

pub fn rule_pronounce(word: &str) -> Vec<usize> {
    let letters: Vec<char> = word
        .chars()
        .filter(char::is_ascii_alphabetic)
        .map(|c| c.to_ascii_uppercase())
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < letters.len() {
        if i + 1 < letters.len() {
            let pair: String = letters[i..i + 2].iter().collect();
            if let Some((_, ph)) = DIGRAPHS.iter().find(|(g, _)| *g == pair) {
                out.extend(ph.iter().filter_map(|s| phoneme_id(s)));
                i += 2;
                continue;
            }
            if letters[i] == letters[i + 1] {
                i += 1;
                continue;
            }
        }
        out.extend(letter_rule(letters[i]).iter().filter_map(|s| phoneme_id(s)));
        i += 1;
    }
    out
}

/// Lowercased words with punctuation stripped (apostrophes kept).
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '\'')
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Dictionary pronunciation of each word, falling back to letter rules.
/// No separator is inserted between words.
pub fn g2p(text: &str, dict: &Dictionary) -> Result<PhonemeSequence> {
    let words = normalize_words(text);
    if words.is_empty() {
        return Err(Error::EmptyInput("keyword text is empty"));
    }
    let mut ids = Vec::new();
    for w in &words {
        match dict.get(w) {
            Some(p) => ids.extend_from_slice(p),
            None => ids.extend(rule_pronounce(w)),
        }
    }
    if ids.is_empty() {
        return Err(Error::param(format!("no pronounceable letters in {text:?}")));
    }
    PhonemeSequence::new(ids, words.join(" "))
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `T_t × |P|` one-hot rows.
pub fn phoneme_onehot(seq: &PhonemeSequence) -> Result<Tensor> {
    if seq.is_empty() {
        return Err(Error::EmptyInput("phoneme sequence"));
    }
    let mut data = vec![0.0; seq.len() * INVENTORY_SIZE];
    for (r, &id) in seq.ids.iter().enumerate() {
        if id >= INVENTORY_SIZE {
            return Err(Error::param(format!("phoneme id {id} outside inventory")));
        }
        data[r * INVENTORY_SIZE + id] = 1.0;
    }
    Tensor::new(&[seq.len(), INVENTORY_SIZE], data)
}
