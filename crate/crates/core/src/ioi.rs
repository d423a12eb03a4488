//! Three-name indirect-object-identification prompts with the five
//! single-name corruption classes, over a word-level tokenizer.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";

const TEMPLATE_WORDS: [&str; 14] = [
    "Then",
    ",",
    "and",
    "went",
    "to",
    "the",
    ".",
    "gave",
    "a",
    "Afterwards",
    "When",
    "arrived",
    "at",
    "Friends",
];

pub const DEFAULT_NAMES: [&str; 20] = [
    "Mary", "John", "Alice", "Bob", "Lucas", "Isaac", "Lauren", "Sally", "Tom", "Anna", "James",
    "Emma", "David", "Laura", "Paul", "Sarah", "Mark", "Kate", "Peter", "Rose",
];

pub const DEFAULT_PLACES: [&str; 14] = [
    "store",
    "office",
    "park",
    "school",
    "garden",
    "station",
    "hospital",
    "library",
    "restaurant",
    "beach",
    "museum",
    "market",
    "church",
    "airport",
];

pub const DEFAULT_OBJECTS: [&str; 15] = [
    "ring",
    "book",
    "necklace",
    "kiss",
    "drink",
    "bone",
    "basketball",
    "computer",
    "snack",
    "apple",
    "letter",
    "gift",
    "flower",
    "hat",
    "key",
];

/// Word-level tokenizer. Commas and full stops are separate tokens and
/// every encoded prompt starts with the BOS token.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    bos: usize,
}

impl Tokenizer {
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Tokenizer> {
        let mut vocab = Vec::with_capacity(words.len());
        let mut index = HashMap::new();
        for w in words {
            let w = w.as_ref().trim();
            if w.is_empty() {
                continue;
            }
            if index.insert(w.to_string(), vocab.len()).is_some() {
                return Err(Error::Dataset(format!("duplicate vocabulary entry `{w}`")));
            }
            vocab.push(w.to_string());
        }
        let bos = *index
            .get(BOS)
            .ok_or_else(|| Error::Dataset(format!("vocabulary has no `{BOS}` entry")))?;
        Ok(Tokenizer { vocab, index, bos })
    }

    /// Newline-delimited UTF-8, one token per line.
    pub fn from_vocab_file(path: &Path) -> Result<Tokenizer> {
        let text = std::fs::read_to_string(path)?;
        let words: Vec<&str> = text.lines().collect();
        Tokenizer::from_words(&words)
    }

    /// BOS, template words and the given lexicon.
    pub fn for_lexicon(lexicon: &Lexicon) -> Result<Tokenizer> {
        let mut words: Vec<&str> = vec![BOS];
        words.extend(TEMPLATE_WORDS);
        words.extend(lexicon.names.iter().map(String::as_str));
        words.extend(lexicon.places.iter().map(String::as_str));
        words.extend(lexicon.objects.iter().map(String::as_str));
        Tokenizer::from_words(&words)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn bos(&self) -> usize {
        self.bos
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    fn pieces(text: &str) -> Vec<&str> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            match word.strip_suffix([',', '.']) {
                Some(head) if !head.is_empty() => {
                    out.push(head);
                    out.push(&word[head.len()..]);
                }
                _ => out.push(word),
            }
        }
        out
    }

    /// Token ids of `text` without BOS.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        Tokenizer::pieces(text)
            .into_iter()
            .map(|p| {
                self.id(p)
                    .ok_or_else(|| Error::Dataset(format!("`{p}` is not in the vocabulary")))
            })
            .collect()
    }

    /// BOS followed by the tokens of `text`.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![self.bos];
        ids.extend(self.tokenize(text)?);
        Ok(ids)
    }

    /// Id of a word that must be exactly one token.
    pub fn single_token(&self, word: &str) -> Result<usize> {
        let pieces = Tokenizer::pieces(word);
        if pieces.len() != 1 {
            return Err(Error::Dataset(format!(
                "`{word}` is {} tokens; names, places and objects must be single tokens",
                pieces.len()
            )));
        }
        self.id(pieces[0])
            .ok_or_else(|| Error::Dataset(format!("`{word}` is not in the vocabulary")))
    }

    /// Inverse of [`Tokenizer::encode`] on rendered prompts.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.bos {
                continue;
            }
            let w = self.word(id).unwrap_or("<unk>");
            if !out.is_empty() && w != "," && w != "." {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub names: Vec<String>,
    pub places: Vec<String>,
    pub objects: Vec<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Lexicon {
            names: own(&DEFAULT_NAMES),
            places: own(&DEFAULT_PLACES),
            objects: own(&DEFAULT_OBJECTS),
        }
    }
}

impl Lexicon {
    /// Reads newline-delimited word lists; `None` keeps the default list.
    pub fn from_files(
        names: Option<&Path>,
        places: Option<&Path>,
        objects: Option<&Path>,
    ) -> Result<Lexicon> {
        let read = |p: &Path| -> Result<Vec<String>> {
            Ok(std::fs::read_to_string(p)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect())
        };
        let mut lex = Lexicon::default();
        if let Some(p) = names {
            lex.names = read(p)?;
        }
        if let Some(p) = places {
            lex.places = read(p)?;
        }
        if let Some(p) = objects {
            lex.objects = read(p)?;
        }
        Ok(lex)
    }

    pub fn with_name_count(mut self, n: usize) -> Result<Lexicon> {
        if n > self.names.len() {
            return Err(Error::Dataset(format!(
                "asked for {n} names, lexicon has {}",
                self.names.len()
            )));
        }
        self.names.truncate(n);
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    Then,
    Afterwards,
    When,
    Friends,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::Then,
        TemplateId::Afterwards,
        TemplateId::When,
        TemplateId::Friends,
    ];

    /// Templates whose name tokens sit at the same indices under the word
    /// tokenizer, so per-position results can be pooled across them.
    pub const SHARED_POSITIONS: [TemplateId; 3] = [
        TemplateId::Afterwards,
        TemplateId::When,
        TemplateId::Friends,
    ];

    pub fn pattern(self) -> &'static str {
        match self {
            TemplateId::Then => "Then, [NAME], [NAME] and [NAME] went to the [PLACE]. [NAME] and [NAME] gave a [OBJECT] to",
            TemplateId::Afterwards => {
                "Afterwards [NAME], [NAME] and [NAME] went to the [PLACE]. [NAME] and [NAME] gave a [OBJECT] to"
            }
            TemplateId::When => "When [NAME], [NAME] and [NAME] arrived at the [PLACE], [NAME] and [NAME] gave a [OBJECT] to",
            TemplateId::Friends => {
                "Friends [NAME], [NAME] and [NAME] went to the [PLACE]. [NAME] and [NAME] gave a [OBJECT] to"
            }
        }
    }

    /// Fills the slots in order.
    pub fn render(self, names: &[&str; 5], place: &str, object: &str) -> String {
        let mut out = self.pattern().to_string();
        for n in names {
            out = out.replacen("[NAME]", n, 1);
        }
        out.replace("[PLACE]", place).replace("[OBJECT]", object)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One corruption class as a pair of letter patterns: three first-clause
/// names, two second-clause names, then the answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub class: u8,
    pub clean: &'static str,
    pub corrupted: &'static str,
}

pub const CORRUPTIONS: [CorruptionSpec; 5] = [
    CorruptionSpec {
        class: 1,
        clean: "CAB AB C",
        corrupted: "DAB AB D",
    },
    CorruptionSpec {
        class: 2,
        clean: "ACB AB C",
        corrupted: "ADB AB D",
    },
    CorruptionSpec {
        class: 3,
        clean: "ABC AB C",
        corrupted: "ABD AB D",
    },
    CorruptionSpec {
        class: 4,
        clean: "ABC AB C",
        corrupted: "ABC AC B",
    },
    CorruptionSpec {
        class: 5,
        clean: "ABC AC B",
        corrupted: "ABC BC A",
    },
];

impl CorruptionSpec {
    pub fn get(class: u8) -> Result<CorruptionSpec> {
        CORRUPTIONS
            .iter()
            .find(|c| c.class == class)
            .copied()
            .ok_or_else(|| {
                Error::Dataset(format!(
                    "corruption class {class} does not exist (expected 1..=5)"
                ))
            })
    }
}

/// Splits a letter pattern into its five name letters and the answer.
pub fn parse_pattern(p: &str) -> ([char; 5], char) {
    let letters: Vec<char> = p.chars().filter(|c| c.is_ascii_alphabetic()).collect();
    assert_eq!(letters.len(), 6, "pattern `{p}` must have 6 letters");
    (
        [letters[0], letters[1], letters[2], letters[3], letters[4]],
        letters[5],
    )
}

/// The name of a valid prompt's first clause that is absent from the second.
pub fn answer_of(names: &[usize; 5]) -> Option<usize> {
    let s1 = &names[..3];
    let s2 = &names[3..];
    let distinct = s1[0] != s1[1] && s1[0] != s1[2] && s1[1] != s1[2];
    if !distinct || s2[0] == s2[1] || !s2.iter().all(|n| s1.contains(n)) {
        return None;
    }
    let pos = |n: usize| s1.iter().position(|&m| m == n).unwrap();
    if pos(s2[0]) > pos(s2[1]) {
        return None;
    }
    s1.iter().copied().find(|n| !s2.contains(n))
}

/// Token index → label (`n1`..`n5`, `out`, otherwise `pos{k}`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticPositions {
    labels: Vec<String>,
}

impl SemanticPositions {
    pub fn from_name_indices(len: usize, names: &[usize; 5]) -> SemanticPositions {
        let mut labels: Vec<String> = (0..len).map(|k| format!("pos{k}")).collect();
        for (i, &idx) in names.iter().enumerate() {
            labels[idx] = format!("n{}", i + 1);
        }
        labels[len - 1] = "out".to_string();
        SemanticPositions { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Index of name `k` in `1..=5`.
    pub fn name(&self, k: usize) -> usize {
        self.index(&format!("n{k}"))
            .expect("every prompt labels n1..n5")
    }

    pub fn out(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn as_map(&self) -> BTreeMap<String, usize> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect()
    }
}

impl Serialize for SemanticPositions {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.as_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SemanticPositions {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, usize>::deserialize(d)?;
        let mut labels = vec![String::new(); map.len()];
        for (label, idx) in map {
            if idx >= labels.len() || !labels[idx].is_empty() {
                return Err(serde::de::Error::custom(format!(
                    "bad position index {idx} for `{label}`"
                )));
            }
            labels[idx] = label;
        }
        Ok(SemanticPositions { labels })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub clean: Vec<usize>,
    pub corrupted: Vec<usize>,
    /// Correct answer of the clean prompt.
    pub answer: usize,
    /// Correct answer of the corrupted prompt.
    pub corrupted_answer: usize,
    /// Name tokens at n1..n5 in the clean prompt.
    pub names: [usize; 5],
    /// Four distinct names for relative probability, `answer` first.
    pub candidates: [usize; 4],
    pub positions: SemanticPositions,
    pub template: TemplateId,
    pub corruption: u8,
    pub clean_text: String,
    pub corrupted_text: String,
}

impl PromptPair {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// Label map of a pair.
pub fn semantic_positions(pair: &PromptPair) -> &SemanticPositions {
    &pair.positions
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub templates: Vec<TemplateId>,
    pub corruptions: Vec<u8>,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub lexicon: Lexicon,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            templates: TemplateId::ALL.to_vec(),
            corruptions: vec![1, 2, 3, 4, 5],
            count: 100,
            seed: 0,
            lexicon: Lexicon::default(),
        }
    }
}

/// Token indices (BOS included) of n1..n5 for `template`.
pub fn template_name_indices(template: TemplateId) -> [usize; 5] {
    let probe = ["#0", "#1", "#2", "#3", "#4"];
    let rendered = template.render(&probe, "[PLACE]", "[OBJECT]");
    let pieces = Tokenizer::pieces(&rendered);
    probe.map(|p| {
        1 + pieces
            .iter()
            .position(|x| *x == p)
            .expect("every template has five name slots")
    })
}

/// Draws `config.count` pairs. Template and corruption class are uniform
/// over the configured lists; names, place and object are uniform over the
/// lexicon with distinct names inside one pair.
pub fn generate_batch(config: &DatasetConfig, tok: &Tokenizer) -> Result<Vec<PromptPair>> {
    if config.templates.is_empty() {
        return Err(Error::Dataset("no templates selected".into()));
    }
    let classes: Vec<CorruptionSpec> = config
        .corruptions
        .iter()
        .map(|&c| CorruptionSpec::get(c))
        .collect::<Result<_>>()?;
    if classes.is_empty() {
        return Err(Error::Dataset("no corruption classes selected".into()));
    }
    let lex = &config.lexicon;
    if lex.names.len() < 4 {
        return Err(Error::Dataset(format!(
            "need at least 4 names, lexicon has {}",
            lex.names.len()
        )));
    }
    if lex.places.is_empty() || lex.objects.is_empty() {
        return Err(Error::Dataset(
            "lexicon needs at least one place and one object".into(),
        ));
    }
    let name_ids: Vec<usize> = lex
        .names
        .iter()
        .map(|n| tok.single_token(n))
        .collect::<Result<_>>()?;
    for w in lex.places.iter().chain(&lex.objects) {
        tok.single_token(w)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.count);
    for _ in 0..config.count {
        let template = *config.templates.choose(&mut rng).unwrap();
        let spec = *classes.choose(&mut rng).unwrap();
        let picks: Vec<usize> = rand::seq::index::sample(&mut rng, lex.names.len(), 4).into_vec();
        let place = &lex.places[rng.gen_range(0..lex.places.len())];
        let object = &lex.objects[rng.gen_range(0..lex.objects.len())];
        out.push(build_pair(
            tok, template, spec, &picks, &name_ids, lex, place, object,
        )?);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn build_pair(
    tok: &Tokenizer,
    template: TemplateId,
    spec: CorruptionSpec,
    picks: &[usize],
    name_ids: &[usize],
    lex: &Lexicon,
    place: &str,
    object: &str,
) -> Result<PromptPair> {
    let letter = |c: char| (c as u8 - b'A') as usize;
    let (clean_letters, clean_ans) = parse_pattern(spec.clean);
    let (corr_letters, corr_ans) = parse_pattern(spec.corrupted);
    let word = |c: char| lex.names[picks[letter(c)]].as_str();
    let render = |ls: &[char; 5]| {
        let ns = [
            word(ls[0]),
            word(ls[1]),
            word(ls[2]),
            word(ls[3]),
            word(ls[4]),
        ];
        template.render(&ns, place, object)
    };
    let clean_text = render(&clean_letters);
    let corrupted_text = render(&corr_letters);
    let clean = tok.encode(&clean_text)?;
    let corrupted = tok.encode(&corrupted_text)?;
    let idx = template_name_indices(template);
    let names = idx.map(|i| clean[i]);
    let corr_names = idx.map(|i| corrupted[i]);
    let answer = name_ids[picks[letter(clean_ans)]];
    let corrupted_answer = name_ids[picks[letter(corr_ans)]];
    debug_assert_eq!(answer_of(&names), Some(answer));
    debug_assert_eq!(answer_of(&corr_names), Some(corrupted_answer));

    let mut candidates = vec![answer, corrupted_answer];
    for n in names
        .iter()
        .chain(&corr_names)
        .chain(picks.iter().map(|&p| &name_ids[p]))
    {
        if !candidates.contains(n) {
            candidates.push(*n);
        }
    }
    Ok(PromptPair {
        positions: SemanticPositions::from_name_indices(clean.len(), &idx),
        clean,
        corrupted,
        answer,
        corrupted_answer,
        names,
        candidates: [candidates[0], candidates[1], candidates[2], candidates[3]],
        template,
        corruption: spec.class,
        clean_text,
        corrupted_text,
    })
}

pub fn to_jsonl(pairs: &[PromptPair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(pairs: &[PromptPair], path: &Path) -> Result<()> {
    crate::io::write_atomic_str(path, &to_jsonl(pairs)?)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PromptPair>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Checks that all pairs share one length, as per-position analyses need.
pub fn common_length(pairs: &[PromptPair]) -> Result<usize> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Dataset("empty prompt set".into()))?
        .len();
    if let Some(p) = pairs.iter().find(|p| p.len() != first) {
        return Err(Error::Dataset(format!(
            "prompts have different lengths ({first} and {}); restrict to templates that share positions",
            p.len()
        )));
    }
    Ok(first)
}
