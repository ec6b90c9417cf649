//! Dialogue data model, JSONL ingestion and seed/validation splitting.

mod toy;
mod vocab;

pub use toy::{make_toy_corpus, toy_topics};
pub use vocab::{
    decode_tokens, encode_conversation, encode_turns, tokenize, Special, TokenSequence, Vocab,
    NUM_SPECIALS,
};

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("conversation {id}: speakers do not alternate at turn {turn}")]
    NotAlternating { id: String, turn: usize },
    #[error("conversation {id}: turn {turn} has empty text")]
    EmptyTurn { id: String, turn: usize },
    #[error("conversation {id}: needs at least 2 turns, found {found}")]
    TooFewTurns { id: String, found: usize },
    #[error("duplicate conversation id {0}")]
    DuplicateId(String),
    #[error("fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("corpus too small: need at least {needed} conversations, have {have}")]
    TooSmall { needed: usize, have: usize },
    #[error("vocabulary max size {0} cannot hold the 7 special tokens plus one word")]
    VocabTooSmall(usize),
    #[error("first turn alone needs {needed} ids but max_len is {max_len}")]
    FirstTurnTooLong { needed: usize, max_len: usize },
    #[error("token sequence must begin with BOS")]
    MissingBos,
    #[error("token sequence contains no complete turn")]
    NoCompleteTurn,
    #[error("vocab file: {0}")]
    VocabFile(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Self {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::A => "A",
            Speaker::B => "B",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Self {
            speaker,
            text: text.into(),
        }
    }
}

/// Ordered, speaker-alternating utterances. Synthetic conversations carry the
/// id of the seed conversation whose opening turns prompted them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_prompt_id: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

impl Conversation {
    pub fn new(id: impl Into<String>, turns: Vec<Turn>) -> Self {
        Self {
            id: id.into(),
            turns,
            source_prompt_id: None,
            synthetic: false,
        }
    }

    /// Swaps speaker labels when needed so the first turn belongs to A, then
    /// checks the conversation invariants.
    pub fn normalized(mut self) -> Result<Self> {
        if self.turns.first().map(|t| t.speaker) == Some(Speaker::B) {
            for t in &mut self.turns {
                t.speaker = t.speaker.other();
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.len() < 2 {
            return Err(CorpusError::TooFewTurns {
                id: self.id.clone(),
                found: self.turns.len(),
            });
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.text.trim().is_empty() {
                return Err(CorpusError::EmptyTurn {
                    id: self.id.clone(),
                    turn: i,
                });
            }
            let expected = if i % 2 == 0 { Speaker::A } else { Speaker::B };
            if t.speaker != expected {
                return Err(CorpusError::NotAlternating {
                    id: self.id.clone(),
                    turn: i,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub conversations: Vec<Conversation>,
}

impl Corpus {
    /// Builds a corpus after checking id uniqueness and per-conversation
    /// invariants.
    pub fn new(name: impl Into<String>, conversations: Vec<Conversation>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &conversations {
            c.validate()?;
            if !seen.insert(c.id.as_str()) {
                return Err(CorpusError::DuplicateId(c.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            conversations,
        })
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    /// Concatenation; ids must stay unique across both inputs.
    pub fn concat(name: impl Into<String>, parts: &[&Corpus]) -> Result<Self> {
        let convs = parts
            .iter()
            .flat_map(|c| c.conversations.iter().cloned())
            .collect();
        Self::new(name, convs)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let io_err = |source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        for c in &self.conversations {
            let line = serde_json::to_string(c).expect("conversation serializes");
            out.write_all(line.as_bytes()).map_err(io_err)?;
            out.write_all(b"\n").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

#[derive(Deserialize)]
struct RawConversation {
    id: String,
    turns: Vec<Turn>,
    #[serde(default)]
    source_prompt_id: Option<String>,
    #[serde(default)]
    synthetic: bool,
}

/// Parses dialogue JSONL. Blank lines are skipped; unknown fields are ignored.
pub fn parse_jsonl(name: &str, reader: impl BufRead) -> Result<Corpus> {
    let mut convs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: name.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawConversation =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?;
        let conv = Conversation {
            id: raw.id,
            turns: raw.turns,
            source_prompt_id: raw.source_prompt_id,
            synthetic: raw.synthetic,
        }
        .normalized()?;
        if !seen.insert(conv.id.clone()) {
            return Err(CorpusError::DuplicateId(conv.id));
        }
        convs.push(conv);
    }
    Ok(Corpus {
        name: name.to_string(),
        conversations: convs,
    })
}

pub fn load_jsonl(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_jsonl(&name, BufReader::new(file))
}

fn round_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Partitions by a seeded permutation: the first `k` shuffled indices go to
/// the first output. Both outputs keep the input order.
fn partition(corpus: &Corpus, k: usize, rng: &mut RngStream, names: (&str, &str)) -> (Corpus, Corpus) {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    rng.shuffle(&mut idx);
    let mut chosen = vec![false; corpus.len()];
    for &i in &idx[..k] {
        chosen[i] = true;
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (c, &pick) in corpus.conversations.iter().zip(&chosen) {
        if pick {
            a.push(c.clone());
        } else {
            b.push(c.clone());
        }
    }
    (
        Corpus {
            name: names.0.to_string(),
            conversations: a,
        },
        Corpus {
            name: names.1.to_string(),
            conversations: b,
        },
    )
}

/// Samples `round(fraction * |corpus|)` conversations (at least one) without
/// replacement.
pub fn sample_seed(corpus: &Corpus, fraction: f64, rng_seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::BadFraction(fraction));
    }
    if corpus.is_empty() {
        return Err(CorpusError::TooSmall { needed: 1, have: 0 });
    }
    let k = round_count(fraction, corpus.len()).clamp(1, corpus.len());
    let mut rng = RngStream::new(rng_seed).split_named("sample_seed");
    Ok(partition(corpus, k, &mut rng, ("seed", "rest")))
}

/// Splits into train/validation; validation gets at least one conversation
/// and train keeps at least one.
pub fn split_train_val(corpus: &Corpus, val_fraction: f64, rng_seed: u64) -> Result<(Corpus, Corpus)> {
    if corpus.len() < 2 {
        return Err(CorpusError::TooSmall {
            needed: 2,
            have: corpus.len(),
        });
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(CorpusError::BadFraction(val_fraction));
    }
    let k = round_count(val_fraction, corpus.len()).clamp(1, corpus.len() - 1);
    let mut rng = RngStream::new(rng_seed).split_named("split_train_val");
    let (val, train) = partition(corpus, k, &mut rng, ("val", "train"));
    Ok((train, val))
}

/// The first three turns of a seed conversation plus its original length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub source_conversation_id: String,
    pub turns: Vec<Turn>,
    pub target_turn_count: usize,
}

pub const PROMPT_TURNS: usize = 3;

/// One prompt per conversation with at least four turns; also returns how
/// many conversations were skipped.
pub fn extract_prompts(corpus: &Corpus) -> (Vec<Prompt>, usize) {
    let mut skipped = 0;
    let prompts = corpus
        .conversations
        .iter()
        .filter_map(|c| {
            if c.turns.len() <= PROMPT_TURNS {
                skipped += 1;
                return None;
            }
            Some(Prompt {
                source_conversation_id: c.id.clone(),
                turns: c.turns[..PROMPT_TURNS].to_vec(),
                target_turn_count: c.turns.len(),
            })
        })
        .collect();
    (prompts, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(id: &str, texts: &[&str]) -> Conversation {
        let turns = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Turn::new(if i % 2 == 0 { Speaker::A } else { Speaker::B }, *t))
            .collect();
        Conversation::new(id, turns)
    }

    fn corpus_of(n: usize) -> Corpus {
        let convs = (0..n).map(|i| conv(&format!("c{i}"), &["hi", "yo"])).collect();
        Corpus::new("t", convs).unwrap()
    }

    #[test]
    fn parses_two_conversations() {
        let text = r#"{"id":"a","turns":[{"speaker":"A","text":"hi"},{"speaker":"B","text":"yo"}]}
{"id":"b","turns":[{"speaker":"A","text":"x"},{"speaker":"B","text":"y"}],"knowledge":"ignored"}
"#;
        let c = parse_jsonl("t", text.as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn rejects_non_alternating() {
        let text = r#"{"id":"bad","turns":[{"speaker":"A","text":"hi"},{"speaker":"A","text":"yo"}]}"#;
        let err = parse_jsonl("t", text.as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::NotAlternating { ref id, .. } if id == "bad"));
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(parse_jsonl("t", "".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn reports_malformed_line_number() {
        let text = "{\"id\":\"a\",\"turns\":[{\"speaker\":\"A\",\"text\":\"hi\"},{\"speaker\":\"B\",\"text\":\"yo\"}]}\n{oops\n";
        match parse_jsonl("t", text.as_bytes()) {
            Err(CorpusError::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_text_and_duplicates() {
        let empty = r#"{"id":"e","turns":[{"speaker":"A","text":"  "},{"speaker":"B","text":"yo"}]}"#;
        assert!(matches!(
            parse_jsonl("t", empty.as_bytes()),
            Err(CorpusError::EmptyTurn { .. })
        ));
        let line = r#"{"id":"d","turns":[{"speaker":"A","text":"a"},{"speaker":"B","text":"b"}]}"#;
        let dup = format!("{line}\n{line}\n");
        assert!(matches!(
            parse_jsonl("t", dup.as_bytes()),
            Err(CorpusError::DuplicateId(_))
        ));
    }

    #[test]
    fn normalizes_leading_b() {
        let text = r#"{"id":"n","turns":[{"speaker":"B","text":"hi"},{"speaker":"A","text":"yo"}]}"#;
        let c = parse_jsonl("t", text.as_bytes()).unwrap();
        assert_eq!(c.conversations[0].turns[0].speaker, Speaker::A);
        assert_eq!(c.conversations[0].turns[1].speaker, Speaker::B);
    }

    #[test]
    fn seed_sampling_sizes() {
        let c = corpus_of(100);
        let (seed, rest) = sample_seed(&c, 0.1, 4).unwrap();
        assert_eq!((seed.len(), rest.len()), (10, 90));
        let (seed, rest) = sample_seed(&c, 1.0, 4).unwrap();
        assert_eq!((seed.len(), rest.len()), (100, 0));
        let (tiny, _) = sample_seed(&corpus_of(3), 0.01, 4).unwrap();
        assert_eq!(tiny.len(), 1);
    }

    #[test]
    fn seed_sampling_is_deterministic_disjoint_cover() {
        let c = corpus_of(50);
        let (a, ra) = sample_seed(&c, 0.3, 11).unwrap();
        let (b, _) = sample_seed(&c, 0.3, 11).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<_> = a
            .conversations
            .iter()
            .chain(&ra.conversations)
            .map(|c| c.id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 50);
    }

    #[test]
    fn seed_fraction_bounds() {
        let c = corpus_of(10);
        assert!(sample_seed(&c, 0.0, 1).is_err());
        assert!(sample_seed(&c, 1.5, 1).is_err());
    }

    #[test]
    fn train_val_sizes() {
        let (t, v) = split_train_val(&corpus_of(10), 0.2, 1).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        let (t, v) = split_train_val(&corpus_of(2), 0.5, 1).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        let (_, v) = split_train_val(&corpus_of(10), 0.0, 1).unwrap();
        assert_eq!(v.len(), 1);
        assert!(split_train_val(&corpus_of(1), 0.2, 1).is_err());
    }

    #[test]
    fn prompts_skip_short_conversations() {
        let mut convs: Vec<_> = (0..8)
            .map(|i| conv(&format!("l{i}"), &["a", "b", "c", "d", "e"]))
            .collect();
        convs.push(conv("s1", &["a", "b", "c"]));
        convs.push(conv("s2", &["a", "b", "c"]));
        let corpus = Corpus::new("t", convs).unwrap();
        let (prompts, skipped) = extract_prompts(&corpus);
        assert_eq!((prompts.len(), skipped), (8, 2));
        assert_eq!(prompts[0].turns.len(), 3);
        assert_eq!(prompts[0].turns[2].text, "c");
        assert_eq!(prompts[0].target_turn_count, 5);
    }
}
