use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conversation, Corpus, CorpusError, Result, Speaker, Turn};

pub type TokenSequence = Vec<u32>;

/// Reserved ids 0..7.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Special {
    Pad = 0,
    Bos = 1,
    Eos = 2,
    Sep = 3,
    SpkA = 4,
    SpkB = 5,
    Unk = 6,
}

pub const NUM_SPECIALS: usize = 7;

impl Special {
    pub const ALL: [Special; NUM_SPECIALS] = [
        Special::Pad,
        Special::Bos,
        Special::Eos,
        Special::Sep,
        Special::SpkA,
        Special::SpkB,
        Special::Unk,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    fn surface(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Bos => "<bos>",
            Special::Eos => "<eos>",
            Special::Sep => "<sep>",
            Special::SpkA => "<spk_a>",
            Special::SpkB => "<spk_b>",
            Special::Unk => "<unk>",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Special::Pad => "PAD",
            Special::Bos => "BOS",
            Special::Eos => "EOS",
            Special::Sep => "SEP",
            Special::SpkA => "SPK_A",
            Special::SpkB => "SPK_B",
            Special::Unk => "UNK",
        }
    }

    pub fn speaker(s: Speaker) -> Special {
        match s {
            Speaker::A => Special::SpkA,
            Speaker::B => Special::SpkB,
        }
    }
}

/// Lowercases, splits on whitespace and detaches every punctuation character
/// as its own token. Special-token surfaces (as written by decoding, e.g.
/// `<unk>`) stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if is_special_surface(word) {
            out.push(word.to_string());
            continue;
        }
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_lowercase().collect());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    specials: BTreeMap<String, u32>,
}

impl Vocab {
    /// Ranks words by descending frequency, ties broken lexicographically.
    /// Words seen fewer than `min_freq` times are left out and encode as UNK.
    pub fn build(corpus: &Corpus, max_size: usize, min_freq: usize) -> Result<Self> {
        if max_size < NUM_SPECIALS + 1 {
            return Err(CorpusError::VocabTooSmall(max_size));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in &corpus.conversations {
            for t in &c.turns {
                for tok in tokenize(&t.text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, n)| *n >= min_freq.max(1) && !is_special_surface(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_SPECIALS);
        let tokens = Special::ALL
            .iter()
            .map(|s| s.surface().to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Special::Unk.id())
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_word(&self, id: u32) -> bool {
        id == Special::Unk.id() || (id as usize >= NUM_SPECIALS && (id as usize) < self.len())
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode_text(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(Special::Unk.surface()))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            specials: Special::ALL
                .iter()
                .map(|s| (s.key().to_string(), s.id()))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| CorpusError::VocabFile(e.to_string()))?;
        for s in Special::ALL {
            let ok = file.specials.get(s.key()) == Some(&s.id())
                && file.tokens.get(s.id() as usize).map(String::as_str) == Some(s.surface());
            if !ok {
                return Err(CorpusError::VocabFile(format!("special {} misplaced", s.key())));
            }
        }
        let vocab = Self::from_tokens(file.tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(CorpusError::VocabFile("duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn is_special_surface(w: &str) -> bool {
    Special::ALL.iter().any(|s| s.surface() == w)
}

/// `SPK tok.. SEP` for each turn, without BOS/EOS.
pub fn encode_turns(turns: &[Turn], vocab: &Vocab) -> Vec<u32> {
    let mut out = Vec::new();
    for t in turns {
        out.push(Special::speaker(t.speaker).id());
        out.extend(vocab.encode_text(&t.text));
        out.push(Special::Sep.id());
    }
    out
}

/// `BOS (SPK tok.. SEP)+ EOS`, dropping whole trailing turns to fit `max_len`.
pub fn encode_conversation(conv: &Conversation, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    let mut out = vec![Special::Bos.id()];
    for (i, t) in conv.turns.iter().enumerate() {
        let body = encode_turns(std::slice::from_ref(t), vocab);
        if out.len() + body.len() + 1 > max_len {
            if i == 0 {
                return Err(CorpusError::FirstTurnTooLong {
                    needed: body.len() + 2,
                    max_len,
                });
            }
            break;
        }
        out.extend(body);
    }
    out.push(Special::Eos.id());
    Ok(out)
}

/// Inverse of [`encode_conversation`]. Parsing stops quietly at the first
/// malformed position; whatever complete turns precede it are returned.
pub fn decode_tokens(tokens: &[u32], vocab: &Vocab) -> Result<Conversation> {
    if tokens.first() != Some(&Special::Bos.id()) {
        return Err(CorpusError::MissingBos);
    }
    let mut turns = Vec::new();
    let mut pos = 1;
    let mut expected = Speaker::A;
    'turns: while pos < tokens.len() {
        if tokens[pos] != Special::speaker(expected).id() {
            break;
        }
        let start = pos + 1;
        let mut end = start;
        loop {
            match tokens.get(end) {
                None => break 'turns,
                Some(&id) if id == Special::Sep.id() => break,
                Some(&id) if vocab.is_word(id) => end += 1,
                Some(_) => break 'turns,
            }
        }
        if end == start {
            break;
        }
        turns.push(Turn::new(expected, vocab.decode_text(&tokens[start..end])));
        expected = expected.other();
        pos = end + 1;
    }
    if turns.is_empty() {
        return Err(CorpusError::NoCompleteTurn);
    }
    Ok(Conversation::new("decoded", turns))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(texts: &[&str]) -> Conversation {
        let turns = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Turn::new(if i % 2 == 0 { Speaker::A } else { Speaker::B }, *t))
            .collect();
        Conversation::new("c", turns)
    }

    fn corpus(convs: Vec<Conversation>) -> Corpus {
        let convs = convs
            .into_iter()
            .enumerate()
            .map(|(i, mut c)| {
                c.id = format!("c{i}");
                c
            })
            .collect();
        Corpus::new("t", convs).unwrap()
    }

    #[test]
    fn unk_surface_survives_decode_and_reencode() {
        let v = Vocab::build(&corpus(vec![conv(&["hi there", "yo"])]), 50, 1).unwrap();
        let ids = vec![v.id("hi"), Special::Unk.id(), v.id("yo")];
        assert_eq!(v.encode_text(&v.decode_text(&ids)), ids);
    }

    #[test]
    fn tokenizer_detaches_punctuation() {
        assert_eq!(tokenize("Hello, world"), vec!["hello", ",", "world"]);
        assert_eq!(tokenize("  don't!  "), vec!["don", "'", "t", "!"]);
    }

    #[test]
    fn single_turn_vocab() {
        let v = Vocab::build(&corpus(vec![conv(&["Hello, world", "hello"])]), 100, 1).unwrap();
        assert_eq!(v.len(), NUM_SPECIALS + 3);
        // hello occurs twice so ranks first; then "," < "world"
        assert_eq!(&v.tokens()[NUM_SPECIALS..], &["hello", ",", "world"]);
        for s in Special::ALL {
            assert_eq!(v.id(s.surface()), s.id());
        }
    }

    #[test]
    fn min_freq_drops_rare_words() {
        let v = Vocab::build(&corpus(vec![conv(&["a b", "c d"])]), 100, 2).unwrap();
        assert_eq!(v.len(), NUM_SPECIALS);
        assert!(v.encode_text("a b c").iter().all(|&i| i == Special::Unk.id()));
    }

    #[test]
    fn max_size_limits() {
        let c = corpus(vec![conv(&["a b c d e", "f g"])]);
        assert!(Vocab::build(&c, 7, 1).is_err());
        assert_eq!(Vocab::build(&c, 9, 1).unwrap().len(), 9);
    }

    #[test]
    fn vocab_ignores_conversation_order() {
        let a = conv(&["the cat sat", "on a mat"]);
        let b = conv(&["a dog ran", "the end"]);
        let v1 = Vocab::build(&corpus(vec![a.clone(), b.clone()]), 50, 1).unwrap();
        let v2 = Vocab::build(&corpus(vec![b, a]), 50, 1).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = Vocab::build(&corpus(vec![conv(&["x y", "z"])]), 50, 1).unwrap();
        assert_eq!(Vocab::from_json(&v.to_json()).unwrap(), v);
        assert!(Vocab::from_json(r#"{"tokens":["a"],"specials":{}}"#).is_err());
    }

    #[test]
    fn two_turn_layout() {
        let c = conv(&["hi", "yo"]);
        let v = Vocab::build(&corpus(vec![c.clone()]), 50, 1).unwrap();
        let ids = encode_conversation(&c, &v, 64).unwrap();
        let (hi, yo) = (v.id("hi"), v.id("yo"));
        assert_eq!(ids, vec![1, 4, hi, 3, 5, yo, 3, 2]);
        let back = decode_tokens(&ids, &v).unwrap();
        assert_eq!(back.turns, c.turns);
    }

    #[test]
    fn truncation_keeps_whole_turns() {
        // turns of 5, 6 and 7 words: BOS + 7 + 8 + 9 + EOS = 26 ids
        let c = conv(&["a b c d e", "f g h i j k", "l m n o p q r"]);
        let v = Vocab::build(&corpus(vec![c.clone()]), 50, 1).unwrap();
        assert_eq!(encode_conversation(&c, &v, 26).unwrap().len(), 26);
        // 20 fits BOS + 7 + 8 + EOS = 17 but not the third turn
        let ids = encode_conversation(&c, &v, 20).unwrap();
        assert_eq!(ids.len(), 17);
        assert_eq!(*ids.last().unwrap(), Special::Eos.id());
        assert_eq!(decode_tokens(&ids, &v).unwrap().turns, c.turns[..2].to_vec());
        assert!(matches!(
            encode_conversation(&c, &v, 8),
            Err(CorpusError::FirstTurnTooLong { .. })
        ));
    }

    #[test]
    fn decode_tolerates_missing_eos() {
        let c = conv(&["hi there", "yo"]);
        let v = Vocab::build(&corpus(vec![c.clone()]), 50, 1).unwrap();
        let mut ids = encode_conversation(&c, &v, 64).unwrap();
        ids.pop();
        assert_eq!(decode_tokens(&ids, &v).unwrap().turns, c.turns);
        // a dangling partial turn is dropped
        ids.extend([Special::SpkA.id(), v.id("hi")]);
        assert_eq!(decode_tokens(&ids, &v).unwrap().turns, c.turns);
    }

    #[test]
    fn decode_degenerate() {
        let v = Vocab::build(&corpus(vec![conv(&["a", "b"])]), 50, 1).unwrap();
        assert!(matches!(decode_tokens(&[1, 2], &v), Err(CorpusError::NoCompleteTurn)));
        assert!(matches!(decode_tokens(&[4, 7, 3], &v), Err(CorpusError::MissingBos)));
    }
}
