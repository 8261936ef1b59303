//! Word-level vocabulary and the two-segment input `[CLS] t [SEP] w [SEP]`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

/// Words of a slot-type name, e.g. `playlist_owner` → `[playlist, owner]`.
pub fn slot_type_words(slot_type: &str) -> Vec<String> {
    slot_type
        .split('_')
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Vocab {
    fn with_reserved() -> Self {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for tok in [PAD, UNK, CLS, SEP] {
            vocab.insert(tok);
        }
        vocab
    }

    fn insert(&mut self, token: &str) {
        if !self.ids.contains_key(token) {
            self.ids.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids
            .get(token)
            .or_else(|| self.ids.get(&token.to_lowercase()))
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < 4 || tokens[..4] != [PAD, UNK, CLS, SEP] {
            return Err(Error::Data("vocab must start with [PAD] [UNK] [CLS] [SEP]".into()));
        }
        let mut vocab = Vocab::with_reserved();
        for tok in &tokens[4..] {
            if vocab.ids.contains_key(tok.as_str()) {
                return Err(Error::Data(format!("duplicate vocab token {tok:?}")));
            }
            vocab.insert(tok);
        }
        Ok(vocab)
    }

    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(id, tok)| format!("{tok}\t{id}\n"))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text())
            .map_err(|e| Error::io(format!("writing vocab {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading vocab {}", path.display()), e))?;
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no + 1,
                message,
            };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad("expected '<token>\\t<id>'".into()))?;
            let id: usize = id.parse().map_err(|_| bad(format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(bad(format!("ids must be dense and sorted, got {id}")));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }
}

/// Reserved tokens, then corpus words with frequency ≥ `min_freq` (by
/// descending frequency, then lexicographically), then any slot-type name
/// words not yet present (lexicographically).
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Vocab {
    build_vocab_for(corpus, min_freq, &corpus.all_slot_types())
}

/// As [`build_vocab`], with the slot-type names given explicitly, e.g. to
/// include the target domain's types when building from the training split.
pub fn build_vocab_for(corpus: &Corpus, min_freq: usize, slot_types: &BTreeSet<String>) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for u in corpus.utterances() {
        for w in &u.words {
            *counts.entry(w.to_lowercase()).or_default() += 1;
        }
    }
    let mut frequent: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_freq.max(1))
        .collect();
    frequent.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut vocab = Vocab::with_reserved();
    for (word, _) in &frequent {
        vocab.insert(word);
    }
    let slot_words: BTreeSet<String> = slot_types
        .iter()
        .flat_map(|t| slot_type_words(t))
        .collect();
    for word in &slot_words {
        vocab.insert(word);
    }
    vocab
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedQuery {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// Index into `token_ids` of each utterance word.
    pub utterance_positions: Vec<usize>,
}

impl EncodedQuery {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub fn encode_query(
    vocab: &Vocab,
    slot_type: &str,
    words: &[String],
    max_len: usize,
) -> Result<EncodedQuery> {
    if words.is_empty() {
        return Err(Error::Data("cannot encode an empty utterance".into()));
    }
    let type_words = slot_type_words(slot_type);
    let total = type_words.len() + words.len() + 3;
    if total > max_len {
        return Err(Error::Data(format!(
            "encoded length {total} exceeds max_len {max_len}"
        )));
    }
    let mut token_ids = Vec::with_capacity(total);
    let mut segment_ids = Vec::with_capacity(total);
    token_ids.push(CLS_ID);
    token_ids.extend(type_words.iter().map(|w| vocab.id(w)));
    token_ids.push(SEP_ID);
    segment_ids.resize(token_ids.len(), 0);
    let first = token_ids.len();
    token_ids.extend(words.iter().map(|w| vocab.id(w)));
    token_ids.push(SEP_ID);
    segment_ids.resize(token_ids.len(), 1);
    Ok(EncodedQuery {
        token_ids,
        segment_ids,
        utterance_positions: (first..first + words.len()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SlotSpan, Utterance};
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn utterance(text: &str, spans: Vec<SlotSpan>) -> Utterance {
        Utterance {
            domain: "music".into(),
            words: words(text),
            spans,
        }
    }

    #[test]
    fn vocab_counts() {
        let corpus = Corpus::from_utterances(vec![utterance("play jazz", vec![])]);
        assert_eq!(build_vocab(&corpus, 1).len(), 6);
        assert_eq!(build_vocab(&corpus, 2).len(), 4);

        let corpus = Corpus::from_utterances(vec![utterance(
            "play jazz",
            vec![SlotSpan::new("music_genre", 1, 2)],
        )]);
        let vocab = build_vocab(&corpus, 2);
        assert_eq!(vocab.len(), 6);
        assert_eq!(vocab.id("genre"), 4);
        assert_eq!(vocab.id("music"), 5);
        assert_eq!(vocab, build_vocab(&corpus, 2));
    }

    #[test]
    fn frequency_then_lexicographic() {
        let corpus = Corpus::from_utterances(vec![
            utterance("b a c", vec![]),
            utterance("c", vec![]),
        ]);
        let vocab = build_vocab(&corpus, 1);
        assert_eq!(vocab.token(4), Some("c"));
        assert_eq!(vocab.token(5), Some("a"));
        assert_eq!(vocab.token(6), Some("b"));
    }

    fn fixed_vocab() -> Vocab {
        Vocab::from_tokens(
            [PAD, UNK, CLS, SEP, "service", "play", "music", "playlist", "owner"]
                .iter()
                .map(|s| s.to_string()),
        )
        .unwrap()
    }

    #[test]
    fn encode_layout() {
        let q = encode_query(&fixed_vocab(), "service", &words("play music"), 64).unwrap();
        assert_eq!(q.token_ids, vec![2, 4, 3, 5, 6, 3]);
        assert_eq!(q.segment_ids, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(q.utterance_positions, vec![3, 4]);
    }

    #[test]
    fn encode_splits_slot_type_and_maps_unknown() {
        let q = encode_query(&fixed_vocab(), "playlist_owner", &words("play zebra"), 64).unwrap();
        assert_eq!(q.token_ids, vec![2, 7, 8, 3, 5, 1, 3]);
        assert_eq!(q.utterance_positions, vec![4, 5]);
        assert!(encode_query(&fixed_vocab(), "service", &words("play music"), 5).is_err());
        assert!(encode_query(&fixed_vocab(), "service", &[], 64).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let vocab = fixed_vocab();
        vocab.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), vocab);
    }

    proptest! {
        #[test]
        fn segment_counts(type_parts in 1usize..4, n in 1usize..20) {
            let slot_type = vec!["x"; type_parts].join("_");
            let ws: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
            let q = encode_query(&fixed_vocab(), &slot_type, &ws, 64).unwrap();
            prop_assert_eq!(q.segment_ids.iter().filter(|&&s| s == 0).count(), 2 + type_parts);
            prop_assert_eq!(q.segment_ids.iter().filter(|&&s| s == 1).count(), n + 1);
            prop_assert_eq!(q.utterance_positions.len(), n);
            prop_assert_eq!(q.token_ids[0], CLS_ID);
            prop_assert_eq!(q.token_ids.iter().filter(|&&t| t == SEP_ID).count(), 2);
            prop_assert!(q.utterance_positions.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
