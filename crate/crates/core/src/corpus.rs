//! Utterances, slot spans, the block-per-utterance corpus format and the
//! leave-one-domain-out split protocol.
//!
//! A corpus file is a sequence of blocks separated by one blank line:
//!
//! ```text
//! # domain=music
//! play	O
//! jazz	B-genre
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tag of one word in a slot-type-conditioned query. The order `O < B < I`
/// is also the label index order used by the CRF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    O = 0,
    B = 1,
    I = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::O, Label::B, Label::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Label {
        Label::ALL[index]
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Label::O => "O",
            Label::B => "B",
            Label::I => "I",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotSpan {
    pub slot_type: String,
    /// Inclusive word index.
    pub start: usize,
    /// Exclusive word index.
    pub end: usize,
}

impl SlotSpan {
    pub fn new(slot_type: impl Into<String>, start: usize, end: usize) -> Self {
        SlotSpan {
            slot_type: slot_type.into(),
            start,
            end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub domain: String,
    pub words: Vec<String>,
    pub spans: Vec<SlotSpan>,
}

impl Utterance {
    /// Checks word/span invariants: nonempty, in-bounds, non-overlapping.
    pub fn validate(&self) -> Result<()> {
        if self.words.is_empty() {
            return Err(Error::Data(format!(
                "empty utterance in domain {}",
                self.domain
            )));
        }
        let mut sorted: Vec<&SlotSpan> = self.spans.iter().collect();
        sorted.sort_by_key(|s| (s.start, s.end));
        let mut last_end = 0;
        for span in sorted {
            if span.start >= span.end || span.end > self.words.len() {
                return Err(Error::Data(format!(
                    "span {}[{}, {}) out of bounds for {} words",
                    span.slot_type,
                    span.start,
                    span.end,
                    self.words.len()
                )));
            }
            if span.start < last_end {
                return Err(Error::Data(format!(
                    "overlapping span {}[{}, {})",
                    span.slot_type, span.start, span.end
                )));
            }
            last_end = span.end;
        }
        Ok(())
    }

    pub fn span_text(&self, span: &SlotSpan) -> Vec<String> {
        self.words[span.start..span.end].to_vec()
    }

    /// Full-utterance BIO tags such as `B-genre`, as written in corpus files.
    pub fn tags(&self) -> Vec<String> {
        let mut tags = vec!["O".to_string(); self.words.len()];
        for span in &self.spans {
            tags[span.start] = format!("B-{}", span.slot_type);
            for tag in &mut tags[span.start + 1..span.end] {
                *tag = format!("I-{}", span.slot_type);
            }
        }
        tags
    }
}

/// One (slot type, utterance) query with its BIO labels for that type only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryInstance {
    pub slot_type: String,
    pub utterance: Utterance,
    pub labels: Vec<Label>,
}

impl QueryInstance {
    pub fn has_target_span(&self) -> bool {
        self.labels.iter().any(|&l| l == Label::B)
    }
}

/// BIO labels marking only the spans of `slot_type`.
pub fn labels_for(utterance: &Utterance, slot_type: &str) -> Vec<Label> {
    let mut labels = vec![Label::O; utterance.words.len()];
    for span in utterance.spans.iter().filter(|s| s.slot_type == slot_type) {
        labels[span.start] = Label::B;
        for label in &mut labels[span.start + 1..span.end] {
            *label = Label::I;
        }
    }
    labels
}

/// One query per slot type, in sorted slot-type order.
pub fn expand_queries(utterance: &Utterance, slot_types: &BTreeSet<String>) -> Vec<QueryInstance> {
    slot_types
        .iter()
        .map(|slot_type| QueryInstance {
            slot_type: slot_type.clone(),
            utterance: utterance.clone(),
            labels: labels_for(utterance, slot_type),
        })
        .collect()
}

/// Entity phrases per slot type, the sampling pool for synthetic samples.
pub type Lexicon = BTreeMap<String, BTreeSet<Vec<String>>>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    samples: BTreeMap<String, Vec<Utterance>>,
    slot_types: BTreeMap<String, BTreeSet<String>>,
    lexicon: Lexicon,
}

impl Corpus {
    pub fn from_utterances(utterances: impl IntoIterator<Item = Utterance>) -> Self {
        let mut corpus = Corpus::default();
        for utterance in utterances {
            corpus.push(utterance);
        }
        corpus
    }

    fn push(&mut self, utterance: Utterance) {
        let types = self.slot_types.entry(utterance.domain.clone()).or_default();
        for span in &utterance.spans {
            types.insert(span.slot_type.clone());
            self.lexicon
                .entry(span.slot_type.clone())
                .or_default()
                .insert(utterance.span_text(span));
        }
        self.samples
            .entry(utterance.domain.clone())
            .or_default()
            .push(utterance);
    }

    pub fn is_empty(&self) -> bool {
        self.samples.values().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.samples.keys().map(String::as_str)
    }

    pub fn domain_samples(&self, domain: &str) -> &[Utterance] {
        self.samples.get(domain).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All utterances, grouped by sorted domain name.
    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.samples.values().flatten()
    }

    /// Domain → slot types observed in that domain's spans.
    pub fn domain_slot_types(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.slot_types
    }

    pub fn slot_types_of(&self, domain: &str) -> BTreeSet<String> {
        self.slot_types.get(domain).cloned().unwrap_or_default()
    }

    /// Every slot type in the corpus, sorted.
    pub fn all_slot_types(&self) -> BTreeSet<String> {
        self.slot_types.values().flatten().cloned().collect()
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    /// Expands every utterance against its own domain's slot types.
    pub fn queries(&self) -> Vec<QueryInstance> {
        self.utterances()
            .flat_map(|u| expand_queries(u, &self.slot_types[&u.domain]))
            .collect()
    }

    /// Canonical text form: sorted domains, source order within a domain.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, utterance) in self.utterances().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            write_block(&mut out, utterance);
        }
        out
    }
}

pub(crate) fn write_block(out: &mut String, utterance: &Utterance) {
    out.push_str("# domain=");
    out.push_str(&utterance.domain);
    out.push('\n');
    for (word, tag) in utterance.words.iter().zip(utterance.tags()) {
        out.push_str(word);
        out.push('\t');
        out.push_str(&tag);
        out.push('\n');
    }
}

pub fn is_valid_slot_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading corpus {}", path.display()), e))?;
    parse_corpus(&text, path)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, corpus.to_text())
        .map_err(|e| Error::io(format!("writing corpus {}", path.display()), e))
}

struct BlockBuilder {
    domain: String,
    words: Vec<String>,
    spans: Vec<SlotSpan>,
    open: Option<SlotSpan>,
}

impl BlockBuilder {
    fn close_open(&mut self) {
        if let Some(mut span) = self.open.take() {
            span.end = self.words.len();
            self.spans.push(span);
        }
    }

    fn finish(mut self, path: &Path, line: usize) -> Result<Utterance> {
        self.close_open();
        if self.words.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "block has a domain header but no words".into(),
            });
        }
        Ok(Utterance {
            domain: self.domain,
            words: self.words,
            spans: self.spans,
        })
    }
}

pub fn parse_corpus(text: &str, path: &Path) -> Result<Corpus> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut corpus = Corpus::default();
    let mut block: Option<BlockBuilder> = None;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if let Some(b) = block.take() {
                corpus.push(b.finish(path, line_no)?);
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let domain = rest
                .trim()
                .strip_prefix("domain=")
                .ok_or_else(|| err(line_no, format!("expected '# domain=<name>', got {line:?}")))?
                .trim();
            if domain.is_empty() {
                return Err(err(line_no, "empty domain name".into()));
            }
            if let Some(b) = block.take() {
                corpus.push(b.finish(path, line_no)?);
            }
            block = Some(BlockBuilder {
                domain: domain.to_string(),
                words: Vec::new(),
                spans: Vec::new(),
                open: None,
            });
            continue;
        }
        let b = block
            .as_mut()
            .ok_or_else(|| err(line_no, "missing '# domain=<name>' header".into()))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields[0].is_empty() {
            return Err(err(
                line_no,
                format!("expected '<word>\\t<tag>', got {} field(s)", fields.len()),
            ));
        }
        let (word, tag) = (fields[0], fields[1]);
        let position = b.words.len();
        if tag == "O" {
            b.close_open();
        } else if let Some(slot) = tag.strip_prefix("B-") {
            if !is_valid_slot_name(slot) {
                return Err(err(line_no, format!("malformed slot type in tag {tag:?}")));
            }
            b.close_open();
            b.open = Some(SlotSpan::new(slot, position, position));
        } else if let Some(slot) = tag.strip_prefix("I-") {
            if !is_valid_slot_name(slot) {
                return Err(err(line_no, format!("malformed slot type in tag {tag:?}")));
            }
            match &b.open {
                Some(open) if open.slot_type == slot => {}
                _ => {
                    return Err(err(
                        line_no,
                        format!("{tag} does not continue a B-{slot}/I-{slot} run"),
                    ))
                }
            }
        } else {
            return Err(err(line_no, format!("malformed tag {tag:?}")));
        }
        b.words.push(word.to_string());
    }
    if let Some(b) = block.take() {
        corpus.push(b.finish(path, last_line)?);
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub target_domain: String,
    pub few_shot_k: usize,
    pub dev_size: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn zero_shot(target_domain: impl Into<String>, seed: u64) -> Self {
        SplitSpec {
            target_domain: target_domain.into(),
            few_shot_k: 0,
            dev_size: 500,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

/// Source domains plus `few_shot_k` target samples train; the remaining
/// target samples are divided into dev and test.
pub fn leave_one_out_split(corpus: &Corpus, plan: &SplitSpec) -> Result<Splits> {
    let known: Vec<&str> = corpus.domains().collect();
    if !known.contains(&plan.target_domain.as_str()) {
        return Err(Error::Data(format!(
            "unknown target domain {:?}; known domains: {}",
            plan.target_domain,
            known.join(", ")
        )));
    }
    if known.len() < 2 {
        return Err(Error::Data(
            "leave-one-out split needs at least 2 domains".into(),
        ));
    }
    let target = corpus.domain_samples(&plan.target_domain);
    if plan.dev_size + plan.few_shot_k > target.len() {
        return Err(Error::Data(format!(
            "dev_size {} + few_shot_k {} exceeds the {} samples of domain {}",
            plan.dev_size,
            plan.few_shot_k,
            target.len(),
            plan.target_domain
        )));
    }

    let mut order: Vec<usize> = (0..target.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    order.shuffle(&mut rng);
    let mut dev_idx = order[..plan.dev_size].to_vec();
    let mut few_idx = order[plan.dev_size..plan.dev_size + plan.few_shot_k].to_vec();
    let mut test_idx = order[plan.dev_size + plan.few_shot_k..].to_vec();
    dev_idx.sort_unstable();
    few_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| target[i].clone()).collect::<Vec<_>>();

    let sources = corpus
        .utterances()
        .filter(|u| u.domain != plan.target_domain)
        .cloned();
    Ok(Splits {
        train: Corpus::from_utterances(sources.chain(pick(&few_idx))),
        dev: Corpus::from_utterances(pick(&dev_idx)),
        test: Corpus::from_utterances(pick(&test_idx)),
    })
}
