//! Contrastive sample construction, sentence representations, InfoNCE and
//! the momentum-updated key encoder.
//!
//! Given an anchor (slot type t, utterance w) with at least one span of t:
//!
//! * template samples replace the t-spans with the words of a slot-type name:
//!   t itself for the positive, a different type for each negative;
//! * synthetic samples replace the t-spans with lexicon phrases: another
//!   phrase of t for the positive, phrases of a different type for each
//!   negative.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore};

use crate::corpus::{Lexicon, QueryInstance, SlotSpan, Utterance};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tokenizer::{encode_query, slot_type_words, EncodedQuery, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleKind {
    Template,
    Synthetic,
    Concat,
}

/// How contrastive sets are drawn for each anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Template,
    Synthetic,
    /// Template or synthetic with probability 1/2 each.
    Random,
    /// Both sets' negatives, one of the two positives.
    Concat,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Template,
        Strategy::Synthetic,
        Strategy::Concat,
        Strategy::Random,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Template => "template",
            Strategy::Synthetic => "synthetic",
            Strategy::Random => "random",
            Strategy::Concat => "concat",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "template" => Ok(Strategy::Template),
            "synthetic" => Ok(Strategy::Synthetic),
            "random" => Ok(Strategy::Random),
            "concat" => Ok(Strategy::Concat),
            other => Err(Error::Config(format!(
                "unknown sampler strategy {other:?} (template, synthetic, random, concat)"
            ))),
        }
    }
}

/// A rewritten utterance fed to the key encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySample {
    pub words: Vec<String>,
    /// Spans after rewriting; replaced spans carry the type they were filled from.
    pub spans: Vec<SlotSpan>,
    pub input: EncodedQuery,
}

impl KeySample {
    pub fn as_utterance(&self, domain: &str) -> Utterance {
        Utterance {
            domain: domain.to_string(),
            words: self.words.clone(),
            spans: self.spans.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveSet {
    pub slot_type: String,
    pub anchor: EncodedQuery,
    pub positive: KeySample,
    pub negatives: Vec<KeySample>,
    pub kind: SampleKind,
}

impl ContrastiveSet {
    /// Keys in InfoNCE order; the positive is at [`Self::POSITIVE_INDEX`].
    pub fn keys(&self) -> impl Iterator<Item = &KeySample> {
        std::iter::once(&self.positive).chain(&self.negatives)
    }

    pub const POSITIVE_INDEX: usize = 0;

    pub fn size(&self) -> usize {
        1 + self.negatives.len()
    }
}

/// Shared inputs for sample construction.
#[derive(Debug, Clone, Copy)]
pub struct SampleContext<'a> {
    pub vocab: &'a Vocab,
    /// Corpus-wide slot types, the pool for template negatives.
    pub slot_types: &'a BTreeSet<String>,
    pub lexicon: &'a Lexicon,
    pub max_len: usize,
    /// Contrastive set size M: one positive and M−1 negatives.
    pub set_size: usize,
    /// Also replace spans of non-queried types with their own type names.
    pub templatize_all: bool,
}

struct Rewrite {
    words: Vec<String>,
    spans: Vec<SlotSpan>,
}

/// Replaces each span of `slot_type` with the next phrase from `fill`
/// (tagged `fill_type`); other spans are kept, or templatized when asked.
fn rewrite(
    utterance: &Utterance,
    slot_type: &str,
    fill_type: &str,
    mut fill: impl FnMut() -> Vec<String>,
    templatize_others: bool,
) -> Rewrite {
    let mut spans: Vec<&SlotSpan> = utterance.spans.iter().collect();
    spans.sort_by_key(|s| s.start);
    let mut words = Vec::with_capacity(utterance.words.len());
    let mut out_spans = Vec::with_capacity(spans.len());
    let mut cursor = 0;
    for span in spans {
        words.extend_from_slice(&utterance.words[cursor..span.start]);
        let start = words.len();
        let (phrase, ty) = if span.slot_type == slot_type {
            (fill(), fill_type)
        } else if templatize_others {
            (slot_type_words(&span.slot_type), span.slot_type.as_str())
        } else {
            (utterance.words[span.start..span.end].to_vec(), span.slot_type.as_str())
        };
        words.extend(phrase);
        out_spans.push(SlotSpan::new(ty, start, words.len()));
        cursor = span.end;
    }
    words.extend_from_slice(&utterance.words[cursor..]);
    Rewrite {
        words,
        spans: out_spans,
    }
}

impl SampleContext<'_> {
    fn key(&self, slot_type: &str, rewrite: Rewrite) -> Result<KeySample> {
        let input = encode_query(self.vocab, slot_type, &rewrite.words, self.max_len)?;
        Ok(KeySample {
            words: rewrite.words,
            spans: rewrite.spans,
            input,
        })
    }

    fn check(&self, query: &QueryInstance) -> Result<()> {
        if self.set_size < 2 {
            return Err(Error::Config(format!("contrastive set size {} < 2", self.set_size)));
        }
        if !query.utterance.spans.iter().any(|s| s.slot_type == query.slot_type) {
            return Err(Error::Data(format!(
                "utterance has no span of the queried slot type {:?}",
                query.slot_type
            )));
        }
        Ok(())
    }

    /// Draws `count` distinct entries uniformly without replacement.
    fn draw_distinct<'b>(&self, pool: &[&'b str], count: usize, rng: &mut dyn RngCore) -> Result<Vec<&'b str>> {
        if pool.len() < count {
            return Err(Error::Data(format!(
                "need {count} other slot types for negatives, only {} available",
                pool.len()
            )));
        }
        Ok(index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect())
    }

    pub fn make_template_set(&self, query: &QueryInstance, rng: &mut dyn RngCore) -> Result<ContrastiveSet> {
        self.check(query)?;
        let t = query.slot_type.as_str();
        let u = &query.utterance;
        let others: Vec<&str> = self
            .slot_types
            .iter()
            .map(String::as_str)
            .filter(|&s| s != t)
            .collect();
        let negative_types = self.draw_distinct(&others, self.set_size - 1, rng)?;
        let positive = self.key(t, rewrite(u, t, t, || slot_type_words(t), self.templatize_all))?;
        let negatives = negative_types
            .into_iter()
            .map(|neg| self.key(t, rewrite(u, t, neg, || slot_type_words(neg), self.templatize_all)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ContrastiveSet {
            slot_type: t.to_string(),
            anchor: encode_query(self.vocab, t, &u.words, self.max_len)?,
            positive,
            negatives,
            kind: SampleKind::Template,
        })
    }

    pub fn make_synthetic_set(&self, query: &QueryInstance, rng: &mut dyn RngCore) -> Result<ContrastiveSet> {
        self.check(query)?;
        let t = query.slot_type.as_str();
        let u = &query.utterance;
        let own: Vec<&Vec<String>> = self.lexicon.get(t).map(|s| s.iter().collect()).unwrap_or_default();
        let others: Vec<&str> = self
            .lexicon
            .iter()
            .filter(|(ty, phrases)| ty.as_str() != t && !phrases.is_empty())
            .map(|(ty, _)| ty.as_str())
            .collect();
        let negative_types = self.draw_distinct(&others, self.set_size - 1, rng)?;

        // in start order, the order `rewrite` asks for fills
        let mut queried: Vec<&SlotSpan> = u.spans.iter().filter(|s| s.slot_type == t).collect();
        queried.sort_by_key(|s| s.start);
        let mut originals = queried.into_iter().map(|s| u.span_text(s));
        let mut positive_fill = || {
            let original = originals.next().expect("one draw per queried span");
            let candidates: Vec<&Vec<String>> = own.iter().copied().filter(|p| **p != original).collect();
            match candidates.choose(rng) {
                Some(p) => (*p).clone(),
                None => {
                    log::warn!(
                        "lexicon for slot type {t:?} has no alternative to {:?}; reusing it",
                        original.join(" ")
                    );
                    original
                }
            }
        };
        let positive_rewrite = rewrite(u, t, t, &mut positive_fill, false);
        let mut negative_rewrites = Vec::with_capacity(negative_types.len());
        for neg in negative_types {
            let phrases: Vec<&Vec<String>> = self.lexicon[neg].iter().collect();
            let r = rewrite(
                u,
                t,
                neg,
                || (*phrases.choose(rng).expect("nonempty phrases")).clone(),
                false,
            );
            negative_rewrites.push(r);
        }
        Ok(ContrastiveSet {
            slot_type: t.to_string(),
            anchor: encode_query(self.vocab, t, &u.words, self.max_len)?,
            positive: self.key(t, positive_rewrite)?,
            negatives: negative_rewrites
                .into_iter()
                .map(|r| self.key(t, r))
                .collect::<Result<Vec<_>>>()?,
            kind: SampleKind::Synthetic,
        })
    }

    pub fn make_contrastive_set(
        &self,
        strategy: Strategy,
        query: &QueryInstance,
        rng: &mut dyn RngCore,
    ) -> Result<ContrastiveSet> {
        match strategy {
            Strategy::Template => self.make_template_set(query, rng),
            Strategy::Synthetic => self.make_synthetic_set(query, rng),
            Strategy::Random => {
                if rng.gen_bool(0.5) {
                    self.make_template_set(query, rng)
                } else {
                    self.make_synthetic_set(query, rng)
                }
            }
            Strategy::Concat => {
                let template = self.make_template_set(query, rng)?;
                let synthetic = self.make_synthetic_set(query, rng)?;
                let positive = if rng.gen_bool(0.5) {
                    template.positive
                } else {
                    synthetic.positive
                };
                let mut negatives = template.negatives;
                negatives.extend(synthetic.negatives);
                Ok(ContrastiveSet {
                    slot_type: template.slot_type,
                    anchor: template.anchor,
                    positive,
                    negatives,
                    kind: SampleKind::Concat,
                })
            }
        }
    }
}

/// A unit-norm sentence vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation(pub Array1<f64>);

impl Representation {
    /// Divides by the Euclidean norm; a zero vector is an error.
    pub fn normalize(v: ArrayView1<'_, f64>) -> Result<Self> {
        let norm = v.dot(&v).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric(format!("cannot normalize vector with norm {norm}")));
        }
        Ok(Representation(v.mapv(|x| x / norm)))
    }

    /// Gradient w.r.t. the unnormalized vector `raw`, given dL/d(self).
    pub fn backward(&self, raw: ArrayView1<'_, f64>, d_repr: &Array1<f64>) -> Array1<f64> {
        let norm = raw.dot(&raw).sqrt();
        let along = self.0.dot(d_repr);
        (d_repr - &(&self.0 * along)) / norm
    }
}

/// Normalized `[CLS]` state of `input` under `params`.
pub fn represent(params: &EncoderParams, input: &EncodedQuery, dropout: Option<&mut dyn RngCore>) -> Result<Representation> {
    let (out, _) = params.forward_cached(input, dropout)?;
    Representation::normalize(out.cls.view())
}

/// −log softmax(logits)[pos], with max subtraction.
pub fn info_nce_from_logits(logits: &[f64], pos_index: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Data("InfoNCE over an empty key set".into()));
    }
    if pos_index >= logits.len() {
        return Err(Error::Data(format!("positive index {pos_index} out of {} keys", logits.len())));
    }
    // ln Σ exp(lⱼ − max) as ln_1p over the non-argmax terms keeps full
    // relative precision when the positive dominates.
    let (arg, max) = logits
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ai, am), (i, l)| if l > am { (i, l) } else { (ai, am) });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, l)| (l - max).exp())
        .sum();
    Ok(rest.ln_1p() + (max - logits[pos_index]))
}

fn logits(q: &Representation, keys: &[Representation], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(keys.iter().map(|k| q.0.dot(&k.0) / tau).collect())
}

/// −log( exp(q·k₊/τ) / Σₖ exp(q·k/τ) ).
pub fn info_nce(q: &Representation, keys: &[Representation], pos_index: usize, tau: f64) -> Result<f64> {
    info_nce_from_logits(&logits(q, keys, tau)?, pos_index)
}

/// Loss and dL/dq = Σⱼ (pⱼ − [j = pos]) kⱼ / τ.
pub fn info_nce_with_grad(
    q: &Representation,
    keys: &[Representation],
    pos_index: usize,
    tau: f64,
) -> Result<(f64, Array1<f64>)> {
    let logits = logits(q, keys, tau)?;
    let loss = info_nce_from_logits(&logits, pos_index)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut grad = Array1::zeros(q.0.len());
    for (j, (k, e)) in keys.iter().zip(&exps).enumerate() {
        let coeff = e / sum - if j == pos_index { 1.0 } else { 0.0 };
        grad.scaled_add(coeff / tau, &k.0);
    }
    Ok((loss, grad))
}

/// Key-encoder weights and their momentum coefficient. Only ever changed by
/// [`momentum_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct KeyEncoderState {
    pub params: EncoderParams,
    pub momentum: f64,
}

impl KeyEncoderState {
    /// Starts as a copy of the query encoder.
    pub fn from_query(query: &EncoderParams, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(KeyEncoderState {
            params: query.clone_params(),
            momentum,
        })
    }
}

/// θ_k ← m·θ_k + (1−m)·θ_q elementwise.
pub fn momentum_update(state: &mut KeyEncoderState, query: &EncoderParams) -> Result<()> {
    state.params.momentum_update_from(query, state.momentum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{labels_for, Corpus};
    use crate::encoder::EncoderConfig;
    use crate::params::Parameters;
    use crate::tokenizer::build_vocab;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn fig3() -> Utterance {
        Utterance {
            domain: "music".into(),
            words: words("play some 70's music in youtube music"),
            spans: vec![SlotSpan::new("year", 2, 3), SlotSpan::new("service", 5, 7)],
        }
    }

    fn query(u: &Utterance, t: &str) -> QueryInstance {
        QueryInstance {
            slot_type: t.into(),
            utterance: u.clone(),
            labels: labels_for(u, t),
        }
    }

    struct Fixture {
        vocab: Vocab,
        types: BTreeSet<String>,
        corpus: Corpus,
    }

    fn fixture() -> Fixture {
        let corpus = Corpus::from_utterances(vec![
            fig3(),
            Utterance {
                domain: "music".into(),
                words: words("play it on spotify"),
                spans: vec![SlotSpan::new("service", 3, 4)],
            },
            Utterance {
                domain: "music".into(),
                words: words("songs from 80's"),
                spans: vec![SlotSpan::new("year", 2, 3)],
            },
        ]);
        Fixture {
            vocab: build_vocab(&corpus, 1),
            types: corpus.all_slot_types(),
            corpus,
        }
    }

    impl Fixture {
        fn ctx(&self, set_size: usize) -> SampleContext<'_> {
            SampleContext {
                vocab: &self.vocab,
                slot_types: &self.types,
                lexicon: self.corpus.lexicon(),
                max_len: 64,
                set_size,
                templatize_all: false,
            }
        }
    }

    #[test]
    fn template_set_matches_figure() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // only one other type exists, so the negative is forced to "year"
        let set = f.ctx(2).make_template_set(&query(&fig3(), "service"), &mut rng).unwrap();
        assert_eq!(set.kind, SampleKind::Template);
        assert_eq!(set.positive.words.join(" "), "play some 70's music in service");
        assert_eq!(set.negatives.len(), 1);
        assert_eq!(set.negatives[0].words.join(" "), "play some 70's music in year");
        assert_eq!(set.positive.spans[1], SlotSpan::new("service", 5, 6));
        // every key keeps the anchor's slot-type segment
        for key in set.keys() {
            assert_eq!(key.input.token_ids[..3], set.anchor.token_ids[..3]);
        }
        assert!(f.ctx(3).make_template_set(&query(&fig3(), "service"), &mut rng).is_err());
    }

    #[test]
    fn template_replaces_every_queried_span() {
        let f = fixture();
        let u = Utterance {
            domain: "music".into(),
            words: words("spotify or youtube music"),
            spans: vec![SlotSpan::new("service", 0, 1), SlotSpan::new("service", 2, 4)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = f.ctx(2).make_template_set(&query(&u, "service"), &mut rng).unwrap();
        assert_eq!(set.positive.words.join(" "), "service or service");
        assert_eq!(set.negatives[0].words.join(" "), "year or year");
    }

    #[test]
    fn templatize_all_rewrites_other_types() {
        let f = fixture();
        let mut ctx = f.ctx(2);
        ctx.templatize_all = true;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = ctx.make_template_set(&query(&fig3(), "service"), &mut rng).unwrap();
        assert_eq!(set.positive.words.join(" "), "play some year music in service");
    }

    #[test]
    fn all_o_query_has_no_set() {
        let f = fixture();
        let u = Utterance {
            domain: "music".into(),
            words: words("songs from 80's"),
            spans: vec![SlotSpan::new("year", 2, 3)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(f.ctx(2).make_template_set(&query(&u, "service"), &mut rng).is_err());
        assert!(f.ctx(2).make_synthetic_set(&query(&u, "service"), &mut rng).is_err());
    }

    #[test]
    fn synthetic_set_by_hand() {
        let f = fixture();
        // lexicon: service = {youtube music, spotify}, year = {70's, 80's}
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = f.ctx(2).make_synthetic_set(&query(&fig3(), "service"), &mut rng).unwrap();
        assert_eq!(set.kind, SampleKind::Synthetic);
        // the only other service phrase is "spotify"
        assert_eq!(set.positive.words.join(" "), "play some 70's music in spotify");
        let neg = set.negatives[0].words.join(" ");
        assert!(
            neg == "play some 70's music in 80's" || neg == "play some 70's music in 70's",
            "{neg}"
        );
    }

    #[test]
    fn synthetic_falls_back_to_single_phrase() {
        let corpus = Corpus::from_utterances(vec![
            fig3(),
            Utterance {
                domain: "music".into(),
                words: words("songs from 80's"),
                spans: vec![SlotSpan::new("year", 2, 3)],
            },
        ]);
        let vocab = build_vocab(&corpus, 1);
        let types = corpus.all_slot_types();
        let ctx = SampleContext {
            vocab: &vocab,
            slot_types: &types,
            lexicon: corpus.lexicon(),
            max_len: 64,
            set_size: 2,
            templatize_all: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = ctx.make_synthetic_set(&query(&fig3(), "service"), &mut rng).unwrap();
        assert_eq!(set.positive.words, fig3().words);
    }

    #[test]
    fn concat_and_random() {
        let f = fixture();
        let q = query(&fig3(), "service");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = f.ctx(2).make_contrastive_set(Strategy::Concat, &q, &mut rng).unwrap();
        assert_eq!(set.kind, SampleKind::Concat);
        assert_eq!(set.size(), 3);
        let t = f.ctx(2).make_contrastive_set(Strategy::Template, &q, &mut rng).unwrap();
        assert_eq!(t.kind, SampleKind::Template);

        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            assert_eq!(
                f.ctx(2).make_contrastive_set(Strategy::Random, &q, &mut a).unwrap(),
                f.ctx(2).make_contrastive_set(Strategy::Random, &q, &mut b).unwrap()
            );
        }
    }

    #[test]
    fn strategy_parse_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }

    fn repr(v: &[f64]) -> Representation {
        Representation::normalize(ndarray::ArrayView1::from(v)).unwrap()
    }

    #[test]
    fn info_nce_values() {
        let q = repr(&[1.0, 0.0]);
        let k = repr(&[0.0, 1.0]);
        for m in [2, 3, 5] {
            let keys = vec![k.clone(); m];
            for tau in [0.07, 1.0] {
                let l = info_nce(&q, &keys, 0, tau).unwrap();
                assert!((l - (m as f64).ln()).abs() < 1e-12);
            }
        }
        // similarities (1, 0, 0), tau = 0.07
        let keys = vec![repr(&[1.0, 0.0]), repr(&[0.0, 1.0]), repr(&[0.0, -1.0])];
        let l = info_nce(&q, &keys, 0, 0.07).unwrap();
        // ln(1 + 2·e^(−1/0.07)) in 50-digit decimal arithmetic
        let direct = 1.24974912095586002585e-6;
        assert!((l - direct).abs() <= 1e-12 * direct, "{l}");
        // similarities (ln 2, 0), tau = 1
        let l = info_nce_from_logits(&[2f64.ln(), 0.0], 0).unwrap();
        assert!((l - 1.5f64.ln()).abs() < 1e-15);
        assert!(info_nce(&q, &[], 0, 1.0).is_err());
        assert!(info_nce(&q, &keys, 3, 1.0).is_err());
        assert!(info_nce(&q, &keys, 0, 0.0).is_err());
    }

    #[test]
    fn info_nce_grad_matches_finite_differences() {
        let raw = array![0.3, -1.2, 0.8];
        let keys = vec![repr(&[0.1, -1.0, 0.5]), repr(&[1.0, 0.2, 0.0]), repr(&[-0.4, 0.4, 0.9])];
        let loss = |raw: &Array1<f64>| {
            info_nce(&Representation::normalize(raw.view()).unwrap(), &keys, 0, 0.07).unwrap()
        };
        let q = Representation::normalize(raw.view()).unwrap();
        let (_, dq) = info_nce_with_grad(&q, &keys, 0, 0.07).unwrap();
        let d_raw = q.backward(raw.view(), &dq);
        for i in 0..3 {
            let mut p = raw.clone();
            p[i] += 1e-6;
            let mut m = raw.clone();
            m[i] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - d_raw[i]).abs() < 1e-6 * fd.abs().max(1.0), "{fd} vs {}", d_raw[i]);
        }
    }

    #[test]
    fn represent_is_unit_and_scale_free() {
        let config = EncoderConfig { vocab_size: 12, d_model: 8, n_heads: 2, n_layers: 1, d_ff: 8, max_len: 16, ..Default::default() };
        let params = EncoderParams::init(config, 0).unwrap();
        let input = EncodedQuery {
            token_ids: vec![2, 5, 3, 6, 7, 3],
            segment_ids: vec![0, 0, 0, 1, 1, 1],
            utterance_positions: vec![3, 4],
        };
        let r = represent(&params, &input, None).unwrap();
        assert!((r.0.dot(&r.0) - 1.0).abs() < 1e-12);
        assert_eq!(r, represent(&params, &input, None).unwrap());
        let cls = params.forward_eval(&input).unwrap().cls;
        let scaled = &cls * 7.0;
        let r7 = Representation::normalize(scaled.view()).unwrap();
        assert!((&r7.0 - &r.0).iter().all(|d| d.abs() < 1e-15));
        assert!(Representation::normalize(Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn momentum_arithmetic() {
        let config = EncoderConfig { vocab_size: 6, d_model: 4, n_heads: 1, n_layers: 1, d_ff: 4, max_len: 8, ..Default::default() };
        let mut q = EncoderParams::zeros(config);
        let mut state = KeyEncoderState::from_query(&q, 0.999).unwrap();
        state.params.fill(1.0);
        momentum_update(&mut state, &q).unwrap();
        assert!(state.params.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.999)));

        state.momentum = 0.5;
        state.params.fill(2.0);
        q.fill(4.0);
        momentum_update(&mut state, &q).unwrap();
        assert!(state.params.tensors().iter().all(|t| t.data.iter().all(|&v| v == 3.0)));

        state.momentum = 0.0;
        let q = EncoderParams::init(config, 3).unwrap();
        momentum_update(&mut state, &q).unwrap();
        assert_eq!(state.params, q);

        assert!(KeyEncoderState::from_query(&q, 1.0).is_err());
        let other = EncoderParams::zeros(EncoderConfig { d_model: 8, ..config });
        assert!(momentum_update(&mut state, &other).is_err());
    }

    use proptest::prelude::{prop_assert, proptest};

    proptest! {
        #[test]
        fn info_nce_shift_invariant_and_nonnegative(
            logits in proptest::collection::vec(-30.0f64..30.0, 2..6),
            shift in -50.0f64..50.0,
            pos in 0usize..6,
        ) {
            let pos = pos % logits.len();
            let l = info_nce_from_logits(&logits, pos).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let ls = info_nce_from_logits(&shifted, pos).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - ls).abs() <= 1e-9 * l.max(1.0));
        }

        #[test]
        fn momentum_contracts_by_m(m in 0.0f64..0.999, seed in 0u64..100) {
            let config = EncoderConfig { vocab_size: 6, d_model: 4, n_heads: 1, n_layers: 1, d_ff: 4, max_len: 8, ..Default::default() };
            let q = EncoderParams::init(config, seed).unwrap();
            let mut state = KeyEncoderState::from_query(&EncoderParams::init(config, seed + 1000).unwrap(), m).unwrap();
            let dist = |a: &EncoderParams| {
                a.tensors().iter().zip(q.tensors()).flat_map(|(x, y)| {
                    x.data.iter().zip(y.data).map(|(u, v)| (u - v) * (u - v)).collect::<Vec<_>>()
                }).sum::<f64>().sqrt()
            };
            let before = dist(&state.params);
            momentum_update(&mut state, &q).unwrap();
            prop_assert!((dist(&state.params) - m * before).abs() <= 1e-12 * before);
        }
    }
}
