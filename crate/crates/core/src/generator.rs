//! Seeded synthetic multi-domain corpus built from word templates and
//! per-slot entity vocabularies.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{is_valid_slot_name, Corpus, SlotSpan, Utterance};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// The bundled four-domain configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/synthetic.conf");

#[derive(Debug, Clone, PartialEq)]
pub enum TemplateToken {
    Word(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub tokens: Vec<TemplateToken>,
}

impl Template {
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<TemplateToken> = text
            .split_whitespace()
            .map(|tok| match tok.strip_prefix('[').and_then(|t| t.strip_suffix(']')) {
                Some(slot) => TemplateToken::Slot(slot.to_string()),
                None => TemplateToken::Word(tok.to_lowercase()),
            })
            .collect();
        if tokens.is_empty() {
            return Err(Error::Config("empty template".into()));
        }
        Ok(Template { tokens })
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().filter_map(|t| match t {
            TemplateToken::Slot(s) => Some(s.as_str()),
            TemplateToken::Word(_) => None,
        })
    }

    /// Substitutes one phrase per placeholder, in order.
    pub fn fill(&self, domain: &str, phrases: &[Vec<String>]) -> Utterance {
        let mut words = Vec::new();
        let mut spans = Vec::new();
        let mut next = phrases.iter();
        for token in &self.tokens {
            match token {
                TemplateToken::Word(w) => words.push(w.clone()),
                TemplateToken::Slot(slot) => {
                    let phrase = next.next().expect("one phrase per placeholder");
                    let start = words.len();
                    words.extend(phrase.iter().cloned());
                    spans.push(SlotSpan::new(slot.clone(), start, words.len()));
                }
            }
        }
        Utterance {
            domain: domain.to_string(),
            words,
            spans,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub domains: Vec<String>,
    pub samples_per_domain: usize,
    pub templates: BTreeMap<String, Vec<Template>>,
    pub vocab: BTreeMap<String, Vec<Vec<String>>>,
}

fn split_list(value: &str, sep: char) -> Vec<String> {
    value
        .split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

impl GeneratorConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn default_desk() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("bundled generator config is valid")
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let domains = split_list(
            kv.get("domains")
                .ok_or_else(|| Error::Config("missing key 'domains'".into()))?,
            ',',
        );
        let samples_per_domain = kv.parsed("samples_per_domain")?.unwrap_or(100);
        let mut templates = BTreeMap::new();
        for (domain, value) in kv.keys_with_prefix("template.") {
            let parsed = split_list(value, '|')
                .iter()
                .map(|t| Template::parse(t))
                .collect::<Result<Vec<_>>>()?;
            templates.insert(domain.to_string(), parsed);
        }
        let mut vocab = BTreeMap::new();
        for (slot, value) in kv.keys_with_prefix("slot.") {
            let phrases: Vec<Vec<String>> = split_list(value, '|')
                .iter()
                .map(|p| p.split_whitespace().map(str::to_lowercase).collect())
                .collect();
            vocab.insert(slot.to_string(), phrases);
        }
        let config = GeneratorConfig {
            domains,
            samples_per_domain,
            templates,
            vocab,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 3 {
            return Err(Error::Config(format!(
                "generator needs at least 3 domains, got {}",
                self.domains.len()
            )));
        }
        for (slot, phrases) in &self.vocab {
            if !is_valid_slot_name(slot) {
                return Err(Error::Config(format!("invalid slot type name {slot:?}")));
            }
            if phrases.is_empty() || phrases.iter().any(Vec::is_empty) {
                return Err(Error::Config(format!("slot {slot:?} has an empty phrase list or phrase")));
            }
        }
        for domain in self.templates.keys() {
            if !self.domains.contains(domain) {
                return Err(Error::Config(format!("templates given for undeclared domain {domain:?}")));
            }
        }
        let mut owners: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for domain in &self.domains {
            let templates = self
                .templates
                .get(domain)
                .filter(|t| !t.is_empty())
                .ok_or_else(|| Error::Config(format!("domain {domain:?} has no templates")))?;
            for slot in templates.iter().flat_map(Template::slots) {
                if !self.vocab.contains_key(slot) {
                    return Err(Error::Config(format!(
                        "template in domain {domain:?} references undeclared slot type {slot:?}"
                    )));
                }
                owners.entry(slot).or_default().insert(domain);
            }
        }
        if !owners.values().any(|d| d.len() >= 2) {
            return Err(Error::Config(
                "no slot type is shared by two or more domains".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic given `seed`: `samples_per_domain` utterances per declared domain.
pub fn generate_synthetic_corpus(config: &GeneratorConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utterances = Vec::with_capacity(config.domains.len() * config.samples_per_domain);
    for domain in &config.domains {
        let templates = &config.templates[domain];
        for _ in 0..config.samples_per_domain {
            let template = templates.choose(&mut rng).expect("nonempty templates");
            let phrases: Vec<Vec<String>> = template
                .slots()
                .map(|slot| {
                    config.vocab[slot]
                        .choose(&mut rng)
                        .expect("nonempty vocab")
                        .clone()
                })
                .collect();
            utterances.push(template.fill(domain, &phrases));
        }
    }
    Ok(Corpus::from_utterances(utterances))
}
