//! Combined-loss training: λ·InfoNCE + (1−λ)·CRF NLL on the query path,
//! AdamW with warmup/linear decay, and a momentum-updated key encoder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrast::{momentum_update, represent, ContrastiveSet, KeyEncoderState, Representation, SampleContext, Strategy};
use crate::corpus::{Corpus, QueryInstance};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, F1Report};
use crate::model::{anchor_loss, GradSink, NeuralTagger, TaggerParams};
use crate::optim::{adamw_step, lr_at, AdamWConfig, OptimizerState};
use crate::params::Parameters;
use crate::tokenizer::{encode_query, Vocab};
use crate::weights::WeightsFile;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub momentum: f64,
    /// Contrastive set size M.
    pub set_size: usize,
    pub strategy: Strategy,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub eval_interval: usize,
    pub templatize_all: bool,
    /// Stop once dev F1 reaches this value.
    pub early_stop_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            lr: 1e-5,
            warmup_steps: 4000,
            max_steps: 400_000,
            batch_size: 128,
            tau: 0.07,
            momentum: 0.999,
            set_size: 3,
            strategy: Strategy::Random,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            eval_interval: 200,
            templatize_all: false,
            early_stop_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.warmup_steps > self.max_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        if !(self.lr >= 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("lr must be ≥ 0 and tau > 0".into()));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch_size and eval_interval must be positive".into()));
        }
        if self.set_size < 2 {
            return Err(Error::Config(format!("contrastive set size {} < 2", self.set_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return Err(Error::Config("betas must be in [0, 1) and weight_decay ≥ 0".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(step, self.lr, self.warmup_steps, self.max_steps)
    }
}

/// λ·l_cl + (1−λ)·l_bio; without a contrastive term the λ part is dropped.
pub fn combined_loss(l_cl: Option<f64>, l_bio: f64, lambda: f64) -> f64 {
    match l_cl {
        Some(cl) => lambda * cl + (1.0 - lambda) * l_bio,
        None => (1.0 - lambda) * l_bio,
    }
}

/// Named random substreams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Sampler = 2,
    Init = 3,
    Dropout = 4,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mixed = splitmix(splitmix(splitmix(seed ^ (stream as u64).wrapping_mul(0xA24B_AED4_963E_E407)) ^ a) ^ b);
    ChaCha8Rng::seed_from_u64(mixed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub query: TaggerParams,
    pub key: KeyEncoderState,
    pub opt: OptimizerState,
    pub step: usize,
}

impl ModelState {
    /// Fresh query model; the key encoder starts as its copy.
    pub fn new(encoder: EncoderConfig, config: &TrainConfig) -> Result<Self> {
        let init = |i: u64| substream(config.seed, Stream::Init, i, 0).gen::<u64>();
        let query = TaggerParams::init(encoder, init(0), init(1))?;
        let key = KeyEncoderState::from_query(&query.encoder, config.momentum)?;
        let opt = OptimizerState::new(&query);
        Ok(ModelState { query, key, opt, step: 0 })
    }

    pub fn tagger<'a>(&'a self, vocab: &'a Vocab) -> NeuralTagger<'a> {
        NeuralTagger {
            params: &self.query,
            vocab,
        }
    }

    pub fn to_weights(&self) -> WeightsFile {
        let mut file = WeightsFile::new(self.query.encoder.config);
        file.push_params("query.", &self.query);
        file.push_params("key.", &self.key.params);
        for (t, (m, v)) in self
            .query
            .tensors()
            .iter()
            .zip(self.opt.first.iter().zip(&self.opt.second))
        {
            file.push(format!("opt.first.{}", t.name), t.shape.clone(), m.clone());
            file.push(format!("opt.second.{}", t.name), t.shape.clone(), v.clone());
        }
        file.push("opt.step", vec![1], vec![self.opt.step as f64]);
        file.push("state.step", vec![1], vec![self.step as f64]);
        file.push("key.momentum", vec![1], vec![self.key.momentum]);
        file
    }

    pub fn from_weights(file: &WeightsFile) -> Result<Self> {
        file.config.validate()?;
        let arrays = file.array_map();
        let scalar = |name: &str| -> Result<f64> {
            arrays
                .get(name)
                .and_then(|(_, d)| d.first().copied())
                .ok_or_else(|| Error::Weights(format!("missing scalar {name:?}")))
        };
        let mut query = TaggerParams::zeros(file.config);
        query.assign_from("query.", &arrays)?;
        let mut key = EncoderParams::zeros(file.config);
        key.assign_from("key.", &arrays)?;
        let mut opt = OptimizerState::new(&query);
        for (i, t) in query.tensors().iter().enumerate() {
            for (prefix, slot) in [("opt.first.", &mut opt.first[i]), ("opt.second.", &mut opt.second[i])] {
                let name = format!("{prefix}{}", t.name);
                let (shape, data) = arrays
                    .get(&name)
                    .ok_or_else(|| Error::Weights(format!("missing array {name:?}")))?;
                if *shape != t.shape {
                    return Err(Error::Shape(format!("{name}: shape {shape:?} vs {:?}", t.shape)));
                }
                slot.copy_from_slice(data);
            }
        }
        opt.step = scalar("opt.step")? as u64;
        Ok(ModelState {
            query,
            key: KeyEncoderState {
                params: key,
                momentum: scalar("key.momentum")?,
            },
            opt,
            step: scalar("state.step")? as usize,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_weights().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weights(&WeightsFile::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_bio: f64,
    pub loss_cl: f64,
    pub lr: f64,
    /// Fraction of the batch that had a contrastive set.
    pub coverage: f64,
    pub dev_f1: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss_total,loss_bio,loss_cl,lr,coverage,dev_f1";

impl StepMetrics {
    /// Floats use Rust's shortest round-trip formatting.
    pub fn csv_row(&self) -> String {
        let dev = self.dev_f1.map(|f| f.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss_total, self.loss_bio, self.loss_cl, self.lr, self.coverage, dev
        )
    }
}

pub fn metrics_csv(log: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in log {
        let _ = writeln!(out, "{}", m.csv_row());
    }
    out
}

/// Inputs shared by every step: vocabulary and the training corpus's
/// sampling pools.
pub struct TrainContext<'a> {
    pub vocab: &'a Vocab,
    pub slot_types: BTreeSet<String>,
    pub lexicon: &'a crate::corpus::Lexicon,
}

impl<'a> TrainContext<'a> {
    pub fn new(vocab: &'a Vocab, train: &'a Corpus) -> Self {
        TrainContext {
            vocab,
            slot_types: train.all_slot_types(),
            lexicon: train.lexicon(),
        }
    }

    pub fn sampler(&self, config: &TrainConfig, max_len: usize) -> SampleContext<'_> {
        SampleContext {
            vocab: self.vocab,
            slot_types: &self.slot_types,
            lexicon: self.lexicon,
            max_len,
            set_size: config.set_size,
            templatize_all: config.templatize_all,
        }
    }
}

/// Test hooks for [`train_step`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepHooks {
    /// Skip the AdamW update (θ_q stays fixed; momentum still applies).
    pub skip_optimizer: bool,
}

/// Key representations (positive first) from the key encoder, no dropout.
pub fn encode_keys(key: &EncoderParams, set: &ContrastiveSet) -> Result<Vec<Representation>> {
    set.keys().map(|k| represent(key, &k.input, None)).collect()
}

/// One optimization step over `batch`:
/// build contrastive sets, accumulate λ-weighted gradients on the query
/// path, apply AdamW, then move the key encoder toward the query encoder.
pub fn train_step(
    batch: &[QueryInstance],
    state: &mut ModelState,
    config: &TrainConfig,
    ctx: &TrainContext<'_>,
    hooks: StepHooks,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let step = state.step;
    let max_len = state.query.encoder.config.max_len;
    let sampler = ctx.sampler(config, max_len);

    let mut sets: Vec<Option<ContrastiveSet>> = Vec::with_capacity(batch.len());
    for (i, inst) in batch.iter().enumerate() {
        if config.lambda > 0.0 && inst.has_target_span() {
            let mut rng = substream(config.seed, Stream::Sampler, step as u64, i as u64);
            sets.push(Some(sampler.make_contrastive_set(config.strategy, inst, &mut rng)?));
        } else {
            sets.push(None);
        }
    }
    let covered = sets.iter().filter(|s| s.is_some()).count();
    let bio_scale = (1.0 - config.lambda) / batch.len() as f64;
    let cl_scale = if covered > 0 { config.lambda / covered as f64 } else { 0.0 };

    let mut grads = state.query.zeros_like();
    let mut bio_sum = 0.0;
    let mut cl_sum = 0.0;
    for (i, (inst, set)) in batch.iter().zip(&sets).enumerate() {
        let anchor = encode_query(ctx.vocab, &inst.slot_type, &inst.utterance.words, max_len)?;
        let keys = set.as_ref().map(|s| encode_keys(&state.key.params, s)).transpose()?;
        let mut dropout = substream(config.seed, Stream::Dropout, step as u64, i as u64);
        let terms = anchor_loss(
            &state.query,
            &anchor,
            &inst.labels,
            keys.as_deref().map(|k| (k, ContrastiveSet::POSITIVE_INDEX)),
            config.tau,
            Some(&mut dropout as &mut dyn RngCore),
            Some(GradSink {
                grads: &mut grads,
                bio_scale,
                cl_scale,
            }),
        )?;
        bio_sum += terms.bio;
        cl_sum += terms.cl.unwrap_or(0.0);
    }
    let loss_bio = bio_sum / batch.len() as f64;
    let loss_cl = if covered > 0 { cl_sum / covered as f64 } else { 0.0 };
    let loss_total = config.lambda * loss_cl + (1.0 - config.lambda) * loss_bio;
    if !loss_total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {}", step + 1)));
    }

    let lr = config.lr_at(step);
    if !hooks.skip_optimizer {
        adamw_step(&mut state.query, &grads, &mut state.opt, lr, &config.adamw())?;
    }
    momentum_update(&mut state.key, &state.query.encoder)?;
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        loss_total,
        loss_bio,
        loss_cl,
        lr,
        coverage: covered as f64 / batch.len() as f64,
        dev_f1: None,
    })
}

/// Central-difference check of the combined loss gradient for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Minimum number of coordinates sampled (spread over every tensor).
    pub coordinates: usize,
    pub seed: u64,
    /// Test hook: scale one tensor's analytic gradient by 1.5.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            // with the fourth-order stencil, larger steps keep roundoff
            // well below truncation error
            epsilon: 1e-3,
            lambda: 0.5,
            tau: 0.07,
            coordinates: 256,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub coordinates: usize,
    pub tensors: usize,
}

/// Relative error with a floor on the denominator so that coordinates
/// with a (near-)zero gradient are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn grad_check(
    query: &TaggerParams,
    key: &EncoderParams,
    vocab: &Vocab,
    instance: &QueryInstance,
    set: Option<&ContrastiveSet>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let max_len = query.encoder.config.max_len;
    let anchor = encode_query(vocab, &instance.slot_type, &instance.utterance.words, max_len)?;
    let keys = set.map(|s| encode_keys(key, s)).transpose()?;
    let keys_arg = keys.as_deref().map(|k| (k, ContrastiveSet::POSITIVE_INDEX));
    let loss = |p: &TaggerParams| -> Result<f64> {
        let t = anchor_loss(p, &anchor, &instance.labels, keys_arg, opts.tau, None, None)?;
        Ok(combined_loss(t.cl, t.bio, opts.lambda))
    };

    let mut grads = query.zeros_like();
    anchor_loss(
        query,
        &anchor,
        &instance.labels,
        keys_arg,
        opts.tau,
        None,
        Some(GradSink {
            grads: &mut grads,
            bio_scale: 1.0 - opts.lambda,
            cl_scale: opts.lambda,
        }),
    )?;
    if opts.corrupt {
        if let Some(t) = grads.tensors_mut().into_iter().find(|t| t.name.ends_with("layer0.w1")) {
            t.data.iter_mut().for_each(|g| *g *= 1.5);
        }
    }

    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
    let n_tensors = analytic.len();
    // at least one coordinate per tensor, then fill up to the budget
    // round-robin among tensors with room left
    let mut quota: Vec<usize> = vec![1; n_tensors];
    let mut assigned = n_tensors;
    while assigned < opts.coordinates {
        let before = assigned;
        for (q, a) in quota.iter_mut().zip(&analytic) {
            if assigned < opts.coordinates && *q < a.len() {
                *q += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    let mut rng = substream(opts.seed, Stream::Sampler, u64::MAX, 0);
    let mut probe = query.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        coordinates: 0,
        tensors: n_tensors,
    };
    for (ti, (analytic_t, &take)) in analytic.iter().zip(&quota).enumerate() {
        let len = analytic_t.len();
        let mut picks: Vec<usize> = (0..len).collect();
        picks.shuffle(&mut rng);
        // prefer coordinates that actually influence the loss
        picks.sort_by_key(|&j| analytic_t[j] == 0.0);
        picks.truncate(take);
        for j in picks {
            let original = probe.tensors()[ti].data[j];
            let mut at = |offset: f64| -> Result<f64> {
                probe.tensors_mut()[ti].data[j] = original + offset;
                loss(&probe)
            };
            let h = opts.epsilon;
            // fourth-order central stencil
            let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            probe.tensors_mut()[ti].data[j] = original;
            let a = analytic_t[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = format!(
                        "{}[{j}] analytic {a:.6e} numeric {numeric:.6e}",
                        probe.tensors()[ti].name
                    );
                }
            }
        }
    }
    Ok(report)
}

/// Corpora and slot-type map for one training run.
pub struct TrainData<'a> {
    pub train: &'a Corpus,
    pub dev: &'a Corpus,
    /// Domain → slot types used when querying dev utterances.
    pub slot_types: &'a BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State with the best dev F1 (the initial state if no evaluation ran).
    pub best: ModelState,
    pub best_dev_f1: Option<f64>,
    pub last: ModelState,
    pub log: Vec<StepMetrics>,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.log)
    }
}

pub fn evaluate_state(state: &ModelState, vocab: &Vocab, corpus: &Corpus, slot_types: &BTreeMap<String, BTreeSet<String>>) -> Result<F1Report> {
    evaluate(&state.tagger(vocab), corpus.utterances(), slot_types)
}

/// Runs `max_steps` steps, evaluating dev span F1 every `eval_interval`
/// steps and at the last step, and keeps the best-scoring state.
pub fn train(
    config: &TrainConfig,
    encoder: EncoderConfig,
    vocab: &Vocab,
    data: &TrainData<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if vocab.len() != encoder.vocab_size {
        return Err(Error::Config(format!(
            "vocab has {} tokens but encoder vocab_size is {}",
            vocab.len(),
            encoder.vocab_size
        )));
    }
    let mut state = ModelState::new(encoder, config)?;
    let mut outcome = TrainOutcome {
        best: state.clone(),
        best_dev_f1: None,
        last: state.clone(),
        log: Vec::new(),
    };
    if config.max_steps == 0 {
        return Ok(outcome);
    }
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::Data("train and dev splits must be nonempty".into()));
    }
    let queries = data.train.queries();
    let ctx = TrainContext::new(vocab, data.train);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;

    for step in 1..=config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..queries.len()).collect();
                order.shuffle(&mut substream(config.seed, Stream::Data, epoch, 0));
                epoch += 1;
                cursor = 0;
            }
            batch.push(queries[order[cursor]].clone());
            cursor += 1;
        }
        let mut metrics = train_step(&batch, &mut state, config, &ctx, StepHooks::default())?;
        if step % config.eval_interval == 0 || step == config.max_steps {
            let f1 = evaluate_state(&state, vocab, data.dev, data.slot_types)?.average_f1();
            metrics.dev_f1 = Some(f1);
            log::info!(
                "step {step}: loss {:.4} (bio {:.4}, cl {:.4}) dev F1 {f1:.4}",
                metrics.loss_total,
                metrics.loss_bio,
                metrics.loss_cl
            );
            if outcome.best_dev_f1.map_or(true, |best| f1 > best) {
                outcome.best_dev_f1 = Some(f1);
                outcome.best = state.clone();
            }
            outcome.log.push(metrics);
            if config.early_stop_f1.is_some_and(|target| f1 >= target) {
                break;
            }
        } else {
            outcome.log.push(metrics);
        }
    }
    outcome.last = state;
    Ok(outcome)
}

/// Utterances of at most six words over three domains, used by the
/// micro-model gradient check.
pub const MICRO_CORPUS: &str = "\
# domain=music
play\tO
jazz\tB-genre
on\tO
spotify\tB-service

# domain=music
play\tO
blues\tB-genre
from\tO
1990\tB-year

# domain=weather
rain\tO
in\tO
new\tB-city
york\tI-city

# domain=weather
snow\tO
in\tO
paris\tB-city
tomorrow\tB-date

# domain=travel
fly\tO
to\tO
rome\tB-city
on\tO
monday\tB-date
";

pub fn micro_encoder_config(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        d_model: 8,
        n_layers: 1,
        n_heads: 1,
        d_ff: 16,
        max_len: 16,
        n_segments: 2,
        dropout_prob: 0.0,
    }
}

pub const GRAD_CHECK_LAMBDAS: [f64; 3] = [0.0, 0.5, 1.0];
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Gradient check of a fresh micro model for each λ in
/// [`GRAD_CHECK_LAMBDAS`], on an anchor with a Concat contrastive set so
/// both loss terms are exercised.
pub fn micro_grad_check(seed: u64, epsilon: f64, corrupt: bool) -> Result<Vec<(f64, GradCheckReport)>> {
    let corpus = crate::corpus::parse_corpus(MICRO_CORPUS, Path::new("<micro>"))?;
    let vocab = crate::tokenizer::build_vocab(&corpus, 1);
    let config = TrainConfig { seed, ..Default::default() };
    let state = ModelState::new(micro_encoder_config(vocab.len()), &config)?;
    let ctx = TrainContext::new(&vocab, &corpus);
    let queries = corpus.queries();
    let mut rng = substream(seed, Stream::Sampler, 0, 0);
    let with_span: Vec<&QueryInstance> = queries.iter().filter(|q| q.has_target_span()).collect();
    let instance = with_span[rng.gen_range(0..with_span.len())];
    let set = ctx
        .sampler(&config, state.query.encoder.config.max_len)
        .make_contrastive_set(Strategy::Concat, instance, &mut rng)?;
    GRAD_CHECK_LAMBDAS
        .iter()
        .map(|&lambda| {
            let opts = GradCheckOptions {
                epsilon,
                lambda,
                tau: config.tau,
                coordinates: 200,
                seed,
                corrupt,
            };
            grad_check(&state.query, &state.key.params, &vocab, instance, Some(&set), &opts).map(|r| (lambda, r))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{leave_one_out_split, SplitSpec};
    use crate::generator::{generate_synthetic_corpus, GeneratorConfig};
    use crate::tokenizer::build_vocab;

    fn tiny_corpus(n: usize) -> Corpus {
        let mut config = GeneratorConfig::default_desk();
        config.samples_per_domain = n;
        generate_synthetic_corpus(&config, 3).unwrap()
    }

    fn tiny_encoder(vocab: &Vocab) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 24,
            max_len: 40,
            ..Default::default()
        }
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            warmup_steps: 2,
            max_steps: 6,
            batch_size: 4,
            eval_interval: 3,
            momentum: 0.9,
            ..Default::default()
        }
    }

    #[test]
    fn micro_check_passes_for_every_lambda() {
        for seed in 0..3 {
            let reports = micro_grad_check(seed, GradCheckOptions::default().epsilon, false).unwrap();
            assert_eq!(reports.len(), 3);
            for (lambda, r) in reports {
                assert!(r.coordinates >= 200);
                assert!(r.max_rel_error < GRAD_CHECK_TOLERANCE, "seed {seed} lambda {lambda}: {r:?}");
            }
        }
        let corrupted = micro_grad_check(0, 1e-3, true).unwrap();
        assert!(corrupted.iter().all(|(_, r)| r.max_rel_error > GRAD_CHECK_TOLERANCE));
    }

    #[test]
    fn combined_loss_weights() {
        assert_eq!(combined_loss(Some(2.0), 4.0, 0.25), 0.5 + 3.0);
        assert_eq!(combined_loss(None, 4.0, 0.25), 3.0);
        assert_eq!(combined_loss(Some(2.0), 4.0, 1.0), 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lambda: 1.5, ..Default::default() },
            TrainConfig { warmup_steps: 10, max_steps: 5, ..Default::default() },
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { set_size: 1, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn substreams_are_distinct_and_stable() {
        let draw = |s: Stream, a, b| substream(7, s, a, b).gen::<u64>();
        assert_eq!(draw(Stream::Data, 0, 0), draw(Stream::Data, 0, 0));
        let all = [
            draw(Stream::Data, 0, 0),
            draw(Stream::Sampler, 0, 0),
            draw(Stream::Init, 0, 0),
            draw(Stream::Dropout, 0, 0),
            draw(Stream::Dropout, 1, 0),
            draw(Stream::Dropout, 0, 1),
        ];
        let unique: BTreeSet<u64> = all.iter().copied().collect();
        assert_eq!(unique.len(), all.len());
    }

    #[test]
    fn gradient_check_passes_and_catches_corruption() {
        let corpus = tiny_corpus(10);
        let vocab = build_vocab(&corpus, 1);
        let config = TrainConfig { seed: 1, ..quick_config() };
        let mut state = ModelState::new(tiny_encoder(&vocab), &config).unwrap();
        // perturb the key encoder so keys differ from the query side
        let noise = TaggerParams::init(state.query.encoder.config, 99, 98).unwrap();
        state.key.params.add_scaled(&noise.encoder, 1.0).unwrap();
        let ctx = TrainContext::new(&vocab, &corpus);
        let inst = corpus.queries().into_iter().find(|q| q.has_target_span()).unwrap();
        let mut rng = substream(1, Stream::Sampler, 0, 0);
        let set = ctx.sampler(&config, 40).make_contrastive_set(Strategy::Concat, &inst, &mut rng).unwrap();
        for lambda in [0.0, 0.5, 1.0] {
            let opts = GradCheckOptions { lambda, coordinates: 200, ..Default::default() };
            let r = grad_check(&state.query, &state.key.params, &vocab, &inst, Some(&set), &opts).unwrap();
            assert!(r.coordinates >= 200);
            assert_eq!(r.tensors, state.query.tensors().len());
            assert!(r.max_rel_error < 1e-4, "lambda {lambda}: {r:?}");
        }
        let opts = GradCheckOptions { corrupt: true, ..Default::default() };
        let r = grad_check(&state.query, &state.key.params, &vocab, &inst, Some(&set), &opts).unwrap();
        assert!(r.max_rel_error > 0.1, "{r:?}");
    }

    #[test]
    fn skipped_optimizer_moves_only_the_key() {
        let corpus = tiny_corpus(10);
        let vocab = build_vocab(&corpus, 1);
        let config = quick_config();
        let mut state = ModelState::new(tiny_encoder(&vocab), &config).unwrap();
        let noise = TaggerParams::init(state.query.encoder.config, 5, 6).unwrap();
        state.key.params.add_scaled(&noise.encoder, 1.0).unwrap();
        let before = state.clone();
        let ctx = TrainContext::new(&vocab, &corpus);
        let batch: Vec<_> = corpus.queries().into_iter().take(4).collect();
        let hooks = StepHooks { skip_optimizer: true };
        train_step(&batch, &mut state, &config, &ctx, hooks).unwrap();
        assert_eq!(state.query, before.query);
        let mut expected = before.key.params.clone();
        expected.momentum_update_from(&before.query.encoder, 0.9).unwrap();
        assert_eq!(state.key.params, expected);
    }

    #[test]
    fn lambda_zero_builds_no_sets() {
        let corpus = tiny_corpus(10);
        let vocab = build_vocab(&corpus, 1);
        let config = TrainConfig { lambda: 0.0, ..quick_config() };
        let mut state = ModelState::new(tiny_encoder(&vocab), &config).unwrap();
        let ctx = TrainContext::new(&vocab, &corpus);
        let batch: Vec<_> = corpus.queries().into_iter().take(4).collect();
        let m = train_step(&batch, &mut state, &config, &ctx, StepHooks::default()).unwrap();
        assert_eq!((m.coverage, m.loss_cl), (0.0, 0.0));
        assert_eq!(m.loss_total, m.loss_bio);
    }

    fn run(seed: u64) -> TrainOutcome {
        run_with(TrainConfig { seed, ..quick_config() })
    }

    fn run_with(config: TrainConfig) -> TrainOutcome {
        let seed = config.seed;
        let corpus = tiny_corpus(12);
        let splits = leave_one_out_split(
            &corpus,
            &SplitSpec { dev_size: 4, ..SplitSpec::zero_shot("weather", seed) },
        )
        .unwrap();
        let vocab = build_vocab(&splits.train, 1);
        let data = TrainData {
            train: &splits.train,
            dev: &splits.dev,
            slot_types: corpus.domain_slot_types(),
        };
        train(&config, tiny_encoder(&vocab), &vocab, &data).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_logs_every_step() {
        let a = run(4);
        let b = run(4);
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(a.last.to_weights().to_bytes(), b.last.to_weights().to_bytes());
        assert_eq!(a.log.len(), 6);
        assert_eq!(a.log.iter().filter(|m| m.dev_f1.is_some()).count(), 2);
        assert!(a.metrics_csv().starts_with(METRICS_HEADER));
        assert_ne!(a.last.to_weights().to_bytes(), run(5).last.to_weights().to_bytes());
    }

    #[test]
    fn lambda_zero_ignores_sampler_settings() {
        let base = TrainConfig { lambda: 0.0, ..quick_config() };
        let reference = run_with(base.clone());
        for variant in [
            TrainConfig { strategy: Strategy::Concat, ..base.clone() },
            TrainConfig { tau: 0.5, ..base.clone() },
        ] {
            assert_eq!(run_with(variant).metrics_csv(), reference.metrics_csv());
        }
    }

    #[test]
    fn logged_losses_satisfy_the_mixture_identity() {
        let outcome = run(3);
        for m in &outcome.log {
            assert!(m.loss_bio >= 0.0);
            let replay = 0.5 * m.loss_cl + 0.5 * m.loss_bio;
            assert!((replay - m.loss_total).abs() <= 1e-12 * m.loss_total.abs().max(1.0));
        }
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let outcome = run_with(TrainConfig { max_steps: 0, warmup_steps: 0, ..quick_config() });
        assert!(outcome.log.is_empty());
        assert_eq!(outcome.best.step, 0);
        assert_eq!(outcome.metrics_csv(), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let outcome = run(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");
        outcome.last.save(&path).unwrap();
        let loaded = ModelState::load(&path).unwrap();
        assert_eq!(loaded, outcome.last);
        assert_eq!(loaded.step, 6);
    }
}
