//! Command implementations and the command-line surface.
//!
//! Each `cmd_*` function is usable in-process; `main` only parses flags,
//! dispatches and maps errors to exit codes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::contrast::{ContrastiveSet, Strategy};
use crate::corpus::{leave_one_out_split, load_corpus, save_corpus, Corpus, Splits};
use crate::error::{Error, Result};
use crate::eval::{evaluate, F1Report};
use crate::generator::{generate_synthetic_corpus, GeneratorConfig};
use crate::kv::KeyValues;
use crate::model::NeuralTagger;
use crate::tokenizer::{build_vocab_for, Vocab};
use crate::trainer::{
    micro_grad_check, substream, train, GradCheckOptions, GradCheckReport, ModelState, Stream, TrainContext, TrainData,
    TrainOutcome, GRAD_CHECK_TOLERANCE,
};

pub const CONFIG_ECHO: &str = "config.conf";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TEST_REPORT: &str = "test_report.csv";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Corpus statistics printed by `gen-data`.
pub fn corpus_summary(corpus: &Corpus) -> String {
    let mut out = String::new();
    for domain in corpus.domains() {
        let types = corpus.slot_types_of(domain);
        let _ = writeln!(
            out,
            "{domain}: {} utterances, slot types: {}",
            corpus.domain_samples(domain).len(),
            types.into_iter().collect::<Vec<_>>().join(" ")
        );
    }
    let mut owners: BTreeMap<&str, usize> = BTreeMap::new();
    for types in corpus.domain_slot_types().values() {
        for t in types {
            *owners.entry(t).or_default() += 1;
        }
    }
    let shared: Vec<&str> = owners.iter().filter(|(_, &n)| n > 1).map(|(t, _)| *t).collect();
    let _ = writeln!(out, "shared slot types: {}", shared.join(" "));
    out
}

pub fn cmd_gen_data(config: &Path, seed: u64, out: &Path) -> Result<Corpus> {
    if !config.exists() {
        return Err(Error::Config(format!("generator config {} does not exist", config.display())));
    }
    let config = GeneratorConfig::from_kv(&KeyValues::load(config)?)?;
    let corpus = generate_synthetic_corpus(&config, seed)?;
    save_corpus(&corpus, out)?;
    Ok(corpus)
}

/// Loaded corpus, its split and the vocabulary built from the training part.
pub struct Prepared {
    pub corpus: Corpus,
    pub splits: Splits,
    pub vocab: Vocab,
}

pub fn prepare(config: &RunConfig, corpus: Corpus) -> Result<Prepared> {
    let splits = leave_one_out_split(&corpus, &config.split_spec()?)?;
    // slot-type names of every domain are part of the task description,
    // so the target's types are in the vocabulary even in zero-shot runs
    let vocab = build_vocab_for(&splits.train, config.min_freq, &corpus.all_slot_types());
    Ok(Prepared { corpus, splits, vocab })
}

pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    pub vocab: Vocab,
    pub test_report: F1Report,
}

/// Trains on a prepared split and scores the best state on the test part.
pub fn train_prepared(config: &RunConfig, prepared: &Prepared) -> Result<TrainArtifacts> {
    config.validate()?;
    let data = TrainData {
        train: &prepared.splits.train,
        dev: &prepared.splits.dev,
        slot_types: prepared.corpus.domain_slot_types(),
    };
    let encoder = config.encoder_for(prepared.vocab.len());
    let outcome = train(&config.train, encoder, &prepared.vocab, &data)?;
    let test_report = evaluate(
        &outcome.best.tagger(&prepared.vocab),
        prepared.splits.test.utterances(),
        prepared.corpus.domain_slot_types(),
    )?;
    Ok(TrainArtifacts {
        outcome,
        vocab: prepared.vocab.clone(),
        test_report,
    })
}

/// Full training run. Writes the resolved config, vocabulary, best and last
/// checkpoints, metrics CSV and test report into `out_dir`.
pub fn cmd_train(config: &RunConfig) -> Result<TrainArtifacts> {
    config.validate()?;
    config.target()?;
    let corpus = load_corpus(config.corpus_path()?)?;
    let prepared = prepare(config, corpus)?;
    let artifacts = train_prepared(config, &prepared)?;
    let dir = &config.out_dir;
    write_file(&dir.join(CONFIG_ECHO), config.to_text())?;
    write_file(&dir.join(VOCAB_FILE), artifacts.vocab.to_text())?;
    write_file(&dir.join(BEST_CHECKPOINT), artifacts.outcome.best.to_weights().to_bytes())?;
    write_file(&dir.join(LAST_CHECKPOINT), artifacts.outcome.last.to_weights().to_bytes())?;
    write_file(&dir.join(METRICS_FILE), artifacts.outcome.metrics_csv())?;
    write_file(&dir.join(TEST_REPORT), artifacts.test_report.to_csv())?;
    Ok(artifacts)
}

fn load_model(checkpoint: &Path, vocab: &Path) -> Result<(ModelState, Vocab)> {
    let state = ModelState::load(checkpoint)?;
    let vocab = Vocab::load(vocab)?;
    let expected = state.query.encoder.config.vocab_size;
    if vocab.len() != expected {
        return Err(Error::Config(format!(
            "checkpoint {} expects {expected} vocabulary entries but {} has {}",
            checkpoint.display(),
            "the vocabulary file",
            vocab.len()
        )));
    }
    Ok((state, vocab))
}

/// Scores a checkpoint on the test part of the configured split.
pub fn cmd_eval(checkpoint: &Path, vocab: &Path, config: &RunConfig) -> Result<F1Report> {
    let (state, vocab) = load_model(checkpoint, vocab)?;
    let corpus = load_corpus(config.corpus_path()?)?;
    let splits = leave_one_out_split(&corpus, &config.split_spec()?)?;
    evaluate(&state.tagger(&vocab), splits.test.utterances(), corpus.domain_slot_types())
}

/// Tags each line of `text` (whitespace-split) for `slot_type`, one
/// `word<TAB>label` per word and a blank line per input line.
pub fn cmd_predict(checkpoint: &Path, vocab: &Path, slot_type: &str, text: &str) -> Result<String> {
    use crate::eval::SlotTagger;
    let (state, vocab) = load_model(checkpoint, vocab)?;
    let tagger = NeuralTagger {
        params: &state.query,
        vocab: &vocab,
    };
    let mut out = String::new();
    for line in text.lines() {
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            continue;
        }
        let labels = tagger.predict(slot_type, &words)?;
        for (w, l) in words.iter().zip(labels) {
            let tag = match l {
                crate::corpus::Label::O => "O".to_string(),
                other => format!("{other}-{slot_type}"),
            };
            let _ = writeln!(out, "{w}\t{tag}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub struct GradCheckOutcome {
    pub reports: Vec<(f64, GradCheckReport)>,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|(_, r)| r.max_rel_error < GRAD_CHECK_TOLERANCE)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (lambda, r) in &self.reports {
            let verdict = if r.max_rel_error < GRAD_CHECK_TOLERANCE { "PASS" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{verdict} lambda={lambda} max_rel_error={:.3e} coordinates={} tensors={} worst={}",
                r.max_rel_error, r.coordinates, r.tensors, r.worst
            );
        }
        out
    }
}

pub fn cmd_grad_check(seed: u64, epsilon: f64, corrupt: bool) -> Result<GradCheckOutcome> {
    Ok(GradCheckOutcome {
        reports: micro_grad_check(seed, epsilon, corrupt)?,
    })
}

/// Builds `count` contrastive sets from queries with a target span and
/// renders them as corpus blocks; roles are encoded in the domain name
/// (`<domain>.anchor`, `.positive`, `.negative<i>`).
pub fn cmd_make_samples(
    corpus: &Corpus,
    strategy: Strategy,
    set_size: usize,
    templatize_all: bool,
    count: usize,
    seed: u64,
) -> Result<String> {
    let vocab = build_vocab_for(corpus, 1, &corpus.all_slot_types());
    let ctx = TrainContext::new(&vocab, corpus);
    let train = crate::trainer::TrainConfig {
        set_size,
        templatize_all,
        ..Default::default()
    };
    let sampler = ctx.sampler(&train, usize::MAX / 2);
    let queries: Vec<_> = corpus.queries().into_iter().filter(|q| q.has_target_span()).collect();
    if queries.is_empty() {
        return Err(Error::Data("corpus has no slot spans to build samples from".into()));
    }
    let mut out = String::new();
    let mut rng = substream(seed, Stream::Sampler, 0, 0);
    use rand::Rng;
    for i in 0..count {
        let query = &queries[rng.gen_range(0..queries.len())];
        let set = sampler.make_contrastive_set(strategy, query, &mut rng)?;
        write_set(&mut out, i, &query.utterance, &set);
    }
    Ok(out)
}

fn write_set(out: &mut String, index: usize, anchor: &crate::corpus::Utterance, set: &ContrastiveSet) {
    if index > 0 {
        out.push('\n');
    }
    let domain = anchor.domain.as_str();
    let mut blocks = vec![(format!("{domain}.anchor"), anchor.clone())];
    blocks.push((format!("{domain}.positive"), set.positive.as_utterance(domain)));
    for (j, n) in set.negatives.iter().enumerate() {
        blocks.push((format!("{domain}.negative{}", j + 1), n.as_utterance(domain)));
    }
    for (j, (name, mut u)) in blocks.into_iter().enumerate() {
        if j > 0 {
            out.push('\n');
        }
        u.domain = name;
        crate::corpus::write_block(out, &u);
    }
}

/// One cell of an ablation sweep. `strategy` is `None` for λ = 0, where
/// the sampler is never used.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub lambda: f64,
    pub strategy: Option<Strategy>,
    pub target: String,
    pub seed: u64,
}

impl AblationCell {
    fn key(&self) -> String {
        format!(
            "{},{},{},{}",
            self.lambda,
            self.strategy.map(|s| s.to_string()).unwrap_or_else(|| "n/a".into()),
            self.target,
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub dev_f1: f64,
    pub test_f1: f64,
}

pub const ABLATION_HEADER: &str = "lambda,strategy,target_domain,seed,dev_f1,test_f1";

impl AblationRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{}", self.cell.key(), self.dev_f1, self.test_f1)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::Data(format!("malformed ablation row {line:?}"));
        if fields.len() != 6 {
            return Err(bad());
        }
        let strategy = match fields[1] {
            "n/a" => None,
            s => Some(s.parse().map_err(|_| bad())?),
        };
        Ok(AblationRow {
            cell: AblationCell {
                lambda: fields[0].parse().map_err(|_| bad())?,
                strategy,
                target: fields[2].to_string(),
                seed: fields[3].parse().map_err(|_| bad())?,
            },
            dev_f1: fields[4].parse().map_err(|_| bad())?,
            test_f1: fields[5].parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationDims {
    pub lambdas: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub targets: Vec<String>,
    pub seeds: Vec<u64>,
}

/// The sweep's cells in output order. λ = 0 cells carry no strategy, so
/// they appear once per (target, seed).
pub fn ablation_cells(dims: &AblationDims) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &lambda in &dims.lambdas {
        let strategies: Vec<Option<Strategy>> = if lambda == 0.0 {
            vec![None]
        } else {
            dims.strategies.iter().copied().map(Some).collect()
        };
        for strategy in strategies {
            for target in &dims.targets {
                for &seed in &dims.seeds {
                    cells.push(AblationCell {
                        lambda,
                        strategy,
                        target: target.clone(),
                        seed,
                    });
                }
            }
        }
    }
    cells
}

fn read_rows(path: &Path) -> Result<Vec<AblationRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some(h) if h == ABLATION_HEADER => {}
        Some(h) => return Err(Error::Data(format!("{}: unexpected header {h:?}", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(AblationRow::parse).collect()
}

/// Runs every missing cell of the sweep, appending rows to `out` as they
/// finish so an interrupted sweep resumes where it stopped, then rewrites
/// `out` with all rows in cell order.
pub fn cmd_ablate(base: &RunConfig, dims: &AblationDims, out: &Path) -> Result<Vec<AblationRow>> {
    base.validate()?;
    for &lambda in &dims.lambdas {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
        }
    }
    let cells = ablation_cells(dims);
    let mut done: BTreeMap<String, AblationRow> =
        read_rows(out)?.into_iter().map(|r| (r.cell.key(), r)).collect();
    let corpus = load_corpus(base.corpus_path()?)?;
    let known: BTreeSet<&str> = corpus.domains().collect();
    if let Some(t) = dims.targets.iter().find(|t| !known.contains(t.as_str())) {
        return Err(Error::Data(format!(
            "unknown target domain {t:?}; known domains: {}",
            known.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    if !out.exists() {
        write_file(out, format!("{ABLATION_HEADER}\n"))?;
    }
    for cell in &cells {
        if done.contains_key(&cell.key()) {
            continue;
        }
        let mut config = base.clone();
        config.train.lambda = cell.lambda;
        config.train.seed = cell.seed;
        if let Some(s) = cell.strategy {
            config.train.strategy = s;
        }
        config.target_domain = Some(cell.target.clone());
        let prepared = prepare(&config, corpus.clone())?;
        let artifacts = train_prepared(&config, &prepared)?;
        let row = AblationRow {
            cell: cell.clone(),
            dev_f1: artifacts.outcome.best_dev_f1.unwrap_or(0.0),
            test_f1: artifacts.test_report.average_f1(),
        };
        log::info!("ablation cell {} -> test F1 {:.4}", cell.key(), row.test_f1);
        let mut file = fs::OpenOptions::new()
            .append(true)
            .open(out)
            .map_err(|e| Error::io(format!("appending to {}", out.display()), e))?;
        writeln!(file, "{}", row.to_csv()).map_err(|e| Error::io(format!("appending to {}", out.display()), e))?;
        done.insert(cell.key(), row);
    }
    let rows: Vec<AblationRow> = cells.iter().map(|c| done[&c.key()].clone()).collect();
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    write_file(out, text)?;
    Ok(rows)
}

#[derive(Debug, Parser)]
#[command(name = "slotmoco", version, about = "Momentum-contrastive zero-shot slot filling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Run-config flags shared by commands that train or split a corpus.
#[derive(Debug, Args, Default)]
pub struct RunFlags {
    /// `key = value` config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub target_domain: Option<String>,
    #[arg(long)]
    pub few_shot: Option<usize>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Any other config key, as KEY=VALUE (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunFlags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        push("corpus", self.corpus.as_ref().map(|p| p.display().to_string()));
        push("target_domain", self.target_domain.clone());
        push("few_shot", self.few_shot.map(|v| v.to_string()));
        push("lambda", self.lambda.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("max_steps", self.max_steps.map(|v| v.to_string()));
        push("strategy", self.strategy.clone());
        push("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        if let Some(path) = &self.config {
            if !path.exists() {
                return Err(Error::Config(format!("config file {} does not exist", path.display())));
            }
        }
        let config = RunConfig::resolve(self.config.as_deref(), &overrides)?;
        config.validate()?;
        Ok(config)
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad {what} {s:?}"))))
        .collect()
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain corpus.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a leave-one-domain-out split.
    Train(RunFlags),
    /// Score a checkpoint on the test part of a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Write the CSV report here as well as printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Tag utterances (one per line, from --text or stdin) for a slot type.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        slot_type: String,
        #[arg(long)]
        text: Option<String>,
    },
    /// Sweep λ, sampling strategy, target domain and seed.
    Ablate {
        #[command(flatten)]
        run: RunFlags,
        /// Non-zero λ to compare against λ = 0 (defaults to the config's).
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long, default_value = "template,synthetic,concat,random")]
        strategies: String,
        /// Comma-separated targets (defaults to every domain).
        #[arg(long)]
        targets: Option<String>,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the combined-loss gradient.
    GradCheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = GradCheckOptions::default().epsilon)]
        epsilon: f64,
        /// Corrupt one analytic gradient (the check must then fail).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Print constructed contrastive sets as corpus blocks.
    MakeSamples {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "random")]
        strategy: String,
        #[arg(long, default_value_t = 3)]
        set_size: usize,
        #[arg(long)]
        templatize_all: bool,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn env_seed() -> Result<u64> {
    match std::env::var(crate::config::SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{} = {v:?} is not an integer", crate::config::SEED_ENV))),
        Err(_) => Ok(0),
    }
}

/// Runs a parsed command, writing its primary output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    let emit = |stdout: &mut dyn std::io::Write, text: &str| {
        stdout
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("writing to stdout", e))
    };
    match cli.command {
        Command::GenData { config, seed, out } => {
            let seed = seed.map_or_else(env_seed, Ok)?;
            let corpus = cmd_gen_data(&config, seed, &out)?;
            emit(stdout, &corpus_summary(&corpus))
        }
        Command::Train(flags) => {
            let config = flags.resolve()?;
            let artifacts = cmd_train(&config)?;
            let best = artifacts.outcome.best_dev_f1.map(|f| format!("{f:.4}")).unwrap_or_else(|| "n/a".into());
            let text = format!(
                "best dev F1 {best}\ntest report ({}):\n{}",
                config.out_dir.join(TEST_REPORT).display(),
                artifacts.test_report.to_table()
            );
            emit(stdout, &text)
        }
        Command::Eval { checkpoint, vocab, out, run } => {
            let config = run.resolve()?;
            let report = cmd_eval(&checkpoint, &vocab, &config)?;
            if let Some(out) = out {
                write_file(&out, report.to_csv())?;
            }
            emit(stdout, &report.to_table())
        }
        Command::Predict {
            checkpoint,
            vocab,
            slot_type,
            text,
        } => {
            let text = match text {
                Some(t) => t,
                None => std::io::read_to_string(std::io::stdin()).map_err(|e| Error::io("reading stdin", e))?,
            };
            emit(stdout, &cmd_predict(&checkpoint, &vocab, &slot_type, &text)?)
        }
        Command::Ablate {
            run,
            lambdas,
            strategies,
            targets,
            seeds,
            out,
        } => {
            let base = run.resolve()?;
            let mut lambda_values = vec![0.0];
            match lambdas {
                Some(raw) => lambda_values.extend(parse_list::<f64>(&raw, "lambda")?.into_iter().filter(|&l| l != 0.0)),
                None if base.train.lambda != 0.0 => lambda_values.push(base.train.lambda),
                None => {}
            }
            let targets = match targets {
                Some(raw) => parse_list(&raw, "target domain")?,
                None => load_corpus(base.corpus_path()?)?.domains().map(str::to_string).collect(),
            };
            let dims = AblationDims {
                lambdas: lambda_values,
                strategies: parse_list(&strategies, "strategy")?,
                targets,
                seeds: parse_list(&seeds, "seed")?,
            };
            let rows = cmd_ablate(&base, &dims, &out)?;
            let mut text = format!("{ABLATION_HEADER}\n");
            for r in rows {
                text.push_str(&r.to_csv());
                text.push('\n');
            }
            emit(stdout, &text)
        }
        Command::GradCheck { seed, epsilon, corrupt } => {
            let seed = seed.map_or_else(env_seed, Ok)?;
            let outcome = cmd_grad_check(seed, epsilon, corrupt)?;
            emit(stdout, &outcome.summary())?;
            if outcome.passed() {
                Ok(())
            } else {
                Err(Error::Numeric("gradient check failed".into()))
            }
        }
        Command::MakeSamples {
            corpus,
            strategy,
            set_size,
            templatize_all,
            count,
            seed,
        } => {
            let seed = seed.map_or_else(env_seed, Ok)?;
            let strategy: Strategy = strategy
                .parse()
                .map_err(|_| Error::Config(format!("unknown strategy {strategy:?}")))?;
            let corpus = load_corpus(&corpus)?;
            emit(stdout, &cmd_make_samples(&corpus, strategy, set_size, templatize_all, count, seed)?)
        }
    }
}
