//! Training, inference and evaluation commands behind the `advsum` binary.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};

use advsum::checkpoint::{config_hash, Checkpoint};
use advsum::config::TrainingConfig;
use advsum::corpus::{
    decode_ids, encode_pairs, load_dataset, shuffled_batches, tokenize, EncodedExample, EncodedSource, TokenPair,
    Vocabulary,
};
use advsum::discriminator::{train_discriminator, DiscTrainConfig, Discriminator, DiscriminatorConfig};
use advsum::generator::{Generator, GeneratorConfig};
use advsum::policy::{derive_seed, stream_rng};
use advsum::rl::{adversarial_train, sample_negatives, AdversarialConfig, AdversarialModels, BaselineState, RoundMetrics};
use advsum::rollout::RolloutPolicy;
use advsum::rouge::{evaluate_corpus, RougeReport};
use advsum::tensor::{clip_grad_norm, AdamState};

/// Command-line values that override the configuration file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Length of the phase being run: MLE epochs, discriminator epochs or
    /// adversarial rounds.
    pub epochs: Option<usize>,
    pub lambda: Option<f64>,
    pub rollouts: Option<usize>,
    /// Generator checkpoint path.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    PretrainGenerator,
    PretrainDiscriminator,
    Adversarial,
    Inference,
}

pub fn apply_overrides(config: &mut TrainingConfig, phase: Phase, o: &Overrides) -> Result<()> {
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(lambda) = o.lambda {
        config.lambda = lambda;
    }
    if let Some(rollouts) = o.rollouts {
        config.rollouts = rollouts;
    }
    if let Some(path) = &o.checkpoint {
        config.generator_checkpoint = Some(path.clone());
    }
    if let Some(epochs) = o.epochs {
        match phase {
            Phase::PretrainGenerator => config.pretrain_epochs = epochs,
            Phase::PretrainDiscriminator => config.disc_epochs = epochs,
            Phase::Adversarial => config.adv_rounds = epochs,
            Phase::Inference => {}
        }
    }
    config.validate()?;
    Ok(())
}

/// Longest decoded output: the target limit plus `EOS`.
pub fn max_decode_len(config: &TrainingConfig) -> usize {
    config.target_len + 1
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .with_context(|| format!("`{key}` is not set in the configuration"))
}

/// Vocabulary file kept beside the generator checkpoint.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, "vocab")
}

/// Per-epoch loss trace kept beside a checkpoint.
pub fn loss_trace_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, "loss")
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn load_pairs(path: &Path) -> Result<Vec<TokenPair>> {
    load_dataset(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

fn append_line_io(path: &Path, line: &str) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    append_line_io(path, line).with_context(|| format!("cannot append to {}", path.display()))
}

fn generator_hash(c: &GeneratorConfig) -> String {
    config_hash(&format!(
        "generator vocab_size={} emb_dim={} hidden_dim={}",
        c.vocab_size, c.emb_dim, c.hidden_dim
    ))
}

fn discriminator_hash(c: &DiscriminatorConfig) -> String {
    config_hash(&format!(
        "discriminator vocab_size={} emb_dim={} windows={:?} kernels={} seq_len={}",
        c.vocab_size, c.emb_dim, c.windows, c.kernels_per_window, c.seq_len
    ))
}

/// A generator checkpoint with its training state.
pub struct GeneratorState {
    pub generator: Generator,
    /// Adam state of MLE pretraining.
    pub mle_adam: Option<AdamState>,
    /// Adam state of the adversarial phase.
    pub rl_adam: Option<AdamState>,
    pub epochs_done: usize,
    pub rounds_done: usize,
    pub baseline: BaselineState,
}

pub fn save_generator(path: &Path, state: &GeneratorState) -> Result<()> {
    let g = &state.generator;
    let c = g.config();
    let mut ckpt = Checkpoint::new(generator_hash(&c));
    ckpt.set_meta("vocab_size", c.vocab_size);
    ckpt.set_meta("emb_dim", c.emb_dim);
    ckpt.set_meta("hidden_dim", c.hidden_dim);
    ckpt.set_meta("epoch", state.epochs_done);
    ckpt.set_meta("adv_rounds", state.rounds_done);
    ckpt.set_meta("baseline", state.baseline.value);
    ckpt.set_meta("baseline_updates", state.baseline.updates);
    ckpt.add_params("gen.", g.params());
    if let Some(adam) = &state.mle_adam {
        ckpt.add_adam("adam.", g.params(), adam);
    }
    if let Some(adam) = &state.rl_adam {
        ckpt.add_adam("rl_adam.", g.params(), adam);
    }
    ckpt.save(path)
        .with_context(|| format!("cannot write checkpoint {}", path.display()))
}

pub fn load_generator(path: &Path, config: &TrainingConfig) -> Result<GeneratorState> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("cannot load generator checkpoint {}", path.display()))?;
    let gc = GeneratorConfig {
        vocab_size: ckpt.meta_parse("vocab_size")?,
        emb_dim: ckpt.meta_parse("emb_dim")?,
        hidden_dim: ckpt.meta_parse("hidden_dim")?,
    };
    ensure!(ckpt.config_hash == generator_hash(&gc), "{}: configuration hash mismatch", path.display());
    ensure!(
        gc.emb_dim == config.emb_dim && gc.hidden_dim == config.hidden_dim,
        "{} was trained with emb_dim {} and hidden_dim {}, the configuration asks for {} and {}",
        path.display(),
        gc.emb_dim,
        gc.hidden_dim,
        config.emb_dim,
        config.hidden_dim
    );
    let generator = Generator::from_params(gc, ckpt.params("gen."))?;
    Ok(GeneratorState {
        mle_adam: ckpt.adam("adam.", generator.params(), config.adam())?,
        rl_adam: ckpt.adam("rl_adam.", generator.params(), config.adam())?,
        epochs_done: ckpt.meta_parse("epoch")?,
        rounds_done: ckpt.meta_parse("adv_rounds")?,
        baseline: BaselineState {
            value: ckpt.meta_parse("baseline")?,
            updates: ckpt.meta_parse("baseline_updates")?,
        },
        generator,
    })
}

pub fn save_discriminator(path: &Path, disc: &Discriminator, adam: &AdamState) -> Result<()> {
    let c = disc.config();
    let mut ckpt = Checkpoint::new(discriminator_hash(c));
    ckpt.set_meta("vocab_size", c.vocab_size);
    ckpt.add_params("disc.", disc.params());
    ckpt.add_adam("adam.", disc.params(), adam);
    ckpt.save(path)
        .with_context(|| format!("cannot write checkpoint {}", path.display()))
}

pub fn load_discriminator(path: &Path, config: &TrainingConfig) -> Result<(Discriminator, AdamState)> {
    let ckpt =
        Checkpoint::load(path).with_context(|| format!("cannot load discriminator checkpoint {}", path.display()))?;
    let dc = config.discriminator(ckpt.meta_parse("vocab_size")?);
    ensure!(
        ckpt.config_hash == discriminator_hash(&dc),
        "{} does not match the discriminator configuration",
        path.display()
    );
    let disc = Discriminator::from_params(dc, ckpt.params("disc."))?;
    let adam = ckpt
        .adam("adam.", disc.params(), config.adam())?
        .unwrap_or_else(|| AdamState::new(disc.params(), config.adam()));
    Ok((disc, adam))
}

/// Loads the vocabulary saved beside the generator checkpoint.
pub fn load_vocab(config: &TrainingConfig) -> Result<Vocabulary> {
    let ckpt = required(&config.generator_checkpoint, "generator_checkpoint")?;
    let path = vocab_path(ckpt);
    Vocabulary::load(&path, config.vocab_size).with_context(|| format!("cannot load vocabulary {}", path.display()))
}

fn load_examples(path: &Path, vocab: &Vocabulary, config: &TrainingConfig) -> Result<Vec<EncodedExample>> {
    let pairs = load_pairs(path)?;
    Ok(encode_pairs(&pairs, vocab, config.limits())?)
}

/// Maximum-likelihood pretraining. Returns the loss of every epoch run.
///
/// A checkpoint is written after every epoch. With `resume`, training
/// continues from the checkpoint's epoch count, restoring the optimizer
/// state, so an interrupted run ends exactly where an uninterrupted one would.
pub fn pretrain_generator(config: &TrainingConfig, resume: bool) -> Result<Vec<f64>> {
    let ckpt_path = required(&config.generator_checkpoint, "generator_checkpoint")?;
    let train_path = required(&config.train_path, "train_path")?;
    let pairs = load_pairs(train_path)?;
    ensure!(!pairs.is_empty(), "training set {} is empty", train_path.display());

    let (vocab, mut state) = if resume && ckpt_path.exists() {
        let vocab = load_vocab(config)?;
        let state = load_generator(ckpt_path, config)?;
        log::info!("resuming after epoch {}", state.epochs_done);
        (vocab, state)
    } else {
        let limits = config.limits();
        let stream = pairs.iter().flat_map(|(s, t)| {
            s.iter()
                .take(limits.source)
                .chain(t.iter().take(limits.target))
                .map(String::as_str)
        });
        let vocab = Vocabulary::build(stream, config.vocab_size)?;
        vocab.save(&vocab_path(ckpt_path))?;
        let gc = GeneratorConfig {
            vocab_size: vocab.len(),
            emb_dim: config.emb_dim,
            hidden_dim: config.hidden_dim,
        };
        let generator = Generator::new(gc, &mut stream_rng(config.seed, 0))?;
        let state = GeneratorState {
            mle_adam: None,
            rl_adam: None,
            epochs_done: 0,
            rounds_done: 0,
            baseline: BaselineState::default(),
            generator,
        };
        let trace = loss_trace_path(ckpt_path);
        if trace.exists() {
            std::fs::remove_file(&trace)?;
        }
        (vocab, state)
    };
    let examples = encode_pairs(&pairs, &vocab, config.limits())?;
    let mut adam = state
        .mle_adam
        .take()
        .unwrap_or_else(|| AdamState::new(state.generator.params(), config.adam()));

    let mut losses = Vec::new();
    for epoch in state.epochs_done..config.pretrain_epochs {
        let started = Instant::now();
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for batch in shuffled_batches(&examples, config.batch_size, derive_seed(config.seed, &[1, epoch as u64])) {
            let (loss, mut grads) = state.generator.mle_loss_and_grad(&batch)?;
            clip_grad_norm(&mut grads, config.clip_norm)?;
            adam.step(state.generator.params_mut(), &grads)?;
            nll += loss * batch.num_target_tokens() as f64;
            tokens += batch.num_target_tokens();
        }
        let loss = nll / tokens as f64;
        losses.push(loss);
        state.epochs_done = epoch + 1;
        state.mle_adam = Some(adam.clone());
        save_generator(ckpt_path, &state)?;
        let line = format!("{epoch},{loss},{}", started.elapsed().as_millis());
        append_line(&loss_trace_path(ckpt_path), &line)?;
        log::info!("pretrain epoch {epoch}: loss {loss:.5}");
    }
    if losses.is_empty() {
        state.mle_adam = Some(adam);
        save_generator(ckpt_path, &state)?;
    }
    Ok(losses)
}

/// Trains the discriminator on references against pretrained-generator
/// samples. Returns the loss of every epoch.
pub fn pretrain_discriminator(config: &TrainingConfig) -> Result<Vec<f64>> {
    let gen_path = required(&config.generator_checkpoint, "generator_checkpoint")?;
    let disc_path = required(&config.discriminator_checkpoint, "discriminator_checkpoint")?;
    let train_path = required(&config.train_path, "train_path")?;
    let state = load_generator(gen_path, config)?;
    let vocab = load_vocab(config)?;
    let train = load_examples(train_path, &vocab, config)?;
    ensure!(!train.is_empty(), "training set {} is empty", train_path.display());

    let dc = config.discriminator(vocab.len());
    let mut disc = Discriminator::new(dc, &mut stream_rng(config.seed, 1))?;
    let mut adam = AdamState::new(disc.params(), config.adam());
    let real: Vec<Vec<usize>> = train.iter().map(|e| e.target_extended_ids.clone()).collect();
    let max_len = max_decode_len(config);
    let generator = &state.generator;
    let negatives = |epoch: usize| sample_negatives(generator, &train, max_len, derive_seed(config.seed, &[2, epoch as u64]));
    let train_config = DiscTrainConfig {
        epochs: config.disc_epochs,
        batch_size: config.disc_batch_size,
        clip_norm: Some(config.clip_norm),
        seed: derive_seed(config.seed, &[3]),
    };
    let losses = train_discriminator(&mut disc, &mut adam, &real, negatives, train_config)?;
    save_discriminator(disc_path, &disc, &adam)?;
    let trace = loss_trace_path(disc_path);
    let lines: Vec<String> = losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")).collect();
    std::fs::write(&trace, lines.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    Ok(losses)
}

/// Adversarial rounds; both checkpoints are rewritten afterwards. With zero
/// rounds nothing is read beyond the prerequisites and nothing is written.
pub fn adversarial(config: &TrainingConfig) -> Result<Vec<RoundMetrics>> {
    let gen_path = required(&config.generator_checkpoint, "generator_checkpoint")?;
    let disc_path = required(&config.discriminator_checkpoint, "discriminator_checkpoint")?;
    let train_path = required(&config.train_path, "train_path")?;
    let state = load_generator(gen_path, config)?;
    let (discriminator, disc_adam) = load_discriminator(disc_path, config)?;
    if config.adv_rounds == 0 {
        log::info!("no adversarial rounds requested");
        return Ok(Vec::new());
    }
    let vocab = load_vocab(config)?;
    let train = load_examples(train_path, &vocab, config)?;
    let validation = match &config.valid_path {
        Some(p) => load_examples(p, &vocab, config)?,
        None => train.clone(),
    };

    let gen_adam = state
        .rl_adam
        .unwrap_or_else(|| AdamState::new(state.generator.params(), config.adam()));
    let mut models = AdversarialModels {
        rollout: RolloutPolicy::new(&state.generator, config.sync_interval)?,
        generator: state.generator,
        discriminator,
        gen_adam,
        disc_adam,
        baseline: state.baseline,
    };
    let adv_config = adversarial_config(config, state.rounds_done);
    let metrics_path = config.metrics_path.clone();
    let trace = adversarial_train(&mut models, &train, &validation, &adv_config, |m| {
        if let Some(p) = &metrics_path {
            append_line_io(p, &m.trace_line())?;
        }
        Ok(())
    })?;

    let trips: usize = trace.iter().map(|m| m.guard_trips).sum();
    if trips > 0 {
        log::warn!("{trips} generator steps were skipped by the divergence guard");
    }
    let rounds_done = state.rounds_done + trace.len();
    save_generator(
        gen_path,
        &GeneratorState {
            generator: models.generator,
            mle_adam: state.mle_adam,
            rl_adam: Some(models.gen_adam),
            epochs_done: state.epochs_done,
            rounds_done,
            baseline: models.baseline,
        },
    )?;
    save_discriminator(disc_path, &models.discriminator, &models.disc_adam)?;
    Ok(trace)
}

pub fn adversarial_config(config: &TrainingConfig, first_round: usize) -> AdversarialConfig {
    AdversarialConfig {
        rounds: config.adv_rounds,
        first_round,
        g_steps: config.g_steps,
        d_steps: config.d_steps,
        sources_per_step: config.sources_per_step,
        samples_per_source: config.samples_per_source,
        rollouts: config.rollouts,
        lambda: config.lambda,
        baseline_decay: config.baseline_decay,
        max_len: max_decode_len(config),
        clip_norm: config.clip_norm,
        advantage_bound: config.advantage_bound,
        disc_batch_size: config.disc_batch_size,
        seed: derive_seed(config.seed, &[4]),
    }
}

/// A loaded generator ready for decoding.
pub struct Summarizer {
    pub generator: Generator,
    pub vocab: Vocabulary,
    pub config: TrainingConfig,
}

impl Summarizer {
    pub fn load(config: &TrainingConfig) -> Result<Self> {
        let path = required(&config.generator_checkpoint, "generator_checkpoint")?;
        Ok(Summarizer {
            generator: load_generator(path, config)?.generator,
            vocab: load_vocab(config)?,
            config: config.clone(),
        })
    }

    /// Greedy summary tokens of a tokenized source; empty input gives an
    /// empty summary.
    pub fn summarize_tokens(&self, source: &[String]) -> Result<Vec<String>> {
        if source.is_empty() {
            return Ok(Vec::new());
        }
        let source = &source[..source.len().min(self.config.source_len)];
        let encoded = EncodedSource::new(source, &self.vocab);
        let ids = self.generator.greedy_decode(&encoded, max_decode_len(&self.config))?;
        Ok(decode_ids(&ids, &self.vocab, &encoded.oovs)?)
    }
}

/// Writes one summary line per input line.
pub fn summarize(config: &TrainingConfig, input: &Path, out: &mut dyn Write) -> Result<()> {
    let reader = BufReader::new(File::open(input).with_context(|| format!("cannot open {}", input.display()))?);
    let mut lines = reader.lines().peekable();
    if lines.peek().is_none() {
        return Ok(());
    }
    let summarizer = Summarizer::load(config)?;
    for line in lines {
        let tokens = summarizer.summarize_tokens(&tokenize(&line?))?;
        writeln!(out, "{}", tokens.join(" "))?;
    }
    Ok(())
}

/// Corpus ROUGE against the references of a `source<TAB>target` file. The
/// candidates are greedy decodes, or the lines of `summaries` if given.
pub fn evaluate(config: &TrainingConfig, test: &Path, summaries: Option<&Path>) -> Result<RougeReport> {
    let pairs = load_pairs(test)?;
    ensure!(!pairs.is_empty(), "test set {} is empty", test.display());
    let candidates: Vec<Vec<String>> = match summaries {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let lines: Vec<Vec<String>> = text.lines().map(tokenize).collect();
            if lines.len() != pairs.len() {
                bail!(
                    "{} has {} lines but {} has {} pairs",
                    path.display(),
                    lines.len(),
                    test.display(),
                    pairs.len()
                );
            }
            lines
        }
        None => {
            let summarizer = Summarizer::load(config)?;
            pairs
                .iter()
                .map(|(src, _)| summarizer.summarize_tokens(src))
                .collect::<Result<_>>()?
        }
    };
    let scored: Vec<(Vec<String>, Vec<String>)> = candidates
        .into_iter()
        .zip(pairs)
        .map(|(cand, (_, reference))| (cand, reference))
        .collect();
    Ok(evaluate_corpus(&scored)?)
}
