//! Mixed rewards, the rollout-based policy-gradient estimator and the
//! alternating adversarial training loop.

use std::time::Instant;

use crate::corpus::{EncodedExample, EncodedSource, EOS};
use crate::discriminator::{train_discriminator, DiscTrainConfig, Discriminator};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::policy::{derive_seed, sample_sequence, SequencePolicy, SequenceScorer, TrainablePolicy};
use crate::rollout::{action_values_along, RolloutPolicy};
use crate::rouge::{evaluate_corpus, rouge_l, RougeReport};
use crate::tensor::{clip_grad_norm, AdamState, GradSet};

/// `λ·d + (1 - λ)·rouge`.
pub fn mixed_reward(discriminator_score: f64, rouge_l_f1: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * discriminator_score + (1.0 - lambda) * rouge_l_f1)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Output tokens before the first `EOS`.
pub fn strip_eos(sequence: &[usize]) -> &[usize] {
    let end = sequence.iter().position(|&t| t == EOS).unwrap_or(sequence.len());
    &sequence[..end]
}

/// Scores a sequence by mixing a discriminator with ROUGE-L F1 against one
/// reference. A zero weight skips that component entirely.
pub struct MixedRewardScorer<'a, D: ?Sized> {
    pub discriminator: &'a D,
    pub reference: &'a [usize],
    pub lambda: f64,
}

impl<'a, D: SequenceScorer + ?Sized> MixedRewardScorer<'a, D> {
    pub fn new(discriminator: &'a D, reference: &'a [usize], lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(MixedRewardScorer {
            discriminator,
            reference,
            lambda,
        })
    }
}

impl<D: SequenceScorer + ?Sized> SequenceScorer for MixedRewardScorer<'_, D> {
    fn score(&self, sequence: &[usize]) -> Result<f64> {
        let d = if self.lambda > 0.0 {
            self.discriminator.score(sequence)?
        } else {
            0.0
        };
        let r = if self.lambda < 1.0 {
            rouge_l(strip_eos(sequence), self.reference).f1
        } else {
            0.0
        };
        mixed_reward(d, r, self.lambda)
    }
}

/// Exponential moving average of sequence rewards.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BaselineState {
    pub value: f64,
    pub updates: u64,
}

/// `b ← β·b + (1 - β)·mean(rewards)`. An empty reward list leaves the state
/// unchanged.
pub fn update_baseline(state: BaselineState, rewards: &[f64], decay: f64) -> Result<BaselineState> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::invalid(format!("baseline decay must lie in [0, 1), got {decay}")));
    }
    if rewards.is_empty() {
        return Ok(state);
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(BaselineState {
        value: decay * state.value + (1.0 - decay) * mean,
        updates: state.updates + 1,
    })
}

/// One source to sample from and the scorer for its outputs.
pub struct PgTask<'a> {
    pub source: &'a EncodedSource,
    pub scorer: &'a dyn SequenceScorer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgConfig {
    pub samples_per_task: usize,
    pub rollouts: usize,
    pub max_len: usize,
    pub baseline_decay: f64,
}

#[derive(Clone, Debug)]
pub struct PgEstimate {
    /// Ascent direction for the expected reward.
    pub grads: GradSet,
    /// Reward of every sampled sequence.
    pub rewards: Vec<f64>,
    pub mean_reward: f64,
    /// Mean `|Q_t - b|` over all sampled positions.
    pub mean_abs_advantage: f64,
    /// Baseline after folding in this step's rewards.
    pub baseline: BaselineState,
}

/// Rollout policy-gradient estimate.
///
/// For every sampled sequence `Y` the action value `Q_t` of each position is
/// estimated with `config.rollouts` completions from `rollout` (exactly when
/// the prefix is already complete). The estimate is
/// `(1/M) Σ_samples Σ_t (Q_t - b) ∇ log P(y_t | Y_{1:t-1})`, with `b` the
/// baseline before this step. The baseline is updated afterwards.
pub fn policy_gradient_step<P, R>(
    policy: &P,
    rollout: &R,
    tasks: &[PgTask<'_>],
    baseline: BaselineState,
    config: &PgConfig,
    seed: u64,
) -> Result<PgEstimate>
where
    P: TrainablePolicy,
    R: SequencePolicy + ?Sized,
{
    if tasks.is_empty() || config.samples_per_task == 0 {
        return Err(Error::invalid("policy gradient needs at least one sample"));
    }
    let total = (tasks.len() * config.samples_per_task) as f64;
    let mut grads = GradSet::zeros_like(policy.params());
    let mut rewards = Vec::with_capacity(total as usize);
    let mut abs_adv = 0.0;
    let mut positions = 0usize;
    for (i, task) in tasks.iter().enumerate() {
        for s in 0..config.samples_per_task {
            let (i, s) = (i as u64, s as u64);
            let seq = sample_sequence(policy, task.source, config.max_len, 1.0, derive_seed(seed, &[i, s, 0]))?;
            let q = action_values_along(rollout, task.source, &seq, config.rollouts, config.max_len, task.scorer, |t| {
                derive_seed(seed, &[i, s, t as u64 + 1])
            })?;
            let advantages: Vec<f64> = q.iter().map(|v| v - baseline.value).collect();
            abs_adv += advantages.iter().map(|a| a.abs()).sum::<f64>();
            positions += advantages.len();
            let weights: Vec<f64> = advantages.iter().map(|a| a / total).collect();
            policy.weighted_log_prob_grad(task.source, &seq, &weights, &mut grads)?;
            rewards.push(*q.last().expect("sampled sequences are non-empty"));
        }
    }
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(PgEstimate {
        grads,
        mean_abs_advantage: abs_adv / positions as f64,
        baseline: update_baseline(baseline, &rewards, config.baseline_decay)?,
        mean_reward,
        rewards,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialConfig {
    pub rounds: usize,
    /// Index of the first round, so a continued run keeps numbering and seeds.
    pub first_round: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    pub sources_per_step: usize,
    pub samples_per_source: usize,
    pub rollouts: usize,
    pub lambda: f64,
    pub baseline_decay: f64,
    pub max_len: usize,
    pub clip_norm: f64,
    /// Generator steps whose mean `|advantage|` exceeds this are skipped.
    pub advantage_bound: f64,
    pub disc_batch_size: usize,
    pub seed: u64,
}

/// Everything the adversarial phase updates.
#[derive(Clone, Debug)]
pub struct AdversarialModels {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub rollout: RolloutPolicy<Generator>,
    pub gen_adam: AdamState,
    pub disc_adam: AdamState,
    pub baseline: BaselineState,
}

/// Metrics of one adversarial round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_reward: f64,
    pub disc_loss: f64,
    pub validation: RougeReport,
    pub wall_ms: u64,
    pub guard_trips: usize,
}

impl RoundMetrics {
    /// `round,mean_reward,disc_loss,val_rouge1,val_rouge2,val_rougeL,wall_ms`
    pub fn trace_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.round,
            self.mean_reward,
            self.disc_loss,
            self.validation.rouge1.f1,
            self.validation.rouge2.f1,
            self.validation.rouge_l.f1,
            self.wall_ms
        )
    }
}

/// Greedy-decodes every validation source and scores it against its
/// reference over extended ids.
pub fn validation_rouge(generator: &Generator, examples: &[EncodedExample], max_len: usize) -> Result<RougeReport> {
    let mut pairs = Vec::with_capacity(examples.len());
    for ex in examples {
        let out = generator.greedy_decode(&ex.source, max_len)?;
        pairs.push((strip_eos(&out).to_vec(), ex.reference().to_vec()));
    }
    evaluate_corpus(&pairs)
}

/// One generator sample per example, used as discriminator negatives.
pub fn sample_negatives(generator: &Generator, examples: &[EncodedExample], max_len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| generator.sample_sequence(&ex.source, max_len, 1.0, derive_seed(seed, &[i as u64])))
        .collect()
}

/// Alternates `g_steps` policy-gradient updates of the generator with
/// `d_steps` discriminator epochs on fresh negatives, for `rounds` rounds.
/// `on_round` sees each round's metrics as soon as they are known.
pub fn adversarial_train<F>(
    models: &mut AdversarialModels,
    train: &[EncodedExample],
    validation: &[EncodedExample],
    config: &AdversarialConfig,
    mut on_round: F,
) -> Result<Vec<RoundMetrics>>
where
    F: FnMut(&RoundMetrics) -> Result<()>,
{
    if train.is_empty() || validation.is_empty() {
        return Err(Error::invalid("adversarial training needs training and validation examples"));
    }
    if config.sources_per_step == 0 {
        return Err(Error::invalid("sources_per_step must be positive"));
    }
    let real: Vec<Vec<usize>> = train.iter().map(|ex| ex.target_extended_ids.clone()).collect();
    let pg_config = PgConfig {
        samples_per_task: config.samples_per_source,
        rollouts: config.rollouts,
        max_len: config.max_len,
        baseline_decay: config.baseline_decay,
    };

    let mut trace = Vec::with_capacity(config.rounds);
    for round in config.first_round..config.first_round + config.rounds {
        let started = Instant::now();
        let r = round as u64;
        let mut rewards = Vec::new();
        let mut guard_trips = 0;

        for g in 0..config.g_steps as u64 {
            let chosen = choose_sources(train.len(), config.sources_per_step, derive_seed(config.seed, &[r, 1, g]));
            let scorers: Vec<MixedRewardScorer<'_, Discriminator>> = chosen
                .iter()
                .map(|&i| MixedRewardScorer::new(&models.discriminator, train[i].reference(), config.lambda))
                .collect::<Result<_>>()?;
            let tasks: Vec<PgTask<'_>> = chosen
                .iter()
                .zip(&scorers)
                .map(|(&i, scorer)| PgTask {
                    source: &train[i].source,
                    scorer,
                })
                .collect();
            let estimate = policy_gradient_step(
                &models.generator,
                models.rollout.policy(),
                &tasks,
                models.baseline,
                &pg_config,
                derive_seed(config.seed, &[r, 2, g]),
            )?;
            rewards.extend_from_slice(&estimate.rewards);
            let norm = estimate.grads.global_norm();
            if !(estimate.mean_abs_advantage <= config.advantage_bound) || !norm.is_finite() {
                log::warn!(
                    "round {round} step {g}: skipped, mean |advantage| {} exceeds {}",
                    estimate.mean_abs_advantage,
                    config.advantage_bound
                );
                guard_trips += 1;
                continue;
            }
            let mut grads = estimate.grads;
            grads.scale(-1.0);
            clip_grad_norm(&mut grads, config.clip_norm)?;
            models.gen_adam.step(models.generator.params_mut(), &grads)?;
            models.baseline = estimate.baseline;
            models.rollout.after_update(&models.generator)?;
        }

        let generator = &models.generator;
        let negatives = |epoch: usize| sample_negatives(generator, train, config.max_len, derive_seed(config.seed, &[r, 3, epoch as u64]));
        let disc_loss = if config.d_steps == 0 {
            models.discriminator.loss(&real, &negatives(0)?)?
        } else {
            let disc_config = DiscTrainConfig {
                epochs: config.d_steps,
                batch_size: config.disc_batch_size,
                clip_norm: Some(config.clip_norm),
                seed: derive_seed(config.seed, &[r, 4]),
            };
            let losses = train_discriminator(&mut models.discriminator, &mut models.disc_adam, &real, negatives, disc_config)?;
            losses.iter().sum::<f64>() / losses.len() as f64
        };

        let metrics = RoundMetrics {
            round,
            mean_reward: if rewards.is_empty() {
                0.0
            } else {
                rewards.iter().sum::<f64>() / rewards.len() as f64
            },
            disc_loss,
            validation: validation_rouge(&models.generator, validation, config.max_len)?,
            wall_ms: started.elapsed().as_millis() as u64,
            guard_trips,
        };
        log::info!("adversarial {}", metrics.trace_line());
        on_round(&metrics)?;
        trace.push(metrics);
    }
    Ok(trace)
}

/// `count` distinct example indices (all of them when `count >= len`).
fn choose_sources(len: usize, count: usize, seed: u64) -> Vec<usize> {
    use rand::seq::index::sample;
    let mut rng = crate::policy::stream_rng(seed, 0);
    let mut picked = sample(&mut rng, len, count.min(len)).into_vec();
    picked.sort_unstable();
    picked
}
