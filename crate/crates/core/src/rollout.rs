//! Monte-Carlo completion of partial sequences under a lagged policy copy.

use crate::corpus::{EncodedSource, SOS};
use crate::error::{Error, Result};
use crate::policy::{extend_from, is_complete, replay_prefix, stream_rng, SequencePolicy, SequenceScorer, TrainablePolicy};

/// A frozen copy of a trainable policy, refreshed by copying weights every
/// `interval` generator updates and never updated by gradients.
#[derive(Clone, Debug)]
pub struct RolloutPolicy<P> {
    policy: P,
    interval: usize,
    since_sync: usize,
}

impl<P: TrainablePolicy + Clone> RolloutPolicy<P> {
    pub fn new(policy: &P, interval: usize) -> Result<Self> {
        if interval == 0 {
            return Err(Error::invalid("sync interval must be at least 1"));
        }
        Ok(RolloutPolicy {
            policy: policy.clone(),
            interval,
            since_sync: 0,
        })
    }

    /// Copies `source`'s parameters and resets the lag.
    pub fn sync_from(&mut self, source: &P) -> Result<()> {
        self.policy.params_mut().copy_from(source.params())?;
        self.since_sync = 0;
        Ok(())
    }

    /// Records one generator update.
    pub fn tick(&mut self) {
        self.since_sync += 1;
    }

    /// Generator updates since the last sync.
    pub fn lag(&self) -> usize {
        self.since_sync
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn is_due(&self) -> bool {
        self.since_sync >= self.interval
    }

    /// Records an update and syncs when the interval is reached. Returns
    /// whether a sync happened.
    pub fn after_update(&mut self, source: &P) -> Result<bool> {
        self.tick();
        if self.is_due() {
            self.sync_from(source)?;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }
}

/// `n` continuations of `prefix`, each sampled with its own RNG stream of
/// `seed`. Every result starts with `prefix`.
pub fn complete_sequence<P: SequencePolicy + ?Sized>(
    policy: &P,
    source: &EncodedSource,
    prefix: &[usize],
    n: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::invalid("at least one rollout is required"));
    }
    if is_complete(prefix, max_len) {
        return Ok(vec![prefix.to_vec(); n]);
    }
    let (state, dist) = replay_prefix(policy, source, prefix)?;
    complete_from(policy, &state, &dist, prefix, n, max_len, seed)
}

/// Like [`complete_sequence`] but starting from a state that has already
/// consumed `prefix`; `dist` is its next-token distribution.
fn complete_from<P: SequencePolicy + ?Sized>(
    policy: &P,
    state: &P::State,
    dist: &[f64],
    prefix: &[usize],
    n: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut seq = prefix.to_vec();
            extend_from(policy, state.clone(), dist.to_vec(), max_len, 1.0, &mut rng, &mut seq)?;
            Ok(seq)
        })
        .collect()
}

fn mean_score<S: SequenceScorer + ?Sized>(scorer: &S, sequences: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    for seq in sequences {
        total += scorer.score(seq)?;
    }
    Ok(total / sequences.len() as f64)
}

/// Estimate of `Q(prefix[..t-1], prefix[t-1])`: the score of `prefix` itself
/// when it is already complete, otherwise the mean score of `n` rollouts that
/// extend it.
pub fn action_value<P, S>(
    policy: &P,
    source: &EncodedSource,
    prefix: &[usize],
    n: usize,
    max_len: usize,
    scorer: &S,
    seed: u64,
) -> Result<f64>
where
    P: SequencePolicy + ?Sized,
    S: SequenceScorer + ?Sized,
{
    if n == 0 {
        return Err(Error::invalid("at least one rollout is required"));
    }
    if prefix.len() > max_len {
        return Err(Error::invalid(format!(
            "prefix of length {} exceeds max_len {max_len}",
            prefix.len()
        )));
    }
    if is_complete(prefix, max_len) {
        return scorer.score(prefix);
    }
    let completions = complete_sequence(policy, source, prefix, n, max_len, seed)?;
    mean_score(scorer, &completions)
}

/// Action values for every position of `sequence`: entry `t` equals
/// [`action_value`] on `sequence[..=t]` with seed `seed_for(t)`. The policy
/// state is advanced along the sequence once instead of being replayed for
/// every prefix.
pub fn action_values_along<P, S, F>(
    policy: &P,
    source: &EncodedSource,
    sequence: &[usize],
    n: usize,
    max_len: usize,
    scorer: &S,
    mut seed_for: F,
) -> Result<Vec<f64>>
where
    P: SequencePolicy + ?Sized,
    S: SequenceScorer + ?Sized,
    F: FnMut(usize) -> u64,
{
    if n == 0 {
        return Err(Error::invalid("at least one rollout is required"));
    }
    if sequence.len() > max_len {
        return Err(Error::invalid(format!(
            "sequence of length {} exceeds max_len {max_len}",
            sequence.len()
        )));
    }
    let mut values = Vec::with_capacity(sequence.len());
    let mut state = policy.start(source)?;
    policy.next_distribution(&mut state, SOS)?;
    for t in 0..sequence.len() {
        let prefix = &sequence[..=t];
        if is_complete(prefix, max_len) {
            values.push(scorer.score(prefix)?);
            continue;
        }
        let dist = policy.next_distribution(&mut state, sequence[t])?;
        let completions = complete_from(policy, &state, &dist, prefix, n, max_len, seed_for(t))?;
        values.push(mean_score(scorer, &completions)?);
    }
    Ok(values)
}
