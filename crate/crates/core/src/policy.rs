//! Token-by-token policies and sequence scorers.
//!
//! The generator, its lagged rollout copy and the small tabular testbeds all
//! implement [`SequencePolicy`], so sampling, rollouts and the policy-gradient
//! estimator are written once against these traits.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EncodedSource, EOS, SOS};
use crate::error::{Error, Result};
use crate::tensor::{GradSet, ParamSet};

/// An autoregressive distribution over output ids.
pub trait SequencePolicy: Sync {
    type State: Clone + Send;

    /// Conditions on a source sequence. No token has been fed yet.
    fn start(&self, source: &EncodedSource) -> Result<Self::State>;

    /// Feeds the previous token (`SOS` first) and returns the distribution of
    /// the next one.
    fn next_distribution(&self, state: &mut Self::State, prev_token: usize) -> Result<Vec<f64>>;
}

/// A policy whose log-likelihood can be differentiated.
pub trait TrainablePolicy: SequencePolicy {
    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Accumulates `∇ Σ_t weights[t] · log P(sequence[t] | sequence[..t])`
    /// into `grads` and returns the weighted sum itself.
    fn weighted_log_prob_grad(
        &self,
        source: &EncodedSource,
        sequence: &[usize],
        weights: &[f64],
        grads: &mut GradSet,
    ) -> Result<f64>;
}

/// Scores a complete output sequence with a value in `[0, 1]`.
pub trait SequenceScorer: Sync {
    fn score(&self, sequence: &[usize]) -> Result<f64>;
}

impl<F> SequenceScorer for F
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    fn score(&self, sequence: &[usize]) -> Result<f64> {
        Ok(self(sequence))
    }
}

/// RNG for stream `stream` of `seed`. Streams are independent, so work split
/// across workers reproduces the sequential result.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes `parts` into `seed` (splitmix64 finalizer per part), giving
/// well-separated seeds for nested loops.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in parts {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p.wrapping_mul(0xd605_bbb5_8c8a_be1d));
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

/// Inverse-CDF draw from a normalized distribution.
pub fn sample_index<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum; take the last
    // outcome with non-zero mass.
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(dist.len() - 1)
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

/// `p^(1/T)` renormalized.
pub fn apply_temperature(dist: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if temperature == 1.0 {
        return Ok(dist.to_vec());
    }
    let logs: Vec<f64> = dist
        .iter()
        .map(|&p| if p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// A sequence is finished once it ends in `EOS` or reaches `max_len`.
pub fn is_complete(sequence: &[usize], max_len: usize) -> bool {
    sequence.last() == Some(&EOS) || sequence.len() >= max_len
}

/// Feeds `SOS` and then `prefix`, returning the state and the distribution
/// of the token after the prefix.
pub fn replay_prefix<P: SequencePolicy + ?Sized>(
    policy: &P,
    source: &EncodedSource,
    prefix: &[usize],
) -> Result<(P::State, Vec<f64>)> {
    let mut state = policy.start(source)?;
    let mut dist = policy.next_distribution(&mut state, SOS)?;
    for &tok in prefix {
        dist = policy.next_distribution(&mut state, tok)?;
    }
    Ok((state, dist))
}

/// Extends `prefix` by ancestral sampling until `EOS` or `max_len` tokens.
pub fn sample_continuation<P: SequencePolicy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    source: &EncodedSource,
    prefix: &[usize],
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut seq = prefix.to_vec();
    if is_complete(&seq, max_len) {
        return Ok(seq);
    }
    let (state, dist) = replay_prefix(policy, source, prefix)?;
    extend_from(policy, state, dist, max_len, temperature, rng, &mut seq)?;
    Ok(seq)
}

/// Continues sampling from an already replayed state; `dist` is the next-token
/// distribution for position `seq.len()`.
pub(crate) fn extend_from<P: SequencePolicy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    mut state: P::State,
    mut dist: Vec<f64>,
    max_len: usize,
    temperature: f64,
    rng: &mut R,
    seq: &mut Vec<usize>,
) -> Result<()> {
    loop {
        let probs = apply_temperature(&dist, temperature)?;
        let tok = sample_index(&probs, rng);
        seq.push(tok);
        if is_complete(seq, max_len) {
            return Ok(());
        }
        dist = policy.next_distribution(&mut state, tok)?;
    }
}

/// Ancestral sample of a whole sequence.
pub fn sample_sequence<P: SequencePolicy + ?Sized>(
    policy: &P,
    source: &EncodedSource,
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_continuation(policy, source, &[], max_len, temperature, &mut rng)
}

/// Argmax decoding until `EOS` or `max_len` tokens.
pub fn greedy_sequence<P: SequencePolicy + ?Sized>(
    policy: &P,
    source: &EncodedSource,
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut state = policy.start(source)?;
    let mut dist = policy.next_distribution(&mut state, SOS)?;
    let mut seq = Vec::new();
    loop {
        let tok = argmax(&dist);
        seq.push(tok);
        if is_complete(&seq, max_len) {
            return Ok(seq);
        }
        dist = policy.next_distribution(&mut state, tok)?;
    }
}
