//! Decoder-side building blocks, each recorded on a [`Tape`].

use crate::error::Result;
use crate::tensor::{Tape, Var};

/// Output of one intra-temporal attention step.
#[derive(Clone, Copy, Debug)]
pub struct TemporalAttention {
    /// Attention weights over source positions, `[n]`.
    pub weights: Var,
    /// Encoder context `Σ_i α_i h_i^e`, `[D]`.
    pub context: Var,
    /// Updated per-token history, stored as `log Σ_{j<=t} exp(h_j^d · h_i^e)`.
    pub log_history: Var,
}

/// Intra-temporal attention over encoder states `[n, D]`.
///
/// At the first step the score of token `i` is `exp(h·h_i^e)`; afterwards it
/// is divided by the sum of that token's exponentiated scores at all earlier
/// steps. Scores and history live in log space, so the division becomes a
/// subtraction and the running sum a log-add-exp.
pub fn temporal_attention(
    tape: &mut Tape<'_>,
    decoder_state: Var,
    encoder_states: Var,
    log_history: Option<Var>,
) -> Result<TemporalAttention> {
    let scores = tape.matmul(encoder_states, decoder_state)?;
    let (logits, log_history) = match log_history {
        None => (scores, scores),
        Some(hist) => {
            let penalized = tape.sub(scores, hist)?;
            let updated = tape.log_add_exp(hist, scores)?;
            (penalized, updated)
        }
    };
    let weights = tape.softmax(logits)?;
    let context = tape.vecmat(weights, encoder_states)?;
    Ok(TemporalAttention {
        weights,
        context,
        log_history,
    })
}

/// Attention over previous decoder states. Returns `(weights, context)`;
/// with no previous states the context is the zero vector and there are no
/// weights.
pub fn intra_decoder_attention(
    tape: &mut Tape<'_>,
    decoder_state: Var,
    previous: &[Var],
) -> Result<(Option<Var>, Var)> {
    if previous.is_empty() {
        let dim = tape.shape(decoder_state)[0];
        return Ok((None, tape.zeros(&[dim])?));
    }
    let past = tape.stack(previous)?;
    let scores = tape.matmul(past, decoder_state)?;
    let weights = tape.softmax(scores)?;
    let context = tape.vecmat(weights, past)?;
    Ok((Some(weights), context))
}

/// Weights of the two-layer vocabulary projection.
#[derive(Clone, Copy, Debug)]
pub struct VocabProjection {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `softmax(W2 (W1 [h ‖ c^e ‖ c^d] + b1) + b2)` over the fixed vocabulary.
pub fn vocab_distribution(
    tape: &mut Tape<'_>,
    proj: &VocabProjection,
    decoder_state: Var,
    encoder_context: Var,
    decoder_context: Var,
) -> Result<Var> {
    let features = tape.concat(&[decoder_state, encoder_context, decoder_context])?;
    let hidden = tape.matmul(proj.w1, features)?;
    let hidden = tape.add(hidden, proj.b1)?;
    let logits = tape.matmul(proj.w2, hidden)?;
    let logits = tape.add(logits, proj.b2)?;
    tape.softmax(logits)
}

/// Weights of the generate/copy switch.
#[derive(Clone, Copy, Debug)]
pub struct SwitchWeights {
    pub context: Var,
    pub state: Var,
    pub input: Var,
    pub bias: Var,
}

/// `σ(w_c·c* + w_s·s + w_x·x + b)` as a one-element tensor.
pub fn pointer_switch(
    tape: &mut Tape<'_>,
    w: &SwitchWeights,
    context: Var,
    state: Var,
    input: Var,
) -> Result<Var> {
    let a = tape.dot(w.context, context)?;
    let b = tape.dot(w.state, state)?;
    let c = tape.dot(w.input, input)?;
    let ab = tape.add(a, b)?;
    let abc = tape.add(ab, c)?;
    let z = tape.add(abc, w.bias)?;
    tape.sigmoid(z)
}

/// Mixes generation and copying over the extended vocabulary:
/// `P(w) = p_gen P_vocab(w) + (1 - p_gen) Σ_{i: x_i = w} α_i`.
/// Ids `>= V` get copy mass only.
pub fn final_distribution(
    tape: &mut Tape<'_>,
    p_gen: Var,
    p_vocab: Var,
    attention: Var,
    extended_ids: &[usize],
    extended_size: usize,
) -> Result<Var> {
    let vocab_size = tape.shape(p_vocab)[0];
    let generate = if extended_size > vocab_size {
        let pad = tape.zeros(&[extended_size - vocab_size])?;
        tape.concat(&[p_vocab, pad])?
    } else {
        p_vocab
    };
    let generate = tape.scale(generate, p_gen)?;
    let copy = tape.scatter_add(attention, extended_ids, extended_size)?;
    let p_copy = tape.affine(p_gen, -1.0, 1.0)?;
    let copy = tape.scale(copy, p_copy)?;
    tape.add(generate, copy)
}
