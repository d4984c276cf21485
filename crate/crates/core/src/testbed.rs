//! A tabular softmax policy small enough to enumerate exactly.
//!
//! Every prefix shorter than `max_len` owns one row of logits, so the
//! probability of each complete sequence, the expected reward and its exact
//! gradient can all be computed by brute force. Used to check the rollout and
//! policy-gradient estimators.

use crate::corpus::EncodedSource;
use crate::error::{Error, Result};
use crate::policy::{SequencePolicy, TrainablePolicy};
use crate::tensor::tape::softmax_in_place;
use crate::tensor::{GradSet, ParamId, ParamSet, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct TabularPolicy {
    vocab: usize,
    max_len: usize,
    params: ParamSet,
    logits: ParamId,
}

#[derive(Clone, Debug, Default)]
pub struct TabularState {
    prefix: Vec<usize>,
    started: bool,
}

impl TabularPolicy {
    /// Number of prefixes of length `0..max_len`.
    pub fn num_nodes(vocab: usize, max_len: usize) -> usize {
        (0..max_len).map(|t| vocab.pow(t as u32)).sum()
    }

    /// `logits` has shape `[num_nodes, vocab]`.
    pub fn new(vocab: usize, max_len: usize, logits: Tensor) -> Result<Self> {
        if vocab == 0 || max_len == 0 {
            return Err(Error::invalid("vocab and max_len must be positive"));
        }
        let expected = [Self::num_nodes(vocab, max_len), vocab];
        if logits.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "tabular_policy",
                lhs: logits.shape().to_vec(),
                rhs: expected.to_vec(),
            });
        }
        let mut params = ParamSet::new();
        let logits = params.insert("logits", logits);
        Ok(TabularPolicy {
            vocab,
            max_len,
            params,
            logits,
        })
    }

    pub fn uniform(vocab: usize, max_len: usize) -> Self {
        let shape = [Self::num_nodes(vocab, max_len), vocab];
        Self::new(vocab, max_len, Tensor::zeros(&shape)).expect("consistent shape")
    }

    /// Source placeholder; the policy ignores its input.
    pub fn dummy_source() -> EncodedSource {
        EncodedSource {
            ids: vec![0],
            extended_ids: vec![0],
            oovs: Vec::new(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Row index of `prefix`, ordered by length and then lexicographically.
    pub fn node(&self, prefix: &[usize]) -> Result<usize> {
        if prefix.len() >= self.max_len {
            return Err(Error::invalid(format!(
                "prefix of length {} has no successor within max_len {}",
                prefix.len(),
                self.max_len
            )));
        }
        let mut index = 0;
        for &tok in prefix {
            if tok >= self.vocab {
                return Err(Error::IdOutOfRange {
                    id: tok,
                    size: self.vocab,
                });
            }
            index = index * self.vocab + tok;
        }
        Ok(Self::num_nodes(self.vocab, prefix.len()) + index)
    }

    /// Next-token distribution after `prefix`.
    pub fn distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let node = self.node(prefix)?;
        let table = self.params.get(self.logits).data();
        let mut row = table[node * self.vocab..(node + 1) * self.vocab].to_vec();
        softmax_in_place(&mut row);
        Ok(row)
    }
}

impl SequencePolicy for TabularPolicy {
    type State = TabularState;

    fn start(&self, _source: &EncodedSource) -> Result<TabularState> {
        Ok(TabularState::default())
    }

    fn next_distribution(&self, state: &mut TabularState, prev_token: usize) -> Result<Vec<f64>> {
        if state.started {
            state.prefix.push(prev_token);
        }
        state.started = true;
        self.distribution(&state.prefix)
    }
}

impl TrainablePolicy for TabularPolicy {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn weighted_log_prob_grad(
        &self,
        _source: &EncodedSource,
        sequence: &[usize],
        weights: &[f64],
        grads: &mut GradSet,
    ) -> Result<f64> {
        if sequence.len() != weights.len() {
            return Err(Error::invalid("one weight per sequence position is required"));
        }
        if sequence.is_empty() {
            return Ok(0.0);
        }
        let mut tape = Tape::new();
        let table = tape.param(&self.params, self.logits);
        let mut logps = Vec::with_capacity(sequence.len());
        for t in 0..sequence.len() {
            let row = tape.lookup_row(table, self.node(&sequence[..t])?)?;
            let probs = tape.softmax(row)?;
            let p = tape.pick(probs, sequence[t])?;
            logps.push(tape.ln(p)?);
        }
        let stacked = tape.concat(&logps)?;
        let w = tape.constant_vec(weights.to_vec())?;
        let objective = tape.dot(stacked, w)?;
        tape.backward(objective, grads)?;
        Ok(tape.scalar(objective))
    }
}
