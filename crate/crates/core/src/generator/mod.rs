//! Pointer-generator encoder-decoder.
//!
//! A bidirectional LSTM encodes the source; a single LSTM decodes. Each
//! decoder step attends over the encoder states with intra-temporal
//! attention, over its own earlier states with intra-decoder attention, and
//! mixes a vocabulary softmax with a copy distribution through a soft switch.
//!
//! The decoder state is `2·hidden_dim` wide so that dot-product attention
//! against the concatenated forward/backward encoder states is well defined.

pub mod layers;

use std::sync::Arc;

use rand::Rng;

use crate::corpus::{Batch, EncodedExample, EncodedSource, SOS, UNK};
use crate::error::{Error, Result};
use crate::policy::{self, SequencePolicy, TrainablePolicy};
use crate::tensor::{lstm_cell, GradSet, LstmVars, ParamId, ParamSet, Tape, Tensor, Var};

pub use layers::{
    final_distribution, intra_decoder_attention, pointer_switch, temporal_attention, vocab_distribution,
    SwitchWeights, TemporalAttention, VocabProjection,
};

/// Floor added inside `log` so a zero-probability target gives a finite loss.
pub const LOG_FLOOR: f64 = 1e-12;

const RECURRENT_INIT: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    /// Per-direction encoder width. Encoder outputs and the decoder state are
    /// twice this.
    pub hidden_dim: usize,
}

impl GeneratorConfig {
    pub fn state_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.emb_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid(format!("generator dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct LstmIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ParamIds {
    embedding: ParamId,
    enc_fwd: LstmIds,
    enc_bwd: LstmIds,
    bridge_h_w: ParamId,
    bridge_h_b: ParamId,
    bridge_c_w: ParamId,
    bridge_c_b: ParamId,
    dec: LstmIds,
    out1_w: ParamId,
    out1_b: ParamId,
    out2_w: ParamId,
    out2_b: ParamId,
    ptr_context: ParamId,
    ptr_state: ParamId,
    ptr_input: ParamId,
    ptr_bias: ParamId,
}

/// Generator weights bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    pub embedding: Var,
    pub enc_fwd: LstmVars,
    pub enc_bwd: LstmVars,
    pub bridge_h: (Var, Var),
    pub bridge_c: (Var, Var),
    pub dec: LstmVars,
    pub projection: VocabProjection,
    pub switch: SwitchWeights,
}

/// Encoder result recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `[n, 2H]`, row `i` is `[h_i^fwd ‖ h_i^bwd]`.
    pub states: Var,
    pub init_h: Var,
    pub init_c: Var,
}

/// Mutable per-step decoder state on a tape.
#[derive(Clone, Debug)]
pub struct DecoderStepState {
    pub h: Var,
    pub c: Var,
    /// Number of decoding steps already taken.
    pub steps: usize,
    /// `log Σ_{j<t} exp(h_j^d · h_i^e)` per source token; `None` before the
    /// first step.
    pub log_history: Option<Var>,
    /// Decoder states of all earlier steps.
    pub previous: Vec<Var>,
}

/// Every intermediate distribution of one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub distribution: Var,
    pub encoder_attention: Var,
    pub decoder_attention: Option<Var>,
    pub vocab: Var,
    pub p_gen: Var,
}

/// Values of [`StepVars`] after a detached inference step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub distribution: Vec<f64>,
    pub encoder_attention: Vec<f64>,
    pub decoder_attention: Option<Vec<f64>>,
    pub vocab: Vec<f64>,
    pub p_gen: f64,
}

/// Detached decoder state for sampling and decoding; plain values, cheap to
/// clone for rollouts.
#[derive(Clone, Debug)]
pub struct InferenceState {
    encoder_states: Arc<Tensor>,
    extended_ids: Arc<[usize]>,
    extended_size: usize,
    h: Vec<f64>,
    c: Vec<f64>,
    steps: usize,
    log_history: Option<Vec<f64>>,
    previous: Vec<Vec<f64>>,
}

impl InferenceState {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn extended_size(&self) -> usize {
        self.extended_size
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
    ids: ParamIds,
    switch_override: Option<f64>,
}

impl Generator {
    /// Randomly initialized generator.
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (params, ids) = Self::layout(config, Some(rng));
        Ok(Generator {
            config,
            params,
            ids,
            switch_override: None,
        })
    }

    /// Wraps loaded parameters, checking names and shapes.
    pub fn from_params(config: GeneratorConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let (template, ids) = Self::layout::<rand_chacha::ChaCha8Rng>(config, None);
        template.check_congruent(&params)?;
        Ok(Generator {
            config,
            params,
            ids,
            switch_override: None,
        })
    }

    fn layout<R: Rng + ?Sized>(config: GeneratorConfig, mut rng: Option<&mut R>) -> (ParamSet, ParamIds) {
        let GeneratorConfig {
            vocab_size: v,
            emb_dim: e,
            hidden_dim: h,
        } = config;
        let d = 2 * h;
        let mut params = ParamSet::new();
        let mut uniform = |params: &mut ParamSet, name: &str, shape: &[usize]| {
            let t = match rng.as_deref_mut() {
                Some(rng) => Tensor::uniform(shape, RECURRENT_INIT, rng),
                None => Tensor::zeros(shape),
            };
            params.insert(name, t)
        };
        let embedding = uniform(&mut params, "embedding", &[v, e]);
        let enc_fwd_w = uniform(&mut params, "enc_fwd.w", &[4 * h, e + h]);
        let enc_bwd_w = uniform(&mut params, "enc_bwd.w", &[4 * h, e + h]);
        let dec_w = uniform(&mut params, "dec.w", &[4 * d, e + d]);

        let mut normal = |params: &mut ParamSet, name: &str, shape: &[usize], fan_in: usize| {
            let t = match rng.as_deref_mut() {
                Some(rng) => Tensor::normal(shape, 1.0 / (fan_in as f64).sqrt(), rng),
                None => Tensor::zeros(shape),
            };
            params.insert(name, t)
        };
        let bridge_h_w = normal(&mut params, "bridge_h.w", &[d, d], d);
        let bridge_c_w = normal(&mut params, "bridge_c.w", &[d, d], d);
        let out1_w = normal(&mut params, "out1.w", &[h, 3 * d], 3 * d);
        let out2_w = normal(&mut params, "out2.w", &[v, h], h);
        let ptr_context = normal(&mut params, "ptr.context", &[2 * d], 2 * d);
        let ptr_state = normal(&mut params, "ptr.state", &[d], d);
        let ptr_input = normal(&mut params, "ptr.input", &[e], e);

        let mut zeros = |name: &str, len: usize| params.insert(name, Tensor::zeros(&[len]));
        let enc_fwd_b = zeros("enc_fwd.b", 4 * h);
        let enc_bwd_b = zeros("enc_bwd.b", 4 * h);
        let dec_b = zeros("dec.b", 4 * d);
        let bridge_h_b = zeros("bridge_h.b", d);
        let bridge_c_b = zeros("bridge_c.b", d);
        let out1_b = zeros("out1.b", h);
        let out2_b = zeros("out2.b", v);
        let ptr_bias = zeros("ptr.bias", 1);

        let ids = ParamIds {
            embedding,
            enc_fwd: LstmIds {
                w: enc_fwd_w,
                b: enc_fwd_b,
            },
            enc_bwd: LstmIds {
                w: enc_bwd_w,
                b: enc_bwd_b,
            },
            bridge_h_w,
            bridge_h_b,
            bridge_c_w,
            bridge_c_b,
            dec: LstmIds { w: dec_w, b: dec_b },
            out1_w,
            out1_b,
            out2_w,
            out2_b,
            ptr_context,
            ptr_state,
            ptr_input,
            ptr_bias,
        };
        (params, ids)
    }

    pub fn config(&self) -> GeneratorConfig {
        self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Pins the generate/copy switch to a constant (`Some(0.0)` copies only).
    pub fn set_switch_override(&mut self, p_gen: Option<f64>) {
        self.switch_override = p_gen;
    }

    pub fn switch_override(&self) -> Option<f64> {
        self.switch_override
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> GeneratorVars {
        let p = &self.params;
        let ids = &self.ids;
        let mut var = |id| tape.param(p, id);
        let lstm = |var: &mut dyn FnMut(ParamId) -> Var, l: LstmIds| LstmVars {
            w: var(l.w),
            b: var(l.b),
        };
        GeneratorVars {
            embedding: var(ids.embedding),
            enc_fwd: lstm(&mut var, ids.enc_fwd),
            enc_bwd: lstm(&mut var, ids.enc_bwd),
            bridge_h: (var(ids.bridge_h_w), var(ids.bridge_h_b)),
            bridge_c: (var(ids.bridge_c_w), var(ids.bridge_c_b)),
            dec: lstm(&mut var, ids.dec),
            projection: VocabProjection {
                w1: var(ids.out1_w),
                b1: var(ids.out1_b),
                w2: var(ids.out2_w),
                b2: var(ids.out2_b),
            },
            switch: SwitchWeights {
                context: var(ids.ptr_context),
                state: var(ids.ptr_state),
                input: var(ids.ptr_input),
                bias: var(ids.ptr_bias),
            },
        }
    }

    /// Runs the bidirectional encoder over fixed-vocabulary `source_ids`.
    pub fn encode_on(&self, tape: &mut Tape<'_>, vars: &GeneratorVars, source_ids: &[usize]) -> Result<EncoderVars> {
        if source_ids.is_empty() {
            return Err(Error::invalid("cannot encode an empty source"));
        }
        let h = self.config.hidden_dim;
        let inputs = source_ids
            .iter()
            .map(|&id| tape.lookup_row(vars.embedding, id))
            .collect::<Result<Vec<_>>>()?;

        let zero = tape.zeros(&[h])?;
        let run = |tape: &mut Tape<'_>, cell: &LstmVars, order: &mut dyn Iterator<Item = usize>| {
            let (mut hs, mut cs) = (zero, zero);
            let mut out = vec![(zero, zero); inputs.len()];
            for i in order {
                (hs, cs) = lstm_cell(tape, cell, inputs[i], hs, cs)?;
                out[i] = (hs, cs);
            }
            Ok::<_, Error>(out)
        };
        let n = inputs.len();
        let fwd = run(tape, &vars.enc_fwd, &mut (0..n))?;
        let bwd = run(tape, &vars.enc_bwd, &mut (0..n).rev())?;

        let rows = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| tape.concat(&[f.0, b.0]))
            .collect::<Result<Vec<_>>>()?;
        let states = tape.stack(&rows)?;

        let final_h = tape.concat(&[fwd[n - 1].0, bwd[0].0])?;
        let final_c = tape.concat(&[fwd[n - 1].1, bwd[0].1])?;
        let init_h = affine(tape, vars.bridge_h, final_h)?;
        let init_c = affine(tape, vars.bridge_c, final_c)?;
        Ok(EncoderVars {
            states,
            init_h,
            init_c,
        })
    }

    pub fn initial_step_state(&self, enc: &EncoderVars) -> DecoderStepState {
        DecoderStepState {
            h: enc.init_h,
            c: enc.init_c,
            steps: 0,
            log_history: None,
            previous: Vec::new(),
        }
    }

    /// One decoder step: LSTM update, both attentions, vocabulary
    /// distribution, switch and extended-vocabulary mixing.
    ///
    /// `prev_token` may be an extended id; ids outside the fixed vocabulary
    /// are embedded as `UNK`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_on(
        &self,
        tape: &mut Tape<'_>,
        vars: &GeneratorVars,
        encoder_states: Var,
        extended_ids: &[usize],
        extended_size: usize,
        state: &mut DecoderStepState,
        prev_token: usize,
    ) -> Result<StepVars> {
        let input_id = if prev_token < self.config.vocab_size {
            prev_token
        } else {
            UNK
        };
        let x = tape.lookup_row(vars.embedding, input_id)?;
        let (h, c) = lstm_cell(tape, &vars.dec, x, state.h, state.c)?;

        let temporal = temporal_attention(tape, h, encoder_states, state.log_history)?;
        let (decoder_attention, decoder_context) = intra_decoder_attention(tape, h, &state.previous)?;
        let vocab = vocab_distribution(tape, &vars.projection, h, temporal.context, decoder_context)?;
        let p_gen = match self.switch_override {
            Some(p) => tape.constant_vec(vec![p])?,
            None => {
                let context = tape.concat(&[temporal.context, decoder_context])?;
                pointer_switch(tape, &vars.switch, context, h, x)?
            }
        };
        let distribution = final_distribution(tape, p_gen, vocab, temporal.weights, extended_ids, extended_size)?;

        state.h = h;
        state.c = c;
        state.steps += 1;
        state.log_history = Some(temporal.log_history);
        state.previous.push(h);
        Ok(StepVars {
            distribution,
            encoder_attention: temporal.weights,
            decoder_attention,
            vocab,
            p_gen,
        })
    }

    /// Per-step `log P(tokens[t] | tokens[..t], source)` under teacher forcing:
    /// the decoder consumes `SOS` followed by `tokens[..len-1]`.
    pub fn sequence_log_probs(
        &self,
        tape: &mut Tape<'_>,
        vars: &GeneratorVars,
        source: &EncodedSource,
        tokens: &[usize],
    ) -> Result<Vec<Var>> {
        let enc = self.encode_on(tape, vars, &source.ids)?;
        let extended_size = source.extended_size(self.config.vocab_size);
        let mut state = self.initial_step_state(&enc);
        let mut prev = SOS;
        let mut out = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            if tok >= extended_size {
                return Err(Error::IdOutOfRange {
                    id: tok,
                    size: extended_size,
                });
            }
            let step = self.step_on(tape, vars, enc.states, &source.extended_ids, extended_size, &mut state, prev)?;
            let p = tape.pick(step.distribution, tok)?;
            let p = tape.affine(p, 1.0, LOG_FLOOR)?;
            out.push(tape.ln(p)?);
            prev = tok;
        }
        Ok(out)
    }

    /// Summed negative log-likelihood of one example and its token count.
    fn example_nll<'p>(&'p self, tape: &mut Tape<'p>, example: &EncodedExample) -> Result<(Var, usize)> {
        let vars = self.bind(tape);
        let logps = self.sequence_log_probs(tape, &vars, &example.source, &example.target_extended_ids)?;
        let stacked = tape.concat(&logps)?;
        let total = tape.sum(stacked)?;
        Ok((tape.neg(total)?, logps.len()))
    }

    /// Mean per-token negative log-likelihood of `batch` under teacher forcing.
    pub fn mle_loss(&self, batch: &Batch) -> Result<f64> {
        let mut total = 0.0;
        for ex in &batch.examples {
            let mut tape = Tape::new();
            let (nll, _) = self.example_nll(&mut tape, ex)?;
            total += tape.scalar(nll);
        }
        Ok(total / batch.num_target_tokens() as f64)
    }

    /// [`Self::mle_loss`] together with its gradient.
    pub fn mle_loss_and_grad(&self, batch: &Batch) -> Result<(f64, GradSet)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let tokens = batch.num_target_tokens() as f64;
        let mut grads = GradSet::zeros_like(&self.params);
        let mut total = 0.0;
        for ex in &batch.examples {
            let mut tape = Tape::new();
            let (nll, _) = self.example_nll(&mut tape, ex)?;
            let loss = tape.affine(nll, 1.0 / tokens, 0.0)?;
            tape.backward(loss, &mut grads)?;
            total += tape.scalar(nll);
        }
        Ok((total / tokens, grads))
    }

    /// Encoder states `[n, 2H]` for fixed-vocabulary ids.
    pub fn encode(&self, source_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let enc = self.encode_on(&mut tape, &vars, source_ids)?;
        Ok(tape.tensor(enc.states))
    }

    pub fn begin(&self, source: &EncodedSource) -> Result<InferenceState> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let enc = self.encode_on(&mut tape, &vars, &source.ids)?;
        Ok(InferenceState {
            encoder_states: Arc::new(tape.tensor(enc.states)),
            extended_ids: source.extended_ids.clone().into(),
            extended_size: source.extended_size(self.config.vocab_size),
            h: tape.value(enc.init_h).to_vec(),
            c: tape.value(enc.init_c).to_vec(),
            steps: 0,
            log_history: None,
            previous: Vec::new(),
        })
    }

    /// One detached decoder step.
    pub fn step(&self, state: &mut InferenceState, prev_token: usize) -> Result<StepOutput> {
        if prev_token >= state.extended_size {
            return Err(Error::IdOutOfRange {
                id: prev_token,
                size: state.extended_size,
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let enc = tape.constant(state.encoder_states.as_ref().clone())?;
        let h = tape.constant_vec(state.h.clone())?;
        let c = tape.constant_vec(state.c.clone())?;
        let log_history = match &state.log_history {
            Some(v) => Some(tape.constant_vec(v.clone())?),
            None => None,
        };
        let previous = state
            .previous
            .iter()
            .map(|p| tape.constant_vec(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut step_state = DecoderStepState {
            h,
            c,
            steps: state.steps,
            log_history,
            previous,
        };
        let out = self.step_on(
            &mut tape,
            &vars,
            enc,
            &state.extended_ids,
            state.extended_size,
            &mut step_state,
            prev_token,
        )?;

        state.h = tape.value(step_state.h).to_vec();
        state.c = tape.value(step_state.c).to_vec();
        state.steps = step_state.steps;
        state.log_history = step_state.log_history.map(|v| tape.value(v).to_vec());
        state.previous.push(state.h.clone());
        Ok(StepOutput {
            distribution: tape.value(out.distribution).to_vec(),
            encoder_attention: tape.value(out.encoder_attention).to_vec(),
            decoder_attention: out.decoder_attention.map(|v| tape.value(v).to_vec()),
            vocab: tape.value(out.vocab).to_vec(),
            p_gen: tape.scalar(out.p_gen),
        })
    }

    /// Ancestral sample; extended ids are fed back as `UNK`.
    pub fn sample_sequence(&self, source: &EncodedSource, max_len: usize, temperature: f64, seed: u64) -> Result<Vec<usize>> {
        policy::sample_sequence(self, source, max_len, temperature, seed)
    }

    /// Argmax decode, lowest id on ties.
    pub fn greedy_decode(&self, source: &EncodedSource, max_len: usize) -> Result<Vec<usize>> {
        policy::greedy_sequence(self, source, max_len)
    }
}

fn affine(tape: &mut Tape<'_>, (w, b): (Var, Var), x: Var) -> Result<Var> {
    let y = tape.matmul(w, x)?;
    tape.add(y, b)
}

impl SequencePolicy for Generator {
    type State = InferenceState;

    fn start(&self, source: &EncodedSource) -> Result<InferenceState> {
        self.begin(source)
    }

    fn next_distribution(&self, state: &mut InferenceState, prev_token: usize) -> Result<Vec<f64>> {
        Ok(self.step(state, prev_token)?.distribution)
    }
}

impl TrainablePolicy for Generator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn weighted_log_prob_grad(
        &self,
        source: &EncodedSource,
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
        let vars = self.bind(&mut tape);
        let logps = self.sequence_log_probs(&mut tape, &vars, source, sequence)?;
        let stacked = tape.concat(&logps)?;
        let w = tape.constant_vec(weights.to_vec())?;
        let objective = tape.dot(stacked, w)?;
        tape.backward(objective, grads)?;
        Ok(tape.scalar(objective))
    }
}
