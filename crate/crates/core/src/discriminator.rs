//! TextCNN discriminator: embedding, convolution banks with max-over-time
//! pooling, one highway layer and a sigmoid output scoring a summary as real.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::policy::{stream_rng, SequenceScorer};
use crate::tensor::{clip_grad_norm, AdamState, GradSet, ParamId, ParamSet, Tape, Tensor, Var};

/// Probability floor inside the cross-entropy logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub windows: Vec<usize>,
    pub kernels_per_window: usize,
    /// Fixed input length; sequences are truncated or padded to it.
    pub seq_len: usize,
}

impl DiscriminatorConfig {
    /// Desk defaults: windows 1 to 4 with 25 kernels each.
    pub fn desk(vocab_size: usize, emb_dim: usize, seq_len: usize) -> Self {
        DiscriminatorConfig {
            vocab_size,
            emb_dim,
            windows: vec![1, 2, 3, 4],
            kernels_per_window: 25,
            seq_len,
        }
    }

    /// Pooled feature width, also the highway width.
    pub fn feature_dim(&self) -> usize {
        self.windows.len() * self.kernels_per_window
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size <= UNK || self.emb_dim == 0 || self.kernels_per_window == 0 || self.windows.is_empty() {
            return Err(Error::invalid(format!("invalid discriminator config: {self:?}")));
        }
        if let Some(&h) = self.windows.iter().find(|&&h| h == 0 || h > self.seq_len) {
            return Err(Error::invalid(format!(
                "window {h} does not fit sequence length {}",
                self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ParamIds {
    embedding: ParamId,
    conv: Vec<(ParamId, ParamId)>,
    gate_w: ParamId,
    gate_b: ParamId,
    transform_w: ParamId,
    transform_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Discriminator weights bound on a tape.
#[derive(Clone, Debug)]
pub struct DiscriminatorVars {
    pub embedding: Var,
    pub conv: Vec<(Var, Var)>,
    pub gate: (Var, Var),
    pub transform: (Var, Var),
    pub output: (Var, Var),
}

/// Highway weights: gate `(W_T, b_T)` and transform `(W_F, b_F)`.
#[derive(Clone, Copy, Debug)]
pub struct HighwayVars {
    pub gate: (Var, Var),
    pub transform: (Var, Var),
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
    ids: ParamIds,
}

/// Truncates or pads `sequence` to `len` ids. Reading stops at the first
/// `EOS`; ids outside the fixed vocabulary become `UNK`.
pub fn pad_sequence(sequence: &[usize], len: usize, vocab_size: usize) -> Vec<usize> {
    let mut out: Vec<usize> = sequence
        .iter()
        .take_while(|&&id| id != EOS)
        .take(len)
        .map(|&id| if id < vocab_size { id } else { UNK })
        .collect();
    out.resize(len, PAD);
    out
}

/// `tanh(windows(x, h) W + b)`: one feature column per kernel, `[T-h+1, K]`.
pub fn conv_features(tape: &mut Tape<'_>, embedded: Var, kernels: Var, bias: Var, window: usize) -> Result<Var> {
    let windows = tape.windows(embedded, window)?;
    let pre = tape.matmul(windows, kernels)?;
    let pre = tape.add_bias(pre, bias)?;
    tape.tanh(pre)
}

/// `τ ⊙ relu(W_F c + b_F) + (1 - τ) ⊙ c` with `τ = σ(W_T c + b_T)`.
pub fn highway(tape: &mut Tape<'_>, w: &HighwayVars, input: Var) -> Result<Var> {
    let gate = tape.matmul(w.gate.0, input)?;
    let gate = tape.add(gate, w.gate.1)?;
    let gate = tape.sigmoid(gate)?;
    let transformed = tape.matmul(w.transform.0, input)?;
    let transformed = tape.add(transformed, w.transform.1)?;
    let transformed = tape.relu(transformed)?;
    let carry = tape.affine(gate, -1.0, 1.0)?;
    let a = tape.mul(gate, transformed)?;
    let b = tape.mul(carry, input)?;
    tape.add(a, b)
}

/// `-y log ŷ - (1 - y) log(1 - ŷ)` on a one-element probability.
pub fn bce_on(tape: &mut Tape<'_>, prob: Var, label: bool) -> Result<Var> {
    let p = if label {
        tape.affine(prob, 1.0, PROB_FLOOR)?
    } else {
        tape.affine(prob, -1.0, 1.0 + PROB_FLOOR)?
    };
    let logp = tape.ln(p)?;
    tape.neg(logp)
}

/// Scalar binary cross-entropy with the same floor as [`bce_on`].
pub fn bce(label: bool, prob: f64) -> f64 {
    if label {
        -(prob + PROB_FLOOR).ln()
    } else {
        -(1.0 - prob + PROB_FLOOR).ln()
    }
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (params, ids) = Self::layout(&config, Some(rng));
        Ok(Discriminator { config, params, ids })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let (template, ids) = Self::layout::<rand_chacha::ChaCha8Rng>(&config, None);
        template.check_congruent(&params)?;
        Ok(Discriminator { config, params, ids })
    }

    fn layout<R: Rng + ?Sized>(config: &DiscriminatorConfig, mut rng: Option<&mut R>) -> (ParamSet, ParamIds) {
        let (k, n, f) = (config.emb_dim, config.kernels_per_window, config.feature_dim());
        let mut params = ParamSet::new();
        let mut init = |params: &mut ParamSet, name: String, shape: &[usize], std: Option<f64>| {
            let t = match (rng.as_deref_mut(), std) {
                (Some(rng), Some(std)) => Tensor::normal(shape, std, rng),
                (Some(rng), None) => Tensor::uniform(shape, 0.08, rng),
                (None, _) => Tensor::zeros(shape),
            };
            params.insert(name, t)
        };
        let embedding = init(&mut params, "embedding".into(), &[config.vocab_size, k], None);
        let conv = config
            .windows
            .iter()
            .map(|&h| {
                let fan_in = (h * k) as f64;
                let w = init(&mut params, format!("conv{h}.w"), &[h * k, n], Some(fan_in.sqrt().recip()));
                let b = params.insert(format!("conv{h}.b"), Tensor::zeros(&[n]));
                (w, b)
            })
            .collect();
        let std = Some((f as f64).sqrt().recip());
        let gate_w = init(&mut params, "highway.gate.w".into(), &[f, f], std);
        let gate_b = params.insert("highway.gate.b", Tensor::zeros(&[f]));
        let transform_w = init(&mut params, "highway.transform.w".into(), &[f, f], std);
        let transform_b = params.insert("highway.transform.b", Tensor::zeros(&[f]));
        let out_w = init(&mut params, "out.w".into(), &[f], std);
        let out_b = params.insert("out.b", Tensor::zeros(&[1]));
        let ids = ParamIds {
            embedding,
            conv,
            gate_w,
            gate_b,
            transform_w,
            transform_b,
            out_w,
            out_b,
        };
        (params, ids)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> DiscriminatorVars {
        let p = &self.params;
        let ids = &self.ids;
        DiscriminatorVars {
            embedding: tape.param(p, ids.embedding),
            conv: ids.conv.iter().map(|&(w, b)| (tape.param(p, w), tape.param(p, b))).collect(),
            gate: (tape.param(p, ids.gate_w), tape.param(p, ids.gate_b)),
            transform: (tape.param(p, ids.transform_w), tape.param(p, ids.transform_b)),
            output: (tape.param(p, ids.out_w), tape.param(p, ids.out_b)),
        }
    }

    fn check_padded(&self, padded: &[usize]) -> Result<()> {
        if padded.len() != self.config.seq_len {
            return Err(Error::invalid(format!(
                "expected a padded sequence of length {}, got {}",
                self.config.seq_len,
                padded.len()
            )));
        }
        Ok(())
    }

    /// Per-window feature maps `[T-h+1, K]`.
    pub fn feature_maps_on(&self, tape: &mut Tape<'_>, vars: &DiscriminatorVars, padded: &[usize]) -> Result<Vec<Var>> {
        self.check_padded(padded)?;
        let embedded = tape.lookup(vars.embedding, padded)?;
        self.config
            .windows
            .iter()
            .zip(&vars.conv)
            .map(|(&h, &(w, b))| conv_features(tape, embedded, w, b, h))
            .collect()
    }

    /// Probability that `padded` is a real summary, as a one-element tensor.
    pub fn classify_on(&self, tape: &mut Tape<'_>, vars: &DiscriminatorVars, padded: &[usize]) -> Result<Var> {
        let maps = self.feature_maps_on(tape, vars, padded)?;
        let pooled = maps
            .into_iter()
            .map(|m| tape.max_over_time(m))
            .collect::<Result<Vec<_>>>()?;
        let features = tape.concat(&pooled)?;
        let hw = HighwayVars {
            gate: vars.gate,
            transform: vars.transform,
        };
        let features = highway(tape, &hw, features)?;
        let z = tape.dot(vars.output.0, features)?;
        let z = tape.add(z, vars.output.1)?;
        tape.sigmoid(z)
    }

    pub fn pad(&self, sequence: &[usize]) -> Vec<usize> {
        pad_sequence(sequence, self.config.seq_len, self.config.vocab_size)
    }

    /// Feature map values for an already padded sequence.
    pub fn feature_maps(&self, padded: &[usize]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let maps = self.feature_maps_on(&mut tape, &vars, padded)?;
        Ok(maps.into_iter().map(|m| tape.tensor(m)).collect())
    }

    /// Probability that an already padded sequence is real.
    pub fn classify(&self, padded: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let p = self.classify_on(&mut tape, &vars, padded)?;
        Ok(tape.scalar(p))
    }

    /// Probability that a raw output sequence is real.
    pub fn score_sequence(&self, sequence: &[usize]) -> Result<f64> {
        self.classify(&self.pad(sequence))
    }

    /// Balanced objective `mean_real BCE(1) + mean_fake BCE(0)` and its
    /// gradient. At the indistinguishable optimum it equals `2 ln 2`.
    pub fn loss_and_grad(&self, real: &[Vec<usize>], fake: &[Vec<usize>]) -> Result<(f64, GradSet)> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::invalid("discriminator batches must be non-empty"));
        }
        let mut grads = GradSet::zeros_like(&self.params);
        let mut total = 0.0;
        for (set, label) in [(real, true), (fake, false)] {
            let weight = 1.0 / set.len() as f64;
            for seq in set {
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape);
                let p = self.classify_on(&mut tape, &vars, &self.pad(seq))?;
                let loss = bce_on(&mut tape, p, label)?;
                total += weight * tape.scalar(loss);
                let scaled = tape.affine(loss, weight, 0.0)?;
                tape.backward(scaled, &mut grads)?;
            }
        }
        Ok((total, grads))
    }

    /// The balanced objective without gradients.
    pub fn loss(&self, real: &[Vec<usize>], fake: &[Vec<usize>]) -> Result<f64> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::invalid("discriminator batches must be non-empty"));
        }
        let mean = |set: &[Vec<usize>], label| -> Result<f64> {
            let mut s = 0.0;
            for seq in set {
                s += bce(label, self.score_sequence(seq)?);
            }
            Ok(s / set.len() as f64)
        };
        Ok(mean(real, true)? + mean(fake, false)?)
    }

    /// Fraction classified correctly at threshold 0.5.
    pub fn accuracy(&self, real: &[Vec<usize>], fake: &[Vec<usize>]) -> Result<f64> {
        let mut correct = 0usize;
        for seq in real {
            correct += usize::from(self.score_sequence(seq)? > 0.5);
        }
        for seq in fake {
            correct += usize::from(self.score_sequence(seq)? < 0.5);
        }
        Ok(correct as f64 / (real.len() + fake.len()) as f64)
    }
}

impl SequenceScorer for Discriminator {
    fn score(&self, sequence: &[usize]) -> Result<f64> {
        self.score_sequence(sequence)
    }
}

/// Minibatch settings for [`train_discriminator`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

/// Trains on `real` against fresh negatives drawn by `negatives(epoch)` each
/// epoch. The number of negatives must match the number of positives. Returns
/// the mean minibatch loss of every epoch.
pub fn train_discriminator<F>(
    disc: &mut Discriminator,
    adam: &mut AdamState,
    real: &[Vec<usize>],
    mut negatives: F,
    config: DiscTrainConfig,
) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<Vec<Vec<usize>>>,
{
    if real.is_empty() {
        return Err(Error::invalid("no real examples for the discriminator"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let fake = negatives(epoch)?;
        if fake.len() != real.len() {
            return Err(Error::invalid(format!(
                "{} negatives for {} positives; the classes must be balanced",
                fake.len(),
                real.len()
            )));
        }
        let mut rng = stream_rng(config.seed, epoch as u64);
        let mut real_order: Vec<usize> = (0..real.len()).collect();
        let mut fake_order = real_order.clone();
        real_order.shuffle(&mut rng);
        fake_order.shuffle(&mut rng);

        let mut sum = 0.0;
        let mut batches = 0usize;
        for (r, f) in real_order.chunks(config.batch_size).zip(fake_order.chunks(config.batch_size)) {
            let rb: Vec<Vec<usize>> = r.iter().map(|&i| real[i].clone()).collect();
            let fb: Vec<Vec<usize>> = f.iter().map(|&i| fake[i].clone()).collect();
            let (loss, mut grads) = disc.loss_and_grad(&rb, &fb)?;
            if let Some(max) = config.clip_norm {
                clip_grad_norm(&mut grads, max)?;
            }
            adam.step(disc.params_mut(), &grads)?;
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::debug!("discriminator epoch {epoch}: loss {mean:.4}");
        trace.push(mean);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AdamConfig;
    use approx::assert_abs_diff_eq;

    fn small(seed: u64) -> Discriminator {
        let config = DiscriminatorConfig {
            vocab_size: 12,
            emb_dim: 3,
            windows: vec![1, 2, 3],
            kernels_per_window: 4,
            seq_len: 6,
        };
        Discriminator::new(config, &mut stream_rng(seed, 0)).unwrap()
    }

    #[test]
    fn padding_rules() {
        assert_eq!(pad_sequence(&[5, 6, EOS, 7], 5, 10), vec![5, 6, PAD, PAD, PAD]);
        assert_eq!(pad_sequence(&[5, 12, 6, 7], 3, 10), vec![5, UNK, 6]);
        assert_eq!(pad_sequence(&[], 2, 10), vec![PAD, PAD]);
    }

    #[test]
    fn window_longer_than_sequence_is_rejected() {
        let config = DiscriminatorConfig {
            seq_len: 2,
            ..small(0).config().clone()
        };
        assert!(Discriminator::new(config, &mut stream_rng(0, 0)).is_err());
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let mut d = small(1);
        d.params_mut().by_name_mut("out.w").unwrap().fill(0.0);
        assert_abs_diff_eq!(d.score_sequence(&[4, 5, 6]).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn feature_map_lengths() {
        let d = small(2);
        let maps = d.feature_maps(&d.pad(&[4, 5, 6, 7])).unwrap();
        let rows: Vec<usize> = maps.iter().map(|m| m.shape()[0]).collect();
        assert_eq!(rows, vec![6, 5, 4]);
    }

    #[test]
    fn bce_values() {
        assert_abs_diff_eq!(bce(true, 1.0), 0.0, epsilon = 1e-11);
        assert_abs_diff_eq!(bce(true, 0.5), std::f64::consts::LN_2, epsilon = 1e-11);
        assert_abs_diff_eq!(bce(false, 0.5), std::f64::consts::LN_2, epsilon = 1e-11);
    }

    #[test]
    fn unbalanced_negatives_are_rejected() {
        let mut d = small(3);
        let mut adam = AdamState::new(d.params(), AdamConfig::default());
        let real = vec![vec![4, 5]; 4];
        let config = DiscTrainConfig {
            epochs: 1,
            batch_size: 2,
            clip_norm: None,
            seed: 0,
        };
        let err = train_discriminator(&mut d, &mut adam, &real, |_| Ok(vec![vec![6]; 3]), config);
        assert!(err.is_err());
    }
}
