//! Shared oracles for the integration tests. Everything here is computed
//! independently of the estimators under test: finite differences, brute
//! force enumeration and naive counting.

#![allow(dead_code)]

use std::collections::BTreeSet;

use advsum::corpus::{encode_pairs, tokenize, EncodedExample, LengthLimits, TokenPair, Vocabulary};
use advsum::generator::{Generator, GeneratorConfig};
use advsum::policy::stream_rng;
use advsum::tensor::{GradSet, ParamSet, Tape, Tensor, Var};
use advsum::testbed::TabularPolicy;
use rand::seq::IndexedRandom;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub worst: f64,
    pub worst_at: String,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.worst <= FD_TOLERANCE
    }
}

/// Central differences of `loss` against `analytic` for up to
/// `max_per_tensor` randomly chosen coordinates of every tensor (all of them
/// when the tensor is smaller).
pub fn finite_difference_check<F>(params: &ParamSet, analytic: &GradSet, loss: F, max_per_tensor: usize, seed: u64) -> GradReport
where
    F: Fn(&ParamSet) -> f64,
{
    let mut rng = stream_rng(seed, 77);
    let mut work = params.clone();
    let mut report = GradReport {
        worst: 0.0,
        worst_at: String::new(),
        checked: 0,
    };
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for (name, grad) in names.iter().zip(analytic.iter()) {
        let len = grad.len();
        let coords: Vec<usize> = if len <= max_per_tensor {
            (0..len).collect()
        } else {
            (0..max_per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for i in coords {
            let original = work.by_name(name).unwrap().data()[i];
            work.by_name_mut(name).unwrap().data_mut()[i] = original + FD_STEP;
            let up = loss(&work);
            work.by_name_mut(name).unwrap().data_mut()[i] = original - FD_STEP;
            let down = loss(&work);
            work.by_name_mut(name).unwrap().data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.worst {
                report.worst = err;
                report.worst_at = format!("{name}[{i}]: analytic {} numeric {numeric}", grad.data()[i]);
            }
        }
    }
    report
}

/// Gradient check for a function recorded on a tape. `inputs` become
/// parameters; `f` maps their variables to an output of any shape, which is
/// reduced to a scalar by a fixed random projection.
pub fn check_tape_function<F>(inputs: &[(&str, Tensor)], f: F, seed: u64) -> GradReport
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let mut params = ParamSet::new();
    for (name, t) in inputs {
        params.insert(*name, t.clone());
    }
    let output_shape = {
        let mut tape = Tape::new();
        let vars = bind_all(&mut tape, &params);
        let out = f(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let projection = random_tensor(&output_shape, 1.0, &mut stream_rng(seed, 5));
    let eval = |p: &ParamSet, grads: Option<&mut GradSet>| -> f64 {
        let mut tape = Tape::new();
        let vars = bind_all(&mut tape, p);
        let out = f(&mut tape, &vars);
        let w = tape.constant(projection.clone()).unwrap();
        let weighted = tape.mul(out, w).unwrap();
        let s = tape.sum(weighted).unwrap();
        if let Some(g) = grads {
            tape.backward(s, g).unwrap();
        }
        tape.scalar(s)
    };
    let mut grads = GradSet::zeros_like(&params);
    eval(&params, Some(&mut grads));
    finite_difference_check(&params, &grads, |p| eval(p, None), usize::MAX, seed)
}

fn bind_all<'p>(tape: &mut Tape<'p>, params: &'p ParamSet) -> Vec<Var> {
    params
        .iter()
        .map(|(name, _)| tape.param(params, params.id(name).unwrap()))
        .collect()
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Toy corpora

const WORDS: &[&str] = &[
    "the", "a", "city", "council", "voted", "to", "approve", "new", "budget", "for", "schools", "and", "roads", "after",
    "long", "debate", "on", "monday", "storm", "hit", "coast", "leaving", "thousands", "without", "power", "team",
    "won", "final", "match", "fans", "celebrated", "in", "streets", "company", "reported", "record", "profits", "this",
    "quarter", "shares", "rose", "sharply", "scientists", "found", "water", "mars", "rover", "data", "shows", "ice",
    "minister", "announced", "plan", "cut", "taxes", "families", "hospital", "opened", "wing", "children",
];

/// `n` deterministic article/summary pairs. Sources are 10 to 16 words; the
/// summary copies 3 to 5 source words in order, so it is learnable both by
/// generation and by copying.
pub fn toy_pairs(n: usize, seed: u64) -> Vec<TokenPair> {
    let mut rng = stream_rng(seed, 3);
    (0..n)
        .map(|_| {
            let len = rng.random_range(10..=16);
            let source: Vec<String> = (0..len).map(|_| WORDS.choose(&mut rng).unwrap().to_string()).collect();
            let k = rng.random_range(3..=5);
            let mut picks: Vec<usize> = (0..len).collect();
            picks.sort_by_key(|_| rng.random::<u32>());
            let mut picks: Vec<usize> = picks[..k].to_vec();
            picks.sort_unstable();
            let target = picks.iter().map(|&i| source[i].clone()).collect();
            (source, target)
        })
        .collect()
}

pub fn toy_vocab(pairs: &[TokenPair], max_size: usize) -> Vocabulary {
    let stream = pairs.iter().flat_map(|(s, t)| s.iter().chain(t).map(String::as_str));
    Vocabulary::build(stream, max_size).unwrap()
}

pub fn toy_examples(pairs: &[TokenPair], vocab: &Vocabulary, limits: LengthLimits) -> Vec<EncodedExample> {
    encode_pairs(pairs, vocab, limits).unwrap()
}

pub fn example(source: &str, target: &str, vocab: &Vocabulary) -> EncodedExample {
    EncodedExample::new(&tokenize(source), &tokenize(target), vocab, LengthLimits::CNN_DM).unwrap()
}

pub fn small_generator(vocab_size: usize, emb_dim: usize, hidden_dim: usize, seed: u64) -> Generator {
    let config = GeneratorConfig {
        vocab_size,
        emb_dim,
        hidden_dim,
    };
    Generator::new(config, &mut stream_rng(seed, 0)).unwrap()
}

// ---------------------------------------------------------------------------
// Enumeration oracles for the tabular policy

/// All sequences of exactly `len` tokens over `0..vocab`.
pub fn all_sequences(vocab: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..vocab).map(move |t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
    }
    out
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Next-token distribution computed directly from the logits table.
pub fn row_distribution(policy: &TabularPolicy, prefix: &[usize]) -> Vec<f64> {
    let v = policy.vocab();
    let node = policy.node(prefix).unwrap();
    let table = policy_logits(policy);
    softmax(&table[node * v..(node + 1) * v])
}

pub fn policy_logits(policy: &TabularPolicy) -> Vec<f64> {
    use advsum::policy::TrainablePolicy;
    policy.params().by_name("logits").unwrap().data().to_vec()
}

/// `P(suffix | prefix)`.
pub fn continuation_probability(policy: &TabularPolicy, prefix: &[usize], suffix: &[usize]) -> f64 {
    let mut seq = prefix.to_vec();
    let mut p = 1.0;
    for &tok in suffix {
        p *= row_distribution(policy, &seq)[tok];
        seq.push(tok);
    }
    p
}

/// `E[R(Y) | Y starts with prefix]` by enumerating every completion to
/// `policy.max_len()` tokens (the vocabulary must not contain `EOS`).
pub fn exact_action_value(policy: &TabularPolicy, prefix: &[usize], reward: &dyn Fn(&[usize]) -> f64) -> f64 {
    let rest = policy.max_len() - prefix.len();
    all_sequences(policy.vocab(), rest)
        .iter()
        .map(|suffix| {
            let mut full = prefix.to_vec();
            full.extend_from_slice(suffix);
            continuation_probability(policy, prefix, suffix) * reward(&full)
        })
        .sum()
}

pub fn exact_expected_reward(policy: &TabularPolicy, reward: &dyn Fn(&[usize]) -> f64) -> f64 {
    exact_action_value(policy, &[], reward)
}

/// Exact `∇_logits E[R]` with a baseline `b`, via
/// `Σ_Y P(Y) (R(Y) - b) Σ_t ∂ log P(y_t | Y_{<t})`, where the derivative of a
/// log-softmax row is `onehot(y_t) - p`.
pub fn exact_policy_gradient(policy: &TabularPolicy, reward: &dyn Fn(&[usize]) -> f64, baseline: f64) -> Vec<f64> {
    let v = policy.vocab();
    let mut grad = vec![0.0; policy_logits(policy).len()];
    for seq in all_sequences(v, policy.max_len()) {
        let weight = continuation_probability(policy, &[], &seq) * (reward(&seq) - baseline);
        for t in 0..seq.len() {
            let node = policy.node(&seq[..t]).unwrap();
            let p = row_distribution(policy, &seq[..t]);
            for k in 0..v {
                let indicator = if k == seq[t] { 1.0 } else { 0.0 };
                grad[node * v + k] += weight * (indicator - p[k]);
            }
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// ROUGE oracles

/// LCS length by trying every subsequence of `a`, longest first.
pub fn brute_force_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    assert!(a.len() <= 16, "exponential oracle");
    let is_subsequence = |sub: &[&T]| {
        let mut it = b.iter();
        sub.iter().all(|x| it.any(|y| y == *x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let sub: Vec<&T> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if is_subsequence(&sub) {
            best = len;
        }
    }
    best
}

/// Clipped n-gram overlap by explicit counting over distinct n-grams.
pub fn hand_ngram_overlap<T: PartialEq + Ord + Clone>(cand: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let grams = |s: &[T]| -> Vec<Vec<T>> {
        if s.len() < n {
            Vec::new()
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let (cg, rg) = (grams(cand), grams(reference));
    let distinct: BTreeSet<&Vec<T>> = cg.iter().collect();
    let overlap = distinct
        .iter()
        .map(|g| {
            let c = cg.iter().filter(|x| x == g).count();
            let r = rg.iter().filter(|x| x == g).count();
            c.min(r)
        })
        .sum();
    (overlap, cg.len(), rg.len())
}

/// `(p, r, f1)` from counts with zero denominators giving zero.
pub fn prf(overlap: usize, cand_total: usize, ref_total: usize) -> (f64, f64, f64) {
    let p = if cand_total == 0 { 0.0 } else { overlap as f64 / cand_total as f64 };
    let r = if ref_total == 0 { 0.0 } else { overlap as f64 / ref_total as f64 };
    let f = if overlap == 0 { 0.0 } else { 2.0 * overlap as f64 / (cand_total + ref_total) as f64 };
    (p, r, f)
}

/// Least-squares slope of `ys` against `0..n`.
pub fn trend_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        num += dx * (y - my);
        den += dx * dx;
    }
    num / den
}
