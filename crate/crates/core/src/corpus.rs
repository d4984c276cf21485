//! Tokenization, vocabularies, extended-vocabulary (copy) encoding, dataset
//! files and padded batches.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Bijection between tokens and ids `0..len()`, reserved ids first.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ranks tokens by descending frequency, ties broken lexicographically,
    /// and keeps at most `max_size` entries including the reserved ones.
    pub fn build<I, S>(stream: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for tok in stream {
            let tok = tok.as_ref();
            if RESERVED.contains(&tok) {
                continue;
            }
            match counts.get_mut(tok) {
                Some(c) => *c += 1,
                None => {
                    counts.insert(tok.to_owned(), 1);
                }
            }
        }
        Self::from_counts(counts, max_size)
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (String, u64)>, max_size: usize) -> Result<Self> {
        if max_size <= NUM_RESERVED {
            return Err(Error::invalid(format!(
                "vocabulary size must be at least {}, got {max_size}",
                NUM_RESERVED + 1
            )));
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_RESERVED);

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut freq = vec![0; NUM_RESERVED];
        for (tok, count) in ranked {
            tokens.push(tok);
            freq.push(count);
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary {
            tokens,
            counts: freq,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `UNK`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> Option<u64> {
        self.counts.get(id).copied()
    }

    /// Writes `token count` lines for the non-reserved entries.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (tok, count) in self.tokens.iter().zip(&self.counts).skip(NUM_RESERVED) {
            writeln!(w, "{tok} {count}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, max_size: usize) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut counts = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                msg: msg.to_owned(),
            };
            let (tok, count) = line.rsplit_once(' ').ok_or_else(|| parse_err("expected `token count`"))?;
            let count = count.parse::<u64>().map_err(|_| parse_err("count is not an integer"))?;
            counts.push((tok.to_owned(), count));
        }
        Self::from_counts(counts, max_size)
    }
}

/// Source side of an example in both the fixed and the extended vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSource {
    /// Fixed-vocabulary ids, out-of-vocabulary tokens as `UNK`.
    pub ids: Vec<usize>,
    /// Like `ids` but the k-th distinct OOV token maps to `V + k`.
    pub extended_ids: Vec<usize>,
    /// Distinct OOV tokens in order of first appearance.
    pub oovs: Vec<String>,
}

impl EncodedSource {
    pub fn new(tokens: &[String], vocab: &Vocabulary) -> Self {
        let v = vocab.len();
        let mut oovs: Vec<String> = Vec::new();
        let mut ids = Vec::with_capacity(tokens.len());
        let mut extended_ids = Vec::with_capacity(tokens.len());
        for tok in tokens {
            match vocab.get(tok) {
                Some(id) if id != UNK => {
                    ids.push(id);
                    extended_ids.push(id);
                }
                _ => {
                    let k = match oovs.iter().position(|o| o == tok) {
                        Some(k) => k,
                        None => {
                            oovs.push(tok.clone());
                            oovs.len() - 1
                        }
                    };
                    ids.push(UNK);
                    extended_ids.push(v + k);
                }
            }
        }
        EncodedSource {
            ids,
            extended_ids,
            oovs,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `V + |oovs|`.
    pub fn extended_size(&self, vocab_size: usize) -> usize {
        vocab_size + self.oovs.len()
    }

    /// Extended id for `token` within this example, `UNK` if it is neither in
    /// the vocabulary nor copied from the source.
    pub fn extended_id(&self, token: &str, vocab: &Vocabulary) -> usize {
        match vocab.get(token) {
            Some(id) => id,
            None => self
                .oovs
                .iter()
                .position(|o| o == token)
                .map_or(UNK, |k| vocab.len() + k),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LengthLimits {
    pub source: usize,
    pub target: usize,
}

impl LengthLimits {
    pub const CNN_DM: LengthLimits = LengthLimits {
        source: 200,
        target: 25,
    };
    pub const COVID: LengthLimits = LengthLimits {
        source: 55,
        target: 15,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub source: EncodedSource,
    /// Fixed-vocabulary target ids ending in `EOS`.
    pub target_ids: Vec<usize>,
    /// Target ids with source-copied OOV tokens mapped to `V + k`, ending in `EOS`.
    pub target_extended_ids: Vec<usize>,
}

impl EncodedExample {
    /// Truncates both sides to `limits`, then encodes. Both sequences must be
    /// non-empty.
    pub fn new(source: &[String], target: &[String], vocab: &Vocabulary, limits: LengthLimits) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::invalid("source and target must be non-empty"));
        }
        if limits.source == 0 || limits.target == 0 {
            return Err(Error::invalid("length limits must be at least 1"));
        }
        let source = &source[..source.len().min(limits.source)];
        let target = &target[..target.len().min(limits.target)];
        let src = EncodedSource::new(source, vocab);

        let mut target_ids: Vec<usize> = target.iter().map(|t| vocab.id(t)).collect();
        let mut target_extended_ids: Vec<usize> =
            target.iter().map(|t| src.extended_id(t, vocab)).collect();
        target_ids.push(EOS);
        target_extended_ids.push(EOS);
        Ok(EncodedExample {
            source: src,
            target_ids,
            target_extended_ids,
        })
    }

    /// Reference summary tokens as extended ids, without the trailing `EOS`.
    pub fn reference(&self) -> &[usize] {
        &self.target_extended_ids[..self.target_extended_ids.len() - 1]
    }
}

/// Maps ids back to tokens. Ids `>= V` index into `oovs`; output stops at
/// the first `EOS` and never contains `PAD`.
pub fn decode_ids(ids: &[usize], vocab: &Vocabulary, oovs: &[String]) -> Result<Vec<String>> {
    let v = vocab.len();
    let mut out = Vec::new();
    for &id in ids {
        if id == EOS {
            break;
        }
        if id == PAD {
            continue;
        }
        let tok = if id < v {
            vocab.token(id).expect("id below vocabulary size")
        } else {
            oovs.get(id - v).ok_or(Error::IdOutOfRange {
                id,
                size: v + oovs.len(),
            })?
        };
        out.push(tok.to_owned());
    }
    Ok(out)
}

pub type TokenPair = (Vec<String>, Vec<String>);

/// Reads `source<TAB>target` lines.
pub fn read_pairs<R: BufRead>(reader: R, path: &Path) -> Result<Vec<TokenPair>> {
    let mut pairs = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let err = |msg: &str| Error::Parse {
            path: path.to_owned(),
            line: n + 1,
            msg: msg.to_owned(),
        };
        let (src, tgt) = line.split_once('\t').ok_or_else(|| err("missing tab separator"))?;
        let (src, tgt) = (tokenize(src), tokenize(tgt));
        if src.is_empty() {
            return Err(err("empty source"));
        }
        if tgt.is_empty() {
            return Err(err("empty target"));
        }
        pairs.push((src, tgt));
    }
    Ok(pairs)
}

pub fn load_dataset(path: &Path) -> Result<Vec<TokenPair>> {
    let file = File::open(path)?;
    read_pairs(BufReader::new(file), path)
}

pub fn encode_pairs(pairs: &[TokenPair], vocab: &Vocabulary, limits: LengthLimits) -> Result<Vec<EncodedExample>> {
    pairs
        .iter()
        .map(|(s, t)| EncodedExample::new(s, t, vocab, limits))
        .collect()
}

/// Padded view over a group of examples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub examples: Vec<EncodedExample>,
    /// Extended source ids, `PAD` after each true length.
    pub source: Vec<Vec<usize>>,
    /// Extended target ids (with `EOS`), `PAD` after each true length.
    pub target: Vec<Vec<usize>>,
    pub source_lens: Vec<usize>,
    pub target_lens: Vec<usize>,
    pub oov_counts: Vec<usize>,
    pub max_oov: usize,
}

impl Batch {
    pub fn new(examples: Vec<EncodedExample>) -> Self {
        let source_lens: Vec<usize> = examples.iter().map(|e| e.source.len()).collect();
        let target_lens: Vec<usize> = examples.iter().map(|e| e.target_extended_ids.len()).collect();
        let oov_counts: Vec<usize> = examples.iter().map(|e| e.source.oovs.len()).collect();
        let pad = |seq: &[usize], width: usize| {
            let mut row = seq.to_vec();
            row.resize(width, PAD);
            row
        };
        let src_width = source_lens.iter().copied().max().unwrap_or(0);
        let tgt_width = target_lens.iter().copied().max().unwrap_or(0);
        Batch {
            source: examples.iter().map(|e| pad(&e.source.extended_ids, src_width)).collect(),
            target: examples.iter().map(|e| pad(&e.target_extended_ids, tgt_width)).collect(),
            max_oov: oov_counts.iter().copied().max().unwrap_or(0),
            source_lens,
            target_lens,
            oov_counts,
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn extended_vocab_size(&self, vocab_size: usize) -> usize {
        vocab_size + self.max_oov
    }

    /// Target tokens excluding padding (each row includes its `EOS`).
    pub fn num_target_tokens(&self) -> usize {
        self.target_lens.iter().sum()
    }
}

/// Splits `examples` into batches after a seeded shuffle.
pub fn shuffled_batches(examples: &[EncodedExample], batch_size: usize, seed: u64) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size.max(1))
        .map(|chunk| Batch::new(chunk.iter().map(|&i| examples[i].clone()).collect()))
        .collect()
}
