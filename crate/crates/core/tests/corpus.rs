mod common;

use std::collections::HashMap;
use std::io::Write;

use advsum::corpus::{
    decode_ids, encode_pairs, load_dataset, shuffled_batches, tokenize, Batch, EncodedExample, EncodedSource, LengthLimits,
    Vocabulary, EOS, NUM_RESERVED, PAD, SOS, UNK,
};
use advsum::policy::stream_rng;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn toks(s: &str) -> Vec<String> {
    tokenize(s)
}

#[test]
fn reserved_ids_then_frequency_order() {
    let v = Vocabulary::build(toks("a a b"), 10).unwrap();
    assert_eq!((PAD, UNK, SOS, EOS), (0, 1, 2, 3));
    assert_eq!((v.id("a"), v.id("b")), (4, 5));
    assert_eq!(v.len(), 6);
    assert_eq!(v.id("never"), UNK);
}

#[test]
fn cutoff_breaks_ties_lexicographically() {
    let v = Vocabulary::build(toks("c b a"), 5).unwrap();
    assert_eq!(v.len(), 5);
    assert_eq!(v.get("a"), Some(4));
    assert_eq!(v.get("b"), None);
    assert!(Vocabulary::build(toks("a"), 4).is_err());
}

#[test]
fn empty_stream_keeps_only_reserved_tokens() {
    let v = Vocabulary::build(Vec::<String>::new(), 10).unwrap();
    assert_eq!(v.len(), NUM_RESERVED);
}

#[test]
fn large_vocabulary_matches_count_and_sort_oracle() {
    let mut rng = stream_rng(1, 0);
    let mut stream = Vec::new();
    for i in 0..100_000 {
        let reps = rng.random_range(1..4);
        for _ in 0..reps {
            stream.push(format!("w{i}"));
        }
    }
    let v = Vocabulary::build(&stream, 50_000).unwrap();
    assert_eq!(v.len(), 50_000);

    let mut counts: HashMap<&str, u64> = HashMap::new();
    for t in &stream {
        *counts.entry(t).or_default() += 1;
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    for (i, (tok, count)) in ranked.iter().take(50_000 - NUM_RESERVED).enumerate() {
        assert_eq!(v.token(NUM_RESERVED + i), Some(*tok));
        assert_eq!(v.count(NUM_RESERVED + i), Some(*count));
    }
}

#[test]
fn vocabulary_file_round_trip() {
    let v = Vocabulary::build(toks("x y y z z z"), 20).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    v.save(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "z 3\ny 2\nx 1\n");
    assert_eq!(Vocabulary::load(&path, 20).unwrap(), v);
}

#[test]
fn source_oov_gets_an_extended_id() {
    let vocab = Vocabulary::build(toks("cat"), 10).unwrap();
    let v = vocab.len();
    let ex = EncodedExample::new(&toks("cat zorp"), &toks("zorp"), &vocab, LengthLimits::CNN_DM).unwrap();
    assert_eq!(ex.source.ids, vec![vocab.id("cat"), UNK]);
    assert_eq!(ex.source.extended_ids, vec![vocab.id("cat"), v]);
    assert_eq!(ex.source.oovs, vec!["zorp".to_string()]);
    assert_eq!(ex.target_extended_ids, vec![v, EOS]);
    assert_eq!(ex.target_ids, vec![UNK, EOS]);

    // A target OOV absent from the source stays UNK.
    let ex = EncodedExample::new(&toks("cat"), &toks("blip cat"), &vocab, LengthLimits::CNN_DM).unwrap();
    assert_eq!(ex.target_extended_ids, vec![UNK, vocab.id("cat"), EOS]);
}

#[test]
fn decode_examples() {
    let vocab = Vocabulary::build(toks("cat"), 10).unwrap();
    let oovs = vec!["zorp".to_string()];
    assert_eq!(decode_ids(&[vocab.id("cat"), EOS, vocab.id("cat")], &vocab, &[]).unwrap(), toks("cat"));
    assert_eq!(decode_ids(&[vocab.len()], &vocab, &oovs).unwrap(), toks("zorp"));
    assert_eq!(decode_ids(&[PAD, vocab.id("cat"), PAD], &vocab, &[]).unwrap(), toks("cat"));
    assert!(decode_ids(&[vocab.len() + 1], &vocab, &oovs).is_err());
}

#[test]
fn truncation_keeps_both_sides_non_empty() {
    let vocab = Vocabulary::build(toks("a b c d"), 10).unwrap();
    let limits = LengthLimits { source: 2, target: 1 };
    let ex = EncodedExample::new(&toks("a b c d"), &toks("c d"), &vocab, limits).unwrap();
    assert_eq!(ex.source.len(), 2);
    assert_eq!(ex.target_extended_ids, vec![vocab.id("c"), EOS]);
    assert!(EncodedExample::new(&[], &toks("a"), &vocab, limits).is_err());
    assert!(EncodedExample::new(&toks("a"), &[], &vocab, limits).is_err());
    assert!(EncodedExample::new(&toks("a"), &toks("a"), &vocab, LengthLimits { source: 0, target: 1 }).is_err());
}

fn write_file(contents: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(contents.as_bytes()).unwrap();
    f
}

#[test]
fn dataset_lines_are_lowercased_pairs() {
    let f = write_file("A b\tC\nx  y\tZ w\n");
    let pairs = load_dataset(f.path()).unwrap();
    assert_eq!(pairs, vec![(toks("a b"), toks("c")), (toks("x y"), toks("z w"))]);
    assert!(load_dataset(write_file("").path()).unwrap().is_empty());
}

#[test]
fn malformed_dataset_reports_the_line() {
    let err = load_dataset(write_file("a\tb\nno tab here\n").path()).unwrap_err().to_string();
    assert!(err.contains('2'), "{err}");
    assert!(load_dataset(write_file("\tb\n").path()).is_err());
    assert!(load_dataset(std::path::Path::new("/nonexistent/data.tsv")).is_err());
}

#[test]
fn large_dataset_loads_every_line() {
    let text: String = (0..38_540).map(|i| format!("abstract {i} words\ttitle {i}\n")).collect();
    let pairs = load_dataset(write_file(&text).path()).unwrap();
    assert_eq!(pairs.len(), 38_540);
    assert_eq!(pairs[38_539], (toks("abstract 38539 words"), toks("title 38539")));
}

#[test]
fn batches_pad_after_true_lengths() {
    let pairs = toy_pairs(9, 3);
    let vocab = toy_vocab(&pairs, 20);
    let examples = encode_pairs(&pairs, &vocab, LengthLimits { source: 12, target: 4 }).unwrap();
    let batches = shuffled_batches(&examples, 4, 1);
    assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 1]);
    for batch in &batches {
        assert_eq!(batch.extended_vocab_size(vocab.len()), vocab.len() + batch.oov_counts.iter().max().unwrap());
        for (i, ex) in batch.examples.iter().enumerate() {
            let len = batch.source_lens[i];
            assert!(len <= 12 && batch.target_lens[i] <= 5);
            assert_eq!(&batch.source[i][..len], &ex.source.extended_ids[..]);
            assert!(batch.source[i][len..].iter().all(|&t| t == PAD));
            assert!(batch.target[i][batch.target_lens[i]..].iter().all(|&t| t == PAD));
        }
    }
    let again = shuffled_batches(&examples, 4, 1);
    assert_eq!(batches[0].examples, again[0].examples);
}

fn corpus_strategy() -> impl Strategy<Value = (Vec<String>, Vec<String>, usize)> {
    let word = prop::sample::select(vec!["a", "b", "c", "d", "e", "f", "g", "h"]).prop_map(String::from);
    (
        prop::collection::vec(word.clone(), 1..20),
        prop::collection::vec(word, 1..10),
        5usize..9,
    )
}

proptest! {
    #[test]
    fn encoding_invariants((source, target, max) in corpus_strategy()) {
        let vocab = Vocabulary::build(source.iter().chain(&target).take(6), max).unwrap();
        let v = vocab.len();
        let ex = EncodedExample::new(&source, &target, &vocab, LengthLimits::CNN_DM).unwrap();
        let src = &ex.source;
        prop_assert_eq!(src.ids.len(), src.extended_ids.len());
        for (&id, &ext) in src.ids.iter().zip(&src.extended_ids) {
            prop_assert_eq!(id == UNK, ext >= v);
            if id != UNK {
                prop_assert_eq!(id, ext);
            }
        }
        let mut seen = src.oovs.clone();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), src.oovs.len());
        for (k, oov) in src.oovs.iter().enumerate() {
            let first = source.iter().position(|t| t == oov).unwrap();
            prop_assert_eq!(src.extended_ids[first], v + k);
        }
        for &t in ex.reference() {
            prop_assert!(t < v || src.oovs.len() > t - v);
        }
        prop_assert_eq!(src.extended_size(v), v + src.oovs.len());
    }

    #[test]
    fn decode_inverts_encode((source, _, max) in corpus_strategy()) {
        let vocab = Vocabulary::build(source.iter().take(4), max).unwrap();
        let src = EncodedSource::new(&source, &vocab);
        prop_assert_eq!(decode_ids(&src.extended_ids, &vocab, &src.oovs).unwrap(), source);
    }
}
