mod common;

use advsum::policy::stream_rng;
use advsum::rouge::{evaluate_corpus, lcs_len, rouge_l, rouge_n, RougeTriple};
use approx::assert_abs_diff_eq;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn identical_and_disjoint_sequences() {
    let a = words("the cat sat on the mat");
    for n in 1..=3 {
        assert_eq!(rouge_n(&a, &a, n).unwrap().f1, 1.0);
    }
    assert_eq!(rouge_l(&a, &a).f1, 1.0);
    let b = words("dogs run far away");
    assert_eq!(rouge_n(&a, &b, 1).unwrap().f1, 0.0);
    assert_eq!(rouge_l(&a, &b).f1, 0.0);
    assert!(rouge_n(&a, &b, 0).is_err());
}

#[test]
fn worked_bigram_example() {
    let s = rouge_n(&words("the cat on the mat"), &words("the cat sat on the mat"), 2).unwrap();
    assert_eq!((s.precision, s.recall, s.f1), (3.0 / 4.0, 3.0 / 5.0, 2.0 / 3.0));
}

#[test]
fn reversed_reference_shares_one_element() {
    let reference: Vec<u32> = (0..7).collect();
    let reversed: Vec<u32> = reference.iter().rev().copied().collect();
    assert_eq!(lcs_len(&reversed, &reference), 1);
    let s = rouge_l(&reversed, &reference);
    assert_eq!((s.precision, s.recall), (1.0 / 7.0, 1.0 / 7.0));
    assert_abs_diff_eq!(s.f1, 1.0 / 7.0, epsilon = 1e-15);
}

#[test]
fn short_and_empty_sides_score_zero() {
    let empty: [u8; 0] = [];
    assert_eq!(rouge_l(&empty, &[1u8, 2]).f1, 0.0);
    assert_eq!(rouge_l(&[1u8], &empty).f1, 0.0);
    let s = rouge_n(&[1u8], &[1u8, 2], 2).unwrap();
    assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
}

#[test]
fn clipped_counts_match_hand_counting() {
    let mut rng = stream_rng(5, 0);
    for _ in 0..300 {
        let len_c = rng.random_range(0..12);
        let len_r = rng.random_range(0..12);
        let cand: Vec<u8> = (0..len_c).map(|_| rng.random_range(0..4)).collect();
        let reference: Vec<u8> = (0..len_r).map(|_| rng.random_range(0..4)).collect();
        for n in 1..=3 {
            let (o, c, r) = hand_ngram_overlap(&cand, &reference, n);
            let (p, rc, f) = prf(o, c, r);
            let s = rouge_n(&cand, &reference, n).unwrap();
            assert_eq!((s.precision, s.recall, s.f1), (p, rc, f), "{cand:?} {reference:?} n={n}");
        }
    }
}

#[test]
fn lcs_matches_exhaustive_enumeration() {
    let mut rng = stream_rng(6, 0);
    for _ in 0..200 {
        let a: Vec<u8> = (0..10).map(|_| rng.random_range(0..5)).collect();
        let b: Vec<u8> = (0..10).map(|_| rng.random_range(0..5)).collect();
        assert_eq!(lcs_len(&a, &b), brute_force_lcs(&a, &b), "{a:?} {b:?}");
    }
}

fn random_pairs(n: usize, seed: u64) -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut rng = stream_rng(seed, 0);
    (0..n)
        .map(|_| {
            let lc = rng.random_range(1..15);
            let lr = rng.random_range(1..15);
            (
                (0..lc).map(|_| rng.random_range(0..6)).collect(),
                (0..lr).map(|_| rng.random_range(0..6)).collect(),
            )
        })
        .collect()
}

#[test]
fn corpus_single_and_duplicated_lists() {
    let pairs = random_pairs(5, 7);
    let single = evaluate_corpus(&pairs[..1]).unwrap();
    let t = RougeTriple::score(&pairs[0].0, &pairs[0].1);
    assert_eq!((single.rouge1, single.rouge2, single.rouge_l), (t.rouge1, t.rouge2, t.rouge_l));

    let once = evaluate_corpus(&pairs).unwrap();
    let doubled: Vec<_> = pairs.iter().chain(&pairs).cloned().collect();
    let twice = evaluate_corpus(&doubled).unwrap();
    assert_abs_diff_eq!(once.rouge_l.f1, twice.rouge_l.f1, epsilon = 1e-15);
    assert_abs_diff_eq!(once.rouge1.f1, twice.rouge1.f1, epsilon = 1e-15);
    assert_abs_diff_eq!(once.rouge2.f1, twice.rouge2.f1, epsilon = 1e-15);
    assert_eq!(twice.pairs, 10);

    let none: [(Vec<u8>, Vec<u8>); 0] = [];
    assert!(evaluate_corpus(&none).is_err());
}

#[test]
fn corpus_mean_matches_elementwise_oracle() {
    let pairs = random_pairs(50, 8);
    let report = evaluate_corpus(&pairs).unwrap();
    let mean = |f: &dyn Fn(&[u8], &[u8]) -> f64| pairs.iter().map(|(c, r)| f(c, r)).sum::<f64>() / 50.0;
    let r1 = mean(&|c, r| {
        let (o, a, b) = hand_ngram_overlap(c, r, 1);
        prf(o, a, b).2
    });
    let r2 = mean(&|c, r| {
        let (o, a, b) = hand_ngram_overlap(c, r, 2);
        prf(o, a, b).2
    });
    let rl = mean(&|c, r| prf(brute_force_lcs(c, r), c.len(), r.len()).2);
    assert_abs_diff_eq!(report.rouge1.f1, r1, epsilon = 1e-12);
    assert_abs_diff_eq!(report.rouge2.f1, r2, epsilon = 1e-12);
    assert_abs_diff_eq!(report.rouge_l.f1, rl, epsilon = 1e-12);
}

fn tokens() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 0..14)
}

proptest! {
    #[test]
    fn f1_is_symmetric(a in tokens(), b in tokens()) {
        prop_assert_eq!(rouge_n(&a, &b, 1).unwrap().f1, rouge_n(&b, &a, 1).unwrap().f1);
        prop_assert_eq!(rouge_l(&a, &b).f1, rouge_l(&b, &a).f1);
        let (x, y) = (rouge_l(&a, &b), rouge_l(&b, &a));
        prop_assert_eq!((x.precision, x.recall), (y.recall, y.precision));
    }

    #[test]
    fn unseen_reference_token_never_raises_recall(cand in tokens(), reference in tokens()) {
        let mut longer = reference.clone();
        longer.push(99);
        prop_assert!(rouge_n(&cand, &longer, 1).unwrap().recall <= rouge_n(&cand, &reference, 1).unwrap().recall);
        prop_assert!(rouge_n(&cand, &longer, 2).unwrap().recall <= rouge_n(&cand, &reference, 2).unwrap().recall);
        prop_assert!(rouge_l(&cand, &longer).recall <= rouge_l(&cand, &reference).recall);
    }

    #[test]
    fn scores_lie_in_unit_interval(a in tokens(), b in tokens(), n in 1usize..4) {
        let t = RougeTriple::score(&a, &b);
        for s in [rouge_n(&a, &b, n).unwrap(), t.rouge1, t.rouge2, t.rouge_l] {
            for v in [s.precision, s.recall, s.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if s.precision + s.recall > 0.0 {
                let harmonic = 2.0 * s.precision * s.recall / (s.precision + s.recall);
                prop_assert!((s.f1 - harmonic).abs() < 1e-12);
            }
        }
    }
}
