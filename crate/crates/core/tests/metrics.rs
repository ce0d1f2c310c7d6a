mod common;

use common::{corpus, oracle, toks, FIXTURES};
use proptest::prelude::*;
use tstbt::corpus::Sentence;
use tstbt::metrics::{bleu, chrf};

#[test]
fn hand_computed_fixtures() {
    assert!(FIXTURES.len() >= 10);
    for (h, r, b, c) in FIXTURES {
        let (h, r) = (corpus(h), corpus(r));
        let gb = bleu(&h, &r).unwrap().score;
        let gc = chrf(&h, &r).unwrap().score;
        assert!((gb - oracle::bleu(&toks(&h), &toks(&r))).abs() < 0.01, "{h:?} {r:?}");
        assert!((gc - oracle::chrf(&toks(&h), &toks(&r))).abs() < 0.01, "{h:?} {r:?}");
        if let Some(b) = b {
            assert!((gb - b).abs() < 0.01, "bleu {h:?} {r:?}: {gb}");
        }
        if let Some(c) = c {
            assert!((gc - c).abs() < 0.01, "chrf {h:?} {r:?}: {gc}");
        }
    }
}

#[test]
fn bleu_components() {
    let b = bleu(&corpus(&["a b c d"]), &corpus(&["a b c d e"])).unwrap();
    assert_eq!(b.precisions, [1.0, 1.0, 1.0, 1.0]);
    assert!((b.brevity_penalty - (-0.25f64).exp()).abs() < 1e-12);
    assert_eq!((b.hyp_len, b.ref_len), (4, 5));
    // clipping: "the" counted at most twice
    let c = bleu(&corpus(&["the the the the the the the"]), &corpus(&["the cat is on the mat"])).unwrap();
    assert!((c.precisions[0] - 2.0 / 7.0).abs() < 1e-12);
}

fn sentence() -> impl Strategy<Value = Sentence> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "ab", "ba", "cc"]), 0..8)
        .prop_map(|t| Sentence::new(t.into_iter().map(String::from).collect()))
}

fn paired() -> impl Strategy<Value = Vec<(Sentence, Sentence)>> {
    prop::collection::vec((sentence(), sentence()), 1..6)
}

proptest! {
    #[test]
    fn agrees_with_counting_oracle(pairs in paired()) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let b = bleu(&h, &r).unwrap().score;
        let c = chrf(&h, &r).unwrap().score;
        prop_assert!((b - oracle::bleu(&toks(&h), &toks(&r))).abs() < 0.01);
        prop_assert!((c - oracle::chrf(&toks(&h), &toks(&r))).abs() < 0.01);
        prop_assert!((0.0..=100.0).contains(&b));
        prop_assert!((0.0..=100.0 + 1e-9).contains(&c));
    }

    #[test]
    fn permutation_invariant(pairs in paired(), seed in 0u64..1000) {
        let mut shuffled = pairs.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize + i * 7) % n);
        }
        let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let (h2, r2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        prop_assert!((bleu(&h, &r).unwrap().score - bleu(&h2, &r2).unwrap().score).abs() < 1e-9);
        prop_assert!((chrf(&h, &r).unwrap().score - chrf(&h2, &r2).unwrap().score).abs() < 1e-9);
    }

    #[test]
    fn identical_corpora_score_100(h in prop::collection::vec(sentence(), 1..6)) {
        prop_assume!(h.iter().any(|s| !s.is_empty()));
        prop_assert!((bleu(&h, &h).unwrap().score - 100.0).abs() < 1e-9);
        prop_assert!((chrf(&h, &h).unwrap().score - 100.0).abs() < 1e-9);
    }
}
