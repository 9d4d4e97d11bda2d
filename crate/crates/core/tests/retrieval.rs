mod support;

use proptest::prelude::*;
use support::*;
use xtqa::text_index::TfIdfIndex;

#[test]
fn top_m_matches_dense_ranking() {
    let mut r = rng(31);
    for corpus in 0..100 {
        let (docs, queries) = random_corpus(&mut r);
        let index = TfIdfIndex::build(&docs).unwrap();
        for q in &queries {
            for m in [1, 3, docs.len()] {
                let got = index.top_m(q, m).entries;
                let want = dense_top_m(&docs, q, m);
                assert_eq!(got, want, "corpus {corpus}, query {q:?}, m {m}");
            }
        }
    }
}

#[test]
fn duplicate_documents_rank_by_position() {
    let docs = ["b c", "a b", "x y", "a b"];
    let index = TfIdfIndex::build(&docs).unwrap();
    let ranked = index.top_m("a", 4);
    assert_eq!(ranked.docs().collect::<Vec<_>>(), [1, 3, 0, 2]);
    assert_eq!(ranked.entries[0].1, ranked.entries[1].1);
    assert!(ranked.padded);
}

proptest! {
    #[test]
    fn scores_are_cosines(seed in 0u64..500) {
        let mut r = rng(seed);
        let (docs, queries) = random_corpus(&mut r);
        let index = TfIdfIndex::build(&docs).unwrap();
        for q in &queries {
            let ranked = index.top_m(q, docs.len());
            prop_assert_eq!(ranked.entries.len(), docs.len());
            for w in ranked.entries.windows(2) {
                prop_assert!(w[0].1 >= w[1].1);
            }
            for &(_, s) in &ranked.entries {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
            }
        }
    }
}
