use gpn::metrics::{bleu, cider, rouge_l};
use gpn::trainer::median;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sentence() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..12, 1..10)
}

fn corpus() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<u8>>)> {
    (1usize..8).prop_flat_map(|n| {
        (
            prop::collection::vec(sentence(), n),
            prop::collection::vec(sentence(), n),
        )
    })
}

proptest! {
    #[test]
    fn metrics_ignore_corpus_order((c, r) in corpus(), seed in 0u64..1000) {
        let mut idx: Vec<usize> = (0..c.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pc: Vec<Vec<u8>> = idx.iter().map(|&i| c[i].clone()).collect();
        let pr: Vec<Vec<u8>> = idx.iter().map(|&i| r[i].clone()).collect();
        for smooth in [false, true] {
            prop_assert!((bleu(&c, &r, 4, smooth).unwrap() - bleu(&pc, &pr, 4, smooth).unwrap()).abs() < 1e-12);
        }
        prop_assert!((rouge_l(&c, &r).unwrap() - rouge_l(&pc, &pr).unwrap()).abs() < 1e-12);
        prop_assert!((cider(&c, &r).unwrap() - cider(&pc, &pr).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn identical_corpora_score_maximal((c, _) in corpus()) {
        prop_assert!((bleu(&c, &c, 1, false).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((rouge_l(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((cider(&c, &c).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_corpora_score_zero((c, r) in corpus()) {
        let shifted: Vec<Vec<u8>> = r.iter().map(|s| s.iter().map(|t| t + 100).collect()).collect();
        prop_assert_eq!(bleu(&c, &shifted, 4, false).unwrap(), 0.0);
        prop_assert_eq!(rouge_l(&c, &shifted).unwrap(), 0.0);
        prop_assert_eq!(cider(&c, &shifted).unwrap(), 0.0);
    }
}

#[test]
fn corrupting_tokens_never_raises_median_bleu() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let corpora: Vec<Vec<Vec<u32>>> = (0..20)
        .map(|_| {
            (0..10)
                .map(|_| (0..12).map(|_| rng.random_range(0..30)).collect())
                .collect()
        })
        .collect();
    let mut medians = Vec::new();
    for k in 0..=3 {
        let mut scores = Vec::new();
        for (ci, refs) in corpora.iter().enumerate() {
            let mut pick = ChaCha8Rng::seed_from_u64(ci as u64);
            let cands: Vec<Vec<u32>> = refs
                .iter()
                .map(|r| {
                    let mut c = r.clone();
                    let mut pos: Vec<usize> = (0..c.len()).collect();
                    pos.shuffle(&mut pick);
                    // fresh out-of-vocabulary tokens; the first k positions of a fixed order
                    for (j, &p) in pos.iter().take(k).enumerate() {
                        c[p] = 1000 + j as u32;
                    }
                    c
                })
                .collect();
            scores.push(bleu(&cands, refs, 4, false).unwrap());
        }
        medians.push(median(&scores).unwrap());
    }
    assert!((medians[0] - 1.0).abs() < 1e-12);
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
}
