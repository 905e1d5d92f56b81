//! Recall@K and median rank.

use mmvc::error::Error;
use mmvc::eval::{chance_recall, rank_of, retrieval_from_scores, zero_shot_retrieval};
use mmvc::graph::Space;
use mmvc::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let t = Tensor::<f64>::randn([n, d], 1.0, rng);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(t.row(i).iter().map(|v| v / norm));
    }
    Tensor::new([n, d], data).unwrap()
}

#[test]
fn random_embeddings_hit_the_analytic_recall() {
    let (m, d, trials) = (64, 16, 200);
    let ks = [1, 5, 10];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut sums = [0.0; 3];
    for _ in 0..trials {
        let q = unit(&mut rng, m, d);
        let c = unit(&mut rng, m, d);
        let r = zero_shot_retrieval(&q, Space::Vt, &c, Space::Vt, &ks).unwrap();
        for (s, k) in sums.iter_mut().zip(ks) {
            *s += r.recall_at[&k];
        }
    }
    for (s, k) in sums.iter().zip(ks) {
        let p = chance_recall(k, m);
        let mean = s / trials as f64;
        let sigma = (p * (1.0 - p) / (m * trials) as f64).sqrt();
        assert!((mean - p).abs() <= 3.0 * sigma, "R@{k}: {mean} vs {p} (sigma {sigma})");
    }
}

#[test]
fn corpus_equal_to_queries_is_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let z = unit(&mut rng, 40, 8);
    let r = zero_shot_retrieval(&z, Space::Vat, &z, Space::Vat, &[1, 5]).unwrap();
    assert_eq!(r.recall_at[&1], 1.0);
    assert_eq!(r.median_rank, 1.0);
}

#[test]
fn hand_ranks_and_even_median() {
    // Ground-truth ranks 1, 3, 2, 4.
    let scores = vec![
        vec![0.9, 0.1, 0.2, 0.3],
        vec![0.8, 0.5, 0.7, 0.1],
        vec![0.1, 0.9, 0.6, 0.0],
        vec![0.4, 0.5, 0.6, 0.3],
    ];
    let r = retrieval_from_scores(&scores, &[1, 2, 3]).unwrap();
    assert_eq!(r.ranks, vec![1, 3, 2, 4]);
    assert_eq!(r.recall_at[&1], 0.25);
    assert_eq!(r.recall_at[&2], 0.5);
    assert_eq!(r.recall_at[&3], 0.75);
    assert_eq!(r.median_rank, 2.5);
}

#[test]
fn ties_break_by_corpus_index() {
    let s = [0.5, 0.5, 0.5];
    assert_eq!(rank_of(&s, 0), 1);
    assert_eq!(rank_of(&s, 2), 3);
}

#[test]
fn mismatched_spaces_and_empty_corpora_fail() {
    let z = Tensor::<f64>::ones([2, 3]);
    assert!(matches!(zero_shot_retrieval(&z, Space::Vt, &z, Space::Va, &[1]), Err(Error::SpaceMismatch(..))));
    let empty = Tensor::<f64>::zeros([0, 3]);
    assert!(zero_shot_retrieval(&z, Space::Va, &empty, Space::Va, &[1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranks_survive_strictly_monotone_transforms(seed in any::<u64>(), m in 2usize..30, a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::<f64>::randn([m, m], 1.0, &mut rng);
        let scores: Vec<Vec<f64>> = (0..m).map(|i| raw.row(i).to_vec()).collect();
        let mapped: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|&x| (a * x + b).exp()).collect()).collect();
        let cubed: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|&x| x * x * x + x).collect()).collect();
        let base = retrieval_from_scores(&scores, &[1, 5]).unwrap();
        prop_assert_eq!(&base, &retrieval_from_scores(&mapped, &[1, 5]).unwrap());
        prop_assert_eq!(&base, &retrieval_from_scores(&cubed, &[1, 5]).unwrap());
    }

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>(), m in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::<f64>::randn([m, m], 1.0, &mut rng);
        let scores: Vec<Vec<f64>> = (0..m).map(|i| raw.row(i).to_vec()).collect();
        let ks: Vec<usize> = (1..=m).collect();
        let r = retrieval_from_scores(&scores, &ks).unwrap();
        let vals: Vec<f64> = ks.iter().map(|k| r.recall_at[k]).collect();
        prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(vals[m - 1], 1.0);
        prop_assert!(r.median_rank >= 1.0 && r.median_rank <= m as f64);
    }
}
