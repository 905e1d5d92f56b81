//! Contrastive losses against plain double-loop formulas.

use mmvc::autodiff::Tape;
use mmvc::losses::{
    combined_loss, mil_nce_loss, mil_nce_values, nce_loss, nce_value, EmbeddedBatch, LossConfig, NegativePolicy, PairTerm,
};
use mmvc::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{brute_force, dot, singletons, unit_rows};

const POLICIES: [NegativePolicy; 2] = [NegativePolicy::BothDirections, NegativePolicy::VAnchored];

#[test]
fn nce_matches_double_loop_on_100_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=16);
        let tau = rng.gen_range(0.05..1.0);
        let zv = unit_rows(&mut rng, n, d);
        let za = unit_rows(&mut rng, n, d);
        for policy in POLICIES {
            let got = nce_value(&zv, &za, tau, policy).unwrap();
            let want = brute_force(&zv, &singletons(&za), tau, policy).0;
            worst = worst.max((got - want).abs());
        }
    }
    assert!(worst < 1e-6, "worst deviation {worst:e}");
}

#[test]
fn mil_nce_matches_double_loop_on_100_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=16);
        let tau = rng.gen_range(0.05..1.0);
        let zv = unit_rows(&mut rng, n, d);
        let cands: Vec<Tensor<f64>> = (0..n).map(|_| { let k = rng.gen_range(1..=4); unit_rows(&mut rng, k, d) }).collect();
        for policy in POLICIES {
            let (got, got_per) = mil_nce_values(&zv, &cands, tau, policy).unwrap();
            let (want, want_per) = brute_force(&zv, &cands, tau, policy);
            worst = worst.max((got - want).abs());
            for (a, b) in got_per.iter().zip(&want_per) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst < 1e-6, "worst deviation {worst:e}");
}

#[test]
fn singleton_candidates_reduce_to_nce() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let n = rng.gen_range(2..=8);
        let zv = unit_rows(&mut rng, n, 6);
        let za = unit_rows(&mut rng, n, 6);
        for policy in POLICIES {
            let a = nce_value(&zv, &za, 0.07, policy).unwrap();
            let b = mil_nce_values(&zv, &singletons(&za), 0.07, policy).unwrap().0;
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn uniform_scores_give_log_one_plus_negative_count() {
    for n in 2..=8 {
        let z = Tensor::new([n, 3], (0..n).flat_map(|_| [0.0, 1.0, 0.0]).collect()).unwrap();
        let both = nce_value(&z, &z, 0.07, NegativePolicy::BothDirections).unwrap();
        assert!((both - (1.0 + 2.0 * (n as f64 - 1.0)).ln()).abs() < 1e-12);
        let one = nce_value(&z, &z, 0.07, NegativePolicy::VAnchored).unwrap();
        assert!((one - (n as f64).ln()).abs() < 1e-12);
        assert_eq!(NegativePolicy::BothDirections.negatives(n), 2 * (n - 1));
    }
    // N = 4 both directions: log 7.
    let z = Tensor::new([4, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    assert!((nce_value(&z, &z, 0.07, NegativePolicy::BothDirections).unwrap() - 1.945_910_149).abs() < 1e-9);
}

#[test]
fn duplicating_a_candidate_set_shifts_the_loss_analytically() {
    // Under the v-anchored policy anchor i's negatives never involve its own
    // candidates, so copying them k times scales only the positive mass A.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tau = 0.3;
    for k in 2..=4 {
        let zv = unit_rows(&mut rng, 4, 5);
        let cands: Vec<Tensor<f64>> = (0..4).map(|_| unit_rows(&mut rng, 2, 5)).collect();
        let (_, base) = mil_nce_values(&zv, &cands, tau, NegativePolicy::VAnchored).unwrap();
        let mut dup = cands.clone();
        let rows: Vec<Tensor<f64>> = (0..k).flat_map(|_| (0..2).map(|r| cands[0].index_outer(r).unwrap())).collect();
        dup[0] = Tensor::stack(&rows).unwrap();
        let (_, per) = mil_nce_values(&zv, &dup, tau, NegativePolicy::VAnchored).unwrap();

        let a: f64 = (0..2).map(|c| (dot(zv.row(0), cands[0].row(c)) / tau).exp()).sum();
        let b: f64 = (1..4).flat_map(|j| (0..2).map(move |c| (j, c))).map(|(j, c)| (dot(zv.row(0), cands[j].row(c)) / tau).exp()).sum();
        let kf = k as f64;
        let shift = -(kf * a / (kf * a + b)).ln() + (a / (a + b)).ln();
        assert!((per[0] - base[0] - shift).abs() < 1e-9, "k={k}");
    }
}

#[test]
fn aligned_candidate_beats_a_misaligned_single() {
    // Three samples on orthogonal axes; the MIL set holds the true narration
    // plus orthogonal distractors, the NCE single candidate is misaligned.
    let e = |i: usize| {
        let mut r = vec![0.0; 6];
        r[i] = 1.0;
        r
    };
    let zv = Tensor::new([3, 6], [e(0), e(1), e(2)].concat()).unwrap();
    let set = |i: usize| Tensor::new([3, 6], [e(i), e(3), e(4)].concat()).unwrap();
    let mil = mil_nce_values(&zv, &[set(0), set(1), set(2)], 0.07, NegativePolicy::BothDirections).unwrap().0;
    let mis = |i: usize| Tensor::new([1, 6], e((i + 1) % 3)).unwrap();
    let nce = mil_nce_values(&zv, &[mis(0), mis(1), mis(2)], 0.07, NegativePolicy::BothDirections).unwrap().0;
    assert!(mil < nce);
}

fn term_loss(zv: &Tensor<f64>, zx: &Tensor<f64>, owner: &[usize], cfg: &LossConfig, va: bool) -> (f64, Option<f64>) {
    let mut tape = Tape::<f64>::inference();
    let v = tape.constant(zv.clone());
    let x = tape.constant(zx.clone());
    let term = PairTerm { zv: v, zx: x, owner: owner.to_vec() };
    let batch = if va { EmbeddedBatch { va: Some(term), vt: None } } else { EmbeddedBatch { va: None, vt: Some(term) } };
    let out = combined_loss(&mut tape, &batch, cfg).unwrap();
    let comp = if va { out.va } else { out.vt };
    (tape.value(out.total).item().unwrap(), comp.map(|c| tape.value(c).item().unwrap()))
}

#[test]
fn absent_terms_and_single_term_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let zv = unit_rows(&mut rng, 5, 4);
    let za = unit_rows(&mut rng, 5, 4);
    let cfg = LossConfig { lambda_va: 1.0, lambda_vt: 0.0, ..LossConfig::default() };
    let (total, _) = term_loss(&zv, &za, &[0, 1, 2, 3, 4], &cfg, true);
    assert_eq!(total, nce_value(&zv, &za, cfg.tau, cfg.negatives).unwrap());

    // All samples lacking text: the vt term is absent and the loss is lambda_va * NCE.
    let cfg = LossConfig { lambda_va: 0.4, lambda_vt: 2.0, ..LossConfig::default() };
    let (total, comp) = term_loss(&zv, &za, &[0, 1, 2, 3, 4], &cfg, true);
    assert!((total - 0.4 * comp.unwrap()).abs() < 1e-15);
    let mut tape = Tape::<f64>::inference();
    let empty = combined_loss(&mut tape, &EmbeddedBatch::default(), &cfg).unwrap();
    assert_eq!(tape.value(empty.total).item().unwrap(), 0.0);
    assert!(empty.va.is_none() && empty.vt.is_none());
}

#[test]
fn lambda_scaling_is_exactly_linear_in_loss_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let zv = Tensor::randn([6, 5], 1.0, &mut rng);
    let za = Tensor::randn([6, 5], 1.0, &mut rng);
    let zt = Tensor::randn([8, 5], 1.0, &mut rng);
    let owner_t = vec![0, 0, 1, 2, 2, 2, 3, 4];
    let run = |c: f64| {
        let mut tape = Tape::<f64>::new();
        let v = tape.param("v", &zv);
        let a = tape.param("a", &za);
        let t = tape.param("t", &zt);
        let (v, a, t) = (tape.l2_normalize(v).unwrap(), tape.l2_normalize(a).unwrap(), tape.l2_normalize(t).unwrap());
        let vt_rows = tape.gather_rows(v, &[0, 1, 2, 3, 4]).unwrap();
        let batch = EmbeddedBatch {
            va: Some(PairTerm { zv: v, zx: a, owner: (0..6).collect() }),
            vt: Some(PairTerm { zv: vt_rows, zx: t, owner: owner_t.clone() }),
        };
        let cfg = LossConfig { lambda_va: 0.5 * c, lambda_vt: 1.5 * c, ..LossConfig::default() };
        let out = combined_loss(&mut tape, &batch, &cfg).unwrap();
        let g = tape.backward(out.total).unwrap();
        (tape.value(out.total).item().unwrap(), g.into_map())
    };
    let (l1, g1) = run(1.0);
    for c in [2.0, 0.25, 3.7] {
        let (lc, gc) = run(c);
        assert!((lc - c * l1).abs() <= 1e-12 * lc.abs());
        for (name, g) in &g1 {
            for (x, y) in g.data().iter().zip(gc[name].data()) {
                assert!((y - c * x).abs() <= 1e-12 * (1.0 + y.abs()), "{name}");
            }
        }
    }
}

#[test]
fn appending_text_missing_samples_leaves_the_vt_term_unchanged() {
    // Embedded form: samples without text never enter the vt term, so the
    // term only sees rows gathered from text-present samples.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = LossConfig::default();
    let zv = unit_rows(&mut rng, 4, 6);
    let zt = unit_rows(&mut rng, 7, 6);
    let owner = [0, 0, 1, 1, 2, 3, 3];
    let (_, base) = term_loss(&zv, &zt, &owner, &cfg, false);

    // The batch grows by two text-missing samples; the vt rows are unchanged.
    let extra = unit_rows(&mut rng, 2, 6);
    let grown = Tensor::stack(&(0..4).map(|i| zv.index_outer(i).unwrap()).chain((0..2).map(|i| extra.index_outer(i).unwrap())).collect::<Vec<_>>()).unwrap();
    let mut tape = Tape::<f64>::inference();
    let all = tape.constant(grown);
    let rows = tape.gather_rows(all, &[0, 1, 2, 3]).unwrap();
    let t = tape.constant(zt.clone());
    let batch = EmbeddedBatch { va: None, vt: Some(PairTerm { zv: rows, zx: t, owner: owner.to_vec() }) };
    let out = combined_loss(&mut tape, &batch, &cfg).unwrap();
    let after = tape.value(out.vt.unwrap()).item().unwrap();
    assert!((after - base.unwrap()).abs() < 1e-6);
}

#[test]
fn logistic_pairs() {
    use mmvc::losses::logistic_pair_loss;
    let mut tape = Tape::<f64>::inference();
    let a = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
    let l = logistic_pair_loss(&mut tape, a, b, &[true, false], 0.07).unwrap();
    assert!((tape.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);

    // Random small case against a direct BCE loop.
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let zv = unit_rows(&mut rng, 5, 3);
    let za = unit_rows(&mut rng, 5, 3);
    let labels = [true, false, true, true, false];
    let tau = 0.5;
    let want: f64 = (0..5)
        .map(|p| {
            let s = dot(zv.row(p), za.row(p)) / tau;
            let sig = 1.0 / (1.0 + (-s).exp());
            if labels[p] { -sig.ln() } else { -(1.0 - sig).ln() }
        })
        .sum::<f64>()
        / 5.0;
    let mut tape = Tape::<f64>::inference();
    let (v, a) = (tape.constant(zv), tape.constant(za));
    let got = logistic_pair_loss(&mut tape, v, a, &labels, tau).unwrap();
    assert!((tape.value(got).item().unwrap() - want).abs() < 1e-12);

    // Well separated pairs drive the loss towards zero.
    let mut tape = Tape::<f64>::inference();
    let z = tape.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap());
    let l = logistic_pair_loss(&mut tape, z, z, &[true], 0.01).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-30);
}

#[test]
fn invalid_batches_are_rejected() {
    let z = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
    assert!(nce_value(&z, &z, 0.07, NegativePolicy::BothDirections).is_err());
    let z2 = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(nce_value(&z2, &z2, 0.0, NegativePolicy::BothDirections).is_err());
    assert!(nce_value(&z2, &z2, -1.0, NegativePolicy::BothDirections).is_err());
    let empty = Tensor::<f64>::zeros([0, 2]);
    assert!(mil_nce_values(&z2, &[z.clone(), empty], 0.07, NegativePolicy::BothDirections).is_err());
    let mut tape = Tape::<f64>::inference();
    let v = tape.constant(z2.clone());
    let x = tape.constant(z2);
    assert!(mil_nce_loss(&mut tape, v, x, &[0, 0], 0.07, NegativePolicy::BothDirections).is_err());
    assert!(nce_loss(&mut tape, v, x, 0.07, NegativePolicy::VAnchored).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nce_is_permutation_invariant(seed in any::<u64>(), n in 2usize..8, shift in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zv = unit_rows(&mut rng, n, 4);
        let za = unit_rows(&mut rng, n, 4);
        let perm: Vec<usize> = (0..n).map(|i| (i * (2 * shift + 1) + shift) % n).collect();
        let mut seen = perm.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assume!(seen.len() == n);
        let p = |t: &Tensor<f64>| Tensor::stack(&perm.iter().map(|&i| t.index_outer(i).unwrap()).collect::<Vec<_>>()).unwrap();
        for policy in POLICIES {
            let a = nce_value(&zv, &za, 0.1, policy).unwrap();
            let b = nce_value(&p(&zv), &p(&za), 0.1, policy).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn nce_is_positive_and_at_most_uniform_when_aligned(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zv = unit_rows(&mut rng, n, 5);
        let za = unit_rows(&mut rng, n, 5);
        prop_assert!(nce_value(&zv, &za, 0.07, NegativePolicy::BothDirections).unwrap() > 0.0);
        // Perfect alignment on distinct axes beats the uniform-score value.
        let mut eye = vec![0.0; n * n];
        for i in 0..n { eye[i * n + i] = 1.0; }
        let e = Tensor::new([n, n], eye).unwrap();
        let aligned = nce_value(&e, &e, 0.07, NegativePolicy::BothDirections).unwrap();
        prop_assert!(aligned < (1.0 + 2.0 * (n as f64 - 1.0)).ln());
    }
}
