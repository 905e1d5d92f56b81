//! Oracles shared by several test targets.
#![allow(dead_code)]

use mmvc::losses::NegativePolicy;
use mmvc::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(row.iter().map(|x| x / norm));
    }
    Tensor::new([n, d], data).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log(sum_pos exp / (sum_pos exp + sum_neg exp))` straight from the definition.
pub fn brute_force(zv: &Tensor<f64>, cands: &[Tensor<f64>], tau: f64, policy: NegativePolicy) -> (f64, Vec<f64>) {
    let n = cands.len();
    let e = |v: usize, set: usize, c: usize| (dot(zv.row(v), cands[set].row(c)) / tau).exp();
    let mut per = Vec::new();
    for i in 0..n {
        let mut pos = 0.0;
        for c in 0..cands[i].shape()[0] {
            pos += e(i, i, c);
        }
        let mut neg = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            for c in 0..cands[j].shape()[0] {
                neg += e(i, j, c);
            }
            if policy == NegativePolicy::BothDirections {
                for c in 0..cands[i].shape()[0] {
                    neg += e(j, i, c);
                }
            }
        }
        per.push(-(pos / (pos + neg)).ln());
    }
    (per.iter().sum::<f64>() / n as f64, per)
}

pub fn singletons(za: &Tensor<f64>) -> Vec<Tensor<f64>> {
    (0..za.shape()[0]).map(|i| za.row(i).to_vec()).map(|r| Tensor::new([1, r.len()], r).unwrap()).collect()
}
