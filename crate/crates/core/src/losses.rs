//! Contrastive objectives over joint-space embeddings.
//!
//! Scores are `s = z_v . z_x / tau`. For anchor `i` the denominator holds the
//! positives plus the negative set chosen by [`NegativePolicy`]; every ratio
//! is computed as a difference of max-subtracted log-sum-exps.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativePolicy {
    /// `(v_i, x_j)` and `(v_j, x_i)` for every `j != i`: `2 (N - 1)` negatives.
    BothDirections,
    /// Only `(v_i, x_j)`, `j != i`: `N - 1` negatives.
    VAnchored,
}

impl NegativePolicy {
    /// Negatives per anchor for a batch of `n` single-candidate samples.
    pub fn negatives(self, n: usize) -> usize {
        match self {
            NegativePolicy::BothDirections => 2 * n.saturating_sub(1),
            NegativePolicy::VAnchored => n.saturating_sub(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Nce,
    Logistic,
}

fn one() -> f64 {
    1.0
}
fn tau_default() -> f64 {
    0.07
}
fn nce() -> LossKind {
    LossKind::Nce
}
fn both() -> NegativePolicy {
    NegativePolicy::BothDirections
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "one")]
    pub lambda_va: f64,
    #[serde(default = "one")]
    pub lambda_vt: f64,
    #[serde(default = "tau_default")]
    pub tau: f64,
    #[serde(default = "nce")]
    pub loss_kind: LossKind,
    #[serde(default = "both")]
    pub negatives: NegativePolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_va: 1.0,
            lambda_vt: 1.0,
            tau: tau_default(),
            loss_kind: LossKind::Nce,
            negatives: NegativePolicy::BothDirections,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_va >= 0.0 && self.lambda_vt >= 0.0) || !(self.lambda_va + self.lambda_vt > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with a positive sum (lambda_va {}, lambda_vt {})",
                self.lambda_va, self.lambda_vt
            )));
        }
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// Batch-mean loss and the per-anchor values it averages.
#[derive(Clone, Copy, Debug)]
pub struct LossOut {
    pub mean: Var,
    pub per_sample: Var,
}

fn scores<F: Scalar>(tape: &mut Tape<F>, zv: Var, zx: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let (sv, sx) = (tape.shape(zv).to_vec(), tape.shape(zx).to_vec());
    if sv.len() != 2 || sx.len() != 2 || sv[1] != sx[1] {
        return Err(Error::shape("contrastive scores", format!("{sv:?} vs {sx:?}")));
    }
    let s = tape.matmul_nt(zv, zx)?;
    tape.scale(s, F::from_f64_lossy(1.0 / tau))
}

/// Contrastive loss with candidate sets: row `m` of `zx` belongs to anchor `owner[m]`.
///
/// With one candidate per anchor this is NCE; with several it is MIL-NCE.
/// Unlike the public wrappers this accepts a single anchor (its loss is 0).
pub fn contrastive<F: Scalar>(
    tape: &mut Tape<F>,
    zv: Var,
    zx: Var,
    owner: &[usize],
    tau: f64,
    policy: NegativePolicy,
) -> Result<LossOut> {
    let n = tape.shape(zv).first().copied().unwrap_or(0);
    let m = tape.shape(zx).first().copied().unwrap_or(0);
    if owner.len() != m {
        return Err(Error::shape("contrastive", format!("{m} candidates but {} owners", owner.len())));
    }
    if n == 0 {
        return Err(Error::shape("contrastive", "empty batch"));
    }
    let mut counts = vec![0usize; n];
    for &o in owner {
        if o >= n {
            return Err(Error::shape("contrastive", format!("owner {o} >= batch size {n}")));
        }
        counts[o] += 1;
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("anchor {i} has an empty candidate set")));
    }
    let s = scores(tape, zv, zx, tau)?;

    let pos_mask: Vec<bool> = (0..n).flat_map(|i| owner.iter().map(move |&o| o == i)).collect();
    let pos = tape.masked_logsumexp(s, &pos_mask)?;

    // Row i of the tiled matrix is the whole score grid; the mask picks out
    // anchor i's positives and negatives.
    let flat = tape.reshape(s, &[1, n * m])?;
    let tiled = tape.concat(&vec![flat; n], 0)?;
    let mut den_mask = vec![false; n * n * m];
    for i in 0..n {
        for j in 0..n {
            for (c, &o) in owner.iter().enumerate() {
                den_mask[(i * n + j) * m + c] = match policy {
                    NegativePolicy::VAnchored => j == i,
                    NegativePolicy::BothDirections => j == i || o == i,
                };
            }
        }
    }
    let den = tape.masked_logsumexp(tiled, &den_mask)?;
    let per_sample = tape.sub(den, pos)?;
    let mean = tape.mean(per_sample)?;
    Ok(LossOut { mean, per_sample })
}

fn require_pairs(n: usize) -> Result<()> {
    if n < 2 {
        Err(Error::invalid(format!("contrastive losses need at least 2 samples, got {n}")))
    } else {
        Ok(())
    }
}

/// NCE between `N` video and `N` paired embeddings (`[N, d]` each).
pub fn nce_loss<F: Scalar>(tape: &mut Tape<F>, zv: Var, za: Var, tau: f64, policy: NegativePolicy) -> Result<LossOut> {
    let n = tape.shape(zv).first().copied().unwrap_or(0);
    require_pairs(n)?;
    if tape.shape(za).first() != Some(&n) {
        return Err(Error::shape("nce_loss", format!("{:?} vs {:?}", tape.shape(zv), tape.shape(za))));
    }
    let owner: Vec<usize> = (0..n).collect();
    contrastive(tape, zv, za, &owner, tau, policy)
}

/// MIL-NCE: the positive score sums over each anchor's candidate set.
pub fn mil_nce_loss<F: Scalar>(
    tape: &mut Tape<F>,
    zv: Var,
    candidates: Var,
    owner: &[usize],
    tau: f64,
    policy: NegativePolicy,
) -> Result<LossOut> {
    require_pairs(tape.shape(zv).first().copied().unwrap_or(0))?;
    contrastive(tape, zv, candidates, owner, tau, policy)
}

/// Mean binary cross-entropy of `sigmoid(score)` against `labels`, with
/// `score` an `[R, K]` grid and `labels` row-major of the same size.
fn bce_grid<F: Scalar>(tape: &mut Tape<F>, s: Var, labels: &[bool]) -> Result<Var> {
    let shape = tape.shape(s).to_vec();
    if labels.is_empty() || labels.len() != shape.iter().product::<usize>() {
        return Err(Error::invalid(format!("{} labels for scores of shape {shape:?}", labels.len())));
    }
    let y = Tensor::new(shape, labels.iter().map(|&l| if l { F::one() } else { F::zero() }).collect())?;
    let y = tape.constant(y);
    let sp = tape.softplus(s)?;
    let ys = tape.mul(s, y)?;
    let l = tape.sub(sp, ys)?;
    tape.mean(l)
}

/// Logistic loss over explicit pairs: row `p` of `zv` and `za` form pair `p`.
pub fn logistic_pair_loss<F: Scalar>(tape: &mut Tape<F>, zv: Var, za: Var, labels: &[bool], tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if tape.shape(zv) != tape.shape(za) || tape.shape(zv).len() != 2 {
        return Err(Error::shape("logistic_pair_loss", format!("{:?} vs {:?}", tape.shape(zv), tape.shape(za))));
    }
    let p = tape.shape(zv)[0];
    if p == 0 {
        return Err(Error::invalid("logistic_pair_loss needs at least one pair"));
    }
    let prod = tape.mul(zv, za)?;
    let dots = tape.sum_axis(prod, 1)?;
    let s = tape.scale(dots, F::from_f64_lossy(1.0 / tau))?;
    let s = tape.reshape(s, &[p, 1])?;
    bce_grid(tape, s, labels)
}

/// Logistic loss over the full anchor x candidate grid.
fn logistic_grid<F: Scalar>(tape: &mut Tape<F>, zv: Var, zx: Var, owner: &[usize], tau: f64) -> Result<Var> {
    let n = tape.shape(zv)[0];
    let s = scores(tape, zv, zx, tau)?;
    let labels: Vec<bool> = (0..n).flat_map(|i| owner.iter().map(move |&o| o == i)).collect();
    bce_grid(tape, s, &labels)
}

/// One loss term: anchors `zv` and candidates `zx` with their owners.
#[derive(Clone, Debug)]
pub struct PairTerm {
    pub zv: Var,
    pub zx: Var,
    pub owner: Vec<usize>,
}

impl PairTerm {
    pub fn anchors<F: Scalar>(&self, tape: &Tape<F>) -> usize {
        tape.shape(self.zv)[0]
    }
}

/// Embedded batch: each term only holds the samples where both modalities exist.
#[derive(Clone, Debug, Default)]
pub struct EmbeddedBatch {
    pub va: Option<PairTerm>,
    pub vt: Option<PairTerm>,
}

#[derive(Clone, Copy, Debug)]
pub struct CombinedLoss {
    pub total: Var,
    pub va: Option<Var>,
    pub vt: Option<Var>,
}

fn term<F: Scalar>(tape: &mut Tape<F>, t: &Option<PairTerm>, cfg: &LossConfig) -> Result<Option<Var>> {
    let Some(t) = t else { return Ok(None) };
    if t.anchors(tape) < 2 {
        // No negatives exist, so the term carries no signal.
        return Ok(None);
    }
    let v = match cfg.loss_kind {
        LossKind::Nce => contrastive(tape, t.zv, t.zx, &t.owner, cfg.tau, cfg.negatives)?.mean,
        LossKind::Logistic => logistic_grid(tape, t.zv, t.zx, &t.owner, cfg.tau)?,
    };
    Ok(Some(v))
}

/// `lambda_va * L_va + lambda_vt * L_vt`, each term a mean over the samples
/// where it is defined; an absent term contributes zero.
pub fn combined_loss<F: Scalar>(tape: &mut Tape<F>, batch: &EmbeddedBatch, cfg: &LossConfig) -> Result<CombinedLoss> {
    cfg.validate()?;
    let va = term(tape, &batch.va, cfg)?;
    let vt = term(tape, &batch.vt, cfg)?;
    let mut parts = Vec::new();
    for (v, lambda) in [(va, cfg.lambda_va), (vt, cfg.lambda_vt)] {
        if let Some(v) = v {
            if lambda != 0.0 {
                parts.push(tape.scale(v, F::from_f64_lossy(lambda))?);
            }
        }
    }
    let total = match parts.split_first() {
        None => tape.constant(Tensor::scalar(F::zero())),
        Some((&first, rest)) => {
            let mut acc = first;
            for &p in rest {
                acc = tape.add(acc, p)?;
            }
            acc
        }
    };
    Ok(CombinedLoss { total, va, vt })
}

/// Eager NCE value for `[N, d]` tensors.
pub fn nce_value(zv: &Tensor<f64>, za: &Tensor<f64>, tau: f64, policy: NegativePolicy) -> Result<f64> {
    let mut tape = Tape::inference();
    let (v, a) = (tape.constant(zv.clone()), tape.constant(za.clone()));
    let out = nce_loss(&mut tape, v, a, tau, policy)?;
    tape.value(out.mean).item()
}

/// Eager MIL-NCE value; `candidates[i]` is anchor `i`'s candidate set `[k_i, d]`.
pub fn mil_nce_value(zv: &Tensor<f64>, candidates: &[Tensor<f64>], tau: f64, policy: NegativePolicy) -> Result<f64> {
    Ok(mil_nce_values(zv, candidates, tau, policy)?.0)
}

/// Eager MIL-NCE mean and per-anchor values.
pub fn mil_nce_values(zv: &Tensor<f64>, candidates: &[Tensor<f64>], tau: f64, policy: NegativePolicy) -> Result<(f64, Vec<f64>)> {
    let mut rows = Vec::new();
    let mut owner = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        if c.rank() != 2 || c.shape()[0] == 0 {
            return Err(Error::invalid(format!("candidate set {i} is empty or not a matrix")));
        }
        for r in 0..c.shape()[0] {
            rows.push(c.index_outer(r)?);
            owner.push(i);
        }
    }
    let mut tape = Tape::inference();
    let v = tape.constant(zv.clone());
    let x = tape.constant(Tensor::stack(&rows)?);
    let out = mil_nce_loss(&mut tape, v, x, &owner, tau, policy)?;
    Ok((tape.value(out.mean).item()?, tape.value(out.per_sample).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new([rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn uniform_scores_give_log_one_plus_negatives() {
        let z = t(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let both = nce_value(&z, &z, 0.07, NegativePolicy::BothDirections).unwrap();
        assert!((both - 7f64.ln()).abs() < 1e-12);
        let one_way = nce_value(&z, &z, 0.07, NegativePolicy::VAnchored).unwrap();
        assert!((one_way - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_sample_hand_case() {
        // zv1.za1 = 1, every other pair orthogonal, tau = 1.
        let zv = t(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let za = t(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let mut tape = Tape::inference();
        let (v, a) = (tape.constant(zv), tape.constant(za));
        let out = nce_loss(&mut tape, v, a, 1.0, NegativePolicy::BothDirections).unwrap();
        let first = tape.value(out.per_sample).data()[0];
        let e = std::f64::consts::E;
        assert!((first + (e / (e + 2.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn argument_errors() {
        let z = t(&[&[1.0, 0.0]]);
        assert!(nce_value(&z, &z, 0.07, NegativePolicy::BothDirections).is_err());
        let z2 = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(nce_value(&z2, &z2, 0.0, NegativePolicy::BothDirections).is_err());
        let empty = Tensor::<f64>::zeros([0, 2]);
        assert!(mil_nce_value(&z2, &[z.clone(), empty], 0.07, NegativePolicy::BothDirections).is_err());
        let mut tape = Tape::<f64>::inference();
        let v = tape.constant(z2.clone());
        assert!(logistic_pair_loss(&mut tape, v, v, &[], 0.07).is_err());
    }

    #[test]
    fn logistic_zero_scores_give_log_two() {
        let zv = t(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let za = t(&[&[0.0, 1.0], &[1.0, 0.0], &[0.0, -1.0]]);
        let mut tape = Tape::inference();
        let (v, a) = (tape.constant(zv), tape.constant(za));
        let l = logistic_pair_loss(&mut tape, v, a, &[true, false, true], 0.07).unwrap();
        assert!((tape.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { lambda_va: 0.0, lambda_vt: 0.0, ..LossConfig::default() };
        assert!(bad.validate().is_err());
        let neg = LossConfig { lambda_va: -1.0, ..LossConfig::default() };
        assert!(neg.validate().is_err());
    }
}
