//! Layer primitives: convolution, batch norm, temporal shift, pooling, linear maps.
//!
//! Layers read weights from a [`ParamStore`] by name and record onto a [`Tape`]
//! through a [`Forward`] context. Train-mode batch-norm statistics are
//! collected on the context and folded into the moving averages by the caller.

use rand::Rng;

use crate::autodiff::{BatchStats, BnMode, Padding, ShiftConfig, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const BN_DECAY: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A 3D filter `[K_t, K_h, K_w, C_in, C_out]` with bias `[C_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3dFilter<F> {
    pub weights: Tensor<F>,
    pub bias: Tensor<F>,
    pub temporal_padding: Padding,
    pub spatial_padding: Padding,
    pub strides: (usize, usize),
}

impl<F: Scalar> Conv3dFilter<F> {
    pub fn new(weights: Tensor<F>, bias: Tensor<F>) -> Result<Self> {
        if weights.rank() != 5 || weights.shape()[0] == 0 {
            return Err(Error::shape("conv3d", format!("filter shape {:?}", weights.shape())));
        }
        if bias.shape() != [weights.shape()[4]] {
            return Err(Error::shape("conv3d", format!("bias shape {:?}", bias.shape())));
        }
        Ok(Conv3dFilter {
            weights,
            bias,
            temporal_padding: Padding::Zero,
            spatial_padding: Padding::Zero,
            strides: (1, 1),
        })
    }

    pub fn temporal_extent(&self) -> usize {
        self.weights.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub moving_mean: Tensor<F>,
    pub moving_var: Tensor<F>,
    pub decay: F,
    pub epsilon: F,
    pub mode: Mode,
}

impl<F: Scalar> BatchNormParams<F> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            moving_mean: Tensor::zeros([channels]),
            moving_var: Tensor::ones([channels]),
            decay: F::from_f64_lossy(BN_DECAY),
            epsilon: F::from_f64_lossy(BN_EPS),
            mode: Mode::Train,
        }
    }

    /// Fold one batch's statistics into the moving averages.
    pub fn update_moving(&mut self, stats: &BatchStats<F>) {
        update_moving(&mut self.moving_mean, &mut self.moving_var, stats, self.decay);
    }
}

pub(crate) fn update_moving<F: Scalar>(mean: &mut Tensor<F>, var: &mut Tensor<F>, stats: &BatchStats<F>, decay: F) {
    let keep = F::one() - decay;
    for (m, &b) in mean.data_mut().iter_mut().zip(&stats.mean) {
        *m = decay * *m + keep * b;
    }
    for (v, &b) in var.data_mut().iter_mut().zip(&stats.var) {
        *v = (decay * *v + keep * b).max(F::zero());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// `[N,T,H,W,C] -> [N,T,C]` or `[N,H,W,C] -> [N,C]`
    SpatialAvg,
    /// `[N,T,...,C] -> [N,...,C]`
    TemporalAvg,
    /// `[N,T,H,W,C] -> [N,C]`
    SpatiotemporalAvg,
    /// Max over the given axis.
    MaxOverAxis(usize),
}

/// Pooling recorded on a tape.
pub fn pool_var<F: Scalar>(tape: &mut Tape<F>, x: Var, kind: PoolKind) -> Result<Var> {
    let rank = tape.shape(x).len();
    match kind {
        PoolKind::SpatialAvg => match rank {
            4 => {
                let y = tape.mean_axis(x, 2)?;
                tape.mean_axis(y, 1)
            }
            5 => {
                let y = tape.mean_axis(x, 3)?;
                tape.mean_axis(y, 2)
            }
            _ => Err(Error::shape("pool", format!("spatial pooling on rank {rank}"))),
        },
        PoolKind::TemporalAvg => {
            if rank < 3 {
                return Err(Error::shape("pool", format!("temporal pooling on rank {rank}")));
            }
            tape.mean_axis(x, 1)
        }
        PoolKind::SpatiotemporalAvg => {
            if rank != 5 {
                return Err(Error::shape("pool", format!("spatiotemporal pooling on rank {rank}")));
            }
            let s = tape.shape(x).to_vec();
            let flat = tape.reshape(x, &[s[0], s[1] * s[2] * s[3], s[4]])?;
            tape.mean_axis(flat, 1)
        }
        PoolKind::MaxOverAxis(axis) => tape.max_axis(x, axis),
    }
}

/// Eager 3D convolution.
pub fn conv3d<F: Scalar>(input: &Tensor<F>, filter: &Conv3dFilter<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::inference();
    let x = tape.constant(input.clone());
    let w = tape.constant(filter.weights.clone());
    let b = tape.constant(filter.bias.clone());
    let y = tape.conv3d(x, w, Some(b), filter.strides, filter.temporal_padding, filter.spatial_padding)?;
    Ok(tape.value(y).clone())
}

/// Eager 2D convolution, filter `[K_h, K_w, C_in, C_out]`.
pub fn conv2d<F: Scalar>(input: &Tensor<F>, weights: &Tensor<F>, bias: &Tensor<F>, strides: (usize, usize), padding: Padding) -> Result<Tensor<F>> {
    let mut tape = Tape::inference();
    let x = tape.constant(input.clone());
    let w = tape.constant(weights.clone());
    let b = tape.constant(bias.clone());
    let y = tape.conv2d(x, w, Some(b), strides, padding)?;
    Ok(tape.value(y).clone())
}

pub fn temporal_shift<F: Scalar>(input: &Tensor<F>, cfg: ShiftConfig) -> Result<Tensor<F>> {
    let mut tape = Tape::inference();
    let x = tape.constant(input.clone());
    let y = tape.temporal_shift(x, cfg)?;
    Ok(tape.value(y).clone())
}

/// Eager batch norm; in train mode the moving statistics are updated in place.
pub fn batch_norm<F: Scalar>(input: &Tensor<F>, params: &mut BatchNormParams<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::inference();
    let x = tape.constant(input.clone());
    let g = tape.constant(params.gamma.clone());
    let b = tape.constant(params.beta.clone());
    let mode = match params.mode {
        Mode::Train => BnMode::Train { eps: params.epsilon },
        Mode::Eval => BnMode::Eval {
            mean: params.moving_mean.data(),
            var: params.moving_var.data(),
            eps: params.epsilon,
        },
    };
    let (y, stats) = tape.batch_norm(x, g, b, mode)?;
    let out = tape.value(y).clone();
    if let Some(stats) = stats {
        params.update_moving(&stats);
    }
    Ok(out)
}

pub fn pool<F: Scalar>(input: &Tensor<F>, kind: PoolKind) -> Result<Tensor<F>> {
    let mut tape = Tape::inference();
    let x = tape.constant(input.clone());
    let y = pool_var(&mut tape, x, kind)?;
    Ok(tape.value(y).clone())
}

/// Forward-pass context tying a tape to a parameter store.
pub struct Forward<'t, 's, F: Scalar> {
    pub tape: &'t mut Tape<F>,
    pub store: &'s ParamStore<F>,
    pub mode: Mode,
    bn_updates: Vec<(String, BatchStats<F>)>,
}

impl<'t, 's, F: Scalar> Forward<'t, 's, F> {
    pub fn new(tape: &'t mut Tape<F>, store: &'s ParamStore<F>, mode: Mode) -> Self {
        Forward {
            tape,
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let value = self.store.get(name)?;
        Ok(self.tape.param(name, value))
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats<F>)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// `x @ W + b` over the last axis of a rank-2 input.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    pub fn conv3d(&mut self, prefix: &str, x: Var, strides: (usize, usize), temporal: Padding, spatial: Padding) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.conv3d(x, w, Some(b), strides, temporal, spatial)
    }

    pub fn conv2d(&mut self, prefix: &str, x: Var, strides: (usize, usize), padding: Padding) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.conv2d(x, w, Some(b), strides, padding)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let eps = F::from_f64_lossy(BN_EPS);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, gamma, beta, BnMode::Train { eps })?;
                if let Some(stats) = stats {
                    self.bn_updates.push((prefix.to_string(), stats));
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.get(&format!("{prefix}.moving_mean"))?;
                let var = self.store.get(&format!("{prefix}.moving_var"))?;
                let (y, _) = self.tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnMode::Eval {
                        mean: mean.data(),
                        var: var.data(),
                        eps,
                    },
                )?;
                Ok(y)
            }
        }
    }
}

/// Fold collected train-mode statistics into the store's moving averages.
pub fn apply_bn_updates<F: Scalar>(store: &mut ParamStore<F>, updates: &[(String, BatchStats<F>)]) -> Result<()> {
    let decay = F::from_f64_lossy(BN_DECAY);
    for (prefix, stats) in updates {
        let mut mean = store.get(&format!("{prefix}.moving_mean"))?.clone();
        let mut var = store.get(&format!("{prefix}.moving_var"))?.clone();
        update_moving(&mut mean, &mut var, stats, decay);
        store.insert(format!("{prefix}.moving_mean"), mean);
        store.insert(format!("{prefix}.moving_var"), var);
    }
    Ok(())
}

pub fn init_conv3d<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, prefix: &str, kernel: [usize; 5], rng: &mut R) {
    let fan_in = kernel[0] * kernel[1] * kernel[2] * kernel[3];
    let std = (2.0 / fan_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), Tensor::randn(kernel.to_vec(), std, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros([kernel[4]]));
}

pub fn init_conv2d<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, prefix: &str, kernel: [usize; 4], rng: &mut R) {
    let fan_in = kernel[0] * kernel[1] * kernel[2];
    let std = (2.0 / fan_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), Tensor::randn(kernel.to_vec(), std, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros([kernel[3]]));
}

pub fn init_linear<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, prefix: &str, d_in: usize, d_out: usize, gain: f64, rng: &mut R) {
    let std = (gain / d_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), Tensor::randn([d_in, d_out], std, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros([d_out]));
}

pub fn init_batch_norm<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, channels: usize) {
    let p = BatchNormParams::<F>::new(channels);
    store.insert(format!("{prefix}.gamma"), p.gamma);
    store.insert(format!("{prefix}.beta"), p.beta);
    store.insert(format!("{prefix}.moving_mean"), p.moving_mean);
    store.insert(format!("{prefix}.moving_var"), p.moving_var);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 6-nested-loop cross-correlation with zero padding, stride 1.
    fn conv3d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [n, t, h, wd, ci] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
        let [kt, kh, kw, _, co] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3], w.shape()[4]];
        let (pt, ph, pw) = ((kt - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
        let mut out = Tensor::zeros([n, t, h, wd, co]);
        for bi in 0..n {
            for ot in 0..t {
                for oh in 0..h {
                    for ow in 0..wd {
                        for o in 0..co {
                            let mut acc = b.data()[o];
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let it = ot as isize + dt as isize - pt as isize;
                                        let ih = oh as isize + dh as isize - ph as isize;
                                        let iw = ow as isize + dw as isize - pw as isize;
                                        if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= wd as isize {
                                            continue;
                                        }
                                        for c in 0..ci {
                                            let xi = ((((bi * t) + it as usize) * h + ih as usize) * wd + iw as usize) * ci + c;
                                            let wi = (((dt * kh + dh) * kw + dw) * ci + c) * co + o;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((bi * t + ot) * h + oh) * wd + ow) * co + o] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn([1, 4, 4, 4, 2], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([2, 2, 2, 2, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([3], 1.0, &mut rng);
        let f = Conv3dFilter::new(w.clone(), b.clone()).unwrap();
        let y = conv3d(&x, &f).unwrap();
        let expect = conv3d_oracle(&x, &w, &b);
        assert_eq!(y.shape(), expect.shape());
        assert!(y.max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn identity_filter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([2, 3, 4, 4, 2], 1.0, &mut rng);
        let mut w = Tensor::zeros([1, 1, 1, 2, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let f = Conv3dFilter::new(w, Tensor::zeros([2])).unwrap();
        assert_eq!(conv3d(&x, &f).unwrap(), x);
    }

    #[test]
    fn constant_in_time_valid_padding_stays_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = Tensor::<f64>::randn([5, 5, 2], 1.0, &mut rng);
        let x = Tensor::stack(&[Tensor::stack(&vec![frame; 6]).unwrap()]).unwrap();
        let mut f = Conv3dFilter::new(Tensor::randn([3, 3, 3, 2, 2], 1.0, &mut rng), Tensor::zeros([2])).unwrap();
        f.temporal_padding = Padding::Valid;
        let y = conv3d(&x, &f).unwrap();
        assert_eq!(y.shape()[1], 4);
        let first = y.index_outer(0).unwrap().index_outer(0).unwrap();
        for t in 1..4 {
            let yt = y.index_outer(0).unwrap().index_outer(t).unwrap();
            assert!(yt.max_abs_diff(&first) < 1e-12);
        }
    }

    #[test]
    fn temporal_shift_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([1, 3, 2, 2, 8], 1.0, &mut rng);
        let off = ShiftConfig { shift_fraction: 0.25, enabled: false };
        assert_eq!(temporal_shift(&x, off).unwrap(), x);

        let on = ShiftConfig { shift_fraction: 0.25, enabled: true };
        let one = Tensor::<f64>::randn([1, 1, 2, 2, 8], 1.0, &mut rng);
        let y = temporal_shift(&one, on).unwrap();
        for p in 0..4 {
            let px = &y.data()[p * 8..p * 8 + 8];
            assert!(px[..4].iter().all(|&v| v == 0.0));
            assert_eq!(&px[4..], &one.data()[p * 8 + 4..p * 8 + 8]);
        }
    }

    #[test]
    fn temporal_shift_constant_in_time_by_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = Tensor::<f64>::randn([2, 2, 8], 1.0, &mut rng);
        let x = Tensor::stack(&[Tensor::stack(&vec![frame.clone(); 3]).unwrap()]).unwrap();
        let cfg = ShiftConfig { shift_fraction: 0.25, enabled: true };
        let y = temporal_shift(&x, cfg).unwrap();
        let at = |t: usize| y.index_outer(0).unwrap().index_outer(t).unwrap();
        assert_eq!(at(1), frame);
        for t in [0usize, 2] {
            let yt = at(t);
            for p in 0..4 {
                for c in 0..8 {
                    let v = yt.data()[p * 8 + c];
                    let orig = frame.data()[p * 8 + c];
                    // t=0 loses the forward group (no t-1); t=2 loses the backward group.
                    let zeroed = (t == 0 && c < 2) || (t == 2 && (2..4).contains(&c));
                    assert_eq!(v, if zeroed { 0.0 } else { orig }, "t={t} c={c}");
                }
            }
        }
    }

    #[test]
    fn batch_norm_eval_and_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn([16, 3], 2.0, &mut rng);
        let mut p = BatchNormParams::<f64>::new(3);
        p.mode = Mode::Eval;
        let y = batch_norm(&x, &mut p).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(y.max_abs_diff(&x.map(|v| v * s)) < 1e-15);

        let mut p = BatchNormParams::<f64>::new(3);
        p.gamma = Tensor::new([3], vec![2.0, -0.5, 1.0]).unwrap();
        p.beta = Tensor::new([3], vec![0.3, 1.0, -2.0]).unwrap();
        let y = batch_norm(&x, &mut p).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..16).map(|r| y.data()[r * 3 + c]).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0).sqrt();
            assert!((mean - p.beta.data()[c]).abs() < 1e-4);
            assert!((std - p.gamma.data()[c].abs()).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_moving_average_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x1 = Tensor::<f64>::randn([8, 2], 1.0, &mut rng).map(|v| v + 3.0);
        let x2 = Tensor::<f64>::randn([8, 2], 1.0, &mut rng).map(|v| v - 1.0);
        let mut p = BatchNormParams::<f64>::new(2);
        batch_norm(&x1, &mut p).unwrap();
        batch_norm(&x2, &mut p).unwrap();
        for c in 0..2 {
            let mu = |x: &Tensor<f64>| (0..8).map(|r| x.data()[r * 2 + c]).sum::<f64>() / 8.0;
            let m1 = 0.9 * 0.0 + 0.1 * mu(&x1);
            let m2 = 0.9 * m1 + 0.1 * mu(&x2);
            assert!((p.moving_mean.data()[c] - m2).abs() < 1e-12);
        }
        assert!(p.moving_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn batch_norm_rejects_empty_train_batch() {
        let mut p = BatchNormParams::<f64>::new(2);
        assert!(batch_norm(&Tensor::zeros([0, 2]), &mut p).is_err());
    }

    #[test]
    fn pooling_contracts() {
        let x = Tensor::<f64>::full([2, 3, 4, 4, 5], 1.5);
        let y = pool(&x, PoolKind::SpatiotemporalAvg).unwrap();
        assert_eq!(y.shape(), &[2, 5]);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
        assert_eq!(pool(&x, PoolKind::SpatialAvg).unwrap().shape(), &[2, 3, 5]);
        assert_eq!(pool(&x, PoolKind::TemporalAvg).unwrap().shape(), &[2, 4, 4, 5]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tok = Tensor::<f64>::randn([3, 16, 6], 1.0, &mut rng);
        let m = pool(&tok, PoolKind::MaxOverAxis(1)).unwrap();
        for b in 0..3 {
            for j in 0..6 {
                let expect = (0..16).map(|t| tok.data()[(b * 16 + t) * 6 + j]).fold(f64::MIN, f64::max);
                assert_eq!(m.data()[b * 6 + j], expect);
            }
        }
        assert!(pool(&Tensor::<f64>::zeros([2, 0, 3]), PoolKind::MaxOverAxis(1)).is_err());
    }
}
