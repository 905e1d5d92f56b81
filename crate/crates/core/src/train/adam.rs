//! Bias-corrected Adam.

use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Default for Adam<F> {
    fn default() -> Self {
        Adam {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<F: Scalar> Adam<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update with learning rate `lr`.
    ///
    /// The step counter always advances. Parameters without a gradient
    /// entry are left alone, moments included.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        self.step_map(params, grads.iter(), lr)
    }

    pub fn step_map<'a>(
        &mut self,
        params: &mut ParamStore<F>,
        grads: impl Iterator<Item = (&'a String, &'a Tensor<F>)>,
        lr: f64,
    ) -> Result<()>
    where
        F: 'a,
    {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            if m.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::shape("adam", format!("{name}: moment shape differs from gradient")));
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gf = gi.to_f64_lossy();
                let mn = b1 * mi.to_f64_lossy() + (1.0 - b1) * gf;
                let vn = b2 * vi.to_f64_lossy() + (1.0 - b2) * gf * gf;
                *mi = F::from_f64_lossy(mn);
                *vi = F::from_f64_lossy(vn);
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *pi = F::from_f64_lossy(pi.to_f64_lossy() - update);
            }
        }
        Ok(())
    }
}
