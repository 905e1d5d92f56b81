use std::collections::BTreeMap;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over scored coordinates of |analytic - central| / max(|analytic|, |central|, resolution)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    /// Coordinates whose `[x - eps, x + eps]` interval crosses a kink (ReLU,
    /// abs, max): the analytic value matches one one-sided slope and sits
    /// between both. They are counted here and left out of `max_rel_error`.
    pub kinks: usize,
    /// Floor of the relative-error denominator: the gradient size at which a
    /// 1e-4 relative error equals ten times the round-off of a central
    /// difference at the loss scale. Smaller gradients cannot be resolved to
    /// 1e-4 and are effectively compared in absolute terms.
    pub resolution: f64,
}

/// Absolute floor for the relative error, whatever the loss scale.
const REL_FLOOR: f64 = 1e-8;

fn resolution(loss: f64, eps: f64) -> f64 {
    let roundoff = f64::EPSILON * loss.abs().max(1.0) / eps;
    (10.0 * roundoff / 1e-4).max(REL_FLOOR)
}

/// At a smooth point the one-sided slopes miss the derivative by about
/// `+-eps f''/2`, symmetrically. Past a kink the analytic value keeps matching
/// the side that stays on its branch while the other side jumps away.
fn crosses_kink(analytic: f64, fwd: f64, bwd: f64, res: f64) -> bool {
    let (df, db) = ((fwd - analytic).abs(), (bwd - analytic).abs());
    let (near, far) = (df.min(db), df.max(db));
    far > res && near < 0.1 * far && analytic >= fwd.min(bwd) && analytic <= fwd.max(bwd)
}

pub fn grad_check<Fun>(mut f: Fun, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    Fun: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let params: BTreeMap<String, Tensor<f64>> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("input{i}"), t.clone()))
        .collect();
    let n = inputs.len();
    check_named(
        |tape, ps| {
            let vars: Vec<Var> = (0..n)
                .map(|i| {
                    let name = format!("input{i}");
                    tape.param(&name, &ps[&name])
                })
                .collect();
            f(tape, &vars)
        },
        &params,
        eps,
        None,
    )
}

/// Named-parameter variant: `f` registers whichever entries of the map it uses.
///
/// `tamper` may rewrite analytic gradients before comparison; it exists so that
/// callers can run negative controls.
pub fn check_named<Fun>(
    mut f: Fun,
    params: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
    tamper: Option<&dyn Fn(&str, &mut Tensor<f64>)>,
) -> Result<GradCheckReport>
where
    Fun: FnMut(&mut Tape<f64>, &BTreeMap<String, Tensor<f64>>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    let mut eval = |ps: &BTreeMap<String, Tensor<f64>>| -> Result<f64> {
        let mut t = Tape::inference();
        let y = f(&mut t, ps)?;
        let v = t.value(y).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let base = eval(params)?;
    let res = resolution(base, eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        kinks: 0,
        resolution: res,
    };
    let mut work = params.clone();
    for (name, value) in params {
        let mut analytic = match grads.get(name) {
            Some(g) => g.clone(),
            None => Tensor::zeros(value.shape().to_vec()),
        };
        if let Some(t) = tamper {
            t(name, &mut analytic);
        }
        for j in 0..value.numel() {
            let orig = value.data()[j];
            work.get_mut(name).unwrap().data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[j] = orig;

            let central = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(res);
            report.coordinates += 1;
            let (fwd, bwd) = ((plus - base) / eps, (base - minus) / eps);
            if crosses_kink(a, fwd, bwd, res) {
                report.kinks += 1;
                continue;
            }
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::ones([3]);
        let r = grad_check(
            |tape, _vars| Ok(tape.constant(Tensor::scalar(4.0))),
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.coordinates, 3);
        assert_eq!(r.kinks, 0);
    }

    #[test]
    fn relu_at_its_kink_is_counted_not_scored() {
        // x = 0.3e-5 sits inside [x - eps, x + eps] around the ReLU corner.
        let x = Tensor::new([2], vec![3e-6, 0.7]).unwrap();
        let r = grad_check(|t, v| { let y = t.relu(v[0])?; t.sum(y) }, &[x], 1e-5).unwrap();
        assert_eq!(r.kinks, 1);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn a_wrong_gradient_at_a_kink_is_still_caught() {
        // The analytic value 5 lies outside the one-sided slopes 0 and 1.
        let x = Tensor::new([1], vec![3e-6]).unwrap();
        let params: BTreeMap<String, Tensor<f64>> = [("x".to_string(), x)].into();
        let r = check_named(
            |t, ps| { let v = t.param("x", &ps["x"]); let y = t.relu(v)?; t.sum(y) },
            &params,
            1e-5,
            Some(&|_: &str, g: &mut Tensor<f64>| g.data_mut()[0] = 5.0),
        )
        .unwrap();
        assert_eq!(r.kinks, 0);
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn resolution_tracks_the_loss_scale() {
        assert_eq!(resolution(0.0, 1e-5), resolution(1.0, 1e-5));
        assert!((resolution(20.0, 1e-5) / resolution(1.0, 1e-5) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::<f64>::ones([1]);
        assert!(grad_check(|t, v| t.sum(v[0]), &[x], 0.0).is_err());
    }
}
