//! Central finite-difference gradient checks in 64-bit precision.
//!
//! Errors are relative, `|a - n| / max(|a|, |n|, DENOM_FLOOR)`. The floor
//! keeps vanishing gradients, where roundoff at `h = 1e-5` dominates, from
//! reporting meaningless ratios.

use rand::Rng;

use super::params::{Grads, ParamStore};
use super::tensor::Tensor2;

pub const STEP: f64 = 1e-5;
pub const DENOM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheck {
    fn push(&mut self, analytic: f64, numeric: f64) {
        let diff = (analytic - numeric).abs();
        let rel = diff / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
        self.max_rel_err = self.max_rel_err.max(rel);
        self.checked += 1;
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
        }
    }
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2<f64> {
    Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Compare every parameter gradient against central differences of `loss`.
pub fn param_grad_error(
    ps: &ParamStore<f64>,
    grads: &Grads<f64>,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheck {
    let mut report = GradCheck::default();
    let mut work = ps.clone();
    let ids: Vec<_> = ps.iter().map(|(n, _)| ps.id(n).expect("own name")).collect();
    for id in ids {
        for k in 0..ps.get(id).data().len() {
            let orig = ps.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + STEP;
            let plus = loss(&work);
            work.get_mut(id).data_mut()[k] = orig - STEP;
            let minus = loss(&work);
            work.get_mut(id).data_mut()[k] = orig;
            report.push(grads.get(id).data()[k], (plus - minus) / (2.0 * STEP));
        }
    }
    report
}

/// Compare an input gradient against central differences of `loss`.
pub fn input_grad_error(
    x: &Tensor2<f64>,
    dx: &Tensor2<f64>,
    mut loss: impl FnMut(&Tensor2<f64>) -> f64,
) -> GradCheck {
    assert_eq!(x.shape(), dx.shape(), "gradient shape");
    let mut report = GradCheck::default();
    let mut work = x.clone();
    for k in 0..x.data().len() {
        let orig = x.data()[k];
        work.data_mut()[k] = orig + STEP;
        let plus = loss(&work);
        work.data_mut()[k] = orig - STEP;
        let minus = loss(&work);
        work.data_mut()[k] = orig;
        report.push(dx.data()[k], (plus - minus) / (2.0 * STEP));
    }
    report
}

pub fn check_param_grads(
    ps: &ParamStore<f64>,
    grads: &Grads<f64>,
    loss: impl FnMut(&ParamStore<f64>) -> f64,
    tol: f64,
) -> GradCheck {
    let r = param_grad_error(ps, grads, loss);
    assert!(r.max_rel_err < tol, "parameter gradient error {r:?}");
    r
}

pub fn check_input_grad(
    x: &Tensor2<f64>,
    dx: &Tensor2<f64>,
    loss: impl FnMut(&Tensor2<f64>) -> f64,
    tol: f64,
) -> GradCheck {
    let r = input_grad_error(x, dx, loss);
    assert!(r.max_rel_err < tol, "input gradient error {r:?}");
    r
}
