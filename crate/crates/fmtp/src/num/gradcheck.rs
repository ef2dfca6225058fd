//! Finite-difference gradient verification.
//!
//! Central differences with h = 1e-5 at 64-bit precision, compared against
//! the tape gradient coordinate by coordinate. The relative error uses
//! |a - b| / max(1, |a|, |b|), which degrades to an absolute tolerance for
//! near-zero gradients where the quotient form is meaningless.
//!
//! Functions containing a quantizer must hold the discrete assignments fixed
//! across the +-h probes (close over precomputed indices); the checked
//! function is then smooth and the straight-through gradient is well defined.

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::NumError;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

fn compare(tape_grad: &[f64], numeric: &[f64], tolerance: f64) -> GradCheckReport {
    let mut max_rel_error = 0.0;
    let mut worst = 0;
    for (i, (&a, &b)) in tape_grad.iter().zip(numeric).enumerate() {
        let e = rel_error(a, b);
        if e > max_rel_error {
            max_rel_error = e;
            worst = i;
        }
    }
    GradCheckReport {
        max_rel_error,
        worst_coordinate: worst,
        tolerance,
        checked: tape_grad.len(),
    }
}

/// Checks a scalar-valued tape function of one input tensor.
///
/// `build` receives a fresh tape and the input bound at `shape`; it must
/// return a scalar node. It is invoked once for the tape gradient and
/// 2 x len(point) times for the central differences.
pub fn grad_check<F>(
    shape: &[usize],
    point: &[f64],
    tolerance: f64,
    build: F,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, NumError>,
{
    let leaf = crate::num::tensor::Tensor::new(shape.to_vec(), point.to_vec()).with_grad();

    let mut tape = Tape::new();
    let x = tape.leaf(&leaf);
    let out = build(&mut tape, x)?;
    tape.backward(out)?;
    let tape_grad = tape.grad(x).expect("input leaf tracks gradient").to_vec();

    let eval = |p: &[f64]| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let x = tape.constant(shape.to_vec(), p.to_vec());
        let out = build(&mut tape, x)?;
        Ok(tape.scalar(out))
    };

    let mut numeric = vec![0.0; point.len()];
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let saved = probe[i];
        probe[i] = saved + DEFAULT_STEP;
        let fp = eval(&probe)?;
        probe[i] = saved - DEFAULT_STEP;
        let fm = eval(&probe)?;
        probe[i] = saved;
        numeric[i] = (fp - fm) / (2.0 * DEFAULT_STEP);
    }

    Ok(compare(&tape_grad, &numeric, tolerance))
}

/// Checks a scalar loss over every value in a parameter set.
///
/// `forward` builds the loss from bound parameters; anything it closes over
/// (inputs, frozen quantizer assignments) stays fixed across probes.
pub fn grad_check_params<F>(
    params: &ParamSet<f64>,
    tolerance: f64,
    forward: F,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var, NumError>,
{
    let mut work = params.clone();
    work.zero_grads();

    let mut tape = Tape::new();
    let bound = work.bind(&mut tape);
    let out = forward(&mut tape, &bound)?;
    tape.backward(out)?;
    work.pull_grads(&tape, &bound);
    let tape_grad: Vec<f64> = work.flat_grads();

    let eval = |set: &ParamSet<f64>| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape);
        let out = forward(&mut tape, &bound)?;
        Ok(tape.scalar(out))
    };

    let mut flat = work.flatten();
    let mut numeric = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let saved = flat[i];
        flat[i] = saved + DEFAULT_STEP;
        work.unflatten(&flat);
        let fp = eval(&work)?;
        flat[i] = saved - DEFAULT_STEP;
        work.unflatten(&flat);
        let fm = eval(&work)?;
        flat[i] = saved;
        numeric[i] = (fp - fm) / (2.0 * DEFAULT_STEP);
    }

    Ok(compare(&tape_grad, &numeric, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        // f(x) = x^2: tape 6 vs numeric 6.
        let report = grad_check(&[1], &[3.0], 1e-6, |tape, x| {
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn masked_softmax_of_matmul_composite() {
        let point: Vec<f64> = vec![0.3, -0.7, 1.1, 0.4, -0.2, 0.9];
        let weights = vec![0.5, -0.3, 0.8, 0.1, -0.6, 0.2, 0.7, -0.1, 0.4];
        let mask = vec![true, true, false, true, true, true];
        let report = grad_check(&[2, 3], &point, 1e-4, move |tape, x| {
            let w = tape.constant(vec![3, 3], weights.clone());
            let prod = tape.matmul(x, w)?;
            let soft = tape.masked_softmax(prod, &mask)?;
            // A non-symmetric functional of the rows so the gradient is
            // nondegenerate.
            let weighted = tape.mul(soft, prod)?;
            Ok(tape.sum(weighted))
        })
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }
}
