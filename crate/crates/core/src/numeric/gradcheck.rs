//! Central-difference gradient oracle.
//!
//! Only forward evaluations are used to form the numerical gradient, so the
//! check is independent of every backward rule it verifies.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Options for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: Real,
    /// Probe at most this many coordinates per input (sampled without
    /// replacement); `None` probes every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_input: None,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |analytic|) over probed coordinates.
    pub max_rel_error: Real,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
}

/// Compares tape gradients of a scalar function against central differences
/// and returns the maximum relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: Real) -> Result<Real>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>> + Sync,
{
    let report = check_gradients(
        |tape, xs| f(tape, xs[0]),
        std::slice::from_ref(x),
        &GradCheckOptions {
            step,
            ..Default::default()
        },
    )?;
    Ok(report.max_rel_error)
}

/// Multi-input version of [`finite_difference_check`].
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    if opts.step <= 0.0 {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let loss_value = loss.value().item();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |xs: &[Tensor]| -> Result<Real> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    if eval(inputs)?.to_bits() != loss_value.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        match opts.max_coords_per_input {
            Some(m) if m < t.len() => {
                let mut picked = sample(&mut rng, t.len(), m).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|j| (i, j)));
            }
            _ => coords.extend((0..t.len()).map(|j| (i, j))),
        }
    }

    let h = opts.step;
    let errors = opts.exec.map(&coords, |&(i, j)| -> Result<Real> {
        let mut xs = inputs.to_vec();
        let orig = xs[i].data()[j];
        xs[i].data_mut()[j] = orig + h;
        let plus = eval(&xs)?;
        xs[i].data_mut()[j] = orig - h;
        let minus = eval(&xs)?;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i].data()[j];
        Ok((a - numeric).abs() / a.abs().max(1.0))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        probes: coords.len(),
    };
    for (&c, e) in coords.iter().zip(errors) {
        let e = e?;
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some(c);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn([5], |i| i as Real * 0.3 - 1.0);
        let err = finite_difference_check(|_, x| x.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sigmoid_sum() {
        let x = Tensor::from_fn([6], |i| i as Real * 0.7 - 2.0);
        let err = finite_difference_check(|_, x| x.sigmoid()?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu at exactly 0 has a one-sided derivative: analytic 0, numeric 0.5
        let x = Tensor::zeros([1]);
        let err = finite_difference_check(|_, x| x.relu()?.sum(), &x, 1e-5).unwrap();
        assert!((err - 0.5).abs() < 1e-9);
    }

    #[test]
    fn nondeterminism_is_reported() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let x = Tensor::ones([2]);
        let res = finite_difference_check(
            |_, x| {
                let k = calls.fetch_add(1, Ordering::SeqCst) as Real;
                x.sum()?.add_scalar(k)
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonDeterministic)));
    }
}
