//! Central-difference gradient checking.
//!
//! This path only ever evaluates the forward function; it never reads a
//! gradient produced by the tape except to compare against it.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// `(f(x + h) − f(x − h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Picks up to `max` coordinates out of `n`, deterministically from `seed`.
/// Returns all of them, in order, when `n <= max`.
pub fn sample_coordinates(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Settings for [`finite_diff_check_with`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates checked per input; all of them when the input is smaller.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 64,
            seed: 0,
        }
    }
}

/// Maximum relative error between the tape gradient of scalar `f` at `x`
/// and a central difference with the given `step`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_with(
        f,
        x,
        GradCheck {
            step,
            ..GradCheck::default()
        },
    )
}

pub fn finite_diff_check_with<F>(f: F, x: &Tensor, cfg: GradCheck) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if cfg.step <= 0.0 {
        return Err(Error::Validation(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut tape = Tape::new();
    let input = tape.leaf(&x.clone().with_requires_grad(true));
    let out = f(&mut tape, input)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract(
            "gradient check needs a scalar function".into(),
        ));
    }
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.get(input).unwrap_or(&zeros);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.item(out))
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in sample_coordinates(x.numel(), cfg.samples, cfg.seed) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + cfg.step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - cfg.step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.37 - 1.0);
        let err = finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::zeros(&[2]);
        assert!(finite_diff_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    }

    #[test]
    fn rejects_vector_output() {
        let x = Tensor::zeros(&[2]);
        assert!(matches!(
            finite_diff_check(|t, v| Ok(t.scale(v, 2.0)), &x, 1e-5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let a = sample_coordinates(1000, 50, 9);
        assert_eq!(a, sample_coordinates(1000, 50, 9));
        assert_eq!(a.len(), 50);
        assert_eq!(sample_coordinates(5, 50, 9), vec![0, 1, 2, 3, 4]);
    }
}
