//! Central-difference validation of [`Tape::backward`].
//!
//! The analytic gradient is computed at the precision under test (`f32` for
//! the training path); the numeric side always evaluates in `f64` so that its
//! own rounding does not dominate the comparison.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// A scalar-valued computation over a parameter store, evaluable at any precision.
pub trait ScalarFunction {
    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Pass threshold for [`GradCheckReport::max_rel_error`].
    pub tolerance: f64,
    /// Denominator floor: errors are `|a − n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-4,
            tolerance: 1e-3,
            abs_floor: 1e-3,
            coords_per_param: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }
}

fn evaluate<F: ScalarFunction>(f: &F, store: &ParamStore<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let bind = store.bind_constants(&mut tape);
    let out = f.eval(&mut tape, &bind)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Usage("gradient check needs a scalar function".into()));
    }
    Ok(v.data()[0])
}

/// Compares backward at precision `S` against central differences
/// `(f(p + ε) − f(p − ε)) / 2ε` over sampled coordinates of every parameter.
pub fn finite_diff_check<S: Scalar, F: ScalarFunction>(
    f: &F,
    store: &ParamStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if cfg.epsilon <= 0.0 {
        return Err(Error::Config("finite-difference epsilon must be positive".into()));
    }
    let analytic = {
        let mut tape = Tape::<S>::new();
        let bind = store.bind(&mut tape);
        let out = f.eval(&mut tape, &bind)?;
        let grads = tape.backward(out)?;
        bind.collect(&grads)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance: cfg.tolerance,
    };
    for (id, name, t) in store.iter() {
        let n = t.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.coords_per_param).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let orig = t.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + cfg.epsilon;
            let up = evaluate(f, &probe)?;
            probe.get_mut(id).data_mut()[i] = orig - cfg.epsilon;
            let down = evaluate(f, &probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.epsilon);
            let a = analytic[id.0].data()[i].f64();
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = Some(Mismatch {
                    param: name.to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use crate::tensor::Tensor;

    struct Square(ParamId);
    impl ScalarFunction for Square {
        fn eval<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding) -> Result<Var> {
            let p = bind[self.0];
            let sq = tape.mul(p, p)?;
            Ok(tape.sum(sq))
        }
    }

    struct Constant;
    impl ScalarFunction for Constant {
        fn eval<S: Scalar>(&self, tape: &mut Tape<S>, _: &Binding) -> Result<Var> {
            let c = tape.constant(Tensor::scalar(S::of(4.0)));
            Ok(tape.sum(c))
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(3.0));
        let cfg = GradCheckConfig {
            epsilon: 1e-3,
            ..Default::default()
        };
        let r = finite_diff_check::<f64, _>(&Square(id), &store, &cfg).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.worst.unwrap().analytic, 6.0);
    }

    #[test]
    fn constant_has_zero_gradients() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(3.0));
        let r = finite_diff_check::<f32, _>(&Constant, &store, &GradCheckConfig::default()).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        let w = r.worst.unwrap();
        assert_eq!((w.analytic, w.numeric), (0.0, 0.0));
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let store = ParamStore::<f64>::new();
        let cfg = GradCheckConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(finite_diff_check::<f64, _>(&Constant, &store, &cfg).is_err());
    }
}
