use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, RELATIVE_ERROR_FLOOR)
}

pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Compares the gradients stored in `params` against central differences of
/// `forward`, one scalar at a time, and reports the worst relative error.
///
/// `forward` must be deterministic and must not depend on the stored gradients.
pub fn grad_check<T, F>(forward: F, params: &ParamStore<T>, eps: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    grad_check_floor(forward, params, eps, RELATIVE_ERROR_FLOOR)
}

/// [`grad_check`] with a different denominator floor. Entries whose true
/// gradient is structurally zero still show a few ulp of the objective
/// divided by `2·eps` in the central difference.
pub fn grad_check_floor<T, F>(mut forward: F, params: &ParamStore<T>, eps: T, floor: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::Domain(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.value(name).len();
        for idx in 0..n {
            let orig = params.value(name).data()[idx];
            probe.value_mut(name).data_mut()[idx] = orig + eps;
            let plus = eval(&mut forward, &probe)?;
            probe.value_mut(name).data_mut()[idx] = orig - eps;
            let minus = eval(&mut forward, &probe)?;
            probe.value_mut(name).data_mut()[idx] = orig;

            let numeric = ((plus - minus) / (eps + eps)).as_f64();
            let analytic = params.grad(name).data()[idx].as_f64();
            let err = relative_error_floor(analytic, numeric, floor);
            report.entries_checked += 1;
            if report.entries_checked == 1 || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn eval<T: Scalar, F: FnMut(&ParamStore<T>) -> Result<T>>(f: &mut F, p: &ParamStore<T>) -> Result<T> {
    let v = f(p)?;
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ops, Tensor2D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("theta", Tensor2D::from_vec(1, 1, vec![3.0]).unwrap());
        ps.grad_mut("theta").data_mut()[0] = 6.0;
        let r = grad_check(|p| Ok(p.value("theta").data()[0].powi(2)), &ps, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-9, "{r:?}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("theta", Tensor2D::from_vec(1, 2, vec![3.0, -1.0]).unwrap());
        let r = grad_check(|_| Ok(4.2), &ps, 1e-5).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("theta", Tensor2D::zeros(1, 1));
        let err = grad_check(|_| Ok(f64::NAN), &ps, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("theta", Tensor2D::from_vec(1, 1, vec![3.0]).unwrap());
        ps.grad_mut("theta").data_mut()[0] = 5.0;
        let r = grad_check(|p| Ok(p.value("theta").data()[0].powi(2)), &ps, 1e-5).unwrap();
        assert!(r.max_relative_error > 0.05);
    }

    /// Linear backward against central differences on 100 random shapes up to 16x16.
    #[test]
    fn linear_backward_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let rows = rng.random_range(1..=16);
            let cols = rng.random_range(1..=16);
            let mut ps = ParamStore::<f64>::new();
            ps.insert("w", Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)));
            ps.insert("b", Tensor2D::from_fn(1, rows, |_, _| rng.random_range(-1.0..1.0)));
            ps.insert("x", Tensor2D::from_fn(1, cols, |_, _| rng.random_range(-1.0..1.0)));
            let probe: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |p: &ParamStore<f64>| {
                let y = ops::linear(p.value("w"), p.value("b").data(), p.value("x").data())?;
                Ok(crate::tensor::dot(&y, &probe))
            };
            let (w, x) = (ps.value("w").clone(), ps.value("x").clone());
            let mut gw = Tensor2D::zeros(rows, cols);
            let mut gb = vec![0.0; rows];
            let dx = ops::linear_backward(&w, x.data(), &probe, &mut gw, &mut gb);
            *ps.grad_mut("w") = gw;
            ps.grad_mut("b").data_mut().copy_from_slice(&gb);
            ps.grad_mut("x").data_mut().copy_from_slice(&dx);
            let r = grad_check(f, &ps, 1e-5).unwrap();
            assert!(r.max_relative_error < 1e-6, "{rows}x{cols}: {r:?}");
        }
    }
}
