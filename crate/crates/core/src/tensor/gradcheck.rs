use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome for one named parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the scalar with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − n| / max(1e-12, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compare reverse-mode gradients of `f` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, one scalar at a time.
///
/// `f` builds a scalar loss on the graph it is handed from leaves standing in
/// for `params` (same order). It is evaluated twice up front; differing
/// results are reported as [`Error::NonDeterministic`].
pub fn finite_difference_check<F>(
    f: F,
    params: &[(String, Tensor)],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t)).collect();
        let loss = f(&mut g, &vars)?;
        if g.node(loss).data.len() != 1 {
            return Err(Error::shape("finite_difference_check", "loss must be scalar"));
        }
        Ok(g.data(loss)[0])
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let first = eval(&values)?;
    let second = eval(&values)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut checks = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for i in 0..values[p].numel() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + epsilon;
            let plus = eval(&values)?;
            values[p].data_mut()[i] = orig - epsilon;
            let minus = eval(&values)?;
            values[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[p].get(i).copied().unwrap_or(0.0);
            let err = relative_error(a, numeric);
            // NaN must fail, so compare with `!(err <= max)`.
            if !(err <= check.max_rel_error) {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error <= tolerance;
        checks.push(check);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        params: checks,
        max_rel_error,
        tolerance,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn square_at_two() {
        let params = vec![("x".to_string(), Tensor::scalar(2.0))];
        let report = finite_difference_check(
            |g, v| g.mul(v[0], v[0]),
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed);
        let c = &report.params[0];
        assert_eq!(c.analytic, 4.0);
        assert!((c.numeric - 4.0).abs() < 1e-9);
    }

    #[test]
    fn tanh_matches_closed_form() {
        let params = vec![("alpha".to_string(), Tensor::scalar(0.3))];
        let report = finite_difference_check(|g, v| g.tanh(v[0]), &params, 1e-5, 1e-6).unwrap();
        assert!(report.passed);
        let c = &report.params[0];
        let expected = 1.0 - 0.3f64.tanh().powi(2);
        assert!((c.numeric - expected).abs() < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at exactly 0 has a one-sided analytic gradient of 0 but fd slope 0.5
        let params = vec![("x".to_string(), Tensor::scalar(0.0))];
        let report = finite_difference_check(|g, v| g.relu(v[0]), &params, 1e-5, 1e-6).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn rejects_non_deterministic_function() {
        let counter = Cell::new(0.0);
        let params = vec![("x".to_string(), Tensor::scalar(1.0))];
        let err = finite_difference_check(
            |g, v| {
                counter.set(counter.get() + 1.0);
                let s = g.scale(v[0], counter.get())?;
                Ok(s)
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn rejects_bad_epsilon() {
        let params = vec![("x".to_string(), Tensor::scalar(1.0))];
        assert!(finite_difference_check(|g, v| g.tanh(v[0]), &params, 0.0, 1e-6).is_err());
    }
}
