use super::{Graph, NumericsError, Tensor, Var};

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Normwise relative error `‖g_ad − g_fd‖∞ / (‖g_fd‖∞ + 1e-12)` over all
    /// parameters jointly.
    pub max_rel_error: f64,
    /// `max |g_ad − g_fd| / (|g_fd| + 1e-12)` per coordinate. Dominated by
    /// near-zero coordinates, where central differences are limited by
    /// roundoff; informational only.
    pub max_coord_rel_error: f64,
    /// `(param index, flat coordinate)` of the largest absolute error.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Default step for central differences.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh graph and one `Var` per entry of `params` (inserted
/// with `requires_grad = true`) and must return a scalar; it has to be a
/// deterministic function of the parameter values.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    assert!(eps > 0.0, "finite_diff_check: eps must be positive");
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut g, &vars);
        g.item(out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars);
    let analytic = g.reverse_grad(out, &vars)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_coord_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut max_abs_err = 0.0f64;
    let mut max_fd = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let plus = eval(&work);
            work[pi].data_mut()[ci] = orig - eps;
            let minus = eval(&work);
            work[pi].data_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericsError::NonFinite {
                    what: "finite_diff_check objective",
                    index: Some((pi, ci)),
                });
            }
            let fd = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[ci] - fd).abs();
            report.max_coord_rel_error = report.max_coord_rel_error.max(err / (fd.abs() + 1e-12));
            if report.worst.is_none() || err > max_abs_err {
                max_abs_err = err;
                report.worst = Some((pi, ci));
            }
            max_fd = max_fd.max(fd.abs());
            report.coordinates += 1;
        }
    }
    report.max_rel_error = max_abs_err / (max_fd + 1e-12);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let p = Tensor::from_vec(vec![0.5, -1.25, 2.0]);
        let r = finite_diff_check(|g, v| g.sq_norm(v[0]), &[p], DEFAULT_FD_EPS).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let p = Tensor::from_vec(vec![1.0, 2.0]);
        let r = finite_diff_check(|g, _| g.scalar(3.0), &[p], DEFAULT_FD_EPS).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn tiny_coordinates_do_not_dominate_the_norm() {
        // d/dy of x² + 1e-9·y is 1e-9, far below the roundoff of the
        // difference quotient of an objective of size 9.
        let (x, y) = (Tensor::from_vec(vec![3.0]), Tensor::from_vec(vec![0.7]));
        let r = finite_diff_check(
            |g, v| {
                let a = g.sq_norm(v[0]);
                let w = g.constant(Tensor::from_vec(vec![1e-9]));
                let b = g.mul(v[1], w);
                let b = g.sum(b);
                g.add(a, b)
            },
            &[x, y],
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!(r.max_coord_rel_error > 1e-4, "{r:?}");
    }

    #[test]
    fn nan_objective_is_reported() {
        let p = Tensor::from_vec(vec![-1.0]);
        let err = finite_diff_check(|g, v| g.log(v[0]), &[p], DEFAULT_FD_EPS).unwrap_err();
        assert!(matches!(
            err,
            NumericsError::NonFinite {
                index: Some((0, 0)),
                ..
            }
        ));
    }

    #[test]
    fn composite_nonlinear_graph() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.8, 1.1, -0.7, 0.05]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![0.2, -0.4, 0.6, 0.1, -0.3, 0.9]).unwrap();
        let b = Tensor::from_vec(vec![0.1, -0.1]);
        let f = |g: &mut Graph, v: &[Var]| {
            let h = g.matmul(v[0], v[1]);
            let h = g.add_row_bias(h, v[2]);
            let h = g.silu(h);
            let r = g.row_sq_norm(h);
            let s = g.sigmoid(r);
            let l = g.log(s);
            g.mean(l)
        };
        let r = finite_diff_check(f, &[x, w, b], DEFAULT_FD_EPS).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
