//! Finite-difference verification of reverse-mode gradients.
//!
//! The harness evaluates a loss twice per coordinate with central
//! differences and compares against the adjoints produced by
//! [`Graph::grad`]. It only ever reads forward values, so it stays
//! independent of the backward implementation it checks.

use super::{Graph, Tensor, Var};

/// Default step for central differences in f64.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Default relative-error tolerance for gradient agreement.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Central finite differences of a scalar function at `point`.
pub fn central_diff<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

/// Worst coordinate found by [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_leaf: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a small absolute floor so that exactly-zero
/// gradients are not failed by finite-difference noise.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares analytic gradients of `build` against central differences.
///
/// `build` must construct the loss from leaves registered in the order of
/// `inputs`; it is re-invoked on perturbed copies, so any data-dependent
/// choices (labels, negative-prototype indices) must be captured by the
/// closure, not recomputed from the perturbed values.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], step: f64) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let register = |g: &mut Graph, tensors: &[Tensor]| -> Vec<Var> {
        tensors.iter().map(|t| g.leaf(t)).collect()
    };

    let mut g = Graph::new();
    let vars = register(&mut g, inputs);
    let loss = build(&mut g, &vars);
    let analytic = g.grad(loss, &vars).expect("loss must be scalar");

    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars = register(&mut g, tensors);
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_leaf: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for leaf in 0..inputs.len() {
        if !inputs[leaf].requires_grad {
            continue;
        }
        for coord in 0..inputs[leaf].len() {
            let orig = work[leaf].data()[coord];
            work[leaf].data_mut()[coord] = orig + step;
            let plus = eval(&work);
            work[leaf].data_mut()[coord] = orig - step;
            let minus = eval(&work);
            work[leaf].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[leaf].data()[coord];
            let e = rel_err(a, numeric);
            if e > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: e,
                    worst_leaf: leaf,
                    worst_coord: coord,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::from_vec(shape, data).with_grad()
    }

    #[test]
    fn central_diff_on_quadratic() {
        let grads = central_diff(|v| v[0] * v[0] + v[1] * v[1], &[3.0, 4.0], 1e-6);
        assert!((grads[0] - 6.0).abs() < 1e-6);
        assert!((grads[1] - 8.0).abs() < 1e-6);
    }

    // Every primitive op checked at 20 random points each.
    #[test]
    fn primitive_adjoints_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        type Builder = fn(&mut Graph, &[Var]) -> Var;
        let unary: Vec<(&str, Builder)> = vec![
            ("relu", |g, v| {
                let r = g.relu(v[0]);
                g.sum(r)
            }),
            ("square", |g, v| {
                let r = g.square(v[0]);
                g.sum(r)
            }),
            ("half_power", |g, v| {
                let r = g.half_power(v[0], 1e-12);
                g.sum(r)
            }),
            ("scale", |g, v| {
                let r = g.scale(v[0], -3.25);
                g.sum(r)
            }),
            ("mean", |g, v| g.mean(v[0])),
            ("row_sum", |g, v| {
                let r = g.row_sum(v[0]);
                let sq = g.square(r);
                g.sum(sq)
            }),
            ("lse", |g, v| {
                let r = g.log_sum_exp_rows(v[0]);
                g.sum(r)
            }),
            ("gather_rows", |g, v| {
                let r = g.gather_rows(v[0], &[1, 0, 1]);
                let sq = g.square(r);
                g.sum(sq)
            }),
            ("gather_label", |g, v| {
                let r = g.gather_label(v[0], &[2, 0]);
                let sq = g.square(r);
                g.sum(sq)
            }),
        ];
        for (name, build) in unary {
            for trial in 0..20 {
                let t = random_tensor(&mut rng, vec![2, 3]);
                let report = check_gradients(build, &[t], DEFAULT_STEP);
                assert!(
                    report.passes(DEFAULT_TOL),
                    "{name} trial {trial}: {report:?}"
                );
            }
        }

        let binary: Vec<(&str, Builder)> = vec![
            ("add", |g, v| {
                let r = g.add(v[0], v[1]);
                let sq = g.square(r);
                g.sum(sq)
            }),
            ("sub", |g, v| {
                let r = g.sub(v[0], v[1]);
                let sq = g.square(r);
                g.sum(sq)
            }),
            ("mul", |g, v| {
                let r = g.mul(v[0], v[1]);
                g.sum(r)
            }),
        ];
        for (name, build) in binary {
            for trial in 0..20 {
                let a = random_tensor(&mut rng, vec![2, 3]);
                let b = random_tensor(&mut rng, vec![2, 3]);
                let report = check_gradients(build, &[a, b], DEFAULT_STEP);
                assert!(
                    report.passes(DEFAULT_TOL),
                    "{name} trial {trial}: {report:?}"
                );
            }
        }

        for trial in 0..20 {
            let a = random_tensor(&mut rng, vec![2, 3]);
            let b = random_tensor(&mut rng, vec![3, 4]);
            let report = check_gradients(
                |g, v| {
                    let r = g.matmul(v[0], v[1]);
                    let sq = g.square(r);
                    g.sum(sq)
                },
                &[a, b],
                DEFAULT_STEP,
            );
            assert!(report.passes(DEFAULT_TOL), "matmul trial {trial}: {report:?}");

            let a = random_tensor(&mut rng, vec![2, 3]);
            let bt = random_tensor(&mut rng, vec![4, 3]);
            let report = check_gradients(
                |g, v| {
                    let r = g.matmul_nt(v[0], v[1]);
                    let sq = g.square(r);
                    g.sum(sq)
                },
                &[a, bt],
                DEFAULT_STEP,
            );
            assert!(
                report.passes(DEFAULT_TOL),
                "matmul_nt trial {trial}: {report:?}"
            );

            let a = random_tensor(&mut rng, vec![2, 3]);
            let bias = random_tensor(&mut rng, vec![3]);
            let report = check_gradients(
                |g, v| {
                    let r = g.add_bias(v[0], v[1]);
                    let sq = g.square(r);
                    g.sum(sq)
                },
                &[a, bias],
                DEFAULT_STEP,
            );
            assert!(
                report.passes(DEFAULT_TOL),
                "add_bias trial {trial}: {report:?}"
            );

            // keep sqrt inputs away from the origin where its derivative blows up
            let n = 6;
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
            let t = Tensor::from_vec(vec![2, 3], data).with_grad();
            let report = check_gradients(
                |g, v| {
                    let r = g.sqrt(v[0]);
                    g.sum(r)
                },
                &[t],
                DEFAULT_STEP,
            );
            assert!(report.passes(DEFAULT_TOL), "sqrt trial {trial}: {report:?}");
        }
    }
}
