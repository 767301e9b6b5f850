//! Dense BFGS with backtracking line search and central-difference gradients.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Relative step of the central differences.
    pub grad_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 500, grad_tol: 1e-6, grad_step: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn step_for(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central-difference gradient. Falls back to a one-sided difference when one
/// side leaves the domain (objective returns a non-finite value).
pub fn num_gradient<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>, fx: f64, rel: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for k in 0..x.len() {
        let h = step_for(x[k], rel);
        xp[k] = x[k] + h;
        let fp = f(&xp);
        xp[k] = x[k] - h;
        let fm = f(&xp);
        xp[k] = x[k];
        g[k] = match (fp.is_finite(), fm.is_finite()) {
            (true, true) => (fp - fm) / (2.0 * h),
            (true, false) => (fp - fx) / h,
            (false, true) => (fx - fm) / h,
            (false, false) => f64::NAN,
        };
    }
    g
}

/// Hessian by second-order central differences of the function values.
pub fn num_hessian<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>, rel: f64) -> DMatrix<f64> {
    let n = x.len();
    let f0 = f(x);
    let h: Vec<f64> = x.iter().map(|v| step_for(*v, rel)).collect();
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let fp = f(&xp);
        xp[i] = x[i] - h[i];
        let fm = f(&xp);
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

pub fn minimize<F: Fn(&DVector<f64>) -> f64>(f: F, x0: DVector<f64>, opts: &BfgsOptions) -> BfgsOutcome {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    let mut g = num_gradient(&f, &x, fx, opts.grad_step);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;

    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return BfgsOutcome { x, value: fx, grad: g, iterations, converged: false };
    }

    while iterations < opts.max_iter {
        if g.norm() < opts.grad_tol {
            return BfgsOutcome { x, value: fx, grad: g, iterations, converged: true };
        }
        iterations += 1;

        let mut dir = -(&hinv * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        if fresh {
            // keep the first steepest-descent step from leaving the basin
            let len = dir.norm();
            if len > 1.0 {
                dir /= len;
                slope /= len;
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + &dir * step;
            let fc = f(&cand);
            if fc.is_finite() && fc <= fx + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_)) = accepted else {
            if fresh {
                break;
            }
            hinv = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };

        let gn = num_gradient(&f, &xn, fn_, opts.grad_step);
        if gn.iter().any(|v| !v.is_finite()) {
            break;
        }
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() && sy > 0.0 {
            if fresh {
                hinv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv +=
                (&s * s.transpose()) * ((1.0 + rho * yhy) * rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        x = xn;
        fx = fn_;
        g = gn;
    }
    let converged = g.norm() < opts.grad_tol;
    BfgsOutcome { x, value: fx, grad: g, iterations, converged }
}
