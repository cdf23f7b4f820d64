//! Dense BFGS with a backtracking line search.

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BfgsConfig {
    pub max_iterations: usize,
    /// Stop when the objective changes by less than `ftol · max(1, |f|)`.
    pub ftol: f64,
    /// Stop when `‖g‖∞` falls below this.
    pub gtol: f64,
    /// `‖g‖∞` still accepted as stationary when stopping on `ftol`.
    pub stationary_gtol: f64,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            ftol: 1e-8,
            gtol: 1e-5,
            stationary_gtol: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f` given a callback returning `(value, gradient)`.
pub fn minimize<F>(mut f: F, x0: &[f64], config: &BfgsConfig) -> BfgsOutcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    let mut history = vec![fx];
    let mut h = identity(n);
    let mut iterations = 0;
    let mut converged = n == 0 || inf_norm(&g) < config.gtol;

    while !converged && iterations < config.max_iterations {
        iterations += 1;
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i], &g)).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            h = identity(n);
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = f(&trial);
            evaluations += 1;
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            converged = inf_norm(&g) < config.stationary_gtol;
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if iterations == 1 {
                // Scale the initial inverse Hessian before the first update.
                let scale = sy / dot(&y, &y);
                for (i, row) in h.iter_mut().enumerate() {
                    row[i] = scale;
                }
            }
            bfgs_update(&mut h, &s, &y, sy);
        }

        let df = (fx - f_new).abs();
        x = x_new;
        fx = f_new;
        g = g_new;
        history.push(fx);
        let gmax = inf_norm(&g);
        if gmax < config.gtol {
            converged = true;
        } else if df < config.ftol * fx.abs().max(1.0) {
            converged = gmax < config.stationary_gtol;
            break;
        }
    }

    BfgsOutcome {
        x,
        value: fx,
        gradient: g,
        iterations,
        evaluations,
        converged,
        history,
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut row = vec![0.0; n];
            row[i] = 1.0;
            row
        })
        .collect()
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ` with `ρ = 1/(yᵀs)`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let a = [[3.0, 1.0], [1.0, 2.0]];
        let b = [1.0, -1.0];
        let out = minimize(
            |x| {
                let ax = [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]];
                (0.5 * dot(x, &ax) - dot(&b, x), vec![ax[0] - b[0], ax[1] - b[1]])
            },
            &[5.0, 5.0],
            &BfgsConfig::default(),
        );
        assert!(out.converged);
        assert!((out.x[0] - 0.6).abs() < 1e-6 && (out.x[1] + 0.8).abs() < 1e-6);
    }

    #[test]
    fn solves_rosenbrock() {
        let out = minimize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
                (f, g)
            },
            &[-1.2, 1.0],
            &BfgsConfig {
                ftol: 1e-14,
                ..BfgsConfig::default()
            },
        );
        assert!((out.x[0] - 1.0).abs() < 1e-4 && (out.x[1] - 1.0).abs() < 1e-4, "{:?}", out.x);
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn empty_problem_is_trivially_converged() {
        let out = minimize(|_| (1.5, vec![]), &[], &BfgsConfig::default());
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
    }
}
