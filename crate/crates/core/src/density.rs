//! Constrained minimization of `E[ρ] = F[ρ] + μ·ρ` over feasible densities
//! `0 ≤ ρ_j ≤ 2`, `Σ ρ_j = N`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FunctionalModel;
use crate::rng::{derive_seed, rng_from_seed};
use crate::training::TrainedEnsemble;

pub const MAX_OCCUPATION: f64 = 2.0;

/// A differentiable map from densities to `F`.
pub trait DensityFunctional {
    fn value_and_gradient(&self, rho: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl DensityFunctional for FunctionalModel {
    fn value_and_gradient(&self, rho: &[f64]) -> Result<(f64, Vec<f64>)> {
        FunctionalModel::value_and_gradient(self, rho)
    }
}

impl DensityFunctional for TrainedEnsemble {
    fn value_and_gradient(&self, rho: &[f64]) -> Result<(f64, Vec<f64>)> {
        TrainedEnsemble::value_and_gradient(self, rho)
    }
}

impl<F> DensityFunctional for F
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn value_and_gradient(&self, rho: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(self(rho))
    }
}

/// Euclidean projection onto `{0 ≤ ρ_j ≤ 2, Σ ρ_j = total}`.
///
/// The minimizer is `clamp(v_j − τ, 0, 2)`; `τ` is bracketed by bisection
/// and then solved exactly on the resulting active set.
pub fn project_feasible(v: &[f64], total: f64) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) || !total.is_finite() {
        return Err(Error::invalid("projection input must be finite"));
    }
    let l = v.len() as f64;
    if total < 0.0 || total > MAX_OCCUPATION * l {
        return Err(Error::invalid(format!(
            "total {total} unreachable with {} sites",
            v.len()
        )));
    }
    let mass = |tau: f64| -> f64 { v.iter().map(|x| (x - tau).clamp(0.0, MAX_OCCUPATION)).sum() };
    let mut lo = v.iter().cloned().fold(f64::INFINITY, f64::min) - MAX_OCCUPATION;
    let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > total {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * (1.0 + hi.abs()) {
            break;
        }
    }
    let mut tau = 0.5 * (lo + hi);
    // Exact multiplier on the free set identified by the bracket.
    let (mut free_sum, mut free_count, mut upper) = (0.0, 0usize, 0usize);
    for &x in v {
        let y = x - tau;
        if y >= MAX_OCCUPATION {
            upper += 1;
        } else if y > 0.0 {
            free_sum += x;
            free_count += 1;
        }
    }
    if free_count > 0 {
        let exact = (free_sum + MAX_OCCUPATION * upper as f64 - total) / free_count as f64;
        if (mass(exact) - total).abs() <= (mass(tau) - total).abs() {
            tau = exact;
        }
    }
    Ok(v.iter().map(|x| (x - tau).clamp(0.0, MAX_OCCUPATION)).collect())
}

pub fn is_feasible(rho: &[f64], total: f64, tol: f64) -> bool {
    rho.iter().all(|&r| (-tol..=MAX_OCCUPATION + tol).contains(&r))
        && (rho.iter().sum::<f64>() - total).abs() <= tol
}

/// `(E, ∇E)` with `E = F[ρ] + μ·ρ`.
pub fn total_energy<F: DensityFunctional + ?Sized>(functional: &F, mu: &[f64], rho: &[f64]) -> Result<(f64, Vec<f64>)> {
    if mu.len() != rho.len() {
        return Err(Error::DimensionMismatch {
            expected: rho.len(),
            found: mu.len(),
        });
    }
    let (f, mut g) = functional.value_and_gradient(rho)?;
    let e = f + mu.iter().zip(rho).map(|(m, r)| m * r).sum::<f64>();
    for (gj, m) in g.iter_mut().zip(mu) {
        *gj += m;
    }
    Ok((e, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityOptOptions {
    pub particles: f64,
    pub max_iterations: usize,
    /// Stop once `‖ρ_{t+1} − ρ_t‖₂` falls below this.
    pub step_tol: f64,
    pub armijo: f64,
    pub initial_step: f64,
    pub max_backtracks: usize,
    /// Extra seeded random starts beyond the uniform one.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for DensityOptOptions {
    fn default() -> Self {
        Self {
            particles: 4.0,
            max_iterations: 10_000,
            step_tol: 1e-6,
            armijo: 1e-4,
            initial_step: 1.0,
            max_backtracks: 60,
            restarts: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityOptResult {
    pub rho_star: Vec<f64>,
    pub e_star: f64,
    pub f_star: f64,
    pub iterations: usize,
    pub converged: bool,
    pub init: String,
    pub initial_energy: f64,
}

/// Projected gradient descent from one feasible start.
pub fn descend<F: DensityFunctional + ?Sized>(
    functional: &F,
    mu: &[f64],
    start: Vec<f64>,
    options: &DensityOptOptions,
    init: &str,
) -> Result<DensityOptResult> {
    let mut rho = start;
    let (mut e, mut g) = total_energy(functional, mu, &rho)?;
    let initial_energy = e;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;
        let mut step = options.initial_step;
        let mut accepted = None;
        for _ in 0..options.max_backtracks {
            let trial: Vec<f64> = rho.iter().zip(&g).map(|(r, d)| r - step * d).collect();
            let trial = project_feasible(&trial, options.particles)?;
            let decrease: f64 = g.iter().zip(trial.iter().zip(&rho)).map(|(d, (a, b))| d * (a - b)).sum();
            let (et, gt) = total_energy(functional, mu, &trial)?;
            if et.is_finite() && et <= e + options.armijo * decrease {
                accepted = Some((trial, et, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((next, en, gn)) = accepted else {
            break;
        };
        let moved = rho.iter().zip(&next).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        rho = next;
        e = en;
        g = gn;
        if moved < options.step_tol {
            converged = true;
            break;
        }
    }
    let f_star = e - mu.iter().zip(&rho).map(|(m, r)| m * r).sum::<f64>();
    Ok(DensityOptResult {
        rho_star: rho,
        e_star: e,
        f_star,
        iterations,
        converged,
        init: init.to_string(),
        initial_energy,
    })
}

/// Minimizes `E[ρ]` from the uniform density, plus `options.restarts`
/// seeded random feasible starts; the lowest energy wins.
pub fn optimize_density<F: DensityFunctional + ?Sized>(
    functional: &F,
    mu: &[f64],
    options: &DensityOptOptions,
) -> Result<DensityOptResult> {
    let l = mu.len();
    if l == 0 {
        return Err(Error::invalid("empty potential"));
    }
    let uniform = vec![options.particles / l as f64; l];
    let mut best = descend(functional, mu, uniform, options, "uniform")?;
    for r in 0..options.restarts {
        let mut rng = rng_from_seed(derive_seed(options.seed, r as u64, "density-start"));
        let v: Vec<f64> = (0..l).map(|_| rng.gen_range(0.0..MAX_OCCUPATION)).collect();
        let start = project_feasible(&v, options.particles)?;
        let out = descend(functional, mu, start, options, &format!("random-{r}"))?;
        if out.e_star < best.e_star {
            best = out;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, NormalizationStats, Weights};
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};

    /// Exhaustive active-set QP: every split of coordinates into lower,
    /// upper and free sets, keep the feasible KKT point closest to `v`.
    fn qp_oracle(v: &[f64], total: f64) -> Vec<f64> {
        let l = v.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for code in 0..3usize.pow(l as u32) {
            let mut c = code;
            let state: Vec<usize> = (0..l)
                .map(|_| {
                    let s = c % 3;
                    c /= 3;
                    s
                })
                .collect();
            let free: Vec<usize> = (0..l).filter(|&j| state[j] == 2).collect();
            let fixed: f64 = (0..l).filter(|&j| state[j] == 1).count() as f64 * 2.0;
            let mut x: Vec<f64> = state.iter().map(|&s| if s == 1 { 2.0 } else { 0.0 }).collect();
            if free.is_empty() {
                if (fixed - total).abs() > 1e-12 {
                    continue;
                }
            } else {
                let tau = (free.iter().map(|&j| v[j]).sum::<f64>() + fixed - total) / free.len() as f64;
                for &j in &free {
                    x[j] = v[j] - tau;
                }
            }
            if !is_feasible(&x, total, 1e-12) {
                continue;
            }
            let d: f64 = x.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, x));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn feasible_input_is_unchanged() {
        assert_eq!(project_feasible(&[0.5; 8], 4.0).unwrap(), vec![0.5; 8]);
    }

    #[test]
    fn projection_matches_the_active_set_oracle() {
        let v = [3.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let p = project_feasible(&v, 4.0).unwrap();
        let q = qp_oracle(&v, 4.0);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-8);
        }
        assert_eq!(p, vec![2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn unreachable_totals_are_rejected() {
        assert!(project_feasible(&[0.0; 2], 5.0).is_err());
        assert!(project_feasible(&[f64::NAN, 0.0], 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn projection_is_feasible(v in prop::collection::vec(-5.0f64..5.0, 8)) {
            let p = project_feasible(&v, 4.0).unwrap();
            prop_assert!(is_feasible(&p, 4.0, 1e-9));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn projection_agrees_with_oracle(v in prop::collection::vec(-3.0f64..4.0, 6)) {
            let p = project_feasible(&v, 4.0).unwrap();
            let q = qp_oracle(&v, 4.0);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-8, "{:?} vs {:?}", p, q);
            }
            // KKT: free coordinates share one multiplier.
            let taus: Vec<f64> = v.iter().zip(&p).filter(|(_, r)| **r > 1e-12 && **r < 2.0 - 1e-12).map(|(x, r)| x - r).collect();
            for t in &taus {
                prop_assert!((t - taus[0]).abs() < 1e-10);
            }
        }
    }

    fn zero_model() -> FunctionalModel {
        FunctionalModel::new(
            NormalizationStats {
                rho_mean: 0.5,
                rho_std: 0.2,
                f_mean: -3.0,
                f_std: 1.0,
            },
            Weights::zeros(8),
            Activation::Softplus,
        )
    }

    #[test]
    fn zero_model_energy_is_affine() {
        let mu = [0.1, -0.2, 0.3, 0.0, 0.05, -0.1, 0.2, -0.35];
        let rho = [0.5, 0.6, 0.4, 0.5, 0.7, 0.3, 0.5, 0.5];
        let (e, g) = total_energy(&zero_model(), &mu, &rho).unwrap();
        let dot: f64 = mu.iter().zip(&rho).map(|(a, b)| a * b).sum();
        assert!((e - (-3.0 + dot)).abs() < 1e-14);
        assert_eq!(g, mu.to_vec());
    }

    #[test]
    fn constant_potential_shift() {
        let mut rng = rng_from_seed(2);
        let model = FunctionalModel::new(zero_model().stats, Weights::random(8, &mut rng), Activation::Softplus);
        let mu: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let shifted: Vec<f64> = mu.iter().map(|m| m + 0.75).collect();
        let rho = project_feasible(&(0..8).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>(), 4.0).unwrap();
        let (e0, g0) = total_energy(&model, &mu, &rho).unwrap();
        let (e1, g1) = total_energy(&model, &shifted, &rho).unwrap();
        assert!((e1 - e0 - 3.0).abs() < 1e-12);
        for (a, b) in g0.iter().zip(&g1) {
            assert!((b - a - 0.75).abs() < 1e-12);
        }
        let opts = DensityOptOptions::default();
        let r0 = optimize_density(&model, &mu, &opts).unwrap();
        let r1 = optimize_density(&model, &shifted, &opts).unwrap();
        if r0.converged && r1.converged {
            for (a, b) in r0.rho_star.iter().zip(&r1.rho_star) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(4);
        let model = FunctionalModel::new(zero_model().stats, Weights::random(8, &mut rng), Activation::Softplus);
        let mu: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let rho: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (_, g) = total_energy(&model, &mu, &rho).unwrap();
        for j in 0..8 {
            let h = 1e-5;
            let mut p = rho.clone();
            let mut q = rho.clone();
            p[j] += h;
            q[j] -= h;
            let fd = (total_energy(&model, &mu, &p).unwrap().0 - total_energy(&model, &mu, &q).unwrap().0) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-5 * g[j].abs().max(1.0));
        }
    }

    #[test]
    fn quadratic_functional_recovers_its_minimizer() {
        let target = vec![1.2, 0.3, 0.0, 0.9, 0.5, 0.1, 2.0, -0.0];
        let target = project_feasible(&target, 4.0).unwrap();
        let t = target.clone();
        let f = move |rho: &[f64]| {
            let v = rho.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let g = rho.iter().zip(&t).map(|(a, b)| 2.0 * (a - b)).collect();
            (v, g)
        };
        let opts = DensityOptOptions {
            restarts: 3,
            ..DensityOptOptions::default()
        };
        let out = optimize_density(&f, &[0.0; 8], &opts).unwrap();
        assert!(out.converged);
        assert!(is_feasible(&out.rho_star, 4.0, 1e-9));
        for (a, b) in out.rho_star.iter().zip(&target) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(out.e_star <= out.initial_energy);
        assert!((out.e_star - out.f_star).abs() < 1e-15);
    }

    #[test]
    fn descent_never_raises_the_energy() {
        let mut rng = rng_from_seed(6);
        for seed in 0..5 {
            let model = FunctionalModel::new(zero_model().stats, Weights::random(8, &mut rng), Activation::Softplus);
            let mu: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let opts = DensityOptOptions {
                seed,
                restarts: 1,
                ..DensityOptOptions::default()
            };
            let a = optimize_density(&model, &mu, &opts).unwrap();
            let b = optimize_density(&model, &mu, &opts).unwrap();
            assert_eq!(a, b);
            assert!(a.e_star <= a.initial_energy + 1e-12);
            assert!(is_feasible(&a.rho_star, 4.0, 1e-9));
        }
    }
}
