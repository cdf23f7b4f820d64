//! Finite-shot expectation value estimation.
//!
//! The ground state is measured in two bases: real-space occupations give
//! the density and the on-site interaction, momentum occupations give the
//! kinetic energy. Each basis gets `M` shots.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::GroundStateSolution;
use crate::lattice::{Config, HubbardSpec, SectorBasis, Spin};
use crate::operators::StateVector;
use crate::rng::{derive_seed, rng_from_seed, PipelineRng};
use crate::rotation::SectorRotation;

pub const NORM_TOL: f64 = 1e-6;

/// Explicit shot records for both bases.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotBatch {
    pub shots: usize,
    pub real_samples: Vec<Config>,
    /// Momentum-mode labels: bit `k` of `up`/`down` is mode `k`.
    pub momentum_samples: Vec<Config>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EveEstimate {
    pub rho_tilde: Vec<f64>,
    pub u_tilde: f64,
    pub t_tilde: f64,
    pub f_tilde: f64,
    pub shots: u64,
    pub seed: u64,
    /// Empirical standard error of `f_tilde`.
    pub f_std_error: f64,
}

/// `ε_k = −2t cos(2πk/L)`.
pub fn dispersion(spec: &HubbardSpec) -> Vec<f64> {
    let l = spec.sites;
    (0..l)
        .map(|k| -2.0 * spec.hopping * (2.0 * PI * k as f64 / l as f64).cos())
        .collect()
}

fn born_probabilities(state: &StateVector) -> Result<Vec<f64>> {
    state.check_normalized(NORM_TOL)?;
    Ok(state.probabilities())
}

/// `M` i.i.d. Born-rule draws of occupation configurations.
pub fn sample_occupations(
    state: &StateVector,
    basis: &SectorBasis,
    shots: usize,
    rng: &mut PipelineRng,
) -> Result<Vec<Config>> {
    if state.dim() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            found: state.dim(),
        });
    }
    let p = born_probabilities(state)?;
    let mut cdf = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    for x in &p {
        acc += x;
        cdf.push(acc);
    }
    let total = acc;
    let last_nonzero = p.iter().rposition(|&x| x > 0.0).unwrap_or(0);
    Ok((0..shots)
        .map(|_| {
            let r = rng.gen::<f64>() * total;
            let i = cdf.partition_point(|&c| c <= r).min(last_nonzero);
            basis.config(i)
        })
        .collect())
}

/// Per-configuration counts of `M` Born-rule draws, drawn as a chain of
/// conditional binomials.
pub fn sample_counts(state: &StateVector, shots: u64, rng: &mut PipelineRng) -> Result<Vec<u64>> {
    let p = born_probabilities(state)?;
    let mut tail = vec![0.0; p.len() + 1];
    for i in (0..p.len()).rev() {
        tail[i] = tail[i + 1] + p[i];
    }
    let mut counts = vec![0u64; p.len()];
    let mut left = shots;
    for i in 0..p.len() {
        if left == 0 {
            break;
        }
        if tail[i + 1] <= 0.0 {
            counts[i] = left;
            break;
        }
        let q = (p[i] / tail[i]).clamp(0.0, 1.0);
        let k = Binomial::new(left, q)
            .map_err(|e| Error::invalid(format!("binomial draw: {e}")))?
            .sample(rng);
        counts[i] = k;
        left -= k;
    }
    Ok(counts)
}

fn real_space_terms(c: &Config, sites: usize, u: f64, rho: &mut [f64]) -> f64 {
    for (r, n) in rho.iter_mut().zip(c.site_density(sites)) {
        *r += n as f64;
    }
    u * c.doubly_occupied() as f64
}

fn kinetic_term(c: &Config, eps: &[f64]) -> f64 {
    eps.iter()
        .enumerate()
        .map(|(k, e)| {
            let n = c.occupied(k, Spin::Up) as u32 + c.occupied(k, Spin::Down) as u32;
            e * n as f64
        })
        .sum()
}

/// `(ρ̃, ũ)` as plain shot means.
pub fn estimate_real_space(samples: &[Config], spec: &HubbardSpec) -> (Vec<f64>, f64) {
    let l = spec.sites;
    let mut rho = vec![0.0; l];
    if samples.is_empty() {
        return (rho, 0.0);
    }
    let mut u = 0.0;
    for c in samples {
        u += real_space_terms(c, l, spec.interaction, &mut rho);
    }
    let m = samples.len() as f64;
    rho.iter_mut().for_each(|r| *r /= m);
    (rho, u / m)
}

/// `t̃ = mean_shots Σ_{k,σ} ε_k n_{k,σ}`.
pub fn estimate_kinetic(momentum_samples: &[Config], spec: &HubbardSpec) -> f64 {
    if momentum_samples.is_empty() {
        return 0.0;
    }
    let eps = dispersion(spec);
    momentum_samples.iter().map(|c| kinetic_term(c, &eps)).sum::<f64>()
        / momentum_samples.len() as f64
}

/// `U_F |ψ⟩` for the unitary lattice Fourier transform on both spins.
pub fn momentum_rotation(state: &StateVector, basis: &SectorBasis) -> Result<StateVector> {
    state.check_normalized(NORM_TOL)?;
    SectorRotation::fourier(basis)?.apply(state)
}

/// Mean and sample variance of a per-configuration observable under counts.
fn weighted_moments(counts: &[u64], values: impl Fn(usize) -> f64) -> (f64, f64) {
    let m: u64 = counts.iter().sum();
    if m == 0 {
        return (0.0, 0.0);
    }
    let mut sum = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 {
            sum += c as f64 * values(i);
        }
    }
    let mean = sum / m as f64;
    let mut ss = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 {
            let d = values(i) - mean;
            ss += c as f64 * d * d;
        }
    }
    let var = if m > 1 { ss / (m - 1) as f64 } else { 0.0 };
    (mean, var)
}

/// Reusable EVE machinery for one sector.
#[derive(Debug, Clone)]
pub struct EveSampler {
    spec: HubbardSpec,
    basis: SectorBasis,
    fourier: SectorRotation,
    doubles: Vec<f64>,
    kinetic: Vec<f64>,
}

impl EveSampler {
    pub fn new(spec: &HubbardSpec, basis: &SectorBasis) -> Result<Self> {
        spec.validate()?;
        basis.check_spec(spec)?;
        let eps = dispersion(spec);
        Ok(Self {
            spec: *spec,
            fourier: SectorRotation::fourier(basis)?,
            doubles: basis
                .configs()
                .iter()
                .map(|c| spec.interaction * c.doubly_occupied() as f64)
                .collect(),
            kinetic: basis.configs().iter().map(|c| kinetic_term(c, &eps)).collect(),
            basis: basis.clone(),
        })
    }

    pub fn basis(&self) -> &SectorBasis {
        &self.basis
    }

    fn seeds(seed: u64) -> (u64, u64) {
        (derive_seed(seed, 0, "real"), derive_seed(seed, 0, "momentum"))
    }

    pub fn momentum_state(&self, state: &StateVector) -> Result<StateVector> {
        state.check_normalized(NORM_TOL)?;
        self.fourier.apply(state)
    }

    /// Explicit shots in both bases.
    pub fn shot_batch(&self, state: &StateVector, shots: usize, seed: u64) -> Result<ShotBatch> {
        let (rs, ks) = Self::seeds(seed);
        let real_samples = sample_occupations(state, &self.basis, shots, &mut rng_from_seed(rs))?;
        let rotated = self.momentum_state(state)?;
        let momentum_samples =
            sample_occupations(&rotated, &self.basis, shots, &mut rng_from_seed(ks))?;
        Ok(ShotBatch {
            shots,
            real_samples,
            momentum_samples,
            seed,
        })
    }

    /// Estimate from `M` shots per basis, drawn as multinomial counts.
    pub fn estimate(&self, state: &StateVector, shots: u64, seed: u64) -> Result<EveEstimate> {
        if shots == 0 {
            return Err(Error::invalid("shot count must be at least 1"));
        }
        if state.dim() != self.basis.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.basis.dim(),
                found: state.dim(),
            });
        }
        let (rs, ks) = Self::seeds(seed);
        let real = sample_counts(state, shots, &mut rng_from_seed(rs))?;
        let rotated = self.momentum_state(state)?;
        let momentum = sample_counts(&rotated, shots, &mut rng_from_seed(ks))?;

        let l = self.spec.sites;
        let mut rho = vec![0.0; l];
        for (i, &c) in real.iter().enumerate() {
            if c > 0 {
                for (r, n) in rho.iter_mut().zip(self.basis.config(i).site_density(l)) {
                    *r += (c * n as u64) as f64;
                }
            }
        }
        rho.iter_mut().for_each(|r| *r /= shots as f64);
        let (u_tilde, u_var) = weighted_moments(&real, |i| self.doubles[i]);
        let (t_tilde, t_var) = weighted_moments(&momentum, |i| self.kinetic[i]);
        Ok(EveEstimate {
            rho_tilde: rho,
            u_tilde,
            t_tilde,
            f_tilde: u_tilde + t_tilde,
            shots,
            seed,
            f_std_error: ((u_var + t_var) / shots as f64).sqrt(),
        })
    }
}

/// One-shot convenience wrapper around [`EveSampler`].
pub fn eve_estimate(
    spec: &HubbardSpec,
    basis: &SectorBasis,
    solution: &GroundStateSolution,
    shots: u64,
    seed: u64,
) -> Result<EveEstimate> {
    EveSampler::new(spec, basis)?.estimate(&solution.state, shots, seed)
}
