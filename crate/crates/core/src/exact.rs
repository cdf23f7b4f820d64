//! Exact ground states of sector Hamiltonians and the `(ρ, F)` pairs derived
//! from them.
//!
//! The ground state is the lowest state of the smallest total spin the sector
//! admits (the singlet for `N↑ = N↓`). Small sectors use a dense Hermitian
//! eigensolver and resolve degenerate clusters by diagonalizing `Ŝ²` inside
//! the cluster. Larger sectors use Lanczos with full reorthogonalization in
//! the spin-projected Krylov space, started from a fixed-seed vector.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::lattice::{HubbardSpec, Potential, SectorBasis};
use crate::operators::{
    build_kinetic, build_spin_squared, interaction_diagonal, potential_diagonal,
    site_density_operators, SparseHermitian, StateVector,
};
use crate::rng::rng_from_seed;

/// Eigenvalues closer than this are treated as one degenerate level.
pub const DEGENERACY_TOL: f64 = 1e-8;
/// `⟨Ŝ²⟩` tolerance when classifying a vector as having the target spin.
pub const SPIN_TOL: f64 = 1e-6;
/// Sectors up to this dimension are diagonalized densely under `Auto`.
pub const AUTO_DENSE_MAX: usize = 400;

const LANCZOS_SEED: u64 = 0x4C41_4E43_5A4F_5331;
const LANCZOS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Eigensolver {
    #[default]
    Auto,
    Dense,
    Lanczos,
}

#[derive(Debug, Clone)]
pub struct GroundStateSolution {
    pub energy: f64,
    pub state: StateVector,
    pub density: Vec<f64>,
    /// Kinetic-interaction energy `⟨T̂ + Û⟩ = E − μ·ρ`.
    pub f: f64,
    pub s2: f64,
    pub degenerate: bool,
    /// Distance to the next level of the same spin, when resolved.
    pub gap: Option<f64>,
}

/// `F = E − μ·ρ`.
pub fn compute_f(energy: f64, mu: &[f64], rho: &[f64]) -> f64 {
    energy - mu.iter().zip(rho).map(|(m, r)| m * r).sum::<f64>()
}

/// `⟨ψ|Ô|ψ⟩` for a Hermitian operator.
pub fn expectation(op: &SparseHermitian, state: &StateVector) -> Result<f64> {
    let applied = op.apply(&state.amplitudes)?;
    Ok(state
        .amplitudes
        .iter()
        .zip(&applied)
        .map(|(a, b)| (a.conj() * b).re)
        .sum())
}

/// `⟨ψ|D|ψ⟩` for a diagonal operator.
pub fn expectation_diagonal(diag: &[f64], state: &StateVector) -> Result<f64> {
    if diag.len() != state.dim() {
        return Err(Error::DimensionMismatch {
            expected: diag.len(),
            found: state.dim(),
        });
    }
    Ok(diag
        .iter()
        .zip(&state.amplitudes)
        .map(|(d, a)| d * a.norm_sqr())
        .sum())
}

/// Operators of one sector that do not depend on the potential.
#[derive(Debug, Clone)]
pub struct SectorOperators {
    pub spec: HubbardSpec,
    pub basis: SectorBasis,
    pub kinetic: SparseHermitian,
    pub interaction: Vec<f64>,
    pub spin_squared: SparseHermitian,
    pub site_density: Vec<Vec<f64>>,
}

impl SectorOperators {
    pub fn new(spec: &HubbardSpec) -> Result<Self> {
        let basis = SectorBasis::for_spec(spec)?;
        Self::with_basis(spec, basis)
    }

    pub fn with_basis(spec: &HubbardSpec, basis: SectorBasis) -> Result<Self> {
        spec.validate()?;
        basis.check_spec(spec)?;
        Ok(Self {
            spec: *spec,
            kinetic: build_kinetic(spec, &basis)?,
            interaction: interaction_diagonal(spec, &basis),
            spin_squared: build_spin_squared(&basis)?,
            site_density: site_density_operators(&basis),
            basis,
        })
    }

    pub fn hamiltonian(&self, mu: &Potential) -> Result<SparseHermitian> {
        self.check_potential(mu)?;
        let v = potential_diagonal(mu, &self.basis);
        let diag = self.interaction.iter().zip(&v).map(|(a, b)| a + b).collect::<Vec<_>>();
        self.kinetic.add_scaled(&SparseHermitian::from_diagonal(&diag), 1.0)
    }

    pub(crate) fn check_potential(&self, mu: &Potential) -> Result<()> {
        if mu.len() != self.spec.sites {
            return Err(Error::DimensionMismatch {
                expected: self.spec.sites,
                found: mu.len(),
            });
        }
        Ok(())
    }

    pub fn density(&self, state: &StateVector) -> Vec<f64> {
        self.site_density
            .iter()
            .map(|d| {
                d.iter()
                    .zip(&state.amplitudes)
                    .map(|(n, a)| n * a.norm_sqr())
                    .sum()
            })
            .collect()
    }

    /// Target `S(S+1)` of the lowest total spin in this sector.
    pub fn target_spin(&self) -> f64 {
        let s = (self.spec.n_up as f64 - self.spec.n_down as f64).abs() / 2.0;
        s * (s + 1.0)
    }

    /// `S(S+1)` values present in the sector other than the target.
    fn other_spins(&self) -> Vec<f64> {
        let s_min = (self.spec.n_up as f64 - self.spec.n_down as f64).abs() / 2.0;
        let s_max = self.spec.particles() as f64 / 2.0;
        let mut out = Vec::new();
        let mut s = s_min + 1.0;
        while s <= s_max + 1e-9 {
            out.push(s * (s + 1.0));
            s += 1.0;
        }
        out
    }

    /// Projects onto the target-spin subspace with the exact polynomial
    /// filter `Π (Ŝ² − λ)/(λ_target − λ)`.
    fn project_spin(&self, v: &mut [Complex64]) {
        let target = self.target_spin();
        let mut buf = vec![Complex64::new(0.0, 0.0); v.len()];
        for lambda in self.other_spins() {
            self.spin_squared.apply_into(v, &mut buf);
            let scale = 1.0 / (target - lambda);
            for (x, s2x) in v.iter_mut().zip(&buf) {
                *x = (*s2x - *x * lambda) * scale;
            }
        }
    }

    pub fn solve(&self, mu: &Potential) -> Result<GroundStateSolution> {
        self.solve_with(mu, Eigensolver::Auto)
    }

    pub fn solve_with(&self, mu: &Potential, method: Eigensolver) -> Result<GroundStateSolution> {
        let h = self.hamiltonian(mu)?;
        let method = match method {
            Eigensolver::Auto if self.basis.dim() <= AUTO_DENSE_MAX => Eigensolver::Dense,
            Eigensolver::Auto => Eigensolver::Lanczos,
            m => m,
        };
        let (state, degenerate, gap) = match method {
            Eigensolver::Dense => self.dense_ground(&h)?,
            _ => self.lanczos_ground(&h)?,
        };
        let state = fix_phase(state);
        let energy = expectation(&h, &state)?;
        let density = self.density(&state);
        let s2 = expectation(&self.spin_squared, &state)?;
        if (s2 - self.target_spin()).abs() > SPIN_TOL {
            return Err(Error::Solver(format!(
                "ground state has <S^2> = {s2:e}, expected {}",
                self.target_spin()
            )));
        }
        Ok(GroundStateSolution {
            f: compute_f(energy, mu.as_slice(), &density),
            energy,
            state,
            density,
            s2,
            degenerate,
            gap,
        })
    }

    fn dense_ground(&self, h: &SparseHermitian) -> Result<(StateVector, bool, Option<f64>)> {
        let dense = h.to_dense()?;
        let eig = SymmetricEigen::new(dense);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let s2_dense = self.spin_squared.to_dense()?;
        let target = self.target_spin();

        let mut start = 0;
        while start < order.len() {
            let e0 = eig.eigenvalues[order[start]];
            let mut end = start + 1;
            while end < order.len() && eig.eigenvalues[order[end]] - e0 < DEGENERACY_TOL {
                end += 1;
            }
            let cluster: Vec<usize> = order[start..end].to_vec();
            let vecs = DMatrix::from_columns(
                &cluster
                    .iter()
                    .map(|&i| eig.eigenvectors.column(i).into_owned())
                    .collect::<Vec<_>>(),
            );
            let restricted = vecs.adjoint() * &s2_dense * &vecs;
            let spin = SymmetricEigen::new(restricted);
            let best = (0..cluster.len())
                .filter(|&k| (spin.eigenvalues[k] - target).abs() < SPIN_TOL)
                .min_by(|&a, &b| {
                    (spin.eigenvalues[a] - target)
                        .abs()
                        .total_cmp(&(spin.eigenvalues[b] - target).abs())
                });
            if let Some(k) = best {
                let v: DVector<Complex64> = &vecs * spin.eigenvectors.column(k);
                let matching = (0..cluster.len())
                    .filter(|&k| (spin.eigenvalues[k] - target).abs() < SPIN_TOL)
                    .count();
                let gap = self.next_level_gap(&eig, &order, end, &s2_dense, e0);
                let state = StateVector::new(v.iter().copied().collect()).normalized();
                return Ok((state, matching > 1, gap));
            }
            start = end;
        }
        Err(Error::Solver("no eigenvector with the target spin".into()))
    }

    fn next_level_gap(
        &self,
        eig: &SymmetricEigen<Complex64, nalgebra::Dyn>,
        order: &[usize],
        from: usize,
        s2: &DMatrix<Complex64>,
        e0: f64,
    ) -> Option<f64> {
        let target = self.target_spin();
        order[from..].iter().find_map(|&i| {
            let v = eig.eigenvectors.column(i);
            let s = (v.adjoint() * s2 * v)[(0, 0)].re;
            ((s - target).abs() < 0.5).then(|| eig.eigenvalues[i] - e0)
        })
    }

    fn lanczos_ground(&self, h: &SparseHermitian) -> Result<(StateVector, bool, Option<f64>)> {
        let dim = h.dim();
        let mut rng = rng_from_seed(LANCZOS_SEED ^ dim as u64);
        let mut v: Vec<Complex64> = (0..dim)
            .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, 0.0))
            .collect();
        self.project_spin(&mut v);
        let nv = norm(&v);
        if nv < 1e-12 {
            return Err(Error::Solver("start vector has no target-spin component".into()));
        }
        scale(&mut v, 1.0 / nv);

        let max_krylov = dim.min(600);
        let mut basis: Vec<Vec<Complex64>> = vec![v];
        let mut alpha: Vec<f64> = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut w = vec![Complex64::new(0.0, 0.0); dim];
        let mut exhausted = false;
        let mut last_residual = f64::INFINITY;

        loop {
            let j = basis.len() - 1;
            h.apply_into(&basis[j], &mut w);
            let a = dot(&basis[j], &w).re;
            alpha.push(a);
            for _ in 0..2 {
                for q in &basis {
                    let c = dot(q, &w);
                    axpy(&mut w, -c, q);
                }
            }
            self.project_spin(&mut w);
            let b = norm(&w);
            let k = alpha.len();
            if b < 1e-13 || k >= max_krylov {
                exhausted = b < 1e-13;
                beta.push(b);
                break;
            }
            beta.push(b);
            if k >= 4 && k % 4 == 0 {
                let (vals, vecs) = tridiagonal_eigen(&alpha, &beta[..k - 1]);
                last_residual = b * vecs[(k - 1, 0)].abs();
                let resid1 = if k > 1 { b * vecs[(k - 1, 1)].abs() } else { 0.0 };
                if last_residual < LANCZOS_TOL * vals[0].abs().max(1.0) && resid1 < 1e-8 {
                    break;
                }
            }
            let mut next = w.clone();
            scale(&mut next, 1.0 / b);
            basis.push(next);
        }

        let k = alpha.len();
        let (vals, vecs) = tridiagonal_eigen(&alpha, &beta[..k - 1]);
        let residual = if exhausted { 0.0 } else { beta[k - 1] * vecs[(k - 1, 0)].abs() };
        if residual > 1e-9 * vals[0].abs().max(1.0) {
            return Err(Error::Solver(format!(
                "Lanczos did not converge: residual {residual:e} after {k} steps (last check {last_residual:e})"
            )));
        }
        let mut ground = vec![Complex64::new(0.0, 0.0); dim];
        for (i, q) in basis.iter().enumerate().take(k) {
            axpy(&mut ground, Complex64::new(vecs[(i, 0)], 0.0), q);
        }
        let gap = (k > 1).then(|| vals[1] - vals[0]);
        let degenerate = gap.is_some_and(|g| g < DEGENERACY_TOL);
        Ok((StateVector::new(ground).normalized(), degenerate, gap))
    }
}

/// Solves one instance from scratch.
pub fn solve_ground_state(
    spec: &HubbardSpec,
    mu: &Potential,
    basis: &SectorBasis,
) -> Result<GroundStateSolution> {
    SectorOperators::with_basis(spec, basis.clone())?.solve(mu)
}

/// Multiplies by a global phase so the largest-magnitude amplitude (first on
/// ties) is real and positive.
pub fn fix_phase(mut state: StateVector) -> StateVector {
    let mut best = 0;
    let mut best_norm = -1.0;
    for (i, a) in state.amplitudes.iter().enumerate() {
        let n = a.norm();
        if n > best_norm * (1.0 + 1e-9) {
            best = i;
            best_norm = n;
        }
    }
    if best_norm > 0.0 {
        let phase = state.amplitudes[best].conj() / best_norm;
        for a in &mut state.amplitudes {
            *a *= phase;
        }
        state.amplitudes[best].im = 0.0;
    }
    state
}

fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let k = alpha.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn scale(a: &mut [Complex64], s: f64) {
    for x in a {
        *x *= s;
    }
}

fn axpy(y: &mut [Complex64], a: Complex64, x: &[Complex64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
