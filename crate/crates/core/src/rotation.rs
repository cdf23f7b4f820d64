//! Single-particle basis rotations lifted to the many-body sector.
//!
//! A unitary `u` on `L` orbitals is factored into nearest-neighbour Givens
//! rotations and a diagonal of phases, `u = G₁† ⋯ G_m† D`. Each factor is
//! applied to a sector state with the two-mode kernels of [`PairTable`], once
//! per spin species, so no qubit-level circuit is needed.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::{SectorBasis, Spin};
use crate::operators::{PairTable, StateVector};

pub const DECOMPOSITION_TOL: f64 = 1e-10;

type Block = [[Complex64; 2]; 2];

/// Givens factorization of a single-particle unitary.
#[derive(Debug, Clone)]
pub struct GivensDecomposition {
    size: usize,
    /// `(lower orbital a, block acting on (a, a+1))` for `G_k†`, in the
    /// order `G₁†, …, G_m†`.
    rotations: Vec<(usize, Block)>,
    phases: Vec<Complex64>,
}

impl GivensDecomposition {
    pub fn new(u: &DMatrix<Complex64>) -> Result<Self> {
        let n = u.nrows();
        if u.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: u.ncols(),
            });
        }
        let mut work = u.clone();
        let mut rotations = Vec::new();
        for col in 0..n.saturating_sub(1) {
            for row in (col + 1..n).rev() {
                let x = work[(row - 1, col)];
                let y = work[(row, col)];
                let r = (x.norm_sqr() + y.norm_sqr()).sqrt();
                if y.norm() == 0.0 || r == 0.0 {
                    continue;
                }
                // g = [[x̄, ȳ], [−y, x]] / r sends (x, y) to (r, 0).
                let g: Block = [[x.conj() / r, y.conj() / r], [-y / r, x / r]];
                for c in 0..n {
                    let (a, b) = (work[(row - 1, c)], work[(row, c)]);
                    work[(row - 1, c)] = g[0][0] * a + g[0][1] * b;
                    work[(row, c)] = g[1][0] * a + g[1][1] * b;
                }
                let g_dag: Block = [[g[0][0].conj(), g[1][0].conj()], [g[0][1].conj(), g[1][1].conj()]];
                rotations.push((row - 1, g_dag));
            }
        }
        let phases = (0..n).map(|i| work[(i, i)]).collect();
        let dec = Self {
            size: n,
            rotations,
            phases,
        };
        let residual = (dec.reconstruct() - u).norm();
        if residual > DECOMPOSITION_TOL || !residual.is_finite() {
            return Err(Error::Decomposition(residual));
        }
        Ok(dec)
    }

    /// Rebuilds the dense single-particle matrix from the factors.
    pub fn reconstruct(&self) -> DMatrix<Complex64> {
        let n = self.size;
        let mut m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.phases.clone()));
        for &(a, ref g) in self.rotations.iter().rev() {
            for c in 0..n {
                let (x, y) = (m[(a, c)], m[(a + 1, c)]);
                m[(a, c)] = g[0][0] * x + g[0][1] * y;
                m[(a + 1, c)] = g[1][0] * x + g[1][1] * y;
            }
        }
        m
    }

    pub fn rotation_count(&self) -> usize {
        self.rotations.len()
    }
}

/// Unitary Fourier matrix `F_kj = e^{i2πjk/L}/√L`.
pub fn fourier_matrix(sites: usize) -> DMatrix<Complex64> {
    let norm = 1.0 / (sites as f64).sqrt();
    DMatrix::from_fn(sites, sites, |k, j| {
        Complex64::from_polar(norm, 2.0 * PI * (j * k) as f64 / sites as f64)
    })
}

/// A basis rotation applied identically to both spin species of a sector.
#[derive(Debug, Clone)]
pub struct SectorRotation {
    decomposition: GivensDecomposition,
    up: Vec<PairTable>,
    down: Vec<PairTable>,
    occupation_phase: Vec<Complex64>,
}

impl SectorRotation {
    pub fn new(basis: &SectorBasis, u: &DMatrix<Complex64>) -> Result<Self> {
        let l = basis.sites();
        if u.nrows() != l {
            return Err(Error::DimensionMismatch {
                expected: l,
                found: u.nrows(),
            });
        }
        let decomposition = GivensDecomposition::new(u)?;
        let tables = |spin| {
            (0..l.saturating_sub(1))
                .map(|a| PairTable::for_sites(basis, a, a + 1, spin))
                .collect()
        };
        let occupation_phase = basis
            .configs()
            .iter()
            .map(|c| {
                (0..l).fold(Complex64::new(1.0, 0.0), |acc, j| {
                    let mut p = acc;
                    if c.occupied(j, Spin::Up) {
                        p *= decomposition.phases[j];
                    }
                    if c.occupied(j, Spin::Down) {
                        p *= decomposition.phases[j];
                    }
                    p
                })
            })
            .collect();
        Ok(Self {
            up: tables(Spin::Up),
            down: tables(Spin::Down),
            decomposition,
            occupation_phase,
        })
    }

    /// Rotation into momentum-mode labels.
    pub fn fourier(basis: &SectorBasis) -> Result<Self> {
        Self::new(basis, &fourier_matrix(basis.sites()))
    }

    fn check(&self, state: &StateVector) -> Result<()> {
        if state.dim() != self.occupation_phase.len() {
            return Err(Error::DimensionMismatch {
                expected: self.occupation_phase.len(),
                found: state.dim(),
            });
        }
        Ok(())
    }

    /// `U_u |ψ⟩`.
    pub fn apply(&self, state: &StateVector) -> Result<StateVector> {
        self.check(state)?;
        let mut amps: Vec<Complex64> = state
            .amplitudes
            .iter()
            .zip(&self.occupation_phase)
            .map(|(a, p)| a * p)
            .collect();
        for &(a, ref g) in self.decomposition.rotations.iter().rev() {
            self.up[a].apply_unitary(&mut amps, g);
            self.down[a].apply_unitary(&mut amps, g);
        }
        Ok(StateVector::new(amps))
    }

    /// `U_u† |ψ⟩`.
    pub fn apply_inverse(&self, state: &StateVector) -> Result<StateVector> {
        self.check(state)?;
        let mut amps = state.amplitudes.clone();
        for &(a, ref g) in &self.decomposition.rotations {
            let inv: Block = [[g[0][0].conj(), g[1][0].conj()], [g[0][1].conj(), g[1][1].conj()]];
            self.up[a].apply_unitary(&mut amps, &inv);
            self.down[a].apply_unitary(&mut amps, &inv);
        }
        for (a, p) in amps.iter_mut().zip(&self.occupation_phase) {
            *a *= p.conj();
        }
        Ok(StateVector::new(amps))
    }
}
