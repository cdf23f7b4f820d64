//! Sparse Hermitian operators over a sector basis and the Hubbard terms built
//! from them.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::{apply_ladder, parity_between, HubbardSpec, Potential, SectorBasis, Spin};

/// Dense conversion is refused above this dimension.
pub const DENSE_LIMIT: usize = 4096;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Hermitian matrix stored as its upper triangle (diagonal included).
///
/// A full CSR copy is kept for matrix-vector products.
#[derive(Debug, Clone)]
pub struct SparseHermitian {
    dim: usize,
    entries: Vec<(usize, usize, Complex64)>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Complex64>,
}

impl SparseHermitian {
    /// Builds from upper-triangle triplets; duplicates are summed. Lower
    /// triangle entries are conjugated into the upper triangle.
    pub fn from_triplets(
        dim: usize,
        triplets: impl IntoIterator<Item = (usize, usize, Complex64)>,
    ) -> Result<Self> {
        let mut acc: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
        for (r, c, v) in triplets {
            if r >= dim || c >= dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.max(c) + 1,
                });
            }
            let (key, val) = if r <= c { ((r, c), v) } else { ((c, r), v.conj()) };
            *acc.entry(key).or_insert(ZERO) += val;
        }
        let entries: Vec<_> = acc
            .into_iter()
            .filter(|(_, v)| *v != ZERO)
            .map(|((r, c), mut v)| {
                if r == c {
                    v.im = 0.0;
                }
                (r, c, v)
            })
            .collect();
        Ok(Self::from_upper(dim, entries))
    }

    fn from_upper(dim: usize, entries: Vec<(usize, usize, Complex64)>) -> Self {
        let mut rows: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); dim];
        for &(r, c, v) in &entries {
            rows[r].push((c, v));
            if r != c {
                rows[c].push((r, v.conj()));
            }
        }
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            dim,
            entries,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let entries = diag
            .iter()
            .enumerate()
            .filter(|(_, d)| **d != 0.0)
            .map(|(i, &d)| (i, i, Complex64::new(d, 0.0)))
            .collect();
        Self::from_upper(diag.len(), entries)
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diagonal(&vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Upper-triangle triplets `(row ≤ col, value)`.
    pub fn entries(&self) -> &[(usize, usize, Complex64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn apply_into(&self, x: &[Complex64], out: &mut [Complex64]) {
        debug_assert_eq!(x.len(), self.dim);
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = ZERO;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *o = acc;
        }
    }

    pub fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        let mut out = vec![ZERO; self.dim];
        self.apply_into(x, &mut out);
        Ok(out)
    }

    pub fn to_dense(&self) -> Result<DMatrix<Complex64>> {
        if self.dim > DENSE_LIMIT {
            return Err(Error::invalid(format!(
                "dense conversion refused for dimension {} > {DENSE_LIMIT}",
                self.dim
            )));
        }
        let mut m = DMatrix::from_element(self.dim, self.dim, ZERO);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
            if r != c {
                m[(c, r)] += v.conj();
            }
        }
        Ok(m)
    }

    /// `self + scale · other`.
    pub fn add_scaled(&self, other: &SparseHermitian, scale: f64) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        Self::from_triplets(
            self.dim,
            self.entries
                .iter()
                .copied()
                .chain(other.entries.iter().map(|&(r, c, v)| (r, c, v * scale))),
        )
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.entries.iter().map(|e| e.2.norm()).fold(0.0, f64::max)
    }
}

/// Complex amplitude vector over a sector basis.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub amplitudes: Vec<Complex64>,
}

impl StateVector {
    pub fn new(amplitudes: Vec<Complex64>) -> Self {
        Self { amplitudes }
    }

    pub fn basis_state(dim: usize, index: usize) -> Self {
        let mut a = vec![ZERO; dim];
        a[index] = Complex64::new(1.0, 0.0);
        Self::new(a)
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            for a in &mut self.amplitudes {
                *a /= n;
            }
        }
        self
    }

    pub fn inner(&self, other: &StateVector) -> Complex64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    pub(crate) fn check_normalized(&self, tol: f64) -> Result<()> {
        let n = self.norm();
        if (n - 1.0).abs() > tol {
            Err(Error::NotNormalized(n))
        } else {
            Ok(())
        }
    }
}

/// Links between configurations that differ by moving one particle between
/// two modes `a < b`.
///
/// `swaps` holds `(i, j, s)` where configuration `i` has `a` occupied and `b`
/// empty, `j` is the configuration with the particle moved to `b`, and
/// `c†_b c_a |i⟩ = s |j⟩`. `both` lists configurations with both modes filled.
#[derive(Debug, Clone)]
pub struct PairTable {
    pub modes: (usize, usize),
    pub swaps: Vec<(usize, usize, f64)>,
    pub both: Vec<usize>,
}

impl PairTable {
    pub fn new(basis: &SectorBasis, mode_a: usize, mode_b: usize) -> Self {
        let (a, b) = if mode_a < mode_b { (mode_a, mode_b) } else { (mode_b, mode_a) };
        let l = basis.sites();
        let (bit_a, bit_b) = (1u64 << a, 1u64 << b);
        let mut swaps = Vec::new();
        let mut both = Vec::new();
        for (i, c) in basis.configs().iter().enumerate() {
            let m = c.modes(l);
            match (m & bit_a != 0, m & bit_b != 0) {
                (true, false) => {
                    let target = m ^ bit_a ^ bit_b;
                    let j = basis
                        .index_of_modes(target)
                        .expect("same-spin move stays in sector");
                    swaps.push((i, j, parity_between(m, a, b)));
                }
                (true, true) => both.push(i),
                _ => {}
            }
        }
        Self {
            modes: (a, b),
            swaps,
            both,
        }
    }

    /// Table for sites `p`, `q` of one spin species.
    pub fn for_sites(basis: &SectorBasis, p: usize, q: usize, spin: Spin) -> Self {
        let off = match spin {
            Spin::Up => 0,
            Spin::Down => basis.sites(),
        };
        Self::new(basis, p + off, q + off)
    }

    /// Applies the Fock-space lift of a 2×2 single-particle unitary `u`
    /// (indexed in `(a, b)` order) in place.
    pub fn apply_unitary(&self, state: &mut [Complex64], u: &[[Complex64; 2]; 2]) {
        for &(i, j, s) in &self.swaps {
            let (x, y) = (state[i], state[j]);
            state[i] = u[0][0] * x + u[0][1] * y * s;
            state[j] = u[1][0] * x * s + u[1][1] * y;
        }
        let det = u[0][0] * u[1][1] - u[0][1] * u[1][0];
        if det != Complex64::new(1.0, 0.0) {
            for &i in &self.both {
                state[i] *= det;
            }
        }
    }

    /// Accumulates `Σ_{x,y∈{a,b}} m_xy c†_x c_y |state⟩` into `out`.
    pub fn apply_one_body(
        &self,
        state: &[Complex64],
        m: &[[Complex64; 2]; 2],
        out: &mut [Complex64],
    ) {
        for &(i, j, s) in &self.swaps {
            let (x, y) = (state[i], state[j]);
            out[i] += m[0][0] * x + m[0][1] * y * s;
            out[j] += m[1][0] * x * s + m[1][1] * y;
        }
        let tr = m[0][0] + m[1][1];
        for &i in &self.both {
            out[i] += tr * state[i];
        }
    }
}

/// Kinetic operator `T̂ = −t Σ_{⟨ij⟩,σ} (c†_iσ c_jσ + h.c.)`.
pub fn build_kinetic(spec: &HubbardSpec, basis: &SectorBasis) -> Result<SparseHermitian> {
    basis.check_spec(spec)?;
    let mut triplets = Vec::new();
    for (p, q) in spec.bonds() {
        for spin in Spin::BOTH {
            let table = PairTable::for_sites(basis, p, q, spin);
            for &(i, j, s) in &table.swaps {
                triplets.push((i, j, Complex64::new(-spec.hopping * s, 0.0)));
            }
        }
    }
    SparseHermitian::from_triplets(basis.dim(), triplets)
}

/// Diagonal of `Û = u Σ_j n_j↑ n_j↓`.
pub fn interaction_diagonal(spec: &HubbardSpec, basis: &SectorBasis) -> Vec<f64> {
    basis
        .configs()
        .iter()
        .map(|c| spec.interaction * c.doubly_occupied() as f64)
        .collect()
}

/// Diagonal of `V̂_μ = Σ_j μ_j (n_j↑ + n_j↓)`.
pub fn potential_diagonal(mu: &Potential, basis: &SectorBasis) -> Vec<f64> {
    let l = basis.sites();
    basis
        .configs()
        .iter()
        .map(|c| {
            c.site_density(l)
                .zip(mu.as_slice())
                .map(|(n, m)| n as f64 * m)
                .sum()
        })
        .collect()
}

/// Full sector Hamiltonian `T̂ + Û + V̂_μ`.
pub fn build_hamiltonian(
    spec: &HubbardSpec,
    mu: &Potential,
    basis: &SectorBasis,
) -> Result<SparseHermitian> {
    basis.check_spec(spec)?;
    if mu.len() != spec.sites {
        return Err(Error::DimensionMismatch {
            expected: spec.sites,
            found: mu.len(),
        });
    }
    let kinetic = build_kinetic(spec, basis)?;
    let u = interaction_diagonal(spec, basis);
    let v = potential_diagonal(mu, basis);
    let diag = u.iter().zip(&v).enumerate().map(|(i, (a, b))| (i, i, Complex64::new(a + b, 0.0)));
    SparseHermitian::from_triplets(
        basis.dim(),
        kinetic.entries().iter().copied().chain(diag),
    )
}

/// Diagonals `⟨n̂_{m}⟩` per configuration for every mode `m` in
/// `site 0↑ … L−1↑, 0↓ … L−1↓` order.
pub fn build_number_operators(basis: &SectorBasis) -> Vec<Vec<f64>> {
    let l = basis.sites();
    (0..2 * l)
        .map(|mode| {
            basis
                .configs()
                .iter()
                .map(|c| (c.modes(l) >> mode & 1) as f64)
                .collect()
        })
        .collect()
}

/// Site-density diagonals `n̂_j↑ + n̂_j↓`, one vector per site.
pub fn site_density_operators(basis: &SectorBasis) -> Vec<Vec<f64>> {
    let l = basis.sites();
    let modes = build_number_operators(basis);
    (0..l)
        .map(|j| modes[j].iter().zip(&modes[l + j]).map(|(a, b)| a + b).collect())
        .collect()
}

/// Total spin `Ŝ² = Ŝ₊Ŝ₋ + Ŝ_z² − Ŝ_z` over the sector.
pub fn build_spin_squared(basis: &SectorBasis) -> Result<SparseHermitian> {
    let l = basis.sites();
    let sz = (basis.n_up() as f64 - basis.n_down() as f64) / 2.0;
    let mut triplets = Vec::new();
    for (col, c) in basis.configs().iter().enumerate() {
        let m = c.modes(l);
        triplets.push((col, col, Complex64::new(sz * sz - sz, 0.0)));
        // Ŝ₊Ŝ₋ = Σ_ij c†_i↑ c_i↓ c†_j↓ c_j↑
        for i in 0..l {
            for j in 0..l {
                let ops = [(j, false), (l + j, true), (l + i, false), (i, true)];
                if let Some((target, sign)) = apply_ladder(m, &ops) {
                    let row = basis
                        .index_of_modes(target)
                        .expect("spin flip pair preserves the sector");
                    if row <= col {
                        triplets.push((row, col, Complex64::new(sign, 0.0)));
                    }
                }
            }
        }
    }
    SparseHermitian::from_triplets(basis.dim(), triplets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_sector_basis, Config};

    fn spec4() -> HubbardSpec {
        HubbardSpec {
            sites: 4,
            n_up: 1,
            n_down: 1,
            ..HubbardSpec::default()
        }
    }

    fn dense_eigenvalues(h: &SparseHermitian) -> Vec<f64> {
        let mut e: Vec<f64> = h.to_dense().unwrap().symmetric_eigenvalues().iter().copied().collect();
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        e
    }

    #[test]
    fn free_two_particle_ground_energy() {
        let spec = HubbardSpec { interaction: 0.0, ..spec4() };
        let basis = SectorBasis::for_spec(&spec).unwrap();
        let h = build_hamiltonian(&spec, &Potential::zeros(4), &basis).unwrap();
        assert!((dense_eigenvalues(&h)[0] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn double_occupancy_diagonal() {
        let spec = spec4();
        let basis = SectorBasis::for_spec(&spec).unwrap();
        let mu = Potential::new(vec![0.3, -0.1, 0.2, 0.0], 4).unwrap();
        let h = build_hamiltonian(&spec, &mu, &basis).unwrap();
        let idx = basis.index_of(Config::new(1, 1)).unwrap();
        let dense = h.to_dense().unwrap();
        assert!((dense[(idx, idx)].re - (4.0 + 2.0 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn hamiltonian_is_hermitian() {
        let spec = HubbardSpec::default();
        let basis = SectorBasis::for_spec(&spec).unwrap();
        let mu = Potential::new((0..8).map(|j| (j as f64 * 0.7).sin()).collect(), 8).unwrap();
        let d = build_hamiltonian(&spec, &mu, &basis).unwrap().to_dense().unwrap();
        assert_eq!(d, d.adjoint());
    }

    #[test]
    fn gauge_shift_adds_particle_number_identity() {
        let spec = HubbardSpec::default();
        let basis = SectorBasis::for_spec(&spec).unwrap();
        let mu = Potential::new(vec![0.1, -0.2, 0.3, 0.0, 0.05, -0.1, 0.2, -0.3], 8).unwrap();
        let c = 0.37;
        let h0 = build_hamiltonian(&spec, &mu, &basis).unwrap();
        let h1 = build_hamiltonian(&spec, &mu.shifted(c), &basis).unwrap();
        let diff = h1.add_scaled(&h0, -1.0).unwrap();
        let expected = SparseHermitian::identity(basis.dim());
        let resid = diff.add_scaled(&expected, -c * 4.0).unwrap();
        assert!(resid.max_abs_entry() < 1e-14);
    }

    #[test]
    fn entries_connect_same_sector_configs() {
        let spec = HubbardSpec::default();
        let basis = SectorBasis::for_spec(&spec).unwrap();
        let h = build_hamiltonian(&spec, &Potential::zeros(8), &basis).unwrap();
        for &(r, c, _) in h.entries() {
            let (a, b) = (basis.config(r), basis.config(c));
            assert_eq!(a.up.count_ones(), b.up.count_ones());
            assert_eq!(a.down.count_ones(), b.down.count_ones());
        }
    }

    #[test]
    fn number_operator_examples() {
        let vac = build_sector_basis(8, 0, 0).unwrap();
        assert!(build_number_operators(&vac).iter().all(|v| v == &vec![0.0]));

        let basis = build_sector_basis(8, 2, 2).unwrap();
        let ops = build_number_operators(&basis);
        assert_eq!(ops.len(), 16);
        let i = basis.index_of(Config::new(0b11, 0b1000_0001)).unwrap();
        assert_eq!(ops[0][i], 1.0);
        assert_eq!(ops[1][i], 1.0);
        assert!((2..8).all(|m| ops[m][i] == 0.0));
        for k in 0..basis.dim() {
            let total: f64 = ops.iter().map(|v| v[k]).sum();
            assert_eq!(total, 4.0);
        }
    }

    #[test]
    fn spin_squared_examples() {
        let basis = build_sector_basis(4, 1, 1).unwrap();
        let s2 = build_spin_squared(&basis).unwrap();
        let expect = |c: Config| {
            let i = basis.index_of(c).unwrap();
            let v = s2.apply(&StateVector::basis_state(basis.dim(), i).amplitudes).unwrap();
            v[i].re
        };
        assert!(expect(Config::new(1, 1)).abs() < 1e-15);
        assert!((expect(Config::new(1, 2)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spin_squared_two_site_spectrum() {
        let basis = build_sector_basis(2, 1, 1).unwrap();
        let s2 = build_spin_squared(&basis).unwrap();
        let e = dense_eigenvalues(&s2);
        // two on-site pairs and the bond singlet give 0, the S_z=0 triplet gives 2
        let expected = [0.0, 0.0, 0.0, 2.0];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{e:?}");
        }
    }

    #[test]
    fn hamiltonian_commutes_with_spin_squared() {
        let spec = spec4();
        for (nu, nd) in [(1, 1), (2, 2), (2, 1)] {
            let spec = HubbardSpec { n_up: nu, n_down: nd, ..spec };
            let basis = SectorBasis::for_spec(&spec).unwrap();
            let mu = Potential::new(vec![0.4, -0.3, 0.15, -0.05], 4).unwrap();
            let h = build_hamiltonian(&spec, &mu, &basis).unwrap().to_dense().unwrap();
            let s = build_spin_squared(&basis).unwrap().to_dense().unwrap();
            let comm = &h * &s - &s * &h;
            assert!(comm.norm() < 1e-10, "sector ({nu},{nd}): {}", comm.norm());
        }
    }

    #[test]
    fn pair_table_lift_is_unitary() {
        let basis = build_sector_basis(5, 2, 2).unwrap();
        let table = PairTable::for_sites(&basis, 0, 3, Spin::Down);
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        let u = [
            [Complex64::new(c, 0.0), Complex64::new(0.0, s)],
            [Complex64::new(0.0, s), Complex64::new(c, 0.0)],
        ];
        let mut psi: Vec<Complex64> =
            (0..basis.dim()).map(|i| Complex64::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
        let n0: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        table.apply_unitary(&mut psi, &u);
        let n1: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        assert!((n0 - n1).abs() < 1e-12 * n0);
    }
}
