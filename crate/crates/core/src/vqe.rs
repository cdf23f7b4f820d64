//! Statevector VQE on the sector: Hamiltonian-variational (VHA) and
//! number-preserving-fabric (NPF) ansätze.
//!
//! Every gate is `exp(−iθA)` for a Hermitian generator `A`, so energies and
//! adjoint gradients share one gate list.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{compute_f, Eigensolver, SectorOperators};
use crate::lattice::{apply_ladder, HubbardSpec, Potential, SectorBasis, Spin};
use crate::operators::{potential_diagonal, PairTable, SparseHermitian, StateVector};
use crate::quasi_newton::{self, BfgsConfig};
use crate::rng::rng_from_seed;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ansatz {
    Vha,
    Npf,
}

impl Ansatz {
    pub fn tag(self) -> &'static str {
        match self {
            Ansatz::Vha => "vha",
            Ansatz::Npf => "npf",
        }
    }

    pub fn params_per_layer(self, sites: usize) -> usize {
        match self {
            Ansatz::Vha => 4,
            Ansatz::Npf => 2 * (sites - 1),
        }
    }
}

impl fmt::Display for Ansatz {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Ansatz {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vha" => Ok(Ansatz::Vha),
            "npf" => Ok(Ansatz::Npf),
            other => Err(Error::invalid(format!("unknown ansatz '{other}'"))),
        }
    }
}

/// VHA angles, `theta[4i + k] = θ_{i+1,k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VhaParams {
    pub layers: usize,
    pub theta: Vec<f64>,
}

/// NPF angles, `(θ, φ)` per block in brick-wall order, layer by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpfParams {
    pub layers: usize,
    pub angles: Vec<f64>,
}

fn check_params(values: &[f64], expected: usize) -> Result<()> {
    if values.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite ansatz parameter"));
    }
    Ok(())
}

impl VhaParams {
    pub fn new(layers: usize, theta: Vec<f64>) -> Result<Self> {
        check_params(&theta, 4 * layers)?;
        Ok(Self { layers, theta })
    }
}

impl NpfParams {
    pub fn new(layers: usize, angles: Vec<f64>, sites: usize) -> Result<Self> {
        check_params(&angles, layers * Ansatz::Npf.params_per_layer(sites))?;
        Ok(Self { layers, angles })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqeConfig {
    /// COBYLA evaluation cap per parameter (VHA).
    pub cobyla_evals_per_param: usize,
    pub cobyla_rho_begin: f64,
    pub cobyla_xtol: f64,
    pub bfgs: BfgsConfig,
    pub vha_init_scale: f64,
    pub npf_init_scale: f64,
}

impl Default for VqeConfig {
    fn default() -> Self {
        Self {
            cobyla_evals_per_param: 2000,
            cobyla_rho_begin: 0.5,
            cobyla_xtol: 1e-7,
            bfgs: BfgsConfig::default(),
            vha_init_scale: 0.01,
            npf_init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqeResult {
    pub ansatz: Ansatz,
    pub depth: usize,
    pub params: Vec<f64>,
    pub energy: f64,
    pub rho_tilde: Vec<f64>,
    pub f_tilde: f64,
    pub s2: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

/// Links `(i, j, s)` with `c†_{q↑} c†_{q↓} c_{p↓} c_{p↑} |i⟩ = s |j⟩`.
#[derive(Debug, Clone)]
struct PairExchange {
    links: Vec<(usize, usize, f64)>,
}

impl PairExchange {
    fn new(spec: &HubbardSpec, basis: &SectorBasis, p: usize, q: usize) -> Self {
        let l = basis.sites();
        let ops = [
            (spec.mode(p, Spin::Up), false),
            (spec.mode(p, Spin::Down), false),
            (spec.mode(q, Spin::Down), true),
            (spec.mode(q, Spin::Up), true),
        ];
        let links = basis
            .configs()
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let (m, s) = apply_ladder(c.modes(l), &ops)?;
                let j = basis.index_of_modes(m).expect("pair move stays in sector");
                Some((i, j, s))
            })
            .collect();
        Self { links }
    }

    /// `exp(−iθG)` with `G = i(A† − A)`.
    fn apply(&self, amps: &mut [Complex64], theta: f64) {
        let (c, sn) = (theta.cos(), theta.sin());
        for &(i, j, s) in &self.links {
            let (x, y) = (amps[i], amps[j]);
            amps[i] = x * c - y * (s * sn);
            amps[j] = x * (s * sn) + y * c;
        }
    }

    fn generator(&self, amps: &[Complex64], out: &mut [Complex64]) {
        for &(i, j, s) in &self.links {
            out[i] += -I * amps[j] * s;
            out[j] += I * amps[i] * s;
        }
    }
}

#[derive(Debug, Clone)]
struct NpfBlock {
    orbital: [PairTable; 2],
    pair: PairExchange,
}

#[derive(Debug, Clone, Copy)]
enum Gate {
    Interaction,
    Potential,
    Hop(usize),
    Pair(usize),
    Orbital(usize),
}

/// Potential-independent ansatz machinery for one sector.
#[derive(Debug, Clone)]
pub struct VqeEngine {
    ops: SectorOperators,
    reference_ops: SectorOperators,
    /// Bond tables (both spins) of the even and odd hopping groups.
    hops: [Vec<PairTable>; 2],
    blocks: Vec<NpfBlock>,
}

impl VqeEngine {
    pub fn new(spec: &HubbardSpec) -> Result<Self> {
        let ops = SectorOperators::new(spec)?;
        let free = HubbardSpec {
            interaction: 0.0,
            ..*spec
        };
        let reference_ops = SectorOperators::with_basis(&free, ops.basis.clone())?;
        let l = spec.sites;
        if spec.periodic && l % 2 == 1 {
            return Err(Error::invalid(
                "even/odd hopping split needs an even number of sites on a ring",
            ));
        }
        let mut hops: [Vec<PairTable>; 2] = [Vec::new(), Vec::new()];
        for (a, b) in spec.bonds() {
            for spin in Spin::BOTH {
                hops[a % 2].push(PairTable::for_sites(&ops.basis, a, b, spin));
            }
        }
        let pairs = (0..l.saturating_sub(1))
            .step_by(2)
            .chain((1..l.saturating_sub(1)).step_by(2));
        let blocks = pairs
            .map(|p| NpfBlock {
                orbital: [
                    PairTable::for_sites(&ops.basis, p, p + 1, Spin::Up),
                    PairTable::for_sites(&ops.basis, p, p + 1, Spin::Down),
                ],
                pair: PairExchange::new(spec, &ops.basis, p, p + 1),
            })
            .collect();
        Ok(Self {
            ops,
            reference_ops,
            hops,
            blocks,
        })
    }

    pub fn spec(&self) -> &HubbardSpec {
        &self.ops.spec
    }

    pub fn basis(&self) -> &SectorBasis {
        &self.ops.basis
    }

    pub fn operators(&self) -> &SectorOperators {
        &self.ops
    }

    pub fn param_count(&self, ansatz: Ansatz, depth: usize) -> usize {
        depth * ansatz.params_per_layer(self.spec().sites)
    }

    /// Ground state of `T̂ + V̂_μ` (no interaction) in the sector.
    pub fn prepare_reference_state(&self, mu: &Potential) -> Result<StateVector> {
        Ok(self.reference_ops.solve(mu)?.state)
    }

    pub fn problem(&self, mu: &Potential) -> Result<VqeProblem<'_>> {
        Ok(VqeProblem {
            hamiltonian: self.ops.hamiltonian(mu)?,
            potential: potential_diagonal(mu, &self.ops.basis),
            reference: self.prepare_reference_state(mu)?,
            mu: mu.clone(),
            engine: self,
        })
    }

    /// Gate sequence in application order, paired with parameter indices.
    fn gates(&self, ansatz: Ansatz, depth: usize) -> Vec<(Gate, usize)> {
        let mut out = Vec::new();
        for layer in 0..depth {
            match ansatz {
                Ansatz::Vha => {
                    let base = 4 * layer;
                    out.push((Gate::Interaction, base + 3));
                    out.push((Gate::Potential, base + 2));
                    out.push((Gate::Hop(1), base + 1));
                    out.push((Gate::Hop(0), base));
                }
                Ansatz::Npf => {
                    let base = layer * 2 * self.blocks.len();
                    for b in 0..self.blocks.len() {
                        out.push((Gate::Pair(b), base + 2 * b));
                        out.push((Gate::Orbital(b), base + 2 * b + 1));
                    }
                }
            }
        }
        out
    }

    fn apply_gate(&self, gate: Gate, theta: f64, potential: &[f64], amps: &mut [Complex64]) {
        match gate {
            Gate::Interaction => diagonal_phase(&self.ops.interaction, theta, amps),
            Gate::Potential => diagonal_phase(potential, theta, amps),
            Gate::Hop(group) => {
                let (c, s) = ((self.spec().hopping * theta).cos(), (self.spec().hopping * theta).sin());
                let u = [[Complex64::new(c, 0.0), I * s], [I * s, Complex64::new(c, 0.0)]];
                for table in &self.hops[group] {
                    table.apply_unitary(amps, &u);
                }
            }
            Gate::Pair(b) => self.blocks[b].pair.apply(amps, theta),
            Gate::Orbital(b) => {
                let (c, s) = (theta.cos(), theta.sin());
                let u = [
                    [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
                    [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
                ];
                for table in &self.blocks[b].orbital {
                    table.apply_unitary(amps, &u);
                }
            }
        }
    }

    /// Accumulates `A·amps` into `out` for the gate generator `A`.
    fn apply_generator(&self, gate: Gate, potential: &[f64], amps: &[Complex64], out: &mut [Complex64]) {
        match gate {
            Gate::Interaction => diagonal_product(&self.ops.interaction, amps, out),
            Gate::Potential => diagonal_product(potential, amps, out),
            Gate::Hop(group) => {
                let t = Complex64::new(-self.spec().hopping, 0.0);
                let m = [[ZERO, t], [t, ZERO]];
                for table in &self.hops[group] {
                    table.apply_one_body(amps, &m, out);
                }
            }
            Gate::Pair(b) => self.blocks[b].pair.generator(amps, out),
            Gate::Orbital(b) => {
                let m = [[ZERO, -I], [I, ZERO]];
                for table in &self.blocks[b].orbital {
                    table.apply_one_body(amps, &m, out);
                }
            }
        }
    }

    /// NPF circuit; independent of the potential.
    pub fn apply_npf(&self, params: &NpfParams, psi_ref: &StateVector) -> Result<StateVector> {
        check_params(&params.angles, self.param_count(Ansatz::Npf, params.layers))?;
        self.check_state(psi_ref)?;
        let mut amps = psi_ref.amplitudes.clone();
        for (gate, k) in self.gates(Ansatz::Npf, params.layers) {
            self.apply_gate(gate, params.angles[k], &[], &mut amps);
        }
        Ok(StateVector::new(amps))
    }

    fn check_state(&self, state: &StateVector) -> Result<()> {
        if state.dim() != self.basis().dim() {
            return Err(Error::DimensionMismatch {
                expected: self.basis().dim(),
                found: state.dim(),
            });
        }
        Ok(())
    }
}

fn diagonal_phase(diag: &[f64], theta: f64, amps: &mut [Complex64]) {
    for (a, d) in amps.iter_mut().zip(diag) {
        *a *= Complex64::from_polar(1.0, -theta * d);
    }
}

fn diagonal_product(diag: &[f64], amps: &[Complex64], out: &mut [Complex64]) {
    for ((o, a), d) in out.iter_mut().zip(amps).zip(diag) {
        *o += a * d;
    }
}

/// One potential instance bound to an engine.
#[derive(Debug, Clone)]
pub struct VqeProblem<'a> {
    engine: &'a VqeEngine,
    mu: Potential,
    hamiltonian: SparseHermitian,
    potential: Vec<f64>,
    reference: StateVector,
}

impl<'a> VqeProblem<'a> {
    pub fn reference(&self) -> &StateVector {
        &self.reference
    }

    pub fn hamiltonian(&self) -> &SparseHermitian {
        &self.hamiltonian
    }

    /// VHA circuit applied to `psi0`.
    pub fn apply_vha(&self, params: &VhaParams, psi0: &StateVector) -> Result<StateVector> {
        check_params(&params.theta, 4 * params.layers)?;
        self.engine.check_state(psi0)?;
        Ok(self.prepare(Ansatz::Vha, params.layers, &params.theta, psi0))
    }

    fn prepare(&self, ansatz: Ansatz, depth: usize, params: &[f64], psi0: &StateVector) -> StateVector {
        let mut amps = psi0.amplitudes.clone();
        for (gate, k) in self.engine.gates(ansatz, depth) {
            self.engine.apply_gate(gate, params[k], &self.potential, &mut amps);
        }
        StateVector::new(amps)
    }

    /// Ansatz state built on the non-interacting reference.
    pub fn state(&self, ansatz: Ansatz, depth: usize, params: &[f64]) -> Result<StateVector> {
        check_params(params, self.engine.param_count(ansatz, depth))?;
        Ok(self.prepare(ansatz, depth, params, &self.reference))
    }

    /// Exact `(⟨H⟩, ρ)` of a state.
    pub fn energy_and_density(&self, state: &StateVector) -> Result<(f64, Vec<f64>)> {
        let e = crate::exact::expectation(&self.hamiltonian, state)?;
        Ok((e, self.engine.ops.density(state)))
    }

    pub fn energy(&self, ansatz: Ansatz, depth: usize, params: &[f64]) -> Result<f64> {
        let psi = self.state(ansatz, depth, params)?;
        crate::exact::expectation(&self.hamiltonian, &psi)
    }

    /// `(E, ∂E/∂θ)` by reverse-mode sweep through the gate list.
    pub fn energy_and_gradient(&self, ansatz: Ansatz, depth: usize, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let psi = self.state(ansatz, depth, params)?;
        let mut phi = psi.amplitudes;
        let mut lambda = self.hamiltonian.apply(&phi)?;
        let energy: f64 = phi.iter().zip(&lambda).map(|(a, b)| (a.conj() * b).re).sum();
        let mut grad = vec![0.0; params.len()];
        let mut buf = vec![ZERO; phi.len()];
        for (gate, k) in self.engine.gates(ansatz, depth).into_iter().rev() {
            buf.iter_mut().for_each(|b| *b = ZERO);
            self.engine.apply_generator(gate, &self.potential, &phi, &mut buf);
            let overlap: Complex64 = lambda.iter().zip(&buf).map(|(l, b)| l.conj() * b).sum();
            grad[k] += 2.0 * overlap.im;
            self.engine.apply_gate(gate, -params[k], &self.potential, &mut phi);
            self.engine.apply_gate(gate, -params[k], &self.potential, &mut lambda);
        }
        Ok((energy, grad))
    }

    pub fn gradient(&self, ansatz: Ansatz, depth: usize, params: &[f64]) -> Result<Vec<f64>> {
        Ok(self.energy_and_gradient(ansatz, depth, params)?.1)
    }

    /// Seeded starting point for the optimizer.
    pub fn initial_params(&self, ansatz: Ansatz, depth: usize, config: &VqeConfig, seed: u64) -> Vec<f64> {
        let scale = match ansatz {
            Ansatz::Vha => config.vha_init_scale,
            Ansatz::Npf => config.npf_init_scale,
        };
        let mut rng = rng_from_seed(seed);
        (0..self.engine.param_count(ansatz, depth))
            .map(|_| if scale > 0.0 { rng.gen_range(-scale..=scale) } else { 0.0 })
            .collect()
    }

    /// Minimizes the energy: COBYLA for VHA, BFGS with adjoint gradients for
    /// NPF.
    pub fn run(&self, ansatz: Ansatz, depth: usize, config: &VqeConfig, seed: u64) -> Result<VqeResult> {
        if depth == 0 {
            return Err(Error::invalid("ansatz depth must be at least 1"));
        }
        let x0 = self.initial_params(ansatz, depth, config, seed);
        let (params, iterations, converged, history) = match ansatz {
            Ansatz::Vha => self.run_cobyla(depth, &x0, config)?,
            Ansatz::Npf => {
                let mut failure = None;
                let out = quasi_newton::minimize(
                    |x| match self.energy_and_gradient(Ansatz::Npf, depth, x) {
                        Ok(v) => v,
                        Err(e) => {
                            failure.get_or_insert(e);
                            (f64::INFINITY, vec![0.0; x.len()])
                        }
                    },
                    &x0,
                    &config.bfgs,
                );
                if let Some(e) = failure {
                    return Err(e);
                }
                (out.x, out.iterations, out.converged, out.history)
            }
        };
        self.finish(ansatz, depth, params, iterations, converged, history)
    }

    fn run_cobyla(&self, depth: usize, x0: &[f64], config: &VqeConfig) -> Result<(Vec<f64>, usize, bool, Vec<f64>)> {
        use std::cell::RefCell;
        // COBYLA's returned point is its best iterate; track evaluations here
        // for the history and as a guard.
        let trace = RefCell::new((Vec::new(), f64::INFINITY, x0.to_vec()));
        let objective = |x: &[f64], _: &mut ()| -> f64 {
            let e = self.energy(Ansatz::Vha, depth, x).unwrap_or(f64::INFINITY);
            let mut t = trace.borrow_mut();
            t.0.push(e);
            if e < t.1 {
                t.1 = e;
                t.2 = x.to_vec();
            }
            e
        };
        let n = x0.len();
        let cons: Vec<fn(&[f64], &mut ()) -> f64> = Vec::new();
        let bounds = vec![(-f64::INFINITY, f64::INFINITY); n];
        let max_eval = config.cobyla_evals_per_param * n;
        let outcome = cobyla::minimize(
            objective,
            x0,
            &bounds,
            &cons,
            (),
            max_eval,
            cobyla::RhoBeg::All(config.cobyla_rho_begin),
            Some(cobyla::StopTols {
                xtol_abs: vec![config.cobyla_xtol; n],
                ..Default::default()
            }),
        );
        let converged = match outcome {
            Ok((status, _, _)) => !matches!(status, cobyla::SuccessStatus::MaxEvalReached),
            Err((status, _, _)) => {
                if matches!(status, cobyla::FailStatus::RoundoffLimited) {
                    false
                } else {
                    return Err(Error::Solver(format!("cobyla failed: {status:?}")));
                }
            }
        };
        let (history, best, params) = trace.into_inner();
        if !best.is_finite() {
            return Err(Error::Solver("no finite energy evaluated".into()));
        }
        let iterations = history.len();
        Ok((params, iterations, converged, history))
    }

    fn finish(
        &self,
        ansatz: Ansatz,
        depth: usize,
        params: Vec<f64>,
        iterations: usize,
        converged: bool,
        history: Vec<f64>,
    ) -> Result<VqeResult> {
        let psi = self.state(ansatz, depth, &params)?;
        let (energy, rho) = self.energy_and_density(&psi)?;
        let s2 = crate::exact::expectation(&self.engine.ops.spin_squared, &psi)?;
        Ok(VqeResult {
            ansatz,
            depth,
            f_tilde: compute_f(energy, self.mu.as_slice(), &rho),
            params,
            energy,
            rho_tilde: rho,
            s2,
            iterations,
            converged,
            history,
        })
    }
}

/// Builds the engine and runs one optimization.
pub fn run_vqe(
    spec: &HubbardSpec,
    mu: &Potential,
    ansatz: Ansatz,
    depth: usize,
    config: &VqeConfig,
    seed: u64,
) -> Result<VqeResult> {
    VqeEngine::new(spec)?.problem(mu)?.run(ansatz, depth, config, seed)
}

/// Exact sector ground energy used as the variational floor.
pub fn exact_energy(engine: &VqeEngine, mu: &Potential) -> Result<f64> {
    Ok(engine.ops.solve_with(mu, Eigensolver::Auto)?.energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::expectation;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn ring(sites: usize) -> HubbardSpec {
        HubbardSpec {
            sites,
            ..HubbardSpec::default()
        }
    }

    fn random_mu(sites: usize, seed: u64) -> Potential {
        let mut rng = rng_from_seed(seed);
        Potential::new((0..sites).map(|_| rng.gen_range(-0.5..0.5)).collect(), sites).unwrap()
    }

    fn random_params(n: usize, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    fn distance(a: &StateVector, b: &StateVector) -> f64 {
        a.amplitudes
            .iter()
            .zip(&b.amplitudes)
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// `exp(−iθA)` for Hermitian `A` via its eigendecomposition.
    fn expm(a: &DMatrix<Complex64>, theta: f64) -> DMatrix<Complex64> {
        let eig = a.clone().symmetric_eigen();
        let phases = DMatrix::from_diagonal(
            &eig.eigenvalues.map(|l| Complex64::from_polar(1.0, -theta * l)),
        );
        &eig.eigenvectors * phases * eig.eigenvectors.adjoint()
    }

    #[test]
    fn zero_parameters_are_the_identity() {
        let engine = VqeEngine::new(&ring(6)).unwrap();
        let mu = random_mu(6, 1);
        let problem = engine.problem(&mu).unwrap();
        let psi0 = problem.reference().clone();
        let vha = problem.apply_vha(&VhaParams::new(3, vec![0.0; 12]).unwrap(), &psi0).unwrap();
        assert_eq!(vha, psi0);
        let npf = engine
            .apply_npf(&NpfParams::new(2, vec![0.0; 20], 6).unwrap(), &psi0)
            .unwrap();
        assert_eq!(npf, psi0);
    }

    #[test]
    fn reference_state_ignores_the_interaction() {
        let mu = random_mu(6, 2);
        let a = VqeEngine::new(&ring(6)).unwrap().prepare_reference_state(&mu).unwrap();
        let spec = HubbardSpec {
            interaction: 9.0,
            ..ring(6)
        };
        let b = VqeEngine::new(&spec).unwrap().prepare_reference_state(&mu).unwrap();
        assert!(distance(&a, &b) < 1e-9);
    }

    #[test]
    fn reference_state_is_the_free_ground_state() {
        let spec = ring(6);
        let mu = random_mu(6, 3);
        let engine = VqeEngine::new(&spec).unwrap();
        let free = HubbardSpec {
            interaction: 0.0,
            ..spec
        };
        let free_ops = SectorOperators::new(&free).unwrap();
        let h0 = free_ops.hamiltonian(&mu).unwrap();
        let psi0 = engine.prepare_reference_state(&mu).unwrap();
        let dense = h0.to_dense().unwrap().symmetric_eigen();
        let e_min = dense.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((expectation(&h0, &psi0).unwrap() - e_min).abs() < 1e-9);
    }

    #[test]
    fn single_layer_vha_matches_dense_exponentials() {
        let spec = ring(4);
        let engine = VqeEngine::new(&spec).unwrap();
        let mu = random_mu(4, 4);
        let problem = engine.problem(&mu).unwrap();
        let basis = engine.basis();
        // Dense T̂_e, T̂_o built independently from the ladder algebra.
        let mut t = [DMatrix::zeros(basis.dim(), basis.dim()), DMatrix::zeros(basis.dim(), basis.dim())];
        for (a, b) in spec.bonds() {
            for spin in Spin::BOTH {
                let (ma, mb) = (spec.mode(a, spin), spec.mode(b, spin));
                for (i, c) in basis.configs().iter().enumerate() {
                    for (from, to) in [(ma, mb), (mb, ma)] {
                        if let Some((m, s)) = apply_ladder(c.modes(4), &[(from, false), (to, true)]) {
                            let j = basis.index_of_modes(m).unwrap();
                            t[a % 2][(j, i)] += Complex64::new(-spec.hopping * s, 0.0);
                        }
                    }
                }
            }
        }
        let u = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            basis.dim(),
            engine.ops.interaction.iter().map(|&x| Complex64::new(x, 0.0)),
        ));
        let v = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            basis.dim(),
            potential_diagonal(&mu, basis).into_iter().map(|x| Complex64::new(x, 0.0)),
        ));
        let theta = [0.37, -0.81, 1.3, 0.52];
        let psi0 = problem.reference().clone();
        let x = nalgebra::DVector::from_vec(psi0.amplitudes.clone());
        let out = expm(&t[0], theta[0]) * expm(&t[1], theta[1]) * expm(&v, theta[2]) * expm(&u, theta[3]) * x;
        let got = problem.apply_vha(&VhaParams::new(1, theta.to_vec()).unwrap(), &psi0).unwrap();
        let err: f64 = got
            .amplitudes
            .iter()
            .zip(out.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn ansatz_maps_are_unitary_and_spin_preserving() {
        let spec = ring(6);
        let engine = VqeEngine::new(&spec).unwrap();
        let mu = random_mu(6, 5);
        let problem = engine.problem(&mu).unwrap();
        let psi0 = problem.reference().clone();
        let s2_0 = expectation(&engine.ops.spin_squared, &psi0).unwrap();
        for trial in 0..20 {
            let vha = problem
                .apply_vha(&VhaParams::new(5, random_params(20, trial, 3.0)).unwrap(), &psi0)
                .unwrap();
            let npf = engine
                .apply_npf(&NpfParams::new(5, random_params(50, 100 + trial, 3.0), 6).unwrap(), &psi0)
                .unwrap();
            for psi in [vha, npf] {
                assert!((psi.norm() - 1.0).abs() < 1e-12);
                let s2 = expectation(&engine.ops.spin_squared, &psi).unwrap();
                assert!((s2 - s2_0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pair_exchange_quarter_turn_moves_the_pair() {
        let spec = HubbardSpec {
            sites: 4,
            n_up: 1,
            n_down: 1,
            ..HubbardSpec::default()
        };
        let engine = VqeEngine::new(&spec).unwrap();
        let basis = engine.basis();
        let from = basis.index_of(crate::lattice::Config::new(1 << 2, 1 << 2)).unwrap();
        let to = basis.index_of(crate::lattice::Config::new(1 << 3, 1 << 3)).unwrap();
        // Block 1 acts on sites (2, 3).
        let mut angles = vec![0.0; 6];
        angles[2] = std::f64::consts::FRAC_PI_2;
        let out = engine
            .apply_npf(&NpfParams::new(1, angles, 4).unwrap(), &StateVector::basis_state(basis.dim(), from))
            .unwrap();
        assert!((out.amplitudes[to].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let spec = ring(6);
        let engine = VqeEngine::new(&spec).unwrap();
        let problem = engine.problem(&random_mu(6, 6)).unwrap();
        for (ansatz, depth) in [(Ansatz::Vha, 3), (Ansatz::Npf, 2)] {
            let n = engine.param_count(ansatz, depth);
            let x = random_params(n, 7, 1.0);
            let g = problem.gradient(ansatz, depth, &x).unwrap();
            let h = 1e-4;
            for k in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (problem.energy(ansatz, depth, &xp).unwrap() - problem.energy(ansatz, depth, &xm).unwrap())
                    / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1.0), "{ansatz} {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn small_ring_optimizations_respect_the_floor() {
        let spec = ring(4);
        let engine = VqeEngine::new(&spec).unwrap();
        let mu = random_mu(4, 8);
        let exact = exact_energy(&engine, &mu).unwrap();
        let problem = engine.problem(&mu).unwrap();
        let start = problem.energy(Ansatz::Vha, 1, &[0.0; 4]).unwrap();
        let vha = problem.run(Ansatz::Vha, 4, &VqeConfig::default(), 3).unwrap();
        assert!(vha.energy >= exact - 1e-9);
        assert!(vha.energy < start - 0.5);
        assert!((vha.f_tilde - (vha.energy - mu.dot(&vha.rho_tilde))).abs() < 1e-12);
        let npf = problem.run(Ansatz::Npf, 4, &VqeConfig::default(), 3).unwrap();
        assert!(npf.energy >= exact - 1e-9);
        assert!(npf.energy - exact < 1e-3, "{} vs {exact}", npf.energy);
    }

    #[test]
    fn npf_run_is_reproducible_and_stationary() {
        let spec = ring(6);
        let engine = VqeEngine::new(&spec).unwrap();
        let mu = random_mu(6, 9);
        let problem = engine.problem(&mu).unwrap();
        let a = problem.run(Ansatz::Npf, 2, &VqeConfig::default(), 11).unwrap();
        let b = problem.run(Ansatz::Npf, 2, &VqeConfig::default(), 11).unwrap();
        assert_eq!(a, b);
        assert!(a.energy >= exact_energy(&engine, &mu).unwrap() - 1e-9);
        if a.converged {
            let g = problem.gradient(Ansatz::Npf, 2, &a.params).unwrap();
            assert!(g.iter().all(|x| x.abs() < 1e-4));
        }
        assert_eq!(a.params.len(), 20);
        assert!(problem.run(Ansatz::Npf, 0, &VqeConfig::default(), 11).is_err());
    }
}
