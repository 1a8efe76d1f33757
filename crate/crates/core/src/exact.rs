//! Exact-diagonalization oracle for the Rydberg Hamiltonian
//!
//! ```text
//! H = Σ_{i<j} Ω (R_b/a)^6 V_ij n_i n_j − δ Σ_i n_i − (Ω/2) Σ_i σx_i
//! ```
//!
//! in the occupation basis. The diagonal is stored explicitly; the transverse
//! field is applied on the fly, so a matrix-vector product costs `O(N 2^N)`.
//! Ground states come from Lanczos with full reorthogonalization followed by
//! a positivity-preserving refinement that makes small amplitudes accurate to
//! relative precision. Thermal occupation distributions use a dense
//! eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::{ExperimentalSettings, InteractionGraph};
use crate::observables::staggered_value;
use crate::spin::SpinConfiguration;

pub const MAX_HAMILTONIAN_SITES: usize = 24;
pub const MAX_GROUND_SITES: usize = 20;
pub const MAX_THERMAL_SITES: usize = 12;

const LANCZOS_MAX_KRYLOV: usize = 200;
const LANCZOS_EIGEN_TOL: f64 = 1e-10;
const LANCZOS_MAX_RESTARTS: usize = 30;
const REQUIRED_RESIDUAL: f64 = 1e-8;
const DEGENERACY_GAP: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SparseHamiltonian {
    n: usize,
    omega: f64,
    diagonal: Vec<f64>,
}

impl SparseHamiltonian {
    pub fn num_sites(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.diagonal.len()
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    /// Matrix element between configurations differing by one bit.
    pub fn coupling(&self) -> f64 {
        -0.5 * self.omega
    }

    /// `out = H v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let c = self.coupling();
        for (s, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..self.n {
                acc += v[s ^ (1 << i)];
            }
            *o = self.diagonal[s] * v[s] + c * acc;
        }
    }

    /// `Σ_i v[s ^ 2^i]` for every `s`, i.e. `(Σ_i σx_i) v`.
    pub fn apply_flip_sum(&self, v: &[f64], out: &mut [f64]) {
        for (s, o) in out.iter_mut().enumerate() {
            *o = (0..self.n).map(|i| v[s ^ (1 << i)]).sum();
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let dim = self.dim();
        let c = self.coupling();
        let mut m = DMatrix::zeros(dim, dim);
        for s in 0..dim {
            m[(s, s)] = self.diagonal[s];
            for i in 0..self.n {
                m[(s, s ^ (1 << i))] = c;
            }
        }
        m
    }
}

/// Diagonal energy of one configuration; independent of the stored table.
pub fn diagonal_energy(graph: &InteractionGraph, settings: &ExperimentalSettings, config: &SpinConfiguration) -> f64 {
    let v = graph.edge_weights();
    let bits = config.bits();
    let c6 = settings.c6();
    let mut e = 0.0;
    for i in 0..bits.len() {
        if bits[i] == 0 {
            continue;
        }
        e -= settings.delta();
        for j in (i + 1)..bits.len() {
            if bits[j] == 1 {
                e += c6 * v.get(i, j);
            }
        }
    }
    e
}

pub fn build_hamiltonian(graph: &InteractionGraph, settings: &ExperimentalSettings) -> Result<SparseHamiltonian> {
    let n = graph.num_nodes();
    if n > MAX_HAMILTONIAN_SITES {
        return Err(Error::ResourceLimit(format!(
            "Hamiltonian limited to N <= {MAX_HAMILTONIAN_SITES} sites, got {n}"
        )));
    }
    settings.validate()?;
    let v = graph.edge_weights();
    let c6 = settings.c6();
    let delta = settings.delta();
    let dim = 1usize << n;
    let mut diagonal = vec![0.0; dim];
    // diag[s] = diag[s without its lowest set bit] + that site's contribution
    for s in 1..dim {
        let i = s.trailing_zeros() as usize;
        let rest = s & (s - 1);
        let mut e = diagonal[rest] - delta;
        let mut r = rest;
        while r != 0 {
            let j = r.trailing_zeros() as usize;
            e += c6 * v.get(i, j);
            r &= r - 1;
        }
        diagonal[s] = e;
    }
    Ok(SparseHamiltonian {
        n,
        omega: settings.omega,
        diagonal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Ground,
    Thermal,
}

/// Exact state in the occupation basis.
///
/// Ground states carry amplitudes and the eigenvalue; thermal states carry
/// the Gibbs occupation distribution together with exact thermal energy and
/// `<σx>` obtained from the full spectrum.
#[derive(Debug, Clone)]
pub struct OracleState {
    kind: OracleKind,
    n: usize,
    probabilities: Vec<f64>,
    amplitudes: Option<Vec<f64>>,
    energy: f64,
    thermal_sigma_x: Option<f64>,
    residual: f64,
}

impl OracleState {
    /// State with the given occupation distribution and no off-diagonal data;
    /// handy for testing samplers and diagonal observables.
    pub fn from_probabilities(n: usize, probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.len() != 1usize << n {
            return Err(Error::invalid(format!(
                "expected 2^{n} probabilities, got {}",
                probabilities.len()
            )));
        }
        let total: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("probabilities must be nonnegative and sum to 1"));
        }
        Ok(OracleState {
            kind: OracleKind::Thermal,
            n,
            probabilities,
            amplitudes: None,
            energy: f64::NAN,
            thermal_sigma_x: None,
            residual: 0.0,
        })
    }

    pub fn kind(&self) -> OracleKind {
        self.kind
    }

    pub fn num_sites(&self) -> usize {
        self.n
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn amplitudes(&self) -> Option<&[f64]> {
        self.amplitudes.as_deref()
    }

    /// Ground: the eigenvalue. Thermal: the Gibbs mean energy.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// `‖Hψ − Eψ‖` for ground states, zero otherwise.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// Exact per-site entropy of the occupation distribution, in nats.
    pub fn entropy_per_site(&self) -> f64 {
        let h: f64 = self
            .probabilities
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        h / self.n as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct LanczosRun {
    eigenvalue: f64,
    vector: Vec<f64>,
    second: Option<f64>,
}

/// One Lanczos pass with full reorthogonalization from `start`.
fn lanczos_pass(h: &SparseHamiltonian, start: &[f64], residual_target: f64) -> Result<LanczosRun> {
    let dim = h.dim();
    let max_k = LANCZOS_MAX_KRYLOV.min(dim);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_k);
    let mut alpha: Vec<f64> = Vec::with_capacity(max_k);
    let mut beta: Vec<f64> = Vec::with_capacity(max_k);

    let nrm = norm(start);
    if !(nrm > 0.0) || !nrm.is_finite() {
        return Err(Error::numerical("Lanczos start vector has zero or invalid norm"));
    }
    basis.push(start.iter().map(|x| x / nrm).collect());
    let mut w = vec![0.0; dim];
    let mut prev_theta = f64::INFINITY;
    let mut ritz: (Vec<f64>, Vec<f64>);

    loop {
        let j = basis.len() - 1;
        h.apply(&basis[j], &mut w);
        let a = dot(&basis[j], &w);
        alpha.push(a);
        for (wi, qi) in w.iter_mut().zip(&basis[j]) {
            *wi -= a * qi;
        }
        if j > 0 {
            let b = beta[j - 1];
            for (wi, qi) in w.iter_mut().zip(&basis[j - 1]) {
                *wi -= b * qi;
            }
        }
        // full reorthogonalization, twice
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let b = norm(&w);

        let k = alpha.len();
        let mut t = DMatrix::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alpha[i];
            if i + 1 < k {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
        let theta = eig.eigenvalues[order[0]];
        let y: Vec<f64> = eig.eigenvectors.column(order[0]).iter().copied().collect();
        let second = (k > 1).then(|| eig.eigenvalues[order[1]]);
        let resid_est = b * y[k - 1].abs();

        let converged = (theta - prev_theta).abs() < LANCZOS_EIGEN_TOL && resid_est < residual_target;
        let breakdown = b < 1e-14 * theta.abs().max(1.0);
        prev_theta = theta;
        ritz = (y, second.into_iter().collect());

        if converged || breakdown || k == max_k {
            break;
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }

    let (y, second) = ritz;
    let mut vector = vec![0.0; dim];
    for (c, q) in y.iter().zip(&basis) {
        for (v, qi) in vector.iter_mut().zip(q) {
            *v += c * qi;
        }
    }
    let nv = norm(&vector);
    vector.iter_mut().for_each(|v| *v /= nv);
    Ok(LanczosRun {
        eigenvalue: prev_theta,
        vector,
        second: second.first().copied(),
    })
}

fn residual_norm(h: &SparseHamiltonian, e: f64, v: &[f64]) -> f64 {
    let mut hv = vec![0.0; v.len()];
    h.apply(v, &mut hv);
    hv.iter().zip(v).map(|(a, b)| (a - e * b).powi(2)).sum::<f64>().sqrt()
}

/// Damped fixed-point sweeps of `ψ(σ) = (Ω/2) Σ_σ' ψ(σ') / (H_σσ − E)`.
///
/// Every term is positive, so small amplitudes come out with relative rather
/// than absolute accuracy. The damping removes the −1 mode of the bipartite
/// hopping graph.
fn refine_positive(h: &SparseHamiltonian, e: f64, psi: &mut [f64]) {
    let half = 0.5 * h.omega();
    let mut flips = vec![0.0; psi.len()];
    if h.diagonal().iter().any(|&d| d - e <= 0.0) {
        return;
    }
    for _ in 0..500 {
        h.apply_flip_sum(psi, &mut flips);
        let mut max_rel: f64 = 0.0;
        let mut next: Vec<f64> = psi
            .iter()
            .zip(&flips)
            .zip(h.diagonal())
            .map(|((&p, &f), &d)| 0.5 * (p + half * f / (d - e)))
            .collect();
        let nn = norm(&next);
        next.iter_mut().for_each(|x| *x /= nn);
        for (old, new) in psi.iter_mut().zip(&next) {
            if *new > 0.0 {
                max_rel = max_rel.max(((*new - *old) / *new).abs());
            }
            *old = *new;
        }
        if max_rel < 1e-15 {
            break;
        }
    }
}

/// Lowest eigenpair, with the eigenvector made entrywise nonnegative.
pub fn ground_state(h: &SparseHamiltonian) -> Result<OracleState> {
    let n = h.num_sites();
    if n > MAX_GROUND_SITES {
        return Err(Error::ResourceLimit(format!(
            "ground state limited to N <= {MAX_GROUND_SITES} sites, got {n}"
        )));
    }
    let dim = h.dim();
    let scale = h
        .diagonal()
        .iter()
        .fold(0.5 * h.omega() * n as f64, |m, d| m.max(d.abs()))
        .max(1.0);
    let target = 1e-13 * scale;

    let mut start = vec![1.0; dim];
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for _ in 0..LANCZOS_MAX_RESTARTS {
        let run = lanczos_pass(h, &start, target)?;
        if let Some(second) = run.second {
            if second - run.eigenvalue < DEGENERACY_GAP {
                return Err(Error::numerical(format!(
                    "ground state appears degenerate: gap {:.3e} below {DEGENERACY_GAP:e}",
                    second - run.eigenvalue
                )));
            }
        }
        let r = residual_norm(h, run.eigenvalue, &run.vector);
        let improved = best.as_ref().is_none_or(|b| r < 0.5 * b.2);
        start = run.vector.clone();
        if best.as_ref().is_none_or(|b| r < b.2) {
            best = Some((run.eigenvalue, run.vector, r));
        }
        if r < target || !improved {
            break;
        }
    }
    let (energy, mut psi, _) = best.expect("at least one Lanczos pass");

    // Perron-Frobenius: the ground state of a connected stoquastic
    // Hamiltonian has a single sign.
    if psi.iter().sum::<f64>() < 0.0 {
        psi.iter_mut().for_each(|x| *x = -*x);
    }
    let worst_negative = psi.iter().fold(0.0f64, |m, &x| m.min(x));
    if worst_negative < -1e-8 {
        return Err(Error::numerical(format!(
            "ground state has a negative amplitude {worst_negative:.3e}"
        )));
    }
    psi.iter_mut().for_each(|x| *x = x.abs());
    let nv = norm(&psi);
    psi.iter_mut().for_each(|x| *x /= nv);
    refine_positive(h, energy, &mut psi);

    let residual = residual_norm(h, energy, &psi);
    if !(residual < REQUIRED_RESIDUAL) {
        return Err(Error::numerical(format!(
            "Lanczos did not converge: residual {residual:.3e}"
        )));
    }
    let probabilities = psi.iter().map(|a| a * a).collect();
    Ok(OracleState {
        kind: OracleKind::Ground,
        n,
        probabilities,
        amplitudes: Some(psi),
        energy,
        thermal_sigma_x: None,
        residual,
    })
}

/// Gibbs occupation distribution `p(σ) = Σ_k e^{−βE_k} |<σ|k>|² / Z`.
///
/// `beta_omega` is the dimensionless inverse temperature; zero gives the
/// uniform distribution.
pub fn thermal_diagonal(h: &SparseHamiltonian, beta_omega: f64) -> Result<OracleState> {
    let n = h.num_sites();
    if n > MAX_THERMAL_SITES {
        return Err(Error::ResourceLimit(format!(
            "thermal state needs the full spectrum; limited to N <= {MAX_THERMAL_SITES} sites, got {n}"
        )));
    }
    if !(beta_omega >= 0.0) || !beta_omega.is_finite() {
        return Err(Error::invalid(format!(
            "beta_omega must be finite and >= 0, got {beta_omega}"
        )));
    }
    let beta = beta_omega / h.omega();
    let dim = h.dim();
    let eig = SymmetricEigen::new(h.to_dense());
    let e0 = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = eig.eigenvalues.iter().map(|&e| (-beta * (e - e0)).exp()).collect();
    let z: f64 = weights.iter().sum();

    let mut probabilities = vec![0.0; dim];
    let mut energy = 0.0;
    let mut sx_total = 0.0;
    let mut flips = vec![0.0; dim];
    for (k, &w) in weights.iter().enumerate() {
        let col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let wk = w / z;
        energy += wk * eig.eigenvalues[k];
        if wk == 0.0 {
            continue;
        }
        for (p, c) in probabilities.iter_mut().zip(&col) {
            *p += wk * c * c;
        }
        h.apply_flip_sum(&col, &mut flips);
        sx_total += wk * dot(&col, &flips);
    }
    Ok(OracleState {
        kind: OracleKind::Thermal,
        n,
        probabilities,
        amplitudes: None,
        energy,
        thermal_sigma_x: Some(sx_total / n as f64),
        residual: 0.0,
    })
}

/// I.i.d. draws from the state's occupation distribution.
pub fn sample_born(state: &OracleState, count: usize, seed: u64) -> Vec<SpinConfiguration> {
    let mut cdf = Vec::with_capacity(state.probabilities.len());
    let mut acc = 0.0;
    for &p in &state.probabilities {
        acc += p;
        cdf.push(acc);
    }
    let total = acc;
    let last_nonzero = state.probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let idx = cdf.partition_point(|&c| c <= u).min(last_nonzero);
            SpinConfiguration::from_index(idx, state.n)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactObservables {
    pub energy: f64,
    pub sigma_x: f64,
    pub staggered: f64,
}

/// Exact energy, site-averaged `<σx>` and staggered magnetization.
pub fn exact_observables(state: &OracleState, h: &SparseHamiltonian) -> Result<ExactObservables> {
    let n = state.n;
    if h.num_sites() != n {
        return Err(Error::invalid(format!(
            "state has {n} sites but Hamiltonian has {}",
            h.num_sites()
        )));
    }
    let staggered = state
        .probabilities
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, &p)| p * staggered_value(SpinConfiguration::from_index(i, n).bits()))
        .sum();
    let (energy, sigma_x) = match (&state.amplitudes, state.thermal_sigma_x) {
        (Some(psi), _) => {
            let mut flips = vec![0.0; psi.len()];
            h.apply_flip_sum(psi, &mut flips);
            (state.energy, dot(psi, &flips) / n as f64)
        }
        (None, Some(sx)) => (state.energy, sx),
        (None, None) => (f64::NAN, f64::NAN),
    };
    Ok(ExactObservables {
        energy,
        sigma_x,
        staggered,
    })
}
