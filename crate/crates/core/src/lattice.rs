//! Square and rectangular lattice geometry, snake ordering and the interaction graph that
//! conditions the encoder.
//!
//! Distances are measured in units of the lattice constant `a`, so the
//! pairwise van der Waals coefficient between sites `i` and `j` is
//! `Ω (R_b/a)^6 V_ij` with `V_ij = 1 / |r_i - r_j|^6`. Boundaries are open
//! and every pair is included.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Visit order of an `L x L` lattice: row 0 left to right, row 1 right to
/// left, and so on.
pub fn snake_order(l: usize) -> Result<Vec<(usize, usize)>> {
    snake_order_rect(l, l)
}

/// Snake order of a `rows x cols` lattice, as `(x, y)` with `x < cols`.
pub fn snake_order_rect(rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "lattice must be at least 1x1, got {rows}x{cols}"
        )));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for y in 0..rows {
        if y % 2 == 0 {
            out.extend((0..cols).map(|x| (x, y)));
        } else {
            out.extend((0..cols).rev().map(|x| (x, y)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSpec {
    rows: usize,
    cols: usize,
    positions: Vec<(f64, f64)>,
}

impl LatticeSpec {
    /// Open-boundary square lattice with positions listed in snake order.
    pub fn square(l: usize) -> Result<Self> {
        Self::rectangle(l, l)
    }

    pub fn rectangle(rows: usize, cols: usize) -> Result<Self> {
        let positions = snake_order_rect(rows, cols)?
            .into_iter()
            .map(|(x, y)| (x as f64, y as f64))
            .collect();
        Ok(LatticeSpec { rows, cols, positions })
    }

    /// Arbitrary positions for `l*l` sites (units of `a`); used by tests that
    /// permute or rotate the lattice.
    pub fn from_positions(l: usize, positions: Vec<(f64, f64)>) -> Result<Self> {
        if positions.len() != l * l || l == 0 {
            return Err(Error::invalid(format!(
                "expected {} positions for L={l}, got {}",
                l * l,
                positions.len()
            )));
        }
        Ok(LatticeSpec {
            rows: l,
            cols: l,
            positions,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_sites(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }
}

/// The Hamiltonian knobs: Rabi frequency, detuning, blockade radius and
/// inverse temperature, all dimensionless except `omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentalSettings {
    pub omega: f64,
    pub delta_over_omega: f64,
    pub rb_over_a: f64,
    pub beta_omega: f64,
}

impl ExperimentalSettings {
    pub fn new(delta_over_omega: f64, rb_over_a: f64, beta_omega: f64) -> Result<Self> {
        let s = ExperimentalSettings {
            omega: 1.0,
            delta_over_omega,
            rb_over_a,
            beta_omega,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.omega) {
            return Err(Error::invalid(format!("omega must be > 0, got {}", self.omega)));
        }
        if !ok(self.rb_over_a) {
            return Err(Error::invalid(format!("rb_over_a must be > 0, got {}", self.rb_over_a)));
        }
        if !ok(self.beta_omega) {
            return Err(Error::invalid(format!(
                "beta_omega must be > 0, got {}",
                self.beta_omega
            )));
        }
        if !self.delta_over_omega.is_finite() {
            return Err(Error::invalid("delta_over_omega must be finite"));
        }
        Ok(())
    }

    /// Detuning δ in energy units.
    pub fn delta(&self) -> f64 {
        self.delta_over_omega * self.omega
    }

    /// `C6 / a^6 = Ω (R_b/a)^6`.
    pub fn c6(&self) -> f64 {
        self.omega * self.rb_over_a.powi(6)
    }

    pub fn node_row(&self) -> [f64; 4] {
        [self.omega, self.delta_over_omega, self.rb_over_a, self.beta_omega]
    }
}

/// Dense symmetric `N x N` matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `V_ij = a^6 / |r_i - r_j|^6` with zero diagonal.
pub fn interaction_matrix(spec: &LatticeSpec) -> Result<SymMatrix> {
    let n = spec.num_sites();
    let p = spec.positions();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = p[i].0 - p[j].0;
            let dy = p[i].1 - p[j].1;
            let d2 = dx * dx + dy * dy;
            if d2 == 0.0 {
                return Err(Error::invalid(format!(
                    "sites {i} and {j} share position ({}, {})",
                    p[i].0, p[i].1
                )));
            }
            let v = 1.0 / (d2 * d2 * d2);
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    Ok(SymMatrix { n, data })
}

/// Encoder input: replicated settings on every node, interactions on edges.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    settings: ExperimentalSettings,
    node_features: Vec<[f64; 4]>,
    edge_weights: SymMatrix,
}

impl InteractionGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_features.len()
    }

    pub fn settings(&self) -> &ExperimentalSettings {
        &self.settings
    }

    pub fn node_features(&self) -> &[[f64; 4]] {
        &self.node_features
    }

    pub fn edge_weights(&self) -> &SymMatrix {
        &self.edge_weights
    }

    /// `D^{-1/2} (V + I) D^{-1/2}` with `D` the degree matrix of `V + I`.
    pub fn normalized_adjacency(&self) -> Vec<f64> {
        let n = self.num_nodes();
        let v = self.edge_weights.as_slice();
        let deg: Vec<f64> = (0..n)
            .map(|i| 1.0 + v[i * n..(i + 1) * n].iter().sum::<f64>())
            .collect();
        let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let a = if i == j { 1.0 } else { v[i * n + j] };
                out[i * n + j] = inv_sqrt[i] * a * inv_sqrt[j];
            }
        }
        out
    }
}

pub fn build_graph(spec: &LatticeSpec, settings: &ExperimentalSettings) -> Result<InteractionGraph> {
    settings.validate()?;
    let edge_weights = interaction_matrix(spec)?;
    Ok(InteractionGraph {
        settings: *settings,
        node_features: vec![settings.node_row(); spec.num_sites()],
        edge_weights,
    })
}

/// Convenience: graph of the open square lattice of side `l`.
pub fn square_graph(l: usize, settings: &ExperimentalSettings) -> Result<InteractionGraph> {
    build_graph(&LatticeSpec::square(l)?, settings)
}

pub fn rectangle_graph(rows: usize, cols: usize, settings: &ExperimentalSettings) -> Result<InteractionGraph> {
    build_graph(&LatticeSpec::rectangle(rows, cols)?, settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snake_small_sizes() {
        assert_eq!(snake_order(1).unwrap(), vec![(0, 0)]);
        assert_eq!(snake_order(2).unwrap(), vec![(0, 0), (1, 0), (1, 1), (0, 1)]);
        assert_eq!(
            snake_order(3).unwrap(),
            vec![(0, 0), (1, 0), (2, 0), (2, 1), (1, 1), (0, 1), (0, 2), (1, 2), (2, 2)]
        );
        assert!(matches!(snake_order(0), Err(Error::InvalidArgument(_))));
        assert_eq!(
            snake_order_rect(2, 3).unwrap(),
            vec![(0, 0), (1, 0), (2, 0), (2, 1), (1, 1), (0, 1)]
        );
        assert!(snake_order_rect(3, 0).is_err());
    }

    #[test]
    fn snake_parity_matches_checkerboard() {
        for l in 1..=8 {
            let order = snake_order(l).unwrap();
            assert_eq!(order.len(), l * l);
            for (k, &(x, y)) in order.iter().enumerate() {
                assert_eq!(k % 2, (x + y) % 2, "L={l} site {k}");
            }
            for w in order.windows(2) {
                let d = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
                assert_eq!(d, 1);
            }
            let mut sorted = order.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), l * l);
        }
    }

    #[test]
    fn interaction_values() {
        let spec = LatticeSpec::square(3).unwrap();
        let v = interaction_matrix(&spec).unwrap();
        // snake sites 0=(0,0), 1=(1,0), 4=(1,1), 2=(2,0)
        assert_eq!(v.get(0, 1), 1.0);
        assert_eq!(v.get(0, 4), 1.0 / 8.0);
        assert_eq!(v.get(0, 2), 1.0 / 64.0);
        for i in 0..9 {
            assert_eq!(v.get(i, i), 0.0);
            for j in 0..9 {
                assert_eq!(v.get(i, j), v.get(j, i));
                if i != j {
                    assert!(v.get(i, j) > 0.0 && v.get(i, j) <= 1.0);
                }
            }
        }
    }

    #[test]
    fn duplicate_positions_rejected() {
        let spec = LatticeSpec::from_positions(1, vec![(0.0, 0.0)]).unwrap();
        assert!(interaction_matrix(&spec).is_ok());
        let spec = LatticeSpec::from_positions(2, vec![(0.0, 0.0), (1.0, 0.0), (1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert!(matches!(interaction_matrix(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rotation_invariance() {
        for l in 2..=5 {
            let spec = LatticeSpec::square(l).unwrap();
            let v = interaction_matrix(&spec).unwrap();
            let n = l * l;
            let lf = (l - 1) as f64;
            let rotated: Vec<(f64, f64)> = spec.positions().iter().map(|&(x, y)| (lf - y, x)).collect();
            // induced permutation: rotated site k sits where original site perm[k] was
            let perm: Vec<usize> = rotated
                .iter()
                .map(|r| spec.positions().iter().position(|p| p == r).unwrap())
                .collect();
            let vr = interaction_matrix(&LatticeSpec::from_positions(l, rotated).unwrap()).unwrap();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(vr.get(i, j), v.get(perm[i], perm[j]));
                }
            }
        }
    }

    #[test]
    fn graph_rows_and_edges() {
        let s = ExperimentalSettings::new(1.1, 1.15, 16.0).unwrap();
        let g = square_graph(3, &s).unwrap();
        assert_eq!(g.node_features()[4], [1.0, 1.1, 1.15, 16.0]);

        let g2 = square_graph(2, &s).unwrap();
        assert_eq!(g2.num_nodes(), 4);
        assert!(g2.node_features().iter().all(|r| *r == s.node_row()));
        let w = g2.edge_weights().as_slice();
        let ones = w.iter().filter(|&&x| x == 1.0).count();
        let eighths = w.iter().filter(|&&x| x == 0.125).count();
        // counted in both triangles
        assert_eq!(ones, 8);
        assert_eq!(eighths, 4);

        let g1 = square_graph(1, &s).unwrap();
        assert_eq!(g1.num_nodes(), 1);
        assert_eq!(g1.edge_weights().as_slice(), &[0.0]);
        assert_eq!(g1.normalized_adjacency(), vec![1.0]);
    }

    #[test]
    fn settings_validation() {
        assert!(ExperimentalSettings::new(1.0, 0.0, 1.0).is_err());
        assert!(ExperimentalSettings::new(1.0, 1.0, -1.0).is_err());
        assert!(ExperimentalSettings::new(-0.3, 1.15, 0.5).is_ok());
    }
}
