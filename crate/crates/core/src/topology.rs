//! Communication graphs between prosumers and their consensus weight matrices.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on row and column sums of a weight matrix.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("a topology needs at least 2 agents, got {0}")]
    TooFewAgents(usize),
    #[error("hub {hub} out of range for {n} agents")]
    HubOutOfRange { hub: usize, n: usize },
    #[error("ring degree k={k} must be even with 2 <= k < n={n}")]
    InvalidRingDegree { k: usize, n: usize },
    #[error("edge ({0}, {1}) is invalid")]
    InvalidEdge(usize, usize),
    #[error("topology is not connected")]
    Disconnected,
    #[error("weight matrix is {rows}x{cols}, expected {n}x{n}")]
    Shape { rows: usize, cols: usize, n: usize },
    #[error("weight matrix violates {0}")]
    InvalidWeights(String),
}

/// Undirected communication graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    /// Number of agents.
    pub n: usize,
    /// Symmetric adjacency with a false diagonal.
    pub adjacency: Vec<Vec<bool>>,
}

impl Topology {
    fn empty(n: usize) -> Result<Self, TopologyError> {
        if n < 2 {
            return Err(TopologyError::TooFewAgents(n));
        }
        Ok(Self { n, adjacency: vec![vec![false; n]; n] })
    }

    fn link(&mut self, i: usize, j: usize) {
        self.adjacency[i][j] = true;
        self.adjacency[j][i] = true;
    }

    /// Builds a graph from an undirected edge list and checks connectivity.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        let mut topo = Self::empty(n)?;
        for &(i, j) in edges {
            if i >= n || j >= n || i == j {
                return Err(TopologyError::InvalidEdge(i, j));
            }
            topo.link(i, j);
        }
        topo.ensure_connected()?;
        Ok(topo)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].iter().filter(|&&a| a).count()
    }

    pub fn edge_count(&self) -> usize {
        (0..self.n).map(|i| self.degree(i)).sum::<usize>() / 2
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[i].iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j)
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn ensure_connected(&self) -> Result<(), TopologyError> {
        if self.is_connected() {
            Ok(())
        } else {
            Err(TopologyError::Disconnected)
        }
    }
}

/// Every pair of agents linked.
pub fn complete(n: usize) -> Result<Topology, TopologyError> {
    let mut topo = Topology::empty(n)?;
    for i in 0..n {
        for j in i + 1..n {
            topo.link(i, j);
        }
    }
    Ok(topo)
}

/// One hub linked to every other agent.
pub fn star(n: usize, hub: usize) -> Result<Topology, TopologyError> {
    let mut topo = Topology::empty(n)?;
    if hub >= n {
        return Err(TopologyError::HubOutOfRange { hub, n });
    }
    for j in (0..n).filter(|&j| j != hub) {
        topo.link(hub, j);
    }
    Ok(topo)
}

/// Ring where each agent links to its k/2 nearest neighbors on each side.
pub fn nearest_k_ring(n: usize, k: usize) -> Result<Topology, TopologyError> {
    let mut topo = Topology::empty(n)?;
    if k < 2 || !k.is_multiple_of(2) || k >= n {
        return Err(TopologyError::InvalidRingDegree { k, n });
    }
    for i in 0..n {
        for step in 1..=k / 2 {
            topo.link(i, (i + step) % n);
        }
    }
    Ok(topo)
}

/// Doubly stochastic consensus weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    /// Row-major n x n entries.
    pub w: Vec<Vec<f64>>,
}

impl WeightMatrix {
    pub fn n(&self) -> usize {
        self.w.len()
    }

    /// Wraps an explicit matrix after checking it against the topology.
    pub fn from_dense(topology: &Topology, w: Vec<Vec<f64>>) -> Result<Self, TopologyError> {
        let matrix = Self { w };
        matrix.validate(topology)?;
        Ok(matrix)
    }

    /// Checks nonnegativity, sparsity, symmetry and double stochasticity.
    pub fn validate(&self, topology: &Topology) -> Result<(), TopologyError> {
        let n = topology.n;
        let cols = self.w.iter().map(Vec::len).find(|&c| c != n).unwrap_or(n);
        if self.w.len() != n || cols != n {
            return Err(TopologyError::Shape { rows: self.w.len(), cols, n });
        }
        topology.ensure_connected()?;
        let bad = |what: String| Err(TopologyError::InvalidWeights(what));
        for i in 0..n {
            for j in 0..n {
                let v = self.w[i][j];
                if !v.is_finite() || v < 0.0 {
                    return bad(format!("nonnegativity at ({i}, {j})"));
                }
                if v > 0.0 && i != j && !topology.adjacency[i][j] {
                    return bad(format!("sparsity at ({i}, {j})"));
                }
                if (v - self.w[j][i]).abs() > STOCHASTIC_TOL {
                    return bad(format!("symmetry at ({i}, {j})"));
                }
            }
            let row: f64 = self.w[i].iter().sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL {
                return bad(format!("row {i} sum {row}"));
            }
            let col: f64 = self.w.iter().map(|r| r[i]).sum();
            if (col - 1.0).abs() > STOCHASTIC_TOL {
                return bad(format!("column {i} sum {col}"));
            }
        }
        Ok(())
    }

    /// Computes `W v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.w.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    /// Mixes per-agent series slot by slot: `out[i][t] = sum_j w[i][j] x[j][t]`.
    pub fn mix_row(&self, i: usize, series: &[Vec<f64>]) -> Vec<f64> {
        let h = series.first().map_or(0, Vec::len);
        let mut out = vec![0.0; h];
        for (j, &wij) in self.w[i].iter().enumerate() {
            if wij != 0.0 {
                for (o, x) in out.iter_mut().zip(&series[j]) {
                    *o += wij * x;
                }
            }
        }
        out
    }
}

/// Metropolis-Hastings weights: `1 / (1 + max(deg i, deg j))` on edges.
pub fn metropolis_weights(topology: &Topology) -> Result<WeightMatrix, TopologyError> {
    topology.ensure_connected()?;
    let n = topology.n;
    let deg: Vec<usize> = (0..n).map(|i| topology.degree(i)).collect();
    let mut w = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in topology.neighbors(i) {
            w[i][j] = 1.0 / (1 + deg[i].max(deg[j])) as f64;
        }
    }
    for (i, row) in w.iter_mut().enumerate() {
        let off: f64 = row.iter().sum();
        row[i] = 1.0 - off;
    }
    Ok(WeightMatrix { w })
}

/// `1 - |lambda_2|`, where `lambda_2` is the second-largest eigenvalue modulus.
pub fn spectral_gap(w: &WeightMatrix) -> f64 {
    let n = w.n();
    if n < 2 {
        return 1.0;
    }
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (w.w[i][j] + w.w[j][i]));
    let mut moduli: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().map(|e| e.abs()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    (1.0 - moduli[1]).clamp(0.0, 1.0)
}
