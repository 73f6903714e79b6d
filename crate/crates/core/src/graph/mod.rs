//! Graph containers, ego-subgraph sampling, edge perturbation, and the
//! synthetic domain-shift generator.

mod ego;
mod io;
mod synth;

pub use ego::{perturb_edges, sample_ego, EgoSubgraph};
pub use io::{load_graph, save_graph, GraphFormat, GraphHeader, FORMAT_VERSION};
pub use synth::{synth_shift, ShiftConfig};

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{ensure, Error, Result};

/// Undirected, unweighted graph with node features and optional labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    n: usize,
    /// Sorted pairs `(i, j)` with `i < j`.
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    features: Mat,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Graph {
    /// Builds a graph from an edge list. Edges are symmetrized and
    /// deduplicated; self-loops are dropped.
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Mat,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.nrows() != n {
            return Err(Error::Schema(format!(
                "feature matrix has {} rows for {n} nodes",
                features.nrows()
            )));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Index(format!("edge ({a}, {b}) in a graph of {n} nodes")));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Schema(format!("{} labels for {n} nodes", labels.len())));
            }
            if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
                return Err(Error::contract(format!(
                    "label {bad} outside [0, {num_classes})"
                )));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Graph { n, edges, neighbors, features, labels, num_classes })
    }

    /// Builds a graph from a dense symmetric 0/1 adjacency matrix.
    pub fn from_dense(
        adjacency: &Mat,
        features: Mat,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = adjacency.nrows();
        ensure!(adjacency.ncols() == n, "adjacency must be square");
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                ensure!(adjacency[[i, j]] == adjacency[[j, i]], "adjacency is not symmetric at ({i}, {j})");
                if adjacency[[i, j]] != 0.0 {
                    edges.push((i, j));
                }
            }
        }
        Graph::new(n, edges, features, labels, num_classes)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a < self.n && self.neighbors[a].binary_search(&b).is_ok()
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn adjacency_dense(&self) -> Mat {
        let mut a = Array2::zeros((self.n, self.n));
        for &(i, j) in &self.edges {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
        a
    }

    pub fn with_features(&self, features: Mat) -> Result<Self> {
        Graph::new(self.n, self.edges.iter().copied(), features, self.labels.clone(), self.num_classes)
    }

    pub fn without_labels(&self) -> Self {
        Graph { labels: None, ..self.clone() }
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        ensure!(perm.len() == self.n, "permutation length {} for {} nodes", perm.len(), self.n);
        let mut features = Array2::zeros(self.features.dim());
        for (i, &p) in perm.iter().enumerate() {
            features.row_mut(p).assign(&self.features.row(i));
        }
        let labels = self.labels.as_ref().map(|ys| {
            let mut out = vec![0; self.n];
            for (i, &p) in perm.iter().enumerate() {
                out[p] = ys[i];
            }
            out
        });
        let edges = self.edges.iter().map(|&(a, b)| (perm[a], perm[b]));
        Graph::new(self.n, edges, features, labels, self.num_classes)
    }
}

/// A labeled source graph and a target graph sharing feature width and classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPair {
    pub source: Graph,
    pub target: Graph,
}

impl DomainPair {
    pub fn new(source: Graph, target: Graph) -> Result<Self> {
        if source.feature_dim() != target.feature_dim() {
            return Err(Error::Schema(format!(
                "source feature width {} differs from target {}",
                source.feature_dim(),
                target.feature_dim()
            )));
        }
        ensure!(
            source.num_classes() == target.num_classes(),
            "source has {} classes, target {}",
            source.num_classes(),
            target.num_classes()
        );
        ensure!(source.labels().is_some(), "source graph must be labeled");
        Ok(DomainPair { source, target })
    }
}
