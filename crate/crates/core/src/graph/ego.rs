use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::autograd::Mat;
use crate::error::{ensure, Error, Result};
use crate::rng::seeded;

/// Induced subgraph around a center node. Nodes are ordered by hop, then id;
/// the center is always first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoSubgraph {
    center: usize,
    nodes: Vec<usize>,
    hops: Vec<usize>,
    adjacency: Mat,
    features: Mat,
}

impl EgoSubgraph {
    /// Assembles a subgraph from parts; `adjacency` must be symmetric 0/1 with
    /// a zero diagonal.
    pub fn from_parts(
        center: usize,
        nodes: Vec<usize>,
        hops: Vec<usize>,
        adjacency: Mat,
        features: Mat,
    ) -> Result<Self> {
        let p = nodes.len();
        ensure!(p >= 1, "ego subgraph needs at least the center node");
        ensure!(nodes[0] == center && hops[0] == 0, "center must come first at hop 0");
        ensure!(hops.len() == p, "hop list length {} for {p} nodes", hops.len());
        if adjacency.dim() != (p, p) || features.nrows() != p {
            return Err(Error::dim(format!(
                "adjacency {:?} / features {:?} for {p} nodes",
                adjacency.dim(),
                features.dim()
            )));
        }
        for i in 0..p {
            ensure!(adjacency[[i, i]] == 0.0, "nonzero diagonal at {i}");
            for j in i + 1..p {
                let v = adjacency[[i, j]];
                ensure!(v == adjacency[[j, i]] && (v == 0.0 || v == 1.0), "adjacency not symmetric binary at ({i}, {j})");
            }
        }
        Ok(EgoSubgraph { center, nodes, hops, adjacency, features })
    }

    pub fn center(&self) -> usize {
        self.center
    }

    /// Parent-graph ids of the member nodes.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn hops(&self) -> &[usize] {
        &self.hops
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn adjacency(&self) -> &Mat {
        &self.adjacency
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    /// Local edge list `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let p = self.node_count();
        let mut out = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                if self.adjacency[[i, j]] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    /// Same node set with new adjacency and features.
    pub fn with_content(&self, adjacency: Mat, features: Mat) -> Result<Self> {
        EgoSubgraph::from_parts(self.center, self.nodes.clone(), self.hops.clone(), adjacency, features)
    }

    /// The subgraph as a standalone graph over local ids.
    pub fn to_graph(&self) -> Graph {
        Graph::new(self.node_count(), self.edges(), self.features.clone(), None, 0)
            .expect("ego subgraph invariants imply a valid graph")
    }
}

/// Breadth-first distances from `center`, truncated at `hops`.
fn bfs_ball(g: &Graph, center: usize, hops: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; g.node_count()];
    dist[center] = Some(0);
    let mut queue = VecDeque::from([center]);
    while let Some(v) = queue.pop_front() {
        let d = dist[v].unwrap();
        if d == hops {
            continue;
        }
        for &u in g.neighbors(v) {
            if dist[u].is_none() {
                dist[u] = Some(d + 1);
                queue.push_back(u);
            }
        }
    }
    dist
}

/// Samples the `hops`-hop ego network of `center`. When the ball holds more
/// than `max_nodes` nodes, whole hop layers are kept nearest-first and the
/// first layer that does not fit is uniformly subsampled under `seed`.
pub fn sample_ego(g: &Graph, center: usize, hops: usize, max_nodes: usize, seed: u64) -> Result<EgoSubgraph> {
    if center >= g.node_count() {
        return Err(Error::Index(format!("center {center} in a graph of {} nodes", g.node_count())));
    }
    ensure!(max_nodes >= 1, "max_nodes must be at least 1");
    let dist = bfs_ball(g, center, hops);
    let mut layers: Vec<Vec<usize>> = vec![Vec::new(); hops + 1];
    for (v, d) in dist.iter().enumerate() {
        if let Some(d) = d {
            layers[*d].push(v);
        }
    }
    let mut rng = seeded(seed);
    let mut selected: Vec<(usize, usize)> = vec![(0, center)];
    let mut budget = max_nodes - 1;
    for (h, layer) in layers.iter().enumerate().skip(1) {
        if budget == 0 {
            break;
        }
        if layer.len() <= budget {
            selected.extend(layer.iter().map(|&v| (h, v)));
            budget -= layer.len();
        } else {
            let mut picked: Vec<usize> = layer.choose_multiple(&mut rng, budget).copied().collect();
            picked.sort_unstable();
            selected.extend(picked.into_iter().map(|v| (h, v)));
            budget = 0;
        }
    }
    selected.sort_unstable();
    let nodes: Vec<usize> = selected.iter().map(|&(_, v)| v).collect();
    let hop_list: Vec<usize> = selected.iter().map(|&(h, _)| h).collect();
    let p = nodes.len();
    let mut adjacency = Array2::zeros((p, p));
    for i in 0..p {
        for j in i + 1..p {
            if g.has_edge(nodes[i], nodes[j]) {
                adjacency[[i, j]] = 1.0;
                adjacency[[j, i]] = 1.0;
            }
        }
    }
    let mut features = Array2::zeros((p, g.feature_dim()));
    for (i, &v) in nodes.iter().enumerate() {
        features.row_mut(i).assign(&g.features().row(v));
    }
    Ok(EgoSubgraph { center, nodes, hops: hop_list, adjacency, features })
}

/// Removes `⌊remove_ratio·m⌋` existing edges and adds `⌊add_ratio·m⌋` non-edges,
/// both chosen uniformly under `seed`; `m` is the input edge count.
pub fn perturb_edges(sub: &EgoSubgraph, add_ratio: f64, remove_ratio: f64, seed: u64) -> Result<EgoSubgraph> {
    ensure!((0.0..=1.0).contains(&add_ratio), "add_ratio {add_ratio} outside [0, 1]");
    ensure!((0.0..=1.0).contains(&remove_ratio), "remove_ratio {remove_ratio} outside [0, 1]");
    let p = sub.node_count();
    let edges = sub.edges();
    let m = edges.len();
    let mut non_edges = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            if sub.adjacency[[i, j]] == 0.0 {
                non_edges.push((i, j));
            }
        }
    }
    let n_remove = ((remove_ratio * m as f64).floor() as usize).min(m);
    let n_add = ((add_ratio * m as f64).floor() as usize).min(non_edges.len());
    let mut rng = seeded(seed);
    let mut adjacency = sub.adjacency.clone();
    let mut removable = edges;
    removable.shuffle(&mut rng);
    for &(i, j) in removable.iter().take(n_remove) {
        adjacency[[i, j]] = 0.0;
        adjacency[[j, i]] = 0.0;
    }
    non_edges.shuffle(&mut rng);
    for &(i, j) in non_edges.iter().take(n_add) {
        adjacency[[i, j]] = 1.0;
        adjacency[[j, i]] = 1.0;
    }
    Ok(EgoSubgraph { adjacency, ..sub.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn path(n: usize) -> Graph {
        Graph::new(n, (0..n - 1).map(|i| (i, i + 1)), Array2::zeros((n, 2)), None, 1).unwrap()
    }

    fn random_graph(n: usize, p: f64, seed: u64) -> Graph {
        let mut rng = seeded(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        let x = Array2::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64);
        Graph::new(n, edges, x, None, 1).unwrap()
    }

    /// All-pairs shortest paths by repeated relaxation.
    fn all_pairs(g: &Graph) -> Vec<Vec<usize>> {
        let n = g.node_count();
        let inf = usize::MAX / 2;
        let mut d = vec![vec![inf; n]; n];
        for i in 0..n {
            d[i][i] = 0;
        }
        for &(a, b) in g.edges() {
            d[a][b] = 1;
            d[b][a] = 1;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    #[test]
    fn path_ball() {
        let sub = sample_ego(&path(5), 0, 3, 10, 1).unwrap();
        assert_eq!(sub.nodes(), &[0, 1, 2, 3]);
        assert_eq!(sub.hops(), &[0, 1, 2, 3]);
    }

    #[test]
    fn radius_zero() {
        let g = random_graph(10, 0.4, 2);
        let sub = sample_ego(&g, 4, 0, 10, 1).unwrap();
        assert_eq!(sub.nodes(), &[4]);
        assert_eq!(sub.adjacency().sum(), 0.0);
    }

    #[test]
    fn center_out_of_range() {
        assert!(matches!(sample_ego(&path(3), 3, 1, 4, 0), Err(Error::Index(_))));
    }

    #[test]
    fn matches_shortest_path_filter() {
        let g = random_graph(30, 0.08, 11);
        let d = all_pairs(&g);
        for center in 0..30 {
            let sub = sample_ego(&g, center, 2, usize::MAX, 0).unwrap();
            let got: BTreeSet<usize> = sub.nodes().iter().copied().collect();
            let want: BTreeSet<usize> = (0..30).filter(|&v| d[center][v] <= 2).collect();
            assert_eq!(got, want);
            for (i, &v) in sub.nodes().iter().enumerate() {
                assert_eq!(sub.hops()[i], d[center][v]);
            }
        }
    }

    #[test]
    fn cap_keeps_closest_layers() {
        let g = random_graph(40, 0.15, 5);
        let full = sample_ego(&g, 0, 3, usize::MAX, 0).unwrap();
        let capped = sample_ego(&g, 0, 3, 8, 9).unwrap();
        assert_eq!(capped.node_count(), 8.min(full.node_count()));
        let max_hop = *capped.hops().last().unwrap();
        let inner = full.hops().iter().filter(|&&h| h < max_hop).count();
        assert_eq!(capped.hops().iter().filter(|&&h| h < max_hop).count(), inner);
        assert_eq!(capped, sample_ego(&g, 0, 3, 8, 9).unwrap());
    }

    #[test]
    fn perturbation_examples() {
        let g = random_graph(10, 0.5, 3);
        let sub = sample_ego(&g, 0, 2, usize::MAX, 0).unwrap();
        assert_eq!(perturb_edges(&sub, 0.0, 0.0, 4).unwrap(), sub);

        let tri = Graph::new(3, [(0, 1), (1, 2), (0, 2)], Array2::zeros((3, 1)), None, 1).unwrap();
        let tri_sub = sample_ego(&tri, 0, 1, 10, 0).unwrap();
        assert_eq!(perturb_edges(&tri_sub, 0.0, 1.0, 1).unwrap().edge_count(), 0);

        let m = sub.edge_count();
        let out = perturb_edges(&sub, 0.2, 0.2, 7).unwrap();
        let before: BTreeSet<_> = sub.edges().into_iter().collect();
        let after: BTreeSet<_> = out.edges().into_iter().collect();
        let expected = (0.2 * m as f64).floor() as usize;
        assert_eq!(before.difference(&after).count(), expected);
        assert_eq!(after.difference(&before).count(), expected);
        assert_eq!(out.features(), sub.features());
    }

    #[test]
    fn induced_adjacency_exhaustive() {
        for seed in 0..4 {
            let g = random_graph(50, 0.06, seed);
            for center in 0..50 {
                let sub = sample_ego(&g, center, 3, 16, seed).unwrap();
                for (i, &a) in sub.nodes().iter().enumerate() {
                    for (j, &b) in sub.nodes().iter().enumerate() {
                        let want = if g.has_edge(a, b) { 1.0 } else { 0.0 };
                        assert_eq!(sub.adjacency()[[i, j]], want);
                    }
                    assert_eq!(sub.features().row(i), g.features().row(a));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn perturbation_stays_symmetric(seed in 0u64..1000, add in 0.0f64..1.0, remove in 0.0f64..1.0) {
            let g = random_graph(14, 0.3, seed % 7);
            let sub = sample_ego(&g, (seed % 14) as usize, 2, 12, seed).unwrap();
            let out = perturb_edges(&sub, add, remove, seed).unwrap();
            let a = out.adjacency();
            prop_assert_eq!(a, &a.t().to_owned());
            prop_assert!((0..a.nrows()).all(|i| a[[i, i]] == 0.0));
        }
    }
}
