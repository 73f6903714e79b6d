use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DomainPair, Graph};
use crate::error::{ensure, Result};
use crate::rng::{derive, normal_mat, seeded};

/// Two stochastic block models with shared class semantics. The target
/// domain moves every class mean by `feature_shift` along a per-class random
/// direction and uses its own edge probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftConfig {
    pub source_nodes: usize,
    pub target_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub source_p_in: f64,
    pub source_p_out: f64,
    pub target_p_in: f64,
    pub target_p_out: f64,
    /// Norm of each class mean.
    pub class_separation: f64,
    /// Norm of the per-class mean displacement applied to the target.
    pub feature_shift: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            source_nodes: 300,
            target_nodes: 300,
            num_classes: 2,
            feature_dim: 8,
            source_p_in: 0.03,
            source_p_out: 0.004,
            target_p_in: 0.02,
            target_p_out: 0.01,
            class_separation: 1.0,
            feature_shift: 1.5,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("source_p_in", self.source_p_in),
            ("source_p_out", self.source_p_out),
            ("target_p_in", self.target_p_in),
            ("target_p_out", self.target_p_out),
        ] {
            ensure!((0.0..=1.0).contains(&p), "{name} = {p} is not a probability");
        }
        ensure!(self.num_classes >= 1, "need at least one class");
        ensure!(self.feature_dim >= 1, "feature_dim must be positive");
        ensure!(self.source_nodes >= self.num_classes, "source needs a node per class");
        ensure!(self.target_nodes >= self.num_classes, "target needs a node per class");
        ensure!(self.noise_scale >= 0.0 && self.feature_shift >= 0.0, "scales must be nonnegative");
        Ok(())
    }
}

fn unit_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Array2<f64> {
    let mut m = normal_mat(rng, rows, dim, 1.0);
    for mut r in m.rows_mut() {
        let norm = r.dot(&r).sqrt().max(1e-12);
        r /= norm;
    }
    m
}

fn sbm(
    n: usize,
    means: &Array2<f64>,
    p_in: f64,
    p_out: f64,
    noise: f64,
    seed: u64,
    num_classes: usize,
) -> Graph {
    let mut rng = seeded(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let mut x = normal_mat(&mut rng, n, means.ncols(), noise);
    for (i, &y) in labels.iter().enumerate() {
        let mut row = x.row_mut(i);
        row += &means.row(y);
    }
    Graph::new(n, edges, x, Some(labels), num_classes).expect("generated graph is valid")
}

pub fn synth_shift(cfg: &ShiftConfig) -> Result<DomainPair> {
    cfg.validate()?;
    let mut rng = seeded(derive(cfg.seed, 1));
    let means = unit_rows(&mut rng, cfg.num_classes, cfg.feature_dim) * cfg.class_separation;
    let shift = unit_rows(&mut rng, cfg.num_classes, cfg.feature_dim) * cfg.feature_shift;
    let target_means = &means + &shift;
    let source = sbm(
        cfg.source_nodes,
        &means,
        cfg.source_p_in,
        cfg.source_p_out,
        cfg.noise_scale,
        derive(cfg.seed, 2),
        cfg.num_classes,
    );
    let target = sbm(
        cfg.target_nodes,
        &target_means,
        cfg.target_p_in,
        cfg.target_p_out,
        cfg.noise_scale,
        derive(cfg.seed, 3),
        cfg.num_classes,
    );
    DomainPair::new(source, target)
}

/// Per-class feature means of a labeled graph.
#[cfg(test)]
pub(crate) fn class_feature_means(g: &Graph) -> Array2<f64> {
    let labels = g.labels().expect("labeled graph");
    let mut sums = Array2::zeros((g.num_classes(), g.feature_dim()));
    let mut counts = ndarray::Array1::<f64>::zeros(g.num_classes());
    for (i, &y) in labels.iter().enumerate() {
        let mut r = sums.row_mut(y);
        r += &g.features().row(i);
        counts[y] += 1.0;
    }
    for (mut r, c) in sums.rows_mut().into_iter().zip(counts.iter()) {
        r /= c.max(1.0);
    }
    sums
}
