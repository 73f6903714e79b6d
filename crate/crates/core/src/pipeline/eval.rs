use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::store::write_atomic;
use crate::autograd::Mat;
use crate::error::{ensure, Error, Result};
use crate::gnn::{micro_macro_f1, GnnModel};
use crate::graph::{EgoSubgraph, Graph};

/// Micro-F1 then Macro-F1, as fractions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Row {
    pub micro: f64,
    pub macro_: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    /// Frozen GNN on the raw target.
    pub baseline: F1Row,
    /// Frozen GNN on the refined target.
    pub adapted: F1Row,
    /// `adapted − baseline`.
    pub delta: F1Row,
}

impl MetricTable {
    pub fn render(&self) -> String {
        let mut s = String::from("row        Micro-F1  Macro-F1\n");
        for (name, r) in [("baseline", self.baseline), ("adapted", self.adapted), ("delta", self.delta)] {
            let _ = writeln!(s, "{name:<10} {:>8.2}  {:>8.2}", 100.0 * r.micro, 100.0 * r.macro_);
        }
        s
    }
}

/// The refined target as the classifier sees it.
#[derive(Clone, Debug)]
pub enum AdaptedTarget {
    /// One refined subgraph per node; each node is classified at its own center.
    Centers(Vec<EgoSubgraph>),
    Stitched(Graph),
}

impl AdaptedTarget {
    pub fn predictions(&self, gnn: &GnnModel, n: usize) -> Result<Vec<usize>> {
        match self {
            AdaptedTarget::Stitched(g) => {
                ensure!(g.node_count() == n, "adapted graph has {} nodes, target {n}", g.node_count());
                Ok(gnn.predict(g)?.argmax())
            }
            AdaptedTarget::Centers(subs) => {
                let mut pred = vec![usize::MAX; n];
                for sub in subs {
                    let c = sub.center();
                    ensure!(c < n, "subgraph center {c} outside a target of {n} nodes");
                    pred[c] = gnn.predict(sub)?.argmax()[0];
                }
                if let Some(u) = pred.iter().position(|&p| p == usize::MAX) {
                    return Err(Error::contract(format!("no refined subgraph centered at node {u}")));
                }
                Ok(pred)
            }
        }
    }
}

/// Baseline and adapted F1 rows of the frozen classifier.
pub fn evaluate(gnn: &GnnModel, raw: &Graph, adapted: &AdaptedTarget, labels: &[usize]) -> Result<MetricTable> {
    let n = raw.node_count();
    ensure!(labels.len() == n, "{} labels for {n} target nodes", labels.len());
    let c = gnn.num_classes();
    let (bm, bma) = micro_macro_f1(&gnn.predict(raw)?.argmax(), labels, c)?;
    let (am, ama) = micro_macro_f1(&adapted.predictions(gnn, n)?, labels, c)?;
    Ok(MetricTable {
        baseline: F1Row { micro: bm, macro_: bma },
        adapted: F1Row { micro: am, macro_: ama },
        delta: F1Row { micro: am - bm, macro_: ama - bma },
    })
}

/// Projection of the rows of `x` onto their two leading principal axes.
/// Each axis is signed so that its largest-magnitude entry is positive.
pub fn pca_2d(x: &Mat) -> Result<Mat> {
    let (n, d) = x.dim();
    ensure!(n >= 1 && d >= 1, "PCA needs a nonempty matrix");
    let mean = x.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = Mat::zeros((d, 2));
    for (k, &col) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(col);
        let pivot = (0..d).fold(0, |best, i| if v[i].abs() > v[best].abs() + 1e-12 { i } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            basis[[i, k]] = sign * v[i];
        }
    }
    Ok(centered.dot(&basis))
}

/// Writes `x,y,class,domain` rows for external plotting.
pub fn emit_plot_data(embeddings: &Mat, labels: &[usize], domains: &[String], out: &Path) -> Result<()> {
    let n = embeddings.nrows();
    ensure!(
        labels.len() == n && domains.len() == n,
        "{n} embedding rows but {} labels and {} domains",
        labels.len(),
        domains.len()
    );
    let xy = pca_2d(embeddings)?;
    let mut s = String::from("x,y,class,domain\n");
    for i in 0..n {
        let _ = writeln!(s, "{},{},{},{}", xy[[i, 0]], xy[[i, 1]], labels[i], domains[i]);
    }
    write_atomic(out, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_mat, seeded};
    use ndarray::{array, concatenate, Axis};

    fn dist(a: &Mat, i: usize, j: usize) -> f64 {
        (&a.row(i) - &a.row(j)).mapv(|v| v * v).sum().sqrt()
    }

    #[test]
    fn planar_input_is_rigidly_moved() {
        let x = normal_mat(&mut seeded(4), 30, 2, 2.0);
        let y = pca_2d(&x).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                assert!((dist(&x, i, j) - dist(&y, i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn leading_axis_has_the_larger_variance() {
        let mut x = normal_mat(&mut seeded(5), 200, 5, 1.0);
        x.column_mut(3).mapv_inplace(|v| 4.0 * v);
        let y = pca_2d(&x).unwrap();
        let var = |c: usize| y.column(c).mapv(|v| v * v).sum();
        assert!(var(0) >= var(1));
    }

    #[test]
    fn duplicated_cloud_gives_duplicated_coordinates() {
        let x = normal_mat(&mut seeded(6), 20, 4, 1.0);
        let xx = concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let y = pca_2d(&xx).unwrap();
        for i in 0..20 {
            assert_eq!(y.row(i), y.row(i + 20));
        }
        assert_eq!(pca_2d(&xx).unwrap(), y);
    }

    #[test]
    fn plot_rows_must_align() {
        let dir = tempfile::tempdir().unwrap();
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let out = dir.path().join("p.csv");
        assert!(emit_plot_data(&x, &[0], &["a".into(), "b".into()], &out).is_err());
        emit_plot_data(&x, &[0, 1], &["a".into(), "b".into()], &out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("x,y,class,domain\n"));
    }

    #[test]
    fn identity_adaptation_has_zero_delta() {
        let pair = crate::graph::synth_shift(&crate::graph::ShiftConfig { source_nodes: 30, target_nodes: 30, ..Default::default() }).unwrap();
        let gnn = GnnModel::new(8, 8, 2, 2, 1).unwrap();
        let labels = pair.target.labels().unwrap().to_vec();
        let m = evaluate(&gnn, &pair.target, &AdaptedTarget::Stitched(pair.target.clone()), &labels).unwrap();
        assert_eq!(m.delta, F1Row { micro: 0.0, macro_: 0.0 });
        assert_eq!(m.baseline, m.adapted);
    }
}
