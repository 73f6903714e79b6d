//! The frozen source model: a GCN encoder with a linear classifier head,
//! source pre-training, prediction tables, entropy, and F1 metrics.

use std::rc::Rc;

use log::debug;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Mat, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::graph::{EgoSubgraph, Graph};
use crate::nn::{Activation, Bound, ParamSet};
use crate::optim::Adam;
use crate::rng::{glorot, seeded};
use crate::sparse::Csr;

/// `D^{-1/2}(A+I)D^{-1/2}` for an undirected edge list over `n` nodes, with
/// `D` the degree matrix of `A+I`.
pub fn normalize_adjacency(n: usize, edges: &[(usize, usize)]) -> Csr {
    let mut deg = vec![1.0f64; n];
    for &(a, b) in edges {
        deg[a] += 1.0;
        deg[b] += 1.0;
    }
    let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 1.0 / deg[i])]).collect();
    for &(a, b) in edges {
        let v = 1.0 / (deg[a] * deg[b]).sqrt();
        rows[a].push((b, v));
        rows[b].push((a, v));
    }
    Csr::from_rows(n, rows)
}

/// Anything the GCN can run on.
pub trait GraphInput {
    fn node_features(&self) -> &Mat;
    fn normalized_adjacency(&self) -> Csr;
}

impl GraphInput for Graph {
    fn node_features(&self) -> &Mat {
        self.features()
    }

    fn normalized_adjacency(&self) -> Csr {
        normalize_adjacency(self.node_count(), self.edges())
    }
}

impl GraphInput for EgoSubgraph {
    fn node_features(&self) -> &Mat {
        self.features()
    }

    fn normalized_adjacency(&self) -> Csr {
        normalize_adjacency(self.node_count(), &self.edges())
    }
}

/// `activation(A_norm · H · W)`
pub fn gcn_layer(h: &Mat, a_norm: &Csr, w: &Mat, act: Activation) -> Result<Mat> {
    if a_norm.rows != h.nrows() || a_norm.cols != h.nrows() || h.ncols() != w.nrows() {
        return Err(Error::dim(format!(
            "A_norm {}x{}, H {:?}, W {:?}",
            a_norm.rows,
            a_norm.cols,
            h.dim(),
            w.dim()
        )));
    }
    Ok(a_norm.matmul(&h.dot(w)).mapv(|x| act.eval(x)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig { hidden: 256, layers: 2, epochs: 200, lr: 0.01, weight_decay: 5e-4, seed: 0 }
    }
}

/// GCN stack (`gcn.{l}.w`, no bias) followed by a linear head (`head.w`, `head.b`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnModel {
    dims: Vec<usize>,
    num_classes: usize,
    activation: Activation,
    params: ParamSet,
}

impl GnnModel {
    pub fn new(input_dim: usize, hidden: usize, layers: usize, num_classes: usize, seed: u64) -> Result<Self> {
        ensure!(layers >= 1, "a GCN needs at least one layer");
        ensure!(num_classes >= 1 && input_dim >= 1 && hidden >= 1, "dimensions must be positive");
        let mut rng = seeded(seed);
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(hidden, layers));
        let mut params = ParamSet::new();
        for l in 0..layers {
            params.insert(format!("gcn.{l}.w"), glorot(&mut rng, dims[l], dims[l + 1]));
        }
        params.insert("head.w", glorot(&mut rng, hidden, num_classes));
        params.insert("head.b", Array2::zeros((1, num_classes)));
        Ok(GnnModel { dims, num_classes, activation: Activation::Relu, params })
    }

    /// Builds a model from explicit layer weights and head.
    pub fn from_weights(layers: Vec<Mat>, head_w: Mat, head_b: Mat, activation: Activation) -> Result<Self> {
        ensure!(!layers.is_empty(), "a GCN needs at least one layer");
        let mut dims = vec![layers[0].nrows()];
        let mut params = ParamSet::new();
        for (l, w) in layers.into_iter().enumerate() {
            if w.nrows() != *dims.last().unwrap() {
                return Err(Error::dim(format!("layer {l} expects input width {}, got {}", dims.last().unwrap(), w.nrows())));
            }
            dims.push(w.ncols());
            params.insert(format!("gcn.{l}.w"), w);
        }
        if head_w.nrows() != *dims.last().unwrap() || head_b.dim() != (1, head_w.ncols()) {
            return Err(Error::dim(format!("head {:?} / bias {:?}", head_w.dim(), head_b.dim())));
        }
        let num_classes = head_w.ncols();
        params.insert("head.w", head_w);
        params.insert("head.b", head_b);
        Ok(GnnModel { dims, num_classes, activation, params })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn hidden_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim(format!(
                "features have width {}, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Returns (embedding, logits) on the tape.
    fn forward(&self, t: &mut Tape, b: &Bound, x: Var, a_norm: Rc<Csr>) -> (Var, Var) {
        let mut h = x;
        for l in 0..self.layer_count() {
            let hw = t.matmul(h, b.get(&format!("gcn.{l}.w")));
            let agg = t.spmm(a_norm.clone(), hw);
            h = self.activation.apply(t, agg);
        }
        let logits = t.matmul(h, b.get("head.w"));
        let logits = t.add_row(logits, b.get("head.b"));
        (h, logits)
    }

    /// Node representations from the last GCN layer (before the classifier).
    pub fn embed(&self, g: &impl GraphInput) -> Result<Mat> {
        let x = g.node_features();
        self.check_input(x)?;
        let a = Rc::new(g.normalized_adjacency());
        let mut h = x.clone();
        for l in 0..self.layer_count() {
            h = gcn_layer(&h, &a, self.params.get(&format!("gcn.{l}.w")), self.activation)?;
        }
        Ok(h)
    }

    pub fn logits(&self, g: &impl GraphInput) -> Result<Mat> {
        let h = self.embed(g)?;
        Ok(h.dot(self.params.get("head.w")) + self.params.get("head.b"))
    }

    pub fn predict(&self, g: &impl GraphInput) -> Result<PredictionTable> {
        Ok(PredictionTable { probs: softmax_rows(&self.logits(g)?) })
    }

    /// Mean cross-entropy over labeled nodes (plus L2 on GCN weights) and its gradient.
    pub fn loss_and_grads(&self, g: &Graph, weight_decay: f64) -> Result<(f64, Vec<Mat>)> {
        let labels = g.labels().ok_or_else(|| Error::contract("source pre-training needs a labeled graph"))?;
        self.check_input(g.features())?;
        let mut t = Tape::new();
        let b = self.params.bind(&mut t);
        let x = t.constant(g.features().clone());
        let (_, logits) = self.forward(&mut t, &b, x, Rc::new(g.normalized_adjacency()));
        let logp = t.log_softmax(logits);
        let picks: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, &y)| (i, y)).collect();
        let picked = t.pick(logp, &picks);
        let nll = t.mean(picked);
        let mut loss = t.scale(nll, -1.0);
        if weight_decay > 0.0 {
            for l in 0..self.layer_count() {
                let w = b.get(&format!("gcn.{l}.w"));
                let sq = t.mul(w, w);
                let s = t.sum(sq);
                let s = t.scale(s, 0.5 * weight_decay);
                loss = t.add(loss, s);
            }
        }
        let grads = t.backward(loss);
        Ok((t.scalar(loss), self.params.grads(&b, &grads)))
    }
}

/// Trains a fresh GCN on the labeled source graph with full-batch Adam on
/// cross-entropy. Returns the model and the per-epoch loss log.
pub fn pretrain_source(g: &Graph, cfg: &GnnConfig) -> Result<(GnnModel, Vec<f64>)> {
    ensure!(g.labels().is_some(), "source pre-training needs a labeled graph");
    let mut model = GnnModel::new(g.feature_dim(), cfg.hidden, cfg.layers, g.num_classes(), cfg.seed)?;
    let mut opt = Adam::new(model.params(), cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grads) = model.loss_and_grads(g, cfg.weight_decay)?;
        opt.step(&mut model.params, &grads);
        log.push(loss);
        if epoch % 50 == 0 {
            debug!("gcn epoch {epoch}: loss {loss:.4}");
        }
    }
    Ok((model, log))
}

/// Row-stochastic class probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionTable {
    probs: Mat,
}

impl PredictionTable {
    pub fn new(probs: Mat) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            ensure!(row.iter().all(|&p| p >= 0.0), "row {i} has a negative probability");
            ensure!((row.sum() - 1.0).abs() < 1e-6, "row {i} sums to {}", row.sum());
        }
        Ok(PredictionTable { probs })
    }

    pub fn probs(&self) -> &Mat {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    /// Most probable class per row; ties go to the lowest class id.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect()
    }
}

/// `(1/n) Σ_i Σ_c p_ic log p_ic` with `0 log 0 = 0`; zero for one-hot rows.
pub fn mean_negative_entropy(t: &PredictionTable) -> f64 {
    let n = t.len().max(1) as f64;
    t.probs.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>() / n
}

/// Micro- and macro-averaged F1. The macro average runs over the classes
/// present in `truth`.
pub fn micro_macro_f1(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<(f64, f64)> {
    ensure!(pred.len() == truth.len(), "{} predictions for {} labels", pred.len(), truth.len());
    ensure!(!truth.is_empty(), "no labels to score");
    ensure!(
        pred.iter().chain(truth).all(|&y| y < num_classes),
        "label outside [0, {num_classes})"
    );
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &y) in pred.iter().zip(truth) {
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let (stp, sfp, sfn) = (tp.iter().sum::<usize>(), fp.iter().sum::<usize>(), fn_.iter().sum::<usize>());
    let micro = f1(stp, sfp, sfn);
    let present: Vec<usize> = (0..num_classes).filter(|&c| tp[c] + fn_[c] > 0).collect();
    let macro_ = present.iter().map(|&c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / present.len() as f64;
    Ok((micro, macro_))
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}
