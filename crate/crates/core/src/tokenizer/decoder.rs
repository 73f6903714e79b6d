use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Mat, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{attention, init_attention, init_mlp, mlp, Activation, Bound, ParamSet};
use crate::rng::seeded;

/// Reconstructs node features and adjacency from a de-quantized latent block.
/// Node features drive the decoder queries, which read the latent rows through
/// cross-attention; an MLP head gives features and the inner product of the
/// attended states gives edge probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDecoder {
    pub(crate) feat_dim: usize,
    pub(crate) width: usize,
    pub(crate) heads: usize,
    /// Adds the query states back after cross-attention, so features can be
    /// reconstructed without the latent rows.
    #[serde(default)]
    pub(crate) residual: bool,
    pub(crate) params: ParamSet,
}

/// How the edge term weighs present and absent pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeWeighting {
    /// Plain mean over all off-diagonal pairs.
    #[default]
    Uniform,
    /// Edges and non-edges each contribute half of the term.
    Balanced,
}

impl GraphDecoder {
    pub fn new(feat_dim: usize, width: usize, heads: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut params = ParamSet::new();
        init_mlp(&mut params, "dec.query", (feat_dim, width, width), &mut rng);
        init_attention(&mut params, "dec.cross", width, &mut rng);
        init_mlp(&mut params, "dec.feat", (width, width, feat_dim), &mut rng);
        GraphDecoder { feat_dim, width, heads, residual: false, params }
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check(&self, zhat: &Mat, x: &Mat) -> Result<()> {
        if zhat.ncols() != self.width {
            return Err(Error::dim(format!("latent width {} vs decoder width {}", zhat.ncols(), self.width)));
        }
        if x.ncols() != self.feat_dim {
            return Err(Error::dim(format!("feature width {} vs decoder input {}", x.ncols(), self.feat_dim)));
        }
        Ok(())
    }

    /// Returns the attended node states, reconstructed features, and edge logits.
    pub(crate) fn forward(&self, t: &mut Tape, b: &Bound, zhat: Var, x: Var) -> (Var, Var, Var) {
        let q = mlp(t, b, "dec.query", x, Activation::Gelu);
        let a = attention(t, b, "dec.cross", q, zhat, self.heads, None);
        let h = if self.residual { t.add(q, a) } else { a };
        let xhat = mlp(t, b, "dec.feat", h, Activation::Gelu);
        let logits = t.matmul_t(h, h);
        (h, xhat, logits)
    }

    /// Attended node states `H_rec` (`p×d`).
    pub fn hidden(&self, zhat: &Mat, x: &Mat) -> Result<Mat> {
        self.check(zhat, x)?;
        let mut t = Tape::new();
        let b = self.params.bind_frozen(&mut t);
        let z = t.constant(zhat.clone());
        let xv = t.constant(x.clone());
        let (h, _, _) = self.forward(&mut t, &b, z, xv);
        Ok(t.value(h).clone())
    }

    /// Reconstructed features (`p×d_feat`) and edge probabilities (`p×p`).
    pub fn decode(&self, zhat: &Mat, x: &Mat) -> Result<(Mat, Mat)> {
        self.check(zhat, x)?;
        let mut t = Tape::new();
        let b = self.params.bind_frozen(&mut t);
        let z = t.constant(zhat.clone());
        let xv = t.constant(x.clone());
        let (_, xhat, logits) = self.forward(&mut t, &b, z, xv);
        Ok((t.value(xhat).clone(), edge_probabilities(t.value(logits))))
    }
}

impl GraphDecoder {
    /// Decoding loss of one subgraph and its gradient with respect to the decoder parameters.
    pub fn loss_and_grads(&self, zhat: &Mat, x: &Mat, adj: &Mat, weighting: EdgeWeighting) -> Result<(f64, Vec<Mat>)> {
        self.check(zhat, x)?;
        if adj.dim() != (x.nrows(), x.nrows()) {
            return Err(Error::dim(format!("adjacency {:?} for {} nodes", adj.dim(), x.nrows())));
        }
        let mut t = Tape::new();
        let b = self.params.bind(&mut t);
        let z = t.constant(zhat.clone());
        let xv = t.constant(x.clone());
        let (_, xhat, logits) = self.forward(&mut t, &b, z, xv);
        let loss = dec_loss_on_tape(&mut t, logits, xhat, x, adj, weighting);
        let g = t.backward(loss);
        Ok((t.scalar(loss), self.params.grads(&b, &g)))
    }
}

/// Sigmoid of inner-product logits, symmetrized so `Â = Âᵀ` holds bit-for-bit.
pub fn edge_probabilities(logits: &Mat) -> Mat {
    let n = logits.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        sigmoid(logits[[a, b]])
    })
}

/// Weight mask over off-diagonal pairs for the edge term.
pub(crate) fn edge_weights(adj: &Mat, weighting: EdgeWeighting) -> Mat {
    let n = adj.nrows();
    let off_diag = |i: usize, j: usize| if i == j { 0.0 } else { 1.0 };
    match weighting {
        EdgeWeighting::Uniform => Array2::from_shape_fn((n, n), |(i, j)| off_diag(i, j)),
        EdgeWeighting::Balanced => {
            let pos = adj.iter().filter(|&&a| a > 0.5).count() as f64;
            let neg = (n * n.saturating_sub(1)) as f64 - pos;
            Array2::from_shape_fn((n, n), |(i, j)| {
                if i == j {
                    0.0
                } else if adj[[i, j]] > 0.5 {
                    0.5 / pos
                } else {
                    0.5 / neg.max(1.0)
                }
            })
        }
    }
}

/// Edge BCE over off-diagonal pairs plus the summed squared feature error.
pub fn dec_loss(xhat: &Mat, ahat: &Mat, x: &Mat, adj: &Mat) -> Result<f64> {
    dec_loss_weighted(xhat, ahat, x, adj, EdgeWeighting::Uniform)
}

pub fn dec_loss_weighted(xhat: &Mat, ahat: &Mat, x: &Mat, adj: &Mat, weighting: EdgeWeighting) -> Result<f64> {
    if xhat.dim() != x.dim() {
        return Err(Error::dim(format!("features {:?} vs reconstruction {:?}", x.dim(), xhat.dim())));
    }
    if ahat.dim() != adj.dim() || adj.nrows() != x.nrows() {
        return Err(Error::dim(format!("adjacency {:?} vs reconstruction {:?}", adj.dim(), ahat.dim())));
    }
    let mut t = Tape::new();
    let p = t.constant(ahat.clone());
    let bce = t.bce(p, Rc::new(adj.clone()), Rc::new(edge_weights(adj, weighting)));
    Ok(t.scalar(bce) + (xhat - x).mapv(|v| v * v).sum())
}

/// Tape form of the decoding loss.
pub(crate) fn dec_loss_on_tape(
    t: &mut Tape,
    logits: Var,
    xhat: Var,
    x: &Mat,
    adj: &Mat,
    weighting: EdgeWeighting,
) -> Var {
    let p = t.sigmoid(logits);
    let bce = t.bce(p, Rc::new(adj.clone()), Rc::new(edge_weights(adj, weighting)));
    let target = t.constant(x.clone());
    let diff = t.sub(xhat, target);
    let sq = t.mul(diff, diff);
    let sse = t.sum(sq);
    t.add(bce, sse)
}

/// Weights of the quantization and decoding terms in the tokenizer objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.4, lambda2: 1.0 }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = LossWeights { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1.is_finite() && self.lambda2.is_finite(),
            "loss weights must be finite and nonnegative"
        );
        Ok(())
    }
}

/// The three tokenizer loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub diffusion: f64,
    pub quant: f64,
    pub decode: f64,
}

/// `L_diff + λ1·L_quant + λ2·L_dec`
pub fn total_loss(parts: LossParts, w: LossWeights) -> f64 {
    parts.diffusion + w.lambda1 * parts.quant + w.lambda2 * parts.decode
}
