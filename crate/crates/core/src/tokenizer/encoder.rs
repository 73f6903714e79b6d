use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{attention, init_attention, init_mlp, mlp, Activation, Bound, ParamSet};
use crate::rng::{normal_mat, seeded};

/// Compresses a variable number of node embeddings into `K` latent rows:
/// learnable queries attend to each other, then to the node embeddings,
/// and an MLP maps the result to the latent block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QFormerEncoder {
    pub(crate) num_queries: usize,
    pub(crate) width: usize,
    pub(crate) heads: usize,
    pub(crate) params: ParamSet,
}

impl QFormerEncoder {
    pub fn new(num_queries: usize, width: usize, heads: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut params = ParamSet::new();
        params.insert("enc.queries", normal_mat(&mut rng, num_queries, width, 1.0));
        init_attention(&mut params, "enc.self", width, &mut rng);
        init_attention(&mut params, "enc.cross", width, &mut rng);
        init_mlp(&mut params, "enc.mlp", (width, 2 * width, width), &mut rng);
        QFormerEncoder { num_queries, width, heads, params }
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
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

    pub(crate) fn forward(&self, t: &mut Tape, b: &Bound, nodes: Var) -> Var {
        let q = b.get("enc.queries");
        let q = attention(t, b, "enc.self", q, q, self.heads, None);
        let hq = attention(t, b, "enc.cross", q, nodes, self.heads, None);
        mlp(t, b, "enc.mlp", hq, Activation::Gelu)
    }

    /// `K×d` latent block for node embeddings `h` (`p×d`, `p ≥ 1`).
    pub fn encode(&self, h: &Mat) -> Result<Mat> {
        if h.ncols() != self.width {
            return Err(Error::dim(format!("node embeddings have width {}, encoder expects {}", h.ncols(), self.width)));
        }
        if h.nrows() == 0 {
            return Err(Error::contract("cannot encode an empty node set"));
        }
        let mut t = Tape::new();
        let b = self.params.bind_frozen(&mut t);
        let nodes = t.constant(h.clone());
        let z = self.forward(&mut t, &b, nodes);
        Ok(t.value(z).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_is_independent_of_node_count() {
        let enc = QFormerEncoder::new(6, 8, 2, 1);
        let mut rng = seeded(2);
        for p in [1, 3, 17] {
            let z = enc.encode(&normal_mat(&mut rng, p, 8, 1.0)).unwrap();
            assert_eq!(z.dim(), (6, 8));
            assert!(z.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn default_query_count() {
        let enc = QFormerEncoder::new(128, 16, 4, 0);
        let h = normal_mat(&mut seeded(1), 5, 16, 1.0);
        assert_eq!(enc.encode(&h).unwrap().nrows(), 128);
    }

    #[test]
    fn invariant_to_node_order() {
        let enc = QFormerEncoder::new(4, 8, 2, 3);
        let h = normal_mat(&mut seeded(4), 7, 8, 1.0);
        let perm = [6, 2, 0, 5, 1, 3, 4];
        let mut hp = h.clone();
        for (i, &p) in perm.iter().enumerate() {
            hp.row_mut(i).assign(&h.row(p));
        }
        let d = enc.encode(&h).unwrap() - enc.encode(&hp).unwrap();
        assert!(d.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn width_mismatch() {
        let enc = QFormerEncoder::new(4, 8, 2, 3);
        assert!(matches!(enc.encode(&Mat::zeros((3, 5))), Err(Error::Dimension(_))));
    }
}
