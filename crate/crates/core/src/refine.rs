//! Turning target subgraphs into prompts, generated blocks back into refined
//! subgraphs, scoring refined subgraphs, and stitching them into one graph.

use std::collections::HashMap;

use log::warn;

use crate::autograd::Mat;
use crate::error::{ensure, Result};
use crate::gnn::GnnModel;
use crate::graph::{EgoSubgraph, Graph};
use crate::grpo::{median_bandwidth, mmd2, reward_align, reward_conf, reward_final, CentroidMatrix, RewardConfig, RewardParts};
use crate::lm::{generate, prompt_from_block, Generation, RestorerLm, SamplingConfig};
use crate::tokenizer::{TokenGrid, TokenizerBundle};

/// `BOS` followed by the quantized latent block of the subgraph.
pub fn target_prompt(sub: &EgoSubgraph, bundle: &TokenizerBundle, gnn: &GnnModel) -> Result<Vec<usize>> {
    let grid = bundle.tokenize(sub, gnn)?;
    Ok(prompt_from_block(&grid.tokens))
}

/// Decodes `block` with the subgraph's own features as queries and thresholds
/// the edge probabilities at 0.5.
pub fn refined_from_block(sub: &EgoSubgraph, block: &[usize], bundle: &TokenizerBundle) -> Result<EgoSubgraph> {
    let grid = TokenGrid::new(0, block.to_vec(), bundle.codebook.size())?;
    let (xhat, ahat) = bundle.decode_tokens(&grid, sub.features())?;
    let p = sub.node_count();
    let adj = Mat::from_shape_fn((p, p), |(i, j)| if i != j && ahat[[i, j]] > 0.5 { 1.0 } else { 0.0 });
    sub.with_content(adj, xhat)
}

/// Refined subgraph from a generation, `None` when it holds no complete block.
pub fn refine_with(sub: &EgoSubgraph, g: &Generation, bundle: &TokenizerBundle) -> Result<Option<EgoSubgraph>> {
    match g.final_block() {
        Some(block) => Ok(Some(refined_from_block(sub, &block, bundle)?)),
        None => Ok(None),
    }
}

/// Full refinement of one target subgraph. Falls back to the input when
/// generation yields no complete block.
pub fn refine_target(
    sub: &EgoSubgraph,
    bundle: &TokenizerBundle,
    lm: &RestorerLm,
    gnn: &GnnModel,
    sampling: &SamplingConfig,
    max_blocks: usize,
) -> Result<EgoSubgraph> {
    let prompt = target_prompt(sub, bundle, gnn)?;
    let g = generate(lm, &prompt, sampling, max_blocks)?;
    match refine_with(sub, &g, bundle)? {
        Some(r) => Ok(r),
        None => {
            warn!("no complete block generated for node {}; keeping the input subgraph", sub.center());
            Ok(sub.clone())
        }
    }
}

/// Scores refined subgraphs with the frozen GNN and the source centroids.
#[derive(Clone, Debug)]
pub struct RewardModel<'a> {
    pub gnn: &'a GnnModel,
    pub centroids: &'a CentroidMatrix,
    pub config: RewardConfig,
}

impl<'a> RewardModel<'a> {
    pub fn new(gnn: &'a GnnModel, centroids: &'a CentroidMatrix, config: RewardConfig) -> Result<Self> {
        config.validate()?;
        ensure!(
            centroids.rows.ncols() == gnn.hidden_dim(),
            "centroid width {} differs from GNN width {}",
            centroids.rows.ncols(),
            gnn.hidden_dim()
        );
        Ok(RewardModel { gnn, centroids, config })
    }

    /// Fixes the kernel bandwidth from a batch of refined subgraphs if it is unset.
    pub fn calibrate(&mut self, batch: &[EgoSubgraph]) -> Result<f64> {
        if let Some(s) = self.config.sigma {
            return Ok(s);
        }
        let mut rows = Vec::new();
        for sub in batch {
            let h = self.gnn.embed(sub)?;
            rows.extend(h.rows().into_iter().map(|r| r.to_owned()));
        }
        let mut all = Mat::zeros((rows.len(), self.centroids.rows.ncols()));
        for (i, r) in rows.iter().enumerate() {
            all.row_mut(i).assign(r);
        }
        let sigma = median_bandwidth(&all, &self.centroids.rows);
        self.config.sigma = Some(sigma);
        Ok(sigma)
    }

    /// Reward parts for a refined subgraph, `None` when MMD is undefined (fewer than two nodes).
    pub fn score(&self, refined: &EgoSubgraph) -> Result<Option<RewardParts>> {
        let sigma = self.config.sigma.unwrap_or(1.0);
        let conf = reward_conf(&self.gnn.predict(refined)?);
        if refined.node_count() < 2 || self.centroids.num_classes() < 2 {
            return Ok(None);
        }
        let emb = self.gnn.embed(refined)?;
        let align = reward_align(mmd2(&emb, &self.centroids.rows, sigma)?, self.config.gamma);
        Ok(Some(RewardParts { align, conf, total: reward_final(align, conf, &self.config) }))
    }
}

/// Combines refined subgraphs into one graph. Features are averaged over the
/// subgraphs containing a node; an edge is kept when most subgraphs covering
/// both endpoints contain it, with the input graph deciding ties and
/// uncovered pairs.
pub fn stitch(g: &Graph, subs: &[EgoSubgraph]) -> Result<Graph> {
    let n = g.node_count();
    let d = g.feature_dim();
    let mut feat_sum = Mat::zeros((n, d));
    let mut feat_count = vec![0usize; n];
    let mut votes: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    for sub in subs {
        ensure!(sub.features().ncols() == d, "refined features have width {}, graph has {d}", sub.features().ncols());
        let nodes = sub.nodes();
        ensure!(nodes.iter().all(|&u| u < n), "subgraph node outside the graph");
        for (i, &u) in nodes.iter().enumerate() {
            let mut r = feat_sum.row_mut(u);
            r += &sub.features().row(i);
            feat_count[u] += 1;
            for (j, &v) in nodes.iter().enumerate().skip(i + 1) {
                let key = (u.min(v), u.max(v));
                let e = votes.entry(key).or_insert((0, 0));
                if sub.adjacency()[[i, j]] > 0.5 {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
        }
    }
    let mut features = g.features().clone();
    for u in 0..n {
        if feat_count[u] > 0 {
            let mean = &feat_sum.row(u) / feat_count[u] as f64;
            features.row_mut(u).assign(&mean);
        }
    }
    let mut edges: Vec<(usize, usize)> = g.edges().iter().copied().filter(|e| !votes.contains_key(e)).collect();
    for (&(u, v), &(yes, no)) in &votes {
        let keep = match yes.cmp(&no) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => g.has_edge(u, v),
        };
        if keep {
            edges.push((u, v));
        }
    }
    edges.sort_unstable();
    Graph::new(n, edges, features, g.labels().map(|l| l.to_vec()), g.num_classes())
}
