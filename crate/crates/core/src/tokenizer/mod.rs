//! Graph tokenizer: compresses ego-subgraph embeddings into latent blocks,
//! learns a latent restoration (denoising) process, discretizes latents into
//! codebook tokens, and decodes tokens back to features and adjacency.

mod decoder;
mod diffusion;
mod encoder;
mod quantizer;

pub use decoder::{
    dec_loss, dec_loss_weighted, edge_probabilities, total_loss, EdgeWeighting, GraphDecoder, LossParts, LossWeights,
};
pub use diffusion::{
    build_trajectory, denoise_step, diffusion_loss, forward_diffuse, make_schedule, DenoiserNet, NoisePredictor,
    NoiseSchedule, NoiseStream, RestorationTrajectory,
};
pub use encoder::QFormerEncoder;
pub use quantizer::{dequantize, kmeans, quant_loss, quant_loss_grads, quantize, quantize_at, straight_through, Codebook, TokenGrid};

use std::collections::BTreeSet;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::error::{ensure, Result};
use crate::gnn::GnnModel;
use crate::graph::{perturb_edges, EgoSubgraph};
use crate::nn::ParamSet;
use crate::optim::Adam;
use crate::rng::{derive, normal_mat, seeded};

use quantizer::{quant_loss_on_tape, sample_rows, CODEBOOK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Latent rows per block (`K`).
    pub num_queries: usize,
    /// Codebook entries (`M`).
    pub codebook_size: usize,
    /// Restoration steps (`T`).
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub heads: usize,
    pub denoiser_hidden: usize,
    pub weights: LossWeights,
    pub edge_weighting: EdgeWeighting,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Subgraphs whose latents seed the codebook by k-means.
    pub warmup_subgraphs: usize,
    pub kmeans_iters: usize,
    /// Replace the encoder with a seeded choice of `K` node embeddings.
    pub no_encoder: bool,
    /// Build trajectories by edge perturbation instead of latent diffusion.
    pub no_diffusion: bool,
    /// Largest add/remove ratio used by the perturbation trajectories.
    pub perturb_max_ratio: f64,
    /// Std of Gaussian noise added to the decoder's query features during
    /// training, so reconstruction has to draw on the tokens.
    pub query_noise: f64,
    /// Residual connection around the decoder's cross-attention.
    pub residual_decoder: bool,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            num_queries: 128,
            codebook_size: 128,
            steps: 10,
            beta_min: 1e-4,
            beta_max: 0.2,
            heads: 4,
            denoiser_hidden: 64,
            weights: LossWeights::default(),
            edge_weighting: EdgeWeighting::Uniform,
            lr: 1e-3,
            epochs: 50,
            batch_size: 8,
            warmup_subgraphs: 64,
            kmeans_iters: 25,
            no_encoder: false,
            no_diffusion: false,
            perturb_max_ratio: 0.5,
            query_noise: 0.0,
            residual_decoder: false,
            seed: 0,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_queries >= 1, "K must be positive");
        ensure!(self.codebook_size >= 1, "M must be positive");
        ensure!(self.heads >= 1 && self.denoiser_hidden >= 1, "heads and denoiser width must be positive");
        ensure!(self.batch_size >= 1, "batch size must be positive");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive");
        ensure!((0.0..=1.0).contains(&self.perturb_max_ratio), "perturbation ratio must lie in [0, 1]");
        ensure!(self.query_noise >= 0.0 && self.query_noise.is_finite(), "query noise must be nonnegative");
        self.weights.validate()?;
        make_schedule(self.steps, self.beta_min, self.beta_max)?;
        Ok(())
    }
}

/// The trained tokenizer: encoder, denoiser, schedule, codebook, and decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerBundle {
    pub config: TokenizerConfig,
    pub encoder: QFormerEncoder,
    pub denoiser: DenoiserNet,
    pub schedule: NoiseSchedule,
    pub codebook: Codebook,
    pub decoder: GraphDecoder,
}

/// Per-epoch mean loss components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizerLog {
    pub epochs: Vec<LossParts>,
    /// Fraction of codebook entries used by the clean latents of the training set.
    pub utilization: f64,
}

/// `K` rows drawn from `h` without replacement, cycling through the draw when `p < K`.
pub fn select_nodes(h: &Mat, k: usize, seed: u64) -> Mat {
    let p = h.nrows();
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut seeded(seed));
    let mut out = Mat::zeros((k, h.ncols()));
    for i in 0..k {
        out.row_mut(i).assign(&h.row(order[i % p]));
    }
    out
}

impl TokenizerBundle {
    pub fn new(width: usize, feat_dim: usize, config: TokenizerConfig) -> Result<Self> {
        config.validate()?;
        ensure!(width % config.heads == 0, "width {width} is not divisible by {} heads", config.heads);
        let s = config.seed;
        Ok(TokenizerBundle {
            encoder: QFormerEncoder::new(config.num_queries, width, config.heads, derive(s, 11)),
            denoiser: DenoiserNet::new(config.num_queries, width, config.denoiser_hidden, derive(s, 12)),
            schedule: make_schedule(config.steps, config.beta_min, config.beta_max)?,
            codebook: Codebook::random(config.codebook_size, width, derive(s, 13))?,
            decoder: GraphDecoder::new(feat_dim, width, config.heads, derive(s, 14)).with_residual(config.residual_decoder),
            config,
        })
    }

    pub fn width(&self) -> usize {
        self.encoder.width()
    }

    pub fn num_queries(&self) -> usize {
        self.config.num_queries
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    /// Latent block for node embeddings `h`. `seed` only matters without the encoder.
    pub fn latents(&self, h: &Mat, seed: u64) -> Result<Mat> {
        if self.config.no_encoder {
            ensure!(h.nrows() >= 1, "cannot select from an empty node set");
            Ok(select_nodes(h, self.config.num_queries, seed))
        } else {
            self.encoder.encode(h)
        }
    }

    /// Clean token block of a subgraph under the frozen GNN.
    pub fn tokenize(&self, sub: &EgoSubgraph, gnn: &GnnModel) -> Result<TokenGrid> {
        let h = gnn.embed(sub)?;
        quantize(&self.latents(&h, sub.center() as u64)?, &self.codebook)
    }

    /// Token blocks `S_T … S_0` of a subgraph, most corrupted first.
    pub fn trajectory_tokens(&self, sub: &EgoSubgraph, gnn: &GnnModel, seed: u64) -> Result<Vec<TokenGrid>> {
        let steps = self.steps();
        let node_seed = sub.center() as u64;
        if self.config.no_diffusion {
            let mut grids = Vec::with_capacity(steps + 1);
            for t in (0..=steps).rev() {
                let ratio = self.config.perturb_max_ratio * t as f64 / steps as f64;
                let noisy = perturb_edges(sub, ratio, ratio, derive(seed, t as u64))?;
                let h = gnn.embed(&noisy)?;
                grids.push(quantize_at(&self.latents(&h, node_seed)?, &self.codebook, t)?);
            }
            return Ok(grids);
        }
        let h = gnn.embed(sub)?;
        let z0 = self.latents(&h, node_seed)?;
        let eps = normal_mat(&mut seeded(derive(seed, 1)), z0.nrows(), z0.ncols(), 1.0);
        let zt = forward_diffuse(&z0, steps, &eps, &self.schedule)?;
        let traj = build_trajectory(&self.denoiser, &self.schedule, &zt, NoiseStream::Seeded(derive(seed, 2)))?;
        traj.latents
            .iter()
            .enumerate()
            .map(|(i, z)| quantize_at(z, &self.codebook, steps - i))
            .collect()
    }

    /// Features and edge probabilities decoded from a token block, with `x`
    /// supplying the decoder queries.
    pub fn decode_tokens(&self, grid: &TokenGrid, x: &Mat) -> Result<(Mat, Mat)> {
        let zhat = dequantize(grid, &self.codebook)?;
        self.decoder.decode(&zhat, x)
    }

    /// Fraction of codebook entries appearing in any of `grids`.
    pub fn utilization<'a>(&self, grids: impl IntoIterator<Item = &'a TokenGrid>) -> f64 {
        let used: BTreeSet<usize> = grids.into_iter().flat_map(|g| g.tokens.iter().copied()).collect();
        used.len() as f64 / self.codebook.size() as f64
    }
}

struct Prepared<'a> {
    sub: &'a EgoSubgraph,
    h: Mat,
}

/// Joint training of encoder, denoiser, codebook, and decoder on source
/// subgraphs with the frozen GNN supplying node embeddings.
pub fn train_tokenizer(
    subs: &[EgoSubgraph],
    gnn: &GnnModel,
    config: &TokenizerConfig,
) -> Result<(TokenizerBundle, TokenizerLog)> {
    ensure!(!subs.is_empty(), "tokenizer training needs at least one subgraph");
    let mut bundle = TokenizerBundle::new(gnn.hidden_dim(), gnn.input_dim(), config.clone())?;
    let data: Vec<Prepared> = subs
        .iter()
        .map(|sub| Ok(Prepared { sub, h: gnn.embed(sub)? }))
        .collect::<Result<_>>()?;

    let mut rng = seeded(derive(config.seed, 20));
    let warm = sample_rows(data.len(), config.warmup_subgraphs.max(1), &mut rng);
    let mut rows = Vec::new();
    for &i in &warm {
        let z = bundle.latents(&data[i].h, data[i].sub.center() as u64)?;
        rows.extend(z.rows().into_iter().map(|r| r.to_owned()));
    }
    let cap = sample_rows(rows.len(), 4096, &mut rng);
    let mut pts = Mat::zeros((cap.len(), bundle.width()));
    for (r, &i) in cap.iter().enumerate() {
        pts.row_mut(r).assign(&rows[i]);
    }
    bundle.codebook = Codebook::new(kmeans(&pts, config.codebook_size, config.kmeans_iters, derive(config.seed, 21))?)?;

    let mut opt_enc = Adam::new(&bundle.encoder.params, config.lr);
    let mut opt_den = Adam::new(&bundle.denoiser.params, config.lr);
    let mut opt_cb = Adam::new(&bundle.codebook.params, config.lr);
    let mut opt_dec = Adam::new(&bundle.decoder.params, config.lr);
    let mut log = TokenizerLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        for batch in order.chunks(config.batch_size) {
            let mut t = Tape::new();
            let use_encoder = !config.no_encoder;
            let b_enc = if use_encoder { Some(bundle.encoder.params.bind(&mut t)) } else { None };
            let b_den = bundle.denoiser.params.bind(&mut t);
            let b_cb = bundle.codebook.params.bind(&mut t);
            let b_dec = bundle.decoder.params.bind(&mut t);
            let mut total = None;
            for &i in batch {
                let item = &data[i];
                let z = match &b_enc {
                    Some(b) => {
                        let nodes = t.constant(item.h.clone());
                        bundle.encoder.forward(&mut t, b, nodes)
                    }
                    None => t.constant(select_nodes(&item.h, config.num_queries, item.sub.center() as u64)),
                };
                let zval = t.value(z).clone();
                let tokens = quantize(&zval, &bundle.codebook)?.tokens;
                let codes = dequantize(&TokenGrid { step: 0, tokens: tokens.clone() }, &bundle.codebook)?;

                let mut parts = Vec::with_capacity(3);
                if !config.no_diffusion {
                    let step = rng.random_range(1..=bundle.schedule.steps());
                    let eps = normal_mat(&mut rng, zval.nrows(), zval.ncols(), 1.0);
                    let z_sg = t.detach(z);
                    let l = bundle.denoiser.loss_on_tape(&mut t, &b_den, z_sg, step, &eps, &bundle.schedule);
                    sums.diffusion += t.scalar(l);
                    parts.push(l);
                }
                let lq = quant_loss_on_tape(&mut t, &b_cb, z, &tokens);
                sums.quant += t.scalar(lq);
                parts.push(t.scale(lq, config.weights.lambda1));

                let zq = straight_through(&mut t, z, &codes);
                let mut xq = item.sub.features().clone();
                if config.query_noise > 0.0 {
                    xq += &normal_mat(&mut rng, xq.nrows(), xq.ncols(), config.query_noise);
                }
                let xv = t.constant(xq);
                let (_, xhat, logits) = bundle.decoder.forward(&mut t, &b_dec, zq, xv);
                let ld = decoder::dec_loss_on_tape(
                    &mut t,
                    logits,
                    xhat,
                    item.sub.features(),
                    item.sub.adjacency(),
                    config.edge_weighting,
                );
                sums.decode += t.scalar(ld);
                parts.push(t.scale(ld, config.weights.lambda2));

                for p in parts {
                    total = Some(match total {
                        None => p,
                        Some(acc) => t.add(acc, p),
                    });
                }
            }
            let loss = t.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
            let grads = t.backward(loss);
            if let Some(b) = &b_enc {
                let g = bundle.encoder.params.grads(b, &grads);
                opt_enc.step(&mut bundle.encoder.params, &g);
            }
            let g = bundle.denoiser.params.grads(&b_den, &grads);
            opt_den.step(&mut bundle.denoiser.params, &g);
            let g = bundle.codebook.params.grads(&b_cb, &grads);
            opt_cb.step(&mut bundle.codebook.params, &g);
            let g = bundle.decoder.params.grads(&b_dec, &grads);
            opt_dec.step(&mut bundle.decoder.params, &g);
        }
        let n = data.len() as f64;
        let mean = LossParts { diffusion: sums.diffusion / n, quant: sums.quant / n, decode: sums.decode / n };
        info!(
            "tokenizer epoch {epoch}: diff {:.5} quant {:.5} dec {:.5}",
            mean.diffusion, mean.quant, mean.decode
        );
        log.epochs.push(mean);
    }

    let grids = data
        .iter()
        .map(|d| quantize(&bundle.latents(&d.h, d.sub.center() as u64)?, &bundle.codebook))
        .collect::<Result<Vec<_>>>()?;
    log.utilization = bundle.utilization(&grids);
    debug_assert!(bundle.codebook.params.get(CODEBOOK).iter().all(|x| x.is_finite()));
    Ok((bundle, log))
}

/// Every parameter of the bundle's trainable parts, for comparisons.
pub fn bundle_params(b: &TokenizerBundle) -> Vec<&ParamSet> {
    vec![&b.encoder.params, &b.denoiser.params, &b.codebook.params, &b.decoder.params]
}
