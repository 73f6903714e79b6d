//! Vector quantization of latent blocks against a learnable codebook.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{Bound, ParamSet};
use crate::rng::{normal_mat, seeded};

pub(crate) const CODEBOOK: &str = "vq.codebook";

/// `M` code vectors of width `d`, stored as the rows of an `M×d` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub(crate) params: ParamSet,
}

impl Codebook {
    pub fn new(vectors: Mat) -> Result<Self> {
        ensure!(vectors.nrows() > 0, "codebook must have at least one vector");
        ensure!(vectors.iter().all(|x| x.is_finite()), "codebook vectors must be finite");
        let mut params = ParamSet::new();
        params.insert(CODEBOOK, vectors);
        Ok(Codebook { params })
    }

    pub fn random(size: usize, width: usize, seed: u64) -> Result<Self> {
        Codebook::new(normal_mat(&mut seeded(seed), size, width, 1.0))
    }

    pub fn vectors(&self) -> &Mat {
        self.params.get(CODEBOOK)
    }

    pub fn size(&self) -> usize {
        self.vectors().nrows()
    }

    pub fn width(&self) -> usize {
        self.vectors().ncols()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// The `K` token ids of one latent block at restoration step `step`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub step: usize,
    pub tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(step: usize, tokens: Vec<usize>, codebook_size: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&s| s >= codebook_size) {
            return Err(Error::contract(format!("token {bad} outside codebook of size {codebook_size}")));
        }
        Ok(TokenGrid { step, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `vectors` to `row`, lowest index on ties.
pub(crate) fn nearest(row: ndarray::ArrayView1<f64>, vectors: &Mat) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, p) in vectors.rows().into_iter().enumerate() {
        let d = sq_dist(row, p);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Nearest code per row of `z`, ties broken toward the lowest index.
pub fn quantize(z: &Mat, cb: &Codebook) -> Result<TokenGrid> {
    quantize_at(z, cb, 0)
}

/// [`quantize`] with the restoration step recorded on the grid.
pub fn quantize_at(z: &Mat, cb: &Codebook, step: usize) -> Result<TokenGrid> {
    if z.ncols() != cb.width() {
        return Err(Error::dim(format!("latent width {} vs codebook width {}", z.ncols(), cb.width())));
    }
    let tokens = z.rows().into_iter().map(|r| nearest(r, cb.vectors())).collect();
    Ok(TokenGrid { step, tokens })
}

/// Looks up the code vector of every token.
pub fn dequantize(s: &TokenGrid, cb: &Codebook) -> Result<Mat> {
    let m = cb.size();
    if let Some(&bad) = s.tokens.iter().find(|&&t| t >= m) {
        return Err(Error::contract(format!("token {bad} outside codebook of size {m}")));
    }
    let v = cb.vectors();
    let mut out = Mat::zeros((s.len(), cb.width()));
    for (i, &t) in s.tokens.iter().enumerate() {
        out.row_mut(i).assign(&v.row(t));
    }
    Ok(out)
}

/// Codebook term `‖sg[Z] − p_s‖²` plus commitment term `‖Z − sg[p_s]‖²`,
/// each averaged over rows.
pub fn quant_loss(z: &Mat, cb: &Codebook) -> Result<f64> {
    let s = quantize(z, cb)?;
    let p = dequantize(&s, cb)?;
    let per = (z - &p).mapv(|x| x * x).sum() / z.nrows().max(1) as f64;
    Ok(2.0 * per)
}

/// Gradients of [`quant_loss`] with respect to `Z` and to the codebook.
pub fn quant_loss_grads(z: &Mat, cb: &Codebook) -> Result<(f64, Mat, Mat)> {
    let s = quantize(z, cb)?;
    let mut tape = Tape::new();
    let b = cb.params.bind(&mut tape);
    let zv = tape.param(z.clone());
    let loss = quant_loss_on_tape(&mut tape, &b, zv, &s.tokens);
    let grads = tape.backward(loss);
    Ok((
        tape.scalar(loss),
        grads.get_or_zeros(zv, z.dim()),
        grads.get_or_zeros(b.get(CODEBOOK), cb.vectors().dim()),
    ))
}

/// Tape form of the quantization loss for precomputed `tokens`.
pub(crate) fn quant_loss_on_tape(tape: &mut Tape, b: &Bound, z: Var, tokens: &[usize]) -> Var {
    let rows = tokens.len() as f64;
    let codes = tape.gather_rows(b.get(CODEBOOK), tokens);
    let z_sg = tape.detach(z);
    let codes_sg = tape.detach(codes);
    let d1 = tape.sub(z_sg, codes);
    let sq1 = tape.mul(d1, d1);
    let t1 = tape.sum(sq1);
    let d2 = tape.sub(z, codes_sg);
    let sq2 = tape.mul(d2, d2);
    let t2 = tape.sum(sq2);
    let both = tape.add(t1, t2);
    tape.scale(both, 1.0 / rows)
}

/// Straight-through quantization: forward value is the looked-up codes,
/// the gradient passes to `z` unchanged.
pub fn straight_through(tape: &mut Tape, z: Var, codes: &Mat) -> Var {
    let offset = codes - tape.value(z);
    let offset = tape.constant(offset);
    tape.add(z, offset)
}

/// Lloyd's k-means with k-means++ seeding. When there are fewer distinct
/// points than `k`, the remaining centers are jittered copies of points.
pub fn kmeans(points: &Mat, k: usize, iters: usize, seed: u64) -> Result<Mat> {
    ensure!(k >= 1, "k must be positive");
    ensure!(points.nrows() >= 1, "k-means needs at least one point");
    let mut rng = seeded(seed);
    let n = points.nrows();
    let dim = points.ncols();
    let mut centers = Mat::zeros((k, dim));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|r| sq_dist(r, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 1e-18 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        if total <= 1e-18 {
            let jitter = normal_mat(&mut rng, 1, dim, 1e-3);
            let mut row = centers.row_mut(c);
            row += &jitter.row(0);
        }
        for (i, r) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centers.row(c)));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, r) in points.rows().into_iter().enumerate() {
            let j = nearest(r, &centers);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        let mut sums = Mat::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &j) in assign.iter().enumerate() {
            let mut row = sums.row_mut(j);
            row += &points.row(i);
            counts[j] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                centers.row_mut(j).assign(&mean);
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centers)
}

/// A uniformly random subset of row indices, used to cap warm-up batches.
pub(crate) fn sample_rows(n: usize, cap: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, cap).into_vec();
        v.sort_unstable();
        v
    }
}
