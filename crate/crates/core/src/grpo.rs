//! Rewards, group-relative advantages, the KL-regularized policy objective,
//! and the policy update for the restorer LM.

use std::fs;
use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::gnn::{mean_negative_entropy, PredictionTable};
use crate::lm::{decision_logits, generate, Generation, RestorerLm, SamplingConfig};
use crate::nn::ParamSet;
use crate::optim::Adam;
use crate::rng::derive;

/// Per-class mean of source node embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidMatrix {
    pub rows: Mat,
    pub counts: Vec<usize>,
}

pub fn build_centroids(h: &Mat, labels: &[usize], num_classes: usize) -> Result<CentroidMatrix> {
    if h.nrows() != labels.len() {
        return Err(Error::dim(format!("{} embeddings vs {} labels", h.nrows(), labels.len())));
    }
    let mut rows = Mat::zeros((num_classes, h.ncols()));
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        ensure!(y < num_classes, "label {y} outside {num_classes} classes");
        let mut r = rows.row_mut(y);
        r += &h.row(i);
        counts[y] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        ensure!(n > 0, "class {c} has no members");
        let mut r = rows.row_mut(c);
        r /= n as f64;
    }
    Ok(CentroidMatrix { rows, counts })
}

#[derive(Serialize, Deserialize)]
struct CentroidFile {
    format: String,
    version: u32,
    classes: usize,
    dim: usize,
    counts: Vec<usize>,
    values: Vec<f64>,
}

const CENTROID_FORMAT: &str = "graft-centroids";

impl CentroidMatrix {
    pub fn num_classes(&self) -> usize {
        self.rows.nrows()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CentroidFile {
            format: CENTROID_FORMAT.into(),
            version: 1,
            classes: self.rows.nrows(),
            dim: self.rows.ncols(),
            counts: self.counts.clone(),
            values: self.rows.iter().copied().collect(),
        };
        fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: CentroidFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.format != CENTROID_FORMAT || file.version != 1 {
            return Err(Error::Schema(format!("unsupported centroid file {} v{}", file.format, file.version)));
        }
        if file.values.len() != file.classes * file.dim || file.counts.len() != file.classes {
            return Err(Error::Schema("centroid file sizes disagree with its header".into()));
        }
        let rows = Mat::from_shape_vec((file.classes, file.dim), file.values)
            .map_err(|e| Error::Schema(e.to_string()))?;
        Ok(CentroidMatrix { rows, counts: file.counts })
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased squared MMD between two samples under a Gaussian kernel of bandwidth `sigma`.
pub fn mmd2(xa: &Mat, xb: &Mat, sigma: f64) -> Result<f64> {
    ensure!(xa.nrows() >= 2 && xb.nrows() >= 2, "MMD needs at least two points per sample");
    ensure!(sigma > 0.0, "kernel bandwidth must be positive");
    if xa.ncols() != xb.ncols() {
        return Err(Error::dim(format!("sample widths {} and {}", xa.ncols(), xb.ncols())));
    }
    let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp();
    let within = |x: &Mat| {
        let n = x.nrows();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += k(x.row(i), x.row(j));
            }
        }
        2.0 * s / (n * (n - 1)) as f64
    };
    // summed in sorted order so that swapping the samples is exact
    let mut cross: Vec<f64> = xa.rows().into_iter().flat_map(|a| xb.rows().into_iter().map(move |b| k(a, b))).collect();
    cross.sort_by(f64::total_cmp);
    let cross: f64 = cross.iter().sum();
    let (wa, wb) = (within(xa), within(xb));
    let (lo, hi) = if wa <= wb { (wa, wb) } else { (wb, wa) };
    Ok(lo + hi - 2.0 * cross / (xa.nrows() * xb.nrows()) as f64)
}

/// Bandwidth from the median pairwise squared distance between the rows of `xa` and `xb`.
pub fn median_bandwidth(xa: &Mat, xb: &Mat) -> f64 {
    let mut d: Vec<f64> = xa.rows().into_iter().flat_map(|a| xb.rows().into_iter().map(move |b| sq_dist(a, b))).collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 1e-12 {
        (med / 2.0).sqrt()
    } else {
        1.0
    }
}

/// `exp(−γ·max(d2, 0))`
pub fn reward_align(d2: f64, gamma: f64) -> f64 {
    (-gamma * d2.max(0.0)).exp()
}

/// Mean negative entropy of the predictions: zero at one-hot rows.
pub fn reward_conf(preds: &PredictionTable) -> f64 {
    mean_negative_entropy(preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub gamma: f64,
    /// Kernel bandwidth; chosen by the median heuristic on the first batch when unset.
    pub sigma: Option<f64>,
    pub use_align: bool,
    pub use_conf: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { gamma: 1.0, sigma: None, use_align: true, use_conf: true }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.gamma > 0.0, "gamma must be positive");
        if let Some(s) = self.sigma {
            ensure!(s > 0.0, "kernel bandwidth must be positive");
        }
        Ok(())
    }
}

pub fn reward_final(r_align: f64, r_conf: f64, cfg: &RewardConfig) -> f64 {
    let a = if cfg.use_align { r_align } else { 0.0 };
    let c = if cfg.use_conf { r_conf } else { 0.0 };
    a + c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    pub align: f64,
    pub conf: f64,
    pub total: f64,
}

/// `(r_i − mean) / max(std, eps_std)` with the population standard deviation.
pub fn grpo_advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    ensure!(rewards.len() >= 2, "a group needs at least two rewards");
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= eps_std {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Exact categorical KL `Σ p log(p/q)` per row, averaged over rows.
pub fn mean_row_kl(p: &Mat, q: &Mat) -> f64 {
    let mut total = 0.0;
    for (pr, qr) in p.rows().into_iter().zip(q.rows()) {
        for (&a, &b) in pr.iter().zip(qr.iter()) {
            if a > 0.0 {
                total += a * (a / b).ln();
            }
        }
    }
    total / p.nrows().max(1) as f64
}

/// Mean over the sampled positions of `KL(π_θ ‖ π_old)` under the block constraint.
pub fn kl_per_token(theta: &RestorerLm, old: &RestorerLm, g: &Generation) -> Result<f64> {
    let p = crate::lm::decision_probs(theta, g)?;
    let q = crate::lm::decision_probs(old, g)?;
    Ok(mean_row_kl(&p, &q))
}

/// Log-probabilities of the old policy at each decision, as constants for the objective.
fn old_log_probs(old: &RestorerLm, g: &Generation) -> Mat {
    let mut t = Tape::new();
    let b = old.params.bind_frozen(&mut t);
    let logits = decision_logits(old, &mut t, &b, g);
    let lp = t.log_softmax(logits);
    t.value(lp).clone()
}

/// `(1/G)·Σ_i [A_i·mean_j log π_θ(o_ij) − β_KL·KL_i]` built on the tape.
fn objective_on_tape(
    t: &mut Tape,
    lm: &RestorerLm,
    b: &crate::nn::Bound,
    gens: &[Generation],
    advantages: &[f64],
    old_lp: &[Mat],
    beta_kl: f64,
) -> Var {
    let mut total: Option<Var> = None;
    for ((g, &adv), olp) in gens.iter().zip(advantages).zip(old_lp) {
        if g.decisions.is_empty() {
            continue;
        }
        let n = g.decisions.len() as f64;
        let logits = decision_logits(lm, t, b, g);
        let lp = t.log_softmax(logits);
        let at: Vec<(usize, usize)> = g.decisions.iter().enumerate().map(|(j, d)| (j, g.tokens[d.index])).collect();
        let picked = t.pick(lp, &at);
        let s = t.sum(picked);
        let mut term = t.scale(s, adv / n);
        if beta_kl > 0.0 {
            let p = t.softmax(logits);
            let q = t.constant(olp.clone());
            let diff = t.sub(lp, q);
            let pk = t.mul(p, diff);
            let kl = t.sum(pk);
            let kl = t.scale(kl, -beta_kl / n);
            term = t.add(term, kl);
        }
        total = Some(match total {
            None => term,
            Some(acc) => t.add(acc, term),
        });
    }
    let total = total.unwrap_or_else(|| t.constant(Mat::zeros((1, 1))));
    t.scale(total, 1.0 / gens.len().max(1) as f64)
}

/// Value of the regularized objective for `lm` against the snapshot `old`.
pub fn surrogate(lm: &RestorerLm, old: &RestorerLm, gens: &[Generation], advantages: &[f64], beta_kl: f64) -> f64 {
    let old_lp: Vec<Mat> = gens.iter().map(|g| old_log_probs(old, g)).collect();
    let mut t = Tape::new();
    let b = lm.params.bind_frozen(&mut t);
    let j = objective_on_tape(&mut t, lm, &b, gens, advantages, &old_lp, beta_kl);
    t.scalar(j)
}

/// The objective and its gradient with respect to the parameters of `lm`.
pub fn surrogate_and_grads(
    lm: &RestorerLm,
    old: &RestorerLm,
    gens: &[Generation],
    advantages: &[f64],
    beta_kl: f64,
) -> (f64, Vec<Mat>) {
    let old_lp: Vec<Mat> = gens.iter().map(|g| old_log_probs(old, g)).collect();
    let mut t = Tape::new();
    let b = lm.params.bind(&mut t);
    let j = objective_on_tape(&mut t, lm, &b, gens, advantages, &old_lp, beta_kl);
    let grads = t.backward(j);
    (t.scalar(j), lm.params.grads(&b, &grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub beta_kl: f64,
    pub lr: f64,
    pub eps_std: f64,
    pub temperature: f64,
    /// Halvings tried before an update is rejected.
    pub max_halvings: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig { group_size: 8, beta_kl: 0.05, lr: 2e-6, eps_std: 1e-8, temperature: 1.0, max_halvings: 50 }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.group_size >= 2, "group size must be at least 2");
        ensure!(self.beta_kl >= 0.0, "KL weight must be nonnegative");
        ensure!(self.eps_std > 0.0, "std floor must be positive");
        ensure!(self.lr > 0.0, "learning rate must be positive");
        ensure!(self.temperature > 0.0, "sampling temperature must be positive");
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoStats {
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub failed: usize,
    pub adv_mean: f64,
    pub adv_std: f64,
    /// Fraction of the proposed step that was applied (0 when rejected).
    pub step_scale: f64,
    pub param_change: f64,
}

/// Scores one candidate of prompt `p`; `Ok(None)` marks a failed decode.
pub type Scorer<'a> = dyn FnMut(usize, &Generation) -> Result<Option<f64>> + 'a;

/// Group rewards with failed candidates set to the group minimum.
fn fill_failures(raw: &[Option<f64>]) -> Vec<f64> {
    let min = raw.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    raw.iter().map(|r| r.unwrap_or(if min.is_finite() { min } else { 0.0 })).collect()
}

/// One policy update: `g` samples per prompt from the current policy (the
/// frozen snapshot), group-normalized advantages, then an Adam step on the
/// negated objective, halved until the objective is no lower than at the snapshot.
pub fn grpo_step(
    lm: &mut RestorerLm,
    opt: &mut Adam,
    prompts: &[Vec<usize>],
    max_blocks: usize,
    scorer: &mut Scorer,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<GrpoStats> {
    cfg.validate()?;
    ensure!(!prompts.is_empty(), "GRPO step needs at least one prompt");
    let old = lm.clone();
    let mut gens = Vec::new();
    let mut advantages = Vec::new();
    let mut stats = GrpoStats::default();
    let mut reward_sum = 0.0;
    let mut reward_n = 0usize;
    for (p, prompt) in prompts.iter().enumerate() {
        let mut raw = Vec::with_capacity(cfg.group_size);
        for i in 0..cfg.group_size {
            let sampling = SamplingConfig {
                temperature: cfg.temperature,
                top_k: None,
                seed: derive(seed, (p * cfg.group_size + i) as u64),
            };
            let g = generate(&old, prompt, &sampling, max_blocks)?;
            let r = scorer(p, &g)?;
            if r.is_none() {
                warn!("candidate {i} of prompt {p} could not be scored; assigning the group minimum");
                stats.failed += 1;
            }
            raw.push(r);
            gens.push(g);
        }
        for r in raw.iter().flatten() {
            reward_sum += r;
            reward_n += 1;
        }
        advantages.extend(grpo_advantages(&fill_failures(&raw), cfg.eps_std)?);
    }
    stats.mean_reward = reward_sum / reward_n.max(1) as f64;
    let n = advantages.len() as f64;
    stats.adv_mean = advantages.iter().sum::<f64>() / n;
    stats.adv_std = (advantages.iter().map(|a| (a - stats.adv_mean).powi(2)).sum::<f64>() / n).sqrt();

    if advantages.iter().all(|&a| a == 0.0) {
        // only the KL term remains, and it is maximized at the snapshot
        stats.step_scale = 0.0;
        return Ok(stats);
    }
    let (j0, grads) = surrogate_and_grads(lm, &old, &gens, &advantages, cfg.beta_kl);
    let neg: Vec<Mat> = grads.iter().map(|g| -g).collect();
    opt.lr = cfg.lr;
    let delta = opt.direction(&neg);
    let mut scale = 1.0;
    let mut accepted = false;
    for _ in 0..=cfg.max_halvings {
        let mut trial = old.clone();
        trial.params.apply(&delta, scale);
        if surrogate(&trial, &old, &gens, &advantages, cfg.beta_kl) >= j0 {
            *lm = trial;
            accepted = true;
            break;
        }
        scale *= 0.5;
    }
    stats.step_scale = if accepted { scale } else { 0.0 };
    stats.param_change = lm.params.distance(&old.params);
    stats.mean_kl = gens.iter().map(|g| kl_per_token(lm, &old, g)).sum::<Result<f64>>()? / gens.len() as f64;
    debug!("grpo step: reward {:.4} kl {:.3e} scale {}", stats.mean_reward, stats.mean_kl, stats.step_scale);
    Ok(stats)
}

/// Parameters as a flat vector, for finite-difference checks.
pub fn flatten(ps: &ParamSet) -> Vec<f64> {
    ps.values().iter().flat_map(|m| m.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{prompt_from_block, LmConfig, Slot};
    use crate::rng::{normal_mat, seeded};
    use ndarray::array;
    use proptest::prelude::*;

    fn naive_mmd(xa: &Mat, xb: &Mat, sigma: f64) -> f64 {
        let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            let mut d = 0.0;
            for i in 0..a.len() {
                d += (a[i] - b[i]).powi(2);
            }
            (-d / (2.0 * sigma * sigma)).exp()
        };
        let (n1, n2) = (xa.nrows(), xb.nrows());
        let mut aa = 0.0;
        for i in 0..n1 {
            for j in 0..n1 {
                if i != j {
                    aa += k(xa.row(i), xa.row(j));
                }
            }
        }
        let mut bb = 0.0;
        for i in 0..n2 {
            for j in 0..n2 {
                if i != j {
                    bb += k(xb.row(i), xb.row(j));
                }
            }
        }
        let mut ab = 0.0;
        for i in 0..n1 {
            for j in 0..n2 {
                ab += k(xa.row(i), xb.row(j));
            }
        }
        aa / (n1 * (n1 - 1)) as f64 + bb / (n2 * (n2 - 1)) as f64 - 2.0 * ab / (n1 * n2) as f64
    }

    fn toy_lm(width: usize, seed: u64) -> RestorerLm {
        RestorerLm::new(LmConfig { codebook_size: 4, width, layers: 1, heads: 2, context: 16, seed }).unwrap()
    }

    #[test]
    fn centroid_examples() {
        let c = build_centroids(&array![[0.0, 0.0], [2.0, 2.0], [5.0, 1.0]], &[0, 0, 1], 2).unwrap();
        assert_eq!(c.rows, array![[1.0, 1.0], [5.0, 1.0]]);
        assert_eq!(c.counts, vec![2, 1]);
        let err = build_centroids(&array![[0.0], [1.0]], &[0, 0], 3).unwrap_err();
        assert!(err.to_string().contains("class 1"));
        let mut rng = seeded(3);
        let h = normal_mat(&mut rng, 50, 3, 1.0);
        let labels: Vec<usize> = (0..50).map(|i| (i * 7) % 4).collect();
        let c = build_centroids(&h, &labels, 4).unwrap();
        for class in 0..4 {
            let members: Vec<usize> = (0..50).filter(|&i| labels[i] == class).collect();
            for col in 0..3 {
                let want = members.iter().map(|&i| h[[i, col]]).sum::<f64>() / members.len() as f64;
                assert!((c.rows[[class, col]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn centroid_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let c = build_centroids(&array![[0.1, 0.2], [0.3, 0.7]], &[1, 0], 2).unwrap();
        c.save(&path).unwrap();
        assert_eq!(CentroidMatrix::load(&path).unwrap(), c);
    }

    #[test]
    fn mmd_examples() {
        let a = array![[1.0, 2.0], [1.0, 2.0]];
        let b = array![[0.0, 0.0], [0.0, 0.0]];
        assert_eq!(mmd2(&a, &a, 1.0).unwrap(), 0.0);
        let delta = 5.0 / 2.0;
        assert!((mmd2(&a, &b, 1.0).unwrap() - 2.0 * (1.0 - (-delta as f64).exp())).abs() < 1e-12);
        assert!(mmd2(&array![[1.0, 2.0]], &a, 1.0).is_err());
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward_align(0.0, 1.0), 1.0);
        assert!((reward_align(std::f64::consts::LN_2, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(reward_align(-1e-6, 1.0), 1.0);
        let one_hot = PredictionTable::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(reward_conf(&one_hot), 0.0);
        let uniform = PredictionTable::new(Mat::from_elem((3, 5), 0.2)).unwrap();
        assert!((reward_conf(&uniform) + 5f64.ln()).abs() < 1e-12);
        let cfg = RewardConfig::default();
        assert_eq!(reward_final(1.0, 0.0, &cfg), 1.0);
        assert!((reward_final(0.5, -0.6931, &cfg) + 0.1931).abs() < 1e-12);
        assert_eq!(reward_final(0.3, -0.2, &RewardConfig { use_align: false, ..cfg.clone() }), -0.2);
        assert_eq!(reward_final(0.3, -0.2, &RewardConfig { use_conf: false, ..cfg }), 0.3);
    }

    #[test]
    fn advantage_examples() {
        let a = grpo_advantages(&[1.0, 2.0, 3.0], 1e-8).unwrap();
        let want = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((a[0] + want).abs() < 1e-12 && a[1].abs() < 1e-12 && (a[2] - want).abs() < 1e-12);
        assert!((a[2] - 1.2247).abs() < 1e-4);
        assert_eq!(grpo_advantages(&[0.4; 5], 1e-8).unwrap(), vec![0.0; 5]);
        assert!(grpo_advantages(&[1.0], 1e-8).is_err());
        assert_eq!(fill_failures(&[Some(0.5), None, Some(0.2)]), vec![0.5, 0.2, 0.2]);
        assert_eq!(fill_failures(&[None, None]), vec![0.0, 0.0]);
    }

    #[test]
    fn kl_examples() {
        let p = array![[0.5, 0.25, 0.25]];
        let q = array![[0.25, 0.5, 0.25]];
        let want = 0.5 * (2.0f64).ln() + 0.25 * (0.5f64).ln();
        assert!((mean_row_kl(&p, &q) - want).abs() < 1e-15);
        assert_eq!(mean_row_kl(&p, &p), 0.0);
        let lm = toy_lm(8, 0);
        let g = generate(&lm, &prompt_from_block(&[1, 2]), &SamplingConfig::default(), 2).unwrap();
        assert_eq!(kl_per_token(&lm, &lm, &g).unwrap(), 0.0);
        let other = toy_lm(8, 1);
        assert!(kl_per_token(&other, &lm, &g).unwrap() > 0.0);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let old = toy_lm(8, 2);
        let mut lm = old.clone();
        let mut rng = seeded(9);
        for v in lm.params.values_mut() {
            *v += &normal_mat(&mut rng, v.nrows(), v.ncols(), 0.05);
        }
        let gens: Vec<Generation> = (0..3)
            .map(|s| generate(&old, &prompt_from_block(&[0, 3]), &SamplingConfig { seed: s, ..Default::default() }, 2).unwrap())
            .collect();
        let adv = [1.0, -0.5, -0.5];
        let (_, grads) = surrogate_and_grads(&lm, &old, &gens, &adv, 0.3);
        let h = 1e-5;
        let mut checked = 0;
        for (pi, g) in grads.iter().enumerate() {
            for idx in (0..g.len()).step_by(7) {
                let (r, c) = (idx / g.ncols(), idx % g.ncols());
                let mut plus = lm.clone();
                plus.params.values_mut()[pi][[r, c]] += h;
                let mut minus = lm.clone();
                minus.params.values_mut()[pi][[r, c]] -= h;
                let num = (surrogate(&plus, &old, &gens, &adv, 0.3) - surrogate(&minus, &old, &gens, &adv, 0.3)) / (2.0 * h);
                let ana = g[[r, c]];
                let err = (num - ana).abs();
                assert!(err <= 1e-3 * num.abs().max(ana.abs()) || err < 1e-8, "param {pi} ({r},{c}): {ana} vs {num}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    fn run_step(lm: &RestorerLm, beta_kl: f64, constant: bool) -> (RestorerLm, GrpoStats) {
        let mut lm = lm.clone();
        let mut opt = Adam::new(&lm.params, 1e-2);
        let prompts = vec![prompt_from_block(&[0, 1]), prompt_from_block(&[2, 3])];
        let mut scorer = |_: usize, g: &Generation| -> Result<Option<f64>> {
            if constant {
                return Ok(Some(0.7));
            }
            let last = g.final_block().unwrap();
            Ok(Some(last.iter().filter(|&&s| s == 1).count() as f64))
        };
        let cfg = GrpoConfig { group_size: 4, beta_kl, lr: 1e-2, ..Default::default() };
        let stats = grpo_step(&mut lm, &mut opt, &prompts, 2, &mut scorer, &cfg, 5).unwrap();
        (lm, stats)
    }

    #[test]
    fn huge_kl_weight_freezes_the_policy() {
        let lm = toy_lm(8, 4);
        let (free, s0) = run_step(&lm, 0.0, false);
        let (held, _) = run_step(&lm, 1e9, false);
        let free_change = free.params.distance(&lm.params);
        assert!(s0.step_scale > 0.0 && free_change > 0.0);
        assert!(held.params.distance(&lm.params) < 1e-3 * free_change);
    }

    #[test]
    fn constant_reward_gives_no_update() {
        let lm = toy_lm(8, 4);
        let (after, stats) = run_step(&lm, 0.05, true);
        assert_eq!(stats.adv_mean, 0.0);
        assert_eq!(stats.adv_std, 0.0);
        assert_eq!(after, lm);
        let (after, _) = run_step(&lm, 0.0, true);
        assert_eq!(after, lm);
    }

    #[test]
    fn failed_candidates_keep_the_group() {
        let lm = toy_lm(8, 4);
        let mut opt = Adam::new(&lm.params, 1e-2);
        let mut lm2 = lm.clone();
        let mut calls = 0;
        let mut scorer = |_: usize, _: &Generation| -> Result<Option<f64>> {
            calls += 1;
            Ok(if calls % 2 == 0 { None } else { Some(calls as f64) })
        };
        let stats = grpo_step(&mut lm2, &mut opt, &[prompt_from_block(&[1, 1])], 1, &mut scorer, &GrpoConfig { group_size: 4, ..Default::default() }, 0).unwrap();
        assert_eq!(stats.failed, 2);
        assert!(stats.adv_mean.abs() < 1e-12);
        let _ = Slot::Graph;
    }

    proptest! {
        #[test]
        fn mmd_matches_reference_and_is_symmetric(seed in 0u64..1000, n1 in 2usize..8, n2 in 2usize..8) {
            let mut rng = seeded(seed);
            let a = normal_mat(&mut rng, n1, 3, 1.0);
            let b = normal_mat(&mut rng, n2, 3, 1.5);
            let fast = mmd2(&a, &b, 1.3).unwrap();
            prop_assert!((fast - naive_mmd(&a, &b, 1.3)).abs() < 1e-10);
            prop_assert_eq!(fast, mmd2(&b, &a, 1.3).unwrap());
        }

        #[test]
        fn align_reward_is_bounded_and_decreasing(d in 0.0f64..50.0, e in 1e-6f64..5.0, gamma in 0.01f64..3.0) {
            let r = reward_align(d, gamma);
            prop_assert!(r > 0.0 && r <= 1.0);
            prop_assert!(reward_align(d + e, gamma) < r || r < 1e-300);
        }

        #[test]
        fn advantages_are_standardized(seed in 0u64..1000, g in 2usize..12) {
            let mut rng = seeded(seed);
            let r: Vec<f64> = normal_mat(&mut rng, 1, g, 2.0).iter().copied().collect();
            let a = grpo_advantages(&r, 1e-8).unwrap();
            let mean = a.iter().sum::<f64>() / g as f64;
            let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((std - 1.0).abs() < 1e-10);
        }

        #[test]
        fn kl_is_nonnegative(seed in 0u64..300) {
            let a = toy_lm(8, seed);
            let b = toy_lm(8, seed + 1000);
            let g = generate(&a, &prompt_from_block(&[2, 0]), &SamplingConfig { seed, ..Default::default() }, 2).unwrap();
            prop_assert!(kl_per_token(&a, &b, &g).unwrap() >= 0.0);
        }
    }
}
