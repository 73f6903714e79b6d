//! Latent DDPM: noise schedule, closed-form forward noising, the
//! noise-prediction network, reverse steps, and trajectory construction.

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{init_linear, linear, sinusoidal, Bound, ParamSet};
use crate::rng::{normal_mat, seeded, SeededRng};

/// Variances `β_1..β_T` with the derived `α_t = 1 − β_t` and cumulative
/// products `ᾱ_t`. Steps are 1-based; `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        ensure!(!betas.is_empty(), "schedule needs at least one step");
        ensure!(betas.iter().all(|&b| b > 0.0 && b < 1.0), "every beta must lie in (0, 1)");
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        ensure!(t >= 1 && t <= self.steps(), "step {t} outside [1, {}]", self.steps());
        Ok(())
    }
}

/// Linearly spaced `β` from `beta_min` to `beta_max` over `steps` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    ensure!(steps >= 1, "T must be at least 1");
    ensure!(
        0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0,
        "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
    );
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`
pub fn forward_diffuse(z0: &Mat, t: usize, eps: &Mat, sched: &NoiseSchedule) -> Result<Mat> {
    sched.check_step(t)?;
    if z0.dim() != eps.dim() {
        return Err(Error::dim(format!("latent {:?} vs noise {:?}", z0.dim(), eps.dim())));
    }
    let ab = sched.alpha_bar(t);
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// The noise-prediction function `ε_θ(z_t, t)`.
pub trait NoisePredictor {
    fn predict(&self, zt: &Mat, t: usize) -> Mat;
}

impl<F: Fn(&Mat, usize) -> Mat> NoisePredictor for F {
    fn predict(&self, zt: &Mat, t: usize) -> Mat {
        self(zt, t)
    }
}

/// One reverse step: the posterior mean
/// `(1/√α_t)(z_t − β_t/√(1−ᾱ_t)·ε_θ(z_t, t))`, plus `√β_t·ε_sample` when
/// `t > 1` and a sample is supplied. The final step is noiseless.
pub fn denoise_step(
    zt: &Mat,
    t: usize,
    dn: &impl NoisePredictor,
    sched: &NoiseSchedule,
    eps_sample: Option<&Mat>,
) -> Result<Mat> {
    sched.check_step(t)?;
    let eps_hat = dn.predict(zt, t);
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let mut mean = (zt - &(eps_hat * coef)) / sched.alpha(t).sqrt();
    if t > 1 {
        if let Some(noise) = eps_sample {
            mean.scaled_add(sched.beta(t).sqrt(), noise);
        }
    }
    Ok(mean)
}

/// Source of the per-step sampling noise in the reverse chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseStream {
    Noiseless,
    Seeded(u64),
}

/// Ordered latent states `Z_T, Z_{T−1}, …, Z_0` (most corrupted first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorationTrajectory {
    pub latents: Vec<Mat>,
}

impl RestorationTrajectory {
    pub fn steps(&self) -> usize {
        self.latents.len().saturating_sub(1)
    }

    pub fn clean(&self) -> &Mat {
        self.latents.last().expect("trajectory is never empty")
    }

    pub fn corrupted(&self) -> &Mat {
        &self.latents[0]
    }
}

/// Runs the reverse chain from `z_start` (the state at step `T`) down to step 0.
pub fn build_trajectory(
    dn: &impl NoisePredictor,
    sched: &NoiseSchedule,
    z_start: &Mat,
    noise: NoiseStream,
) -> Result<RestorationTrajectory> {
    let mut rng: Option<SeededRng> = match noise {
        NoiseStream::Noiseless => None,
        NoiseStream::Seeded(s) => Some(seeded(s)),
    };
    let mut latents = Vec::with_capacity(sched.steps() + 1);
    latents.push(z_start.clone());
    let (rows, cols) = z_start.dim();
    for t in (1..=sched.steps()).rev() {
        let sample = rng.as_mut().map(|r| normal_mat(r, rows, cols, 1.0));
        let next = denoise_step(latents.last().unwrap(), t, dn, sched, sample.as_ref())?;
        latents.push(next);
    }
    Ok(RestorationTrajectory { latents })
}

const TIME_DIM: usize = 16;

/// Row-wise MLP noise predictor with a learned per-slot embedding and a
/// sinusoidal step embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserNet {
    pub(crate) rows: usize,
    pub(crate) width: usize,
    pub(crate) hidden: usize,
    pub(crate) params: ParamSet,
}

impl DenoiserNet {
    pub fn new(rows: usize, width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut params = ParamSet::new();
        init_linear(&mut params, "den.in", width, hidden, &mut rng);
        init_linear(&mut params, "den.time", TIME_DIM, hidden, &mut rng);
        params.insert("den.slot", normal_mat(&mut rng, rows, hidden, 0.1));
        init_linear(&mut params, "den.mid", hidden, hidden, &mut rng);
        init_linear(&mut params, "den.out", hidden, width, &mut rng);
        DenoiserNet { rows, width, hidden, params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub(crate) fn forward(&self, tape: &mut Tape, b: &Bound, zt: Var, step: usize) -> Var {
        let temb = tape.constant(sinusoidal(step as f64, TIME_DIM));
        let temb = linear(tape, b, "den.time", temb);
        let h = linear(tape, b, "den.in", zt);
        let h = tape.add(h, b.get("den.slot"));
        let h = tape.add_row(h, temb);
        let h = tape.gelu(h);
        let h = linear(tape, b, "den.mid", h);
        let h = tape.gelu(h);
        linear(tape, b, "den.out", h)
    }

    /// Tape graph of `mean ‖ε − ε_θ(√ᾱ_t z0 + √(1−ᾱ_t) ε, t)‖²` for a latent on the tape.
    pub(crate) fn loss_on_tape(&self, tape: &mut Tape, b: &Bound, z0: Var, step: usize, eps: &Mat, sched: &NoiseSchedule) -> Var {
        let ab = sched.alpha_bar(step);
        let scaled = tape.scale(z0, ab.sqrt());
        let noise = tape.constant(eps * (1.0 - ab).sqrt());
        let zt = tape.add(scaled, noise);
        let pred = self.forward(tape, b, zt, step);
        let target = tape.constant(eps.clone());
        let diff = tape.sub(pred, target);
        let sq = tape.mul(diff, diff);
        tape.mean(sq)
    }

    /// Diffusion training loss and its gradient with respect to the network parameters.
    pub fn loss_and_grads(&self, z0: &Mat, step: usize, eps: &Mat, sched: &NoiseSchedule) -> Result<(f64, Vec<Mat>)> {
        sched.check_step(step)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let z = tape.constant(z0.clone());
        let loss = self.loss_on_tape(&mut tape, &b, z, step, eps, sched);
        let grads = tape.backward(loss);
        Ok((tape.scalar(loss), self.params.grads(&b, &grads)))
    }
}

impl NoisePredictor for DenoiserNet {
    fn predict(&self, zt: &Mat, t: usize) -> Mat {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let z = tape.constant(zt.clone());
        let out = self.forward(&mut tape, &b, z, t);
        tape.value(out).clone()
    }
}

/// `mean ‖ε − ε_θ(forward_diffuse(z0, t, ε), t)‖²`
pub fn diffusion_loss(dn: &impl NoisePredictor, z0: &Mat, t: usize, eps: &Mat, sched: &NoiseSchedule) -> Result<f64> {
    let zt = forward_diffuse(z0, t, eps, sched)?;
    let pred = dn.predict(&zt, t);
    Ok((eps - &pred).mapv(|x| x * x).mean().unwrap_or(0.0))
}
