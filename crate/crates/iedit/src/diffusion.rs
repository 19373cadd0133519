//! Forward noising, the noise schedule, and the reverse sampler.

use crate::config::{SamplerConfig, SamplerKind};
use crate::error::{Error, Result};
use crate::rng;
use rand_distr::{Distribution, StandardNormal};

/// Per-timestep noise coefficients: betas and cumulative alpha products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule over `timesteps` training steps.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|t| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let mut alphas_cumprod = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for (t, &beta) in betas.iter().enumerate() {
            if !(0.0 < beta && beta < 1.0) {
                return Err(Error::Config(format!("beta[{t}] = {beta} outside (0, 1)")));
            }
            prod *= 1.0 - beta;
            alphas_cumprod.push(prod);
        }
        for w in alphas_cumprod.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config(
                    "alphas_cumprod must be strictly decreasing".into(),
                ));
            }
        }
        Ok(NoiseSchedule {
            timesteps: betas.len(),
            betas,
            alphas_cumprod,
        })
    }

    pub fn for_sampler(cfg: &SamplerConfig) -> Result<Self> {
        Self::linear(cfg.train_timesteps, cfg.beta_start, cfg.beta_end)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// Strided inference timesteps, descending from the top of the schedule.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.timesteps {
            return Err(Error::Config(format!(
                "inference steps {steps} invalid for a {}-step schedule",
                self.timesteps
            )));
        }
        let ratio = self.timesteps / steps;
        Ok((0..steps).map(|i| i * ratio).rev().collect())
    }
}

/// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`
pub fn add_noise(z0: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t >= sched.timesteps {
        return Err(Error::Config(format!(
            "timestep {t} out of range 0..{}",
            sched.timesteps
        )));
    }
    if z0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            ctx: "add_noise",
            expected: format!("{}", z0.len()),
            got: format!("{}", eps.len()),
        });
    }
    let ab = sched.alpha_bar(t);
    let c0 = ab.sqrt();
    let c1 = (1.0 - ab).sqrt();
    Ok(z0.iter().zip(eps).map(|(z, e)| c0 * z + c1 * e).collect())
}

/// Anything that can predict the noise in `z_t` at timestep `t`.
pub trait NoisePredictor {
    fn predict(&mut self, z_t: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl<F> NoisePredictor for F
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    fn predict(&mut self, z_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self(z_t, t)
    }
}

/// One deterministic reverse update (η = 0) from `z_t` at `t` to the previous
/// strided timestep with cumulative product `alpha_bar_prev`.
pub fn ddim_step(z_t: &[f64], eps_hat: &[f64], alpha_bar_t: f64, alpha_bar_prev: f64) -> Vec<f64> {
    let sqrt_ab = alpha_bar_t.sqrt();
    let sqrt_om = (1.0 - alpha_bar_t).sqrt();
    let c0 = alpha_bar_prev.sqrt();
    let c1 = (1.0 - alpha_bar_prev).sqrt();
    z_t.iter()
        .zip(eps_hat)
        .map(|(z, e)| {
            let x0 = (z - sqrt_om * e) / sqrt_ab;
            c0 * x0 + c1 * e
        })
        .collect()
}

/// Iterative reverse sampling from seeded noise down to `z_0`.
///
/// The initial latent and any per-step noise derive from `seed`, so sampling
/// is fully deterministic given the seed (and per-step noise only exists for
/// η > 0 or the ancestral sampler).
pub fn sample(
    predictor: &mut dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let timesteps = sched.inference_timesteps(cfg.inference_steps)?;
    let mut z = rng::normal_vec(seed, "sample_init", 0, n);
    for (i, &t) in timesteps.iter().enumerate() {
        let eps_hat = predictor.predict(&z, t)?;
        if eps_hat.len() != n {
            return Err(Error::ShapeMismatch {
                ctx: "sample",
                expected: format!("{n}"),
                got: format!("{}", eps_hat.len()),
            });
        }
        if eps_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                ctx: "sample",
                step: i,
            });
        }
        let ab_t = sched.alpha_bar(t);
        let ab_prev = if i + 1 < timesteps.len() {
            sched.alpha_bar(timesteps[i + 1])
        } else {
            1.0
        };
        z = match cfg.kind {
            SamplerKind::Ddim => {
                let sigma = if cfg.eta == 0.0 {
                    0.0
                } else {
                    cfg.eta
                        * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
                        * (1.0 - ab_t / ab_prev).sqrt()
                };
                let keep = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
                let mut stream = rng::stream(seed, "sample_step", i as u64);
                z.iter()
                    .zip(&eps_hat)
                    .map(|(zv, e)| {
                        let x0 = (zv - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt();
                        // clamp the clean-latent estimate and re-derive the
                        // noise from it, so prediction errors cannot feed
                        // back into the trajectory unbounded
                        let (x0, e) = if cfg.clip_denoised {
                            let x0c = x0.clamp(-1.0, 1.0);
                            let ec = (zv - ab_t.sqrt() * x0c) / (1.0 - ab_t).sqrt();
                            (x0c, ec)
                        } else {
                            (x0, *e)
                        };
                        let noise = if sigma == 0.0 {
                            0.0
                        } else {
                            let xi: f64 = StandardNormal.sample(&mut stream);
                            sigma * xi
                        };
                        ab_prev.sqrt() * x0 + keep * e + noise
                    })
                    .collect()
            }
            SamplerKind::Ddpm => {
                // ancestral update over the strided schedule, written in
                // terms of the (possibly clamped) implied clean latent
                let alpha_eff = ab_t / ab_prev;
                let beta_eff = 1.0 - alpha_eff;
                let noise_scale = if i + 1 < timesteps.len() {
                    (beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
                } else {
                    0.0
                };
                let c_x0 = ab_prev.sqrt() * beta_eff / (1.0 - ab_t);
                let c_zt = alpha_eff.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
                let mut stream = rng::stream(seed, "sample_step", i as u64);
                z.iter()
                    .zip(&eps_hat)
                    .map(|(zv, e)| {
                        let x0 = (zv - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt();
                        let x0 = if cfg.clip_denoised {
                            x0.clamp(-1.0, 1.0)
                        } else {
                            x0
                        };
                        let mean = c_x0 * x0 + c_zt * zv;
                        let xi: f64 = StandardNormal.sample(&mut stream);
                        mean + noise_scale * xi
                    })
                    .collect()
            }
        };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                ctx: "sample",
                step: i,
            });
        }
    }
    Ok(z)
}
