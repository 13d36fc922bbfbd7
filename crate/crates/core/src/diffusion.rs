//! Noise schedule, closed-form forward noising and the DDIM reverse loop.
//!
//! Every alpha in the DDIM update is the cumulative product
//! `alpha_bar_t = prod_{i<=t} (1 - beta_i)`. The step after the last listed
//! timestep lands on the clean endpoint, where `alpha_bar = 1`.

use serde::{Deserialize, Serialize};

use crate::dit::{BlockHook, Network, StepContext};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{splitmix64, standard_normal, FeatureTensor, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit per-timestep betas, each in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        let alphas_bar = betas
            .iter()
            .scan(1.0f64, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            sigmas: vec![0.0; betas.len()],
            betas,
            alphas_bar,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// `alpha_bar` at `t`; `None` is the clean endpoint.
    pub fn alpha_bar(&self, t: Option<usize>) -> Result<f64> {
        match t {
            None => Ok(1.0),
            Some(t) => self.alphas_bar.get(t).copied().ok_or_else(|| {
                Error::Config(format!(
                    "timestep {t} outside schedule of length {}",
                    self.alphas_bar.len()
                ))
            }),
        }
    }

    /// Replaces the per-timestep `sigma_t` (all zero by default).
    pub fn with_sigmas(mut self, sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() != self.betas.len() {
            return Err(Error::Config(format!(
                "{} sigmas for a schedule of {} steps",
                sigmas.len(),
                self.betas.len()
            )));
        }
        if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config(
                "sigmas must be finite and non-negative".into(),
            ));
        }
        self.sigmas = sigmas;
        Ok(self)
    }
}

/// Linear beta ramp from `beta_start` to `beta_end` over `total` timesteps.
pub fn make_schedule(total: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if total == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..total)
        .map(|i| {
            if total == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (total - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// `sqrt(alpha_bar) z0 + sqrt(1 - alpha_bar) eps` for an explicit `alpha_bar`.
pub fn forward_noise_with_alpha(
    z0: &FeatureTensor,
    alpha_bar: f64,
    eps: &FeatureTensor,
) -> Result<FeatureTensor> {
    if z0.shape() != eps.shape() {
        return Err(shape_err!(
            "noise {:?} for latent {:?}",
            eps.shape(),
            z0.shape()
        ));
    }
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).max(0.0).sqrt();
    let data = z0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(&x, &e)| (a * f64::from(x) + b * f64::from(e)) as f32)
        .collect();
    Matrix::from_vec(z0.rows(), z0.cols(), data)
}

/// Samples `q(z_t | z_0)` using the supplied noise.
pub fn forward_noise(
    z0: &FeatureTensor,
    t: usize,
    sched: &NoiseSchedule,
    eps: &FeatureTensor,
) -> Result<FeatureTensor> {
    forward_noise_with_alpha(z0, sched.alpha_bar(Some(t))?, eps)
}

/// One DDIM update from `t` to `t_prev` (`None` = clean endpoint).
///
/// `noise` is only read when `sigma_t > 0`.
pub fn ddim_step(
    z_t: &FeatureTensor,
    eps_pred: &FeatureTensor,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    noise: Option<&FeatureTensor>,
) -> Result<FeatureTensor> {
    if z_t.shape() != eps_pred.shape() {
        return Err(shape_err!(
            "eps prediction {:?} for latent {:?}",
            eps_pred.shape(),
            z_t.shape()
        ));
    }
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::Config(format!(
                "DDIM step must go backwards, got {t} -> {p}"
            )));
        }
    }
    let a_t = sched.alpha_bar(Some(t))?;
    let a_prev = sched.alpha_bar(t_prev)?;
    let sigma = sched.sigmas.get(t).copied().unwrap_or(0.0);
    let dir_var = 1.0 - a_prev - sigma * sigma;
    if dir_var < -1e-12 {
        return Err(Error::Config(format!(
            "sigma_t = {sigma} exceeds sqrt(1 - alpha_bar_prev) at t = {t}"
        )));
    }
    let noise = if sigma > 0.0 {
        let n = noise.ok_or_else(|| Error::Config("stochastic step without noise".into()))?;
        if n.shape() != z_t.shape() {
            return Err(shape_err!(
                "step noise {:?} for latent {:?}",
                n.shape(),
                z_t.shape()
            ));
        }
        Some(n)
    } else {
        None
    };

    let sqrt_a_t = a_t.sqrt();
    let sqrt_one_minus_a_t = (1.0 - a_t).sqrt();
    let sqrt_a_prev = a_prev.sqrt();
    let dir = dir_var.max(0.0).sqrt();
    let data = z_t
        .as_slice()
        .iter()
        .zip(eps_pred.as_slice())
        .enumerate()
        .map(|(i, (&z, &e))| {
            let (z, e) = (f64::from(z), f64::from(e));
            let x0 = (z - sqrt_one_minus_a_t * e) / sqrt_a_t;
            let mut next = sqrt_a_prev * x0 + dir * e;
            if let Some(n) = noise {
                next += sigma * f64::from(n.as_slice()[i]);
            }
            next as f32
        })
        .collect();
    Matrix::from_vec(z_t.rows(), z_t.cols(), data)
}

/// Uniformly strided, decreasing timesteps: `(n-1)s, .., s, 0` with
/// `s = total / n`.
pub fn step_list(total: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > total {
        return Err(Error::Config(format!(
            "cannot take {num_steps} sampling steps over {total} timesteps"
        )));
    }
    let stride = total / num_steps;
    Ok((0..num_steps).rev().map(|i| i * stride).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerRun {
    pub step_list: Vec<usize>,
    pub z_init: FeatureTensor,
    pub seed: u64,
}

impl SamplerRun {
    /// Draws the initial latent from `seed`.
    pub fn from_seed(shape: (usize, usize), step_list: Vec<usize>, seed: u64) -> Self {
        let z_init = standard_normal(&mut Rng::new(seed), shape.0, shape.1);
        Self {
            step_list,
            z_init,
            seed,
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.step_list.is_empty() {
            return Err(Error::Config("empty step list".into()));
        }
        if self.step_list.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(
                "step list must be strictly decreasing".into(),
            ));
        }
        if self.step_list[0] >= sched.total_steps() {
            return Err(Error::Config(format!(
                "step {} outside schedule of length {}",
                self.step_list[0],
                sched.total_steps()
            )));
        }
        Ok(())
    }

    /// Timestep following position `i`; `None` after the last one.
    pub fn prev_timestep(&self, i: usize) -> Option<usize> {
        self.step_list.get(i + 1).copied()
    }
}

/// Full reverse loop: one network pass and one DDIM update per listed step.
pub fn sample(
    net: &Network,
    run: &SamplerRun,
    sched: &NoiseSchedule,
    hook: &mut dyn BlockHook,
) -> Result<FeatureTensor> {
    run.validate(sched)?;
    if run.z_init.shape() != net.latent_shape() {
        return Err(shape_err!(
            "initial latent {:?} for network {:?}",
            run.z_init.shape(),
            net.latent_shape()
        ));
    }
    let num_steps = run.step_list.len();
    let mut noise_rng = Rng::new(splitmix64(run.seed) ^ 0x005E_ED0F_5EED);
    let mut z = run.z_init.clone();
    for (i, &t) in run.step_list.iter().enumerate() {
        let ctx = StepContext {
            step: i,
            timestep: t,
            num_steps,
        };
        hook.begin_step(&ctx)?;
        let eps = net.forward(&z, t, hook)?;
        hook.end_step(&eps)?;
        let noise =
            (sched.sigmas[t] > 0.0).then(|| standard_normal(&mut noise_rng, z.rows(), z.cols()));
        z = ddim_step(&z, &eps, t, run.prev_timestep(i), sched, noise.as_ref())?;
    }
    Ok(z)
}
