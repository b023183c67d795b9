use ndarray::Array3;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::latent::Latent;

/// Training-time diffusion timestep index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestep(pub u32);

/// Strictly decreasing timesteps visited by the sampler, one per step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSchedule {
    timesteps: Vec<Timestep>,
}

impl TimestepSchedule {
    pub fn new(timesteps: Vec<Timestep>) -> Result<Self, BackendError> {
        if timesteps.is_empty() {
            return Err(BackendError::Validation("schedule needs at least one step".into()));
        }
        if timesteps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(BackendError::Validation(
                "schedule timesteps must strictly decrease".into(),
            ));
        }
        Ok(Self { timesteps })
    }

    pub fn total_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn timesteps(&self) -> &[Timestep] {
        &self.timesteps
    }

    pub fn position(&self, t: Timestep) -> Option<usize> {
        self.timesteps.iter().position(|&s| s == t)
    }

    /// The timestep after `t`, or `None` when `t` is the final step.
    pub fn next_after(&self, t: Timestep) -> Option<Timestep> {
        self.position(t).and_then(|i| self.timesteps.get(i + 1).copied())
    }

    pub fn is_final(&self, t: Timestep) -> bool {
        self.timesteps.last() == Some(&t)
    }
}

/// A sampling rule turning a guided noise estimate into the next latent.
pub trait Scheduler: Send + Sync {
    fn id(&self) -> String;

    fn schedule(&self, total_steps: usize) -> Result<TimestepSchedule, BackendError>;

    /// Standard deviation of the initial latent `z_T`.
    fn init_noise_sigma(&self) -> f32 {
        1.0
    }

    /// `z_t -> z_{t-1}`. The final step must not draw fresh noise.
    fn step(
        &self,
        z_t: &Latent,
        eps: &Latent,
        t: Timestep,
        schedule: &TimestepSchedule,
        rng: &mut dyn RngCore,
    ) -> Result<Latent, BackendError>;
}

/// DDIM sampler over a scaled-linear beta schedule, with stochasticity `eta`.
///
/// With `a_t` the cumulative alpha product at `t` and `a_p` the one at the
/// next scheduled timestep (`1.0` after the final step):
///
/// ```text
/// x0     = (z_t - sqrt(1 - a_t) * eps) / sqrt(a_t)
/// sigma  = eta * sqrt((1 - a_p) / (1 - a_t)) * sqrt(1 - a_t / a_p)
/// z_prev = sqrt(a_p) * x0 + sqrt(1 - a_p - sigma^2) * eps + sigma * noise
/// ```
///
/// `eta = 0` is deterministic; `eta = 1` is the ancestral variant. Noise is
/// drawn only when `sigma > 0`, which never happens on the final step.
#[derive(Debug, Clone)]
pub struct DdimScheduler {
    alphas_cumprod: Vec<f64>,
    eta: f64,
}

pub const TRAIN_TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 0.00085;
pub const BETA_END: f64 = 0.012;

impl DdimScheduler {
    pub fn new(eta: f64) -> Result<Self, BackendError> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(BackendError::Validation(format!("eta must be in [0, 1], got {eta}")));
        }
        let n = TRAIN_TIMESTEPS;
        let (s0, s1) = (BETA_START.sqrt(), BETA_END.sqrt());
        let mut acc = 1.0;
        let alphas_cumprod = (0..n)
            .map(|i| {
                let beta = (s0 + (s1 - s0) * i as f64 / (n - 1) as f64).powi(2);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Ok(Self { alphas_cumprod, eta })
    }

    pub fn deterministic() -> Self {
        Self::new(0.0).expect("eta 0 is valid")
    }

    pub fn ancestral() -> Self {
        Self::new(1.0).expect("eta 1 is valid")
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn alpha_cumprod(&self, t: Timestep) -> f64 {
        self.alphas_cumprod[t.0 as usize]
    }

    /// Scalar coefficients `(scale_z, scale_eps, sigma)` with
    /// `z_prev = scale_z * z_t + scale_eps * eps + sigma * noise`.
    pub fn coefficients(&self, t: Timestep, schedule: &TimestepSchedule) -> (f64, f64, f64) {
        let a_t = self.alpha_cumprod(t);
        let a_p = schedule.next_after(t).map(|p| self.alpha_cumprod(p)).unwrap_or(1.0);
        let sigma = self.eta * ((1.0 - a_p) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_p).sqrt();
        let dir = (1.0 - a_p - sigma * sigma).max(0.0).sqrt();
        let scale_z = (a_p / a_t).sqrt();
        let scale_eps = dir - (a_p * (1.0 - a_t) / a_t).sqrt();
        (scale_z, scale_eps, sigma)
    }
}

impl Scheduler for DdimScheduler {
    fn id(&self) -> String {
        format!("ddim(eta={})", self.eta)
    }

    fn schedule(&self, total_steps: usize) -> Result<TimestepSchedule, BackendError> {
        if total_steps == 0 || total_steps > TRAIN_TIMESTEPS {
            return Err(BackendError::Validation(format!(
                "steps must be in 1..={TRAIN_TIMESTEPS}, got {total_steps}"
            )));
        }
        let ratio = TRAIN_TIMESTEPS / total_steps;
        let timesteps = (0..total_steps)
            .rev()
            .map(|i| Timestep((i * ratio + 1).min(TRAIN_TIMESTEPS - 1) as u32))
            .collect();
        TimestepSchedule::new(timesteps)
    }

    fn step(
        &self,
        z_t: &Latent,
        eps: &Latent,
        t: Timestep,
        schedule: &TimestepSchedule,
        rng: &mut dyn RngCore,
    ) -> Result<Latent, BackendError> {
        if schedule.position(t).is_none() {
            return Err(BackendError::Validation(format!("timestep {} not in schedule", t.0)));
        }
        if t.0 as usize >= self.alphas_cumprod.len() {
            return Err(BackendError::Validation(format!("timestep {} out of range", t.0)));
        }
        z_t.ensure_same_shape(eps)?;
        let (scale_z, scale_eps, sigma) = self.coefficients(t, schedule);
        let (scale_z, scale_eps) = (scale_z as f32, scale_eps as f32);
        let mut out = Array3::zeros(z_t.shape());
        ndarray::Zip::from(&mut out)
            .and(z_t.as_array())
            .and(eps.as_array())
            .for_each(|o, &z, &e| *o = scale_z * z + scale_eps * e);
        if sigma > 0.0 {
            let sigma = sigma as f32;
            out.mapv_inplace(|v| {
                let n: f32 = rng.sample(StandardNormal);
                v + sigma * n
            });
        }
        Ok(Latent::new(out)?)
    }
}
