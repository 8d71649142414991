//! Noise schedules for the denoising objective and the flow ODE.

use crate::error::{Error, Result};

/// Discrete variance schedule: β_t, α_t = 1−β_t, cumulative ᾱ_t, and the
/// lower-bound posterior σ_t, for t ∈ 1..=t_max (index 0 ↦ t = 1).
///
/// σ_t = sqrt(β_t · (1−ᾱ_{t−1})/(1−ᾱ_t)), with σ at t=1 set to sqrt(β_1).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Original timestep fed to the time embedding at each index; identity
    /// for a full table, the kept steps for a respaced table.
    pub timesteps: Vec<usize>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;
pub const T_MAX: usize = 1000;

impl NoiseSchedule {
    /// Linear schedule from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if t_max == 0 {
            return Err(Error::invalid("noise schedule needs t_max >= 1"));
        }
        let beta: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let timesteps = (1..=t_max).collect();
        Self::from_betas(beta, timesteps)
    }

    /// The default table: t_max = 1000, β from 1e-4 to 2e-2.
    pub fn default_linear() -> NoiseSchedule {
        Self::linear(T_MAX, BETA_START, BETA_END).expect("default schedule")
    }

    fn from_betas(beta: Vec<f64>, timesteps: Vec<usize>) -> Result<NoiseSchedule> {
        let t_max = beta.len();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let mut sigma = Vec::with_capacity(t_max);
        for i in 0..t_max {
            let s = if i == 0 {
                beta[0].sqrt()
            } else {
                (beta[i] * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i])).sqrt()
            };
            sigma.push(s);
        }
        for (name, xs) in [("beta", &beta), ("alpha_bar", &alpha_bar), ("sigma", &sigma)] {
            if !xs.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(Error::invalid(format!(
                    "noise schedule: {name} not finite positive"
                )));
            }
        }
        Ok(NoiseSchedule {
            t_max,
            beta,
            alpha,
            alpha_bar,
            sigma,
            timesteps,
        })
    }

    /// Evenly strided sub-schedule with `steps` entries. The kept timesteps
    /// define a shorter chain whose per-step α is the ratio of consecutive
    /// kept ᾱ values, so the marginal at each kept step matches the full
    /// table; the network still sees the original timestep.
    pub fn respaced(&self, steps: usize) -> Result<NoiseSchedule> {
        if steps == 0 || steps > self.t_max {
            return Err(Error::invalid(format!(
                "respace to {steps} steps from t_max {}",
                self.t_max
            )));
        }
        // evenly spaced kept indices, always including the last step
        let kept: Vec<usize> = (0..steps)
            .map(|k| ((k + 1) * self.t_max) / steps - 1)
            .collect();
        let mut beta = Vec::with_capacity(steps);
        let mut prev_ab = 1.0;
        for &i in &kept {
            beta.push(1.0 - self.alpha_bar[i] / prev_ab);
            prev_ab = self.alpha_bar[i];
        }
        let timesteps: Vec<usize> = kept.iter().map(|&i| self.timesteps[i]).collect();
        Self::from_betas(beta, timesteps)
    }

    /// Forward corruption x^t = √ᾱ_t · x + √(1−ᾱ_t) · ε at table index
    /// `idx` (0-based).
    pub fn corruption_coeffs(&self, idx: usize) -> (f64, f64) {
        let ab = self.alpha_bar[idx];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// Apply the forward corruption to one token at 1-based timestep `t`.
pub fn diffuse_forward(
    x: &[f64],
    t: usize,
    noise: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t == 0 || t > schedule.t_max {
        return Err(Error::invalid(format!(
            "diffuse_forward: t {t} outside 1..={}",
            schedule.t_max
        )));
    }
    if x.len() != noise.len() {
        return Err(Error::shape(
            "diffuse_forward",
            format!("{} values vs {} noise", x.len(), noise.len()),
        ));
    }
    let (cs, cn) = schedule.corruption_coeffs(t - 1);
    Ok(x.iter().zip(noise).map(|(xi, ni)| cs * xi + cn * ni).collect())
}

/// Linear interpolation schedule for flow matching: x^t = t·x + (1−t)·ε on
/// t ∈ [0, 1], with velocity target x − ε.
#[derive(Debug, Clone)]
pub struct FlowSchedule {
    pub integration_steps: usize,
}

impl FlowSchedule {
    pub fn new(integration_steps: usize) -> Result<FlowSchedule> {
        if integration_steps == 0 {
            return Err(Error::invalid("flow schedule needs at least one step"));
        }
        Ok(FlowSchedule { integration_steps })
    }

    /// Data coefficient α_t = t.
    pub fn data_coeff(&self, t: f64) -> f64 {
        t
    }

    /// Noise coefficient β_t = 1 − t.
    pub fn noise_coeff(&self, t: f64) -> f64 {
        1.0 - t
    }
}
