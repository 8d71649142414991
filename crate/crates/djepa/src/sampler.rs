//! Next set-of-tokens generation.
//!
//! A cosine schedule maps the auto-regressive step index to the number of
//! tokens still hidden, every step picks its next tokens uniformly at
//! random, and each chosen token is drawn from its conditional distribution
//! independently — by reverse diffusion over a respaced schedule or by an
//! Euler walk of the flow ODE. Classifier-free guidance mixes the
//! null-class and class-conditional predictions in noise space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ModelDenoiser, TokenDenoiser};
use crate::model::backbone::{encode_tokens, predict_features};
use crate::model::{BindMode, ModelState};
use crate::rng::{Stream, StreamId};
use crate::schedule::{FlowSchedule, NoiseSchedule};
use crate::tensor::Tensor;
use crate::tokens::{unpatchify, MaskPlan};

/// Which per-token objective the sampler integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Diffusion,
    Flow,
}

/// Sampling controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// T: auto-regressive steps.
    pub ar_steps: usize,
    /// Reverse-diffusion steps (strided sub-schedule of the full table).
    pub denoise_steps: usize,
    /// Euler steps for the flow ODE.
    pub flow_steps: usize,
    /// τ: noise temperature. Scales the per-step noise in reverse diffusion
    /// and the initial noise of the flow walk.
    pub temperature: f64,
    /// Classifier-free guidance scale; 1 disables guidance.
    pub guidance: f64,
    pub objective: Objective,
    pub seed: u64,
    /// Already-known (index, token values) pairs seeded before the loop.
    #[serde(default)]
    pub known: Vec<(usize, Vec<f64>)>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            ar_steps: 8,
            denoise_steps: 100,
            flow_steps: 50,
            temperature: 0.94,
            guidance: 1.0,
            objective: Objective::Diffusion,
            seed: 0,
            known: Vec::new(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, total_tokens: usize) -> Result<()> {
        if self.ar_steps == 0 || self.ar_steps > total_tokens {
            return Err(Error::invalid(format!(
                "ar_steps {} outside 1..={total_tokens}",
                self.ar_steps
            )));
        }
        if self.temperature < 0.0 {
            return Err(Error::invalid("temperature must be >= 0"));
        }
        if self.guidance < 1.0 {
            return Err(Error::invalid("guidance scale must be >= 1"));
        }
        if self.denoise_steps == 0 || self.flow_steps == 0 {
            return Err(Error::invalid("denoise/flow steps must be >= 1"));
        }
        for (i, v) in &self.known {
            if *i >= total_tokens {
                return Err(Error::invalid(format!("known token index {i} out of range")));
            }
            if v.is_empty() {
                return Err(Error::invalid("known token with empty values"));
            }
        }
        Ok(())
    }
}

/// One auto-regressive step of a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub chosen: Vec<usize>,
    pub remaining_after: usize,
}

/// Per-step record of which tokens were emitted when.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SampleTrace {
    pub steps: Vec<TraceStep>,
}

impl SampleTrace {
    /// Chosen sets must be disjoint and cover every initially unknown index.
    pub fn assert_partition(&self, unknown: &[usize]) {
        let mut seen: Vec<usize> = self.steps.iter().flat_map(|s| s.chosen.clone()).collect();
        seen.sort_unstable();
        let mut expect = unknown.to_vec();
        expect.sort_unstable();
        assert_eq!(seen, expect, "trace does not partition the unknown set");
    }

    pub fn write_jsonl<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut *w, s)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Per-step token counts from the cosine masking-ratio decay.
///
/// `remaining_i = ceil(n · cos(π/2 · i/T))` with `remaining_T = 0`; the
/// emitted counts are the consecutive differences, then lifted so every
/// step emits at least one token (stolen from the largest later step,
/// ties resolved toward the latest).
pub fn cosine_step_counts(ar_steps: usize, n_unknown: usize) -> Result<Vec<usize>> {
    if ar_steps == 0 || ar_steps > n_unknown {
        return Err(Error::invalid(format!(
            "cosine_step_counts: T {ar_steps} outside 1..={n_unknown}"
        )));
    }
    let t = ar_steps;
    let mut remaining = Vec::with_capacity(t + 1);
    for i in 0..=t {
        let r = if i == t {
            0
        } else {
            (n_unknown as f64 * (std::f64::consts::FRAC_PI_2 * i as f64 / t as f64).cos()).ceil()
                as usize
        };
        remaining.push(r.min(n_unknown));
    }
    let mut counts: Vec<usize> = (0..t).map(|i| remaining[i] - remaining[i + 1]).collect();

    // lift zero steps to one token
    for i in 0..t {
        while counts[i] == 0 {
            let donor = pick_donor(&counts, i);
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    debug_assert_eq!(counts.iter().sum::<usize>(), n_unknown);
    Ok(counts)
}

/// Donor for the min-1 lift: the largest later step (latest among ties),
/// falling back to the largest earlier step.
fn pick_donor(counts: &[usize], i: usize) -> usize {
    let later = (i + 1..counts.len())
        .filter(|&j| counts[j] >= 2)
        .max_by_key(|&j| (counts[j], j));
    if let Some(j) = later {
        return j;
    }
    (0..i)
        .filter(|&j| counts[j] >= 2)
        .max_by_key(|&j| (counts[j], j))
        .expect("some step holds at least two tokens")
}

/// Classifier-free guidance in noise space:
/// ε̂ = ε_null + scale · (ε_cond − ε_null). A scale of exactly 1 returns
/// the conditional prediction unchanged (bit-identical).
pub fn guided_eps(
    den: &dyn TokenDenoiser,
    x_t: &Tensor,
    timesteps: &[f64],
    z_cond: &Tensor,
    z_null: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let cond = den.eps(x_t, timesteps, z_cond)?;
    if scale == 1.0 {
        return Ok(cond);
    }
    let null = den.eps(x_t, timesteps, z_null)?;
    combine_guidance(&cond, &null, scale)
}

/// Guidance combination on velocity predictions for the flow objective.
pub fn guided_velocity(
    den: &dyn TokenDenoiser,
    x_t: &Tensor,
    t01: &[f64],
    z_cond: &Tensor,
    z_null: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let cond = den.velocity(x_t, t01, z_cond)?;
    if scale == 1.0 {
        return Ok(cond);
    }
    let null = den.velocity(x_t, t01, z_null)?;
    combine_guidance(&cond, &null, scale)
}

fn combine_guidance(cond: &Tensor, null: &Tensor, scale: f64) -> Result<Tensor> {
    null.add(&cond.sub(null)?.scale(scale))
}

/// Reverse-diffusion walk for a batch of token rows with fixed conditioning,
/// starting from a provided initial state.
///
/// `eps_at(x, t)` must return the predicted noise at original timestep `t`.
/// The noise term is scaled by `temperature`; the final step adds none.
pub fn reverse_diffusion_from(
    mut x: Tensor,
    eps_at: &mut dyn FnMut(&Tensor, f64) -> Result<Tensor>,
    respaced: &NoiseSchedule,
    temperature: f64,
    stream: &mut Stream,
) -> Result<Tensor> {
    let rows = x.shape()[0];
    let dim = x.shape()[1];
    for k in (0..respaced.t_max).rev() {
        let t_orig = respaced.timesteps[k] as f64;
        let eps = eps_at(&x, t_orig)?;
        let a = respaced.alpha[k];
        let ab = respaced.alpha_bar[k];
        let coef = (1.0 - a) / (1.0 - ab).sqrt();
        let mut next: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(xv, ev)| (xv - coef * ev) / a.sqrt())
            .collect();
        if k > 0 && temperature > 0.0 {
            let s = temperature * respaced.sigma[k];
            for v in next.iter_mut() {
                *v += s * stream.normal();
            }
        }
        x = Tensor::from_vec(next, &[rows, dim]);
        if !x.is_finite() {
            return Err(Error::non_finite(
                "reverse diffusion",
                format!("sub-schedule step {k}"),
            ));
        }
    }
    Ok(x)
}

/// Reverse diffusion from fresh standard-normal initial noise.
pub fn reverse_diffusion(
    rows: usize,
    dim: usize,
    eps_at: &mut dyn FnMut(&Tensor, f64) -> Result<Tensor>,
    respaced: &NoiseSchedule,
    temperature: f64,
    stream: &mut Stream,
) -> Result<Tensor> {
    let x0 = Tensor::randn(&[rows, dim], stream);
    reverse_diffusion_from(x0, eps_at, respaced, temperature, stream)
}

/// Euler integration of the flow ODE from t = 0 to t = 1. Temperature
/// scales the initial noise; the ODE itself has no noise term.
pub fn flow_sample(
    rows: usize,
    dim: usize,
    velocity_at: &mut dyn FnMut(&Tensor, f64) -> Result<Tensor>,
    schedule: &FlowSchedule,
    temperature: f64,
    stream: &mut Stream,
) -> Result<Tensor> {
    let steps = schedule.integration_steps;
    let dt = 1.0 / steps as f64;
    let mut x = Tensor::randn(&[rows, dim], stream).scale(temperature);
    for k in 0..steps {
        let t = k as f64 * dt;
        let v = velocity_at(&x, t)?;
        x = x.add(&v.scale(dt))?;
        if !x.is_finite() {
            return Err(Error::non_finite("flow sampling", format!("euler step {k}")));
        }
    }
    Ok(x)
}

/// Patch-grid geometry tying the token sequence to image space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl Geometry {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::invalid(format!(
                "geometry {}×{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }
}

/// Output of a full generation run.
pub struct Generated {
    /// H×W×C image from the assembled token grid.
    pub image: Vec<f64>,
    /// Raw token grid `[tokens, token_dim]`.
    pub tokens: Vec<f64>,
    pub trace: SampleTrace,
}

/// Run the full next set-of-tokens loop for one sample.
///
/// Known tokens (inpainting/outpainting seeds) are written into the grid
/// and marked as already sampled before the loop; with everything known the
/// loop body never runs. The auto-regressive step count is clamped to the
/// number of unknown tokens.
pub fn generate(
    state: &ModelState,
    mode: BindMode,
    class_label: usize,
    cfg: &SamplerConfig,
    geometry: &Geometry,
) -> Result<Generated> {
    geometry.validate()?;
    let n = geometry.tokens();
    let d = geometry.token_dim();
    if n != state.config.max_tokens || d != state.config.token_dim {
        return Err(Error::invalid(format!(
            "geometry ({n} tokens of dim {d}) does not match the checkpoint ({} × {})",
            state.config.max_tokens, state.config.token_dim
        )));
    }
    if class_label >= state.config.num_classes {
        return Err(Error::invalid(format!(
            "class label {class_label} out of range for {} classes",
            state.config.num_classes
        )));
    }
    cfg.validate(n)?;

    let bind = state.bind(mode, None);
    let den = ModelDenoiser {
        bind: &bind,
        config: &state.config,
        denoiser: &state.denoiser,
    };
    let mut stream = Stream::derive(cfg.seed, StreamId::Sampler);

    let mut values = vec![0.0; n * d];
    let mut is_known = vec![false; n];
    for (i, v) in &cfg.known {
        if v.len() != d {
            return Err(Error::invalid(format!(
                "known token {i} has {} values, expected {d}",
                v.len()
            )));
        }
        values[i * d..(i + 1) * d].copy_from_slice(v);
        is_known[*i] = true;
    }
    let initially_unknown: Vec<usize> = (0..n).filter(|&i| !is_known[i]).collect();
    let mut trace = SampleTrace::default();

    if !initially_unknown.is_empty() {
        let t_eff = cfg.ar_steps.min(initially_unknown.len());
        let counts = cosine_step_counts(t_eff, initially_unknown.len())?;
        let respaced = if cfg.objective == Objective::Diffusion {
            Some(NoiseSchedule::default_linear().respaced(cfg.denoise_steps)?)
        } else {
            None
        };
        let flow = FlowSchedule::new(cfg.flow_steps)?;

        for (step, &count) in counts.iter().enumerate() {
            let sampled: Vec<usize> = (0..n).filter(|&i| is_known[i]).collect();
            let unsampled: Vec<usize> = (0..n).filter(|&i| !is_known[i]).collect();
            let plan = MaskPlan {
                masked_idx: unsampled.clone(),
                context_idx: sampled.clone(),
                ratio: unsampled.len() as f64 / n as f64,
            };

            let ctx_data: Vec<f64> = sampled
                .iter()
                .flat_map(|&i| values[i * d..(i + 1) * d].to_vec())
                .collect();
            let ctx = Tensor::from_vec(ctx_data, &[1, sampled.len(), d]);
            let features = encode_tokens(&bind, &state.config, &ctx, &sampled, &[class_label])?;
            let z_all = predict_features(&bind, &state.config, &features, &plan)?;

            let z_null_all = if cfg.guidance > 1.0 {
                let null = state.config.null_class();
                let features_n = encode_tokens(&bind, &state.config, &ctx, &sampled, &[null])?;
                Some(predict_features(&bind, &state.config, &features_n, &plan)?)
            } else {
                None
            };

            // uniformly random next set among the unsampled indices
            let pick = stream.subset(unsampled.len(), count);
            let chosen: Vec<usize> = pick.iter().map(|&j| unsampled[j]).collect();

            let w = state.config.width;
            let z_sel = z_all.index_select(1, &pick)?.reshape(&[count, w])?;
            let z_null_sel = match &z_null_all {
                Some(zn) => Some(zn.index_select(1, &pick)?.reshape(&[count, w])?),
                None => None,
            };

            let rows = match cfg.objective {
                Objective::Diffusion => {
                    let respaced = respaced.as_ref().expect("diffusion schedule built");
                    let mut eps_at = |x: &Tensor, t: f64| -> Result<Tensor> {
                        let ts = vec![t; count];
                        match &z_null_sel {
                            Some(zn) => guided_eps(&den, x, &ts, &z_sel, zn, cfg.guidance),
                            None => den.eps(x, &ts, &z_sel),
                        }
                    };
                    reverse_diffusion(count, d, &mut eps_at, respaced, cfg.temperature, &mut stream)?
                }
                Objective::Flow => {
                    let mut vel_at = |x: &Tensor, t: f64| -> Result<Tensor> {
                        let ts = vec![t; count];
                        match &z_null_sel {
                            Some(zn) => guided_velocity(&den, x, &ts, &z_sel, zn, cfg.guidance),
                            None => den.velocity(x, &ts, &z_sel),
                        }
                    };
                    flow_sample(count, d, &mut vel_at, &flow, cfg.temperature, &mut stream)?
                }
            };
            for (r, &i) in chosen.iter().enumerate() {
                values[i * d..(i + 1) * d].copy_from_slice(&rows.data()[r * d..(r + 1) * d]);
                is_known[i] = true;
            }
            trace.steps.push(TraceStep {
                step,
                chosen: chosen.clone(),
                remaining_after: is_known.iter().filter(|&&k| !k).count(),
            });
        }
    }
    trace.assert_partition(&initially_unknown);

    let image = unpatchify(
        &values,
        geometry.height,
        geometry.width,
        geometry.channels,
        geometry.patch,
    )?;
    Ok(Generated {
        image,
        tokens: values,
        trace,
    })
}
