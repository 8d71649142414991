//! Training objectives: per-token denoising (noise prediction), flow
//! matching (velocity prediction), embedding prediction, and their sum.
//!
//! Each masked token gets four independent (t, noise) draws; the predicted
//! embedding z is tiled rather than recomputed. The per-token distance is
//! the squared norm over the token dimension, averaged over all rows.

use crate::error::{Error, Result};
use crate::model::denoiser::{denoise, DenoiseHead};
use crate::model::{Binding, DenoiserConfig, TransformerConfig};
use crate::rng::Stream;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Independent (t, ε) draws per masked token.
pub const DRAWS_PER_TOKEN: usize = 4;

/// Default smoothed-l1 threshold for the prediction loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Anything that can denoise a batch of token rows. The model implements
/// this; tests substitute analytic shims.
pub trait TokenDenoiser {
    /// Predicted noise for `[rows, token_dim]` corrupted tokens at discrete
    /// timesteps (1-based values of the full table).
    fn eps(&self, x_t: &Tensor, timesteps: &[f64], z: &Tensor) -> Result<Tensor>;
    /// Predicted velocity at interpolation times t ∈ [0, 1].
    fn velocity(&self, x_t: &Tensor, t01: &[f64], z: &Tensor) -> Result<Tensor>;
}

/// The learned denoising MLP behind the [`TokenDenoiser`] contract.
pub struct ModelDenoiser<'a> {
    pub bind: &'a Binding,
    pub config: &'a TransformerConfig,
    pub denoiser: &'a DenoiserConfig,
}

impl TokenDenoiser for ModelDenoiser<'_> {
    fn eps(&self, x_t: &Tensor, timesteps: &[f64], z: &Tensor) -> Result<Tensor> {
        denoise(
            self.bind,
            self.config,
            self.denoiser,
            x_t,
            timesteps,
            z,
            DenoiseHead::Epsilon,
        )
    }

    fn velocity(&self, x_t: &Tensor, t01: &[f64], z: &Tensor) -> Result<Tensor> {
        // spread [0,1] over the sinusoidal embedding's useful range
        let scaled: Vec<f64> = t01.iter().map(|t| t * 1000.0).collect();
        denoise(
            self.bind,
            self.config,
            self.denoiser,
            x_t,
            &scaled,
            z,
            DenoiseHead::Velocity,
        )
    }
}

/// A scalar loss plus a flag for the degenerate empty-mask case.
pub struct LossValue {
    pub value: Tensor,
    pub empty: bool,
}

/// Interpolation pair for the flow objective: corrupted sample and the
/// (t-independent) velocity target x − ε.
pub fn flow_pair(x: &[f64], eps: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let x_t = x
        .iter()
        .zip(eps)
        .map(|(xi, ei)| t * xi + (1.0 - t) * ei)
        .collect();
    let v = x.iter().zip(eps).map(|(xi, ei)| xi - ei).collect();
    (x_t, v)
}

fn tile_rows(rows: usize, copies: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(rows * copies);
    for _ in 0..copies {
        idx.extend(0..rows);
    }
    idx
}

/// Squared-norm-per-row loss: sum over token dim, mean over rows.
fn per_token_sq(diff: &Tensor) -> Result<Tensor> {
    diff.mul(diff)?.sum_axis(1)?.mean_all()
}

/// Noise-prediction loss over masked tokens.
///
/// `x` is `[rows, token_dim]` of clean masked tokens (no gradient), `z`
/// `[rows, width]` predicted embeddings (gradient flows through). Each row
/// is tiled [`DRAWS_PER_TOKEN`] times; per tiled row one t is drawn
/// uniformly from the full table and one standard-normal ε.
pub fn diffusion_loss(
    den: &dyn TokenDenoiser,
    schedule: &NoiseSchedule,
    x: &Tensor,
    z: &Tensor,
    stream: &mut Stream,
) -> Result<LossValue> {
    diffusion_loss_with_draws(den, schedule, x, z, stream, DRAWS_PER_TOKEN)
}

pub(crate) fn diffusion_loss_with_draws(
    den: &dyn TokenDenoiser,
    schedule: &NoiseSchedule,
    x: &Tensor,
    z: &Tensor,
    stream: &mut Stream,
    draws: usize,
) -> Result<LossValue> {
    let rows = check_loss_inputs("diffusion_loss", x, z)?;
    if rows == 0 {
        return Ok(LossValue {
            value: Tensor::scalar(0.0),
            empty: true,
        });
    }
    let d = x.shape()[1];
    let tiled = tile_rows(rows, draws);
    let x4 = x.detach().index_select(0, &tiled)?;
    let z4 = z.index_select(0, &tiled)?;

    let total = rows * draws;
    let mut ts = Vec::with_capacity(total);
    let mut noise = Vec::with_capacity(total * d);
    let mut x_t = Vec::with_capacity(total * d);
    for r in 0..total {
        let t = 1 + stream.below(schedule.t_max);
        let (cs, cn) = schedule.corruption_coeffs(t - 1);
        ts.push(schedule.timesteps[t - 1] as f64);
        for j in 0..d {
            let e = stream.normal();
            noise.push(e);
            x_t.push(cs * x4.data()[r * d + j] + cn * e);
        }
    }
    let x_t = Tensor::from_vec(x_t, &[total, d]);
    let noise = Tensor::from_vec(noise, &[total, d]);
    let predicted = den.eps(&x_t, &ts, &z4)?;
    let value = per_token_sq(&predicted.sub(&noise)?)?;
    Ok(LossValue {
        value,
        empty: false,
    })
}

/// Flow-matching loss over masked tokens: regress the velocity head toward
/// x − ε under linear interpolation, with t uniform on [0, 1).
pub fn flow_loss(
    den: &dyn TokenDenoiser,
    x: &Tensor,
    z: &Tensor,
    stream: &mut Stream,
) -> Result<LossValue> {
    flow_loss_with_draws(den, x, z, stream, DRAWS_PER_TOKEN)
}

pub(crate) fn flow_loss_with_draws(
    den: &dyn TokenDenoiser,
    x: &Tensor,
    z: &Tensor,
    stream: &mut Stream,
    draws: usize,
) -> Result<LossValue> {
    let rows = check_loss_inputs("flow_loss", x, z)?;
    if rows == 0 {
        return Ok(LossValue {
            value: Tensor::scalar(0.0),
            empty: true,
        });
    }
    let d = x.shape()[1];
    let tiled = tile_rows(rows, draws);
    let x4 = x.detach().index_select(0, &tiled)?;
    let z4 = z.index_select(0, &tiled)?;

    let total = rows * draws;
    let mut ts = Vec::with_capacity(total);
    let mut x_t = Vec::with_capacity(total * d);
    let mut target = Vec::with_capacity(total * d);
    for r in 0..total {
        let t = stream.uniform();
        ts.push(t);
        let row = &x4.data()[r * d..(r + 1) * d];
        let eps: Vec<f64> = (0..d).map(|_| stream.normal()).collect();
        let (xt, v) = flow_pair(row, &eps, t);
        x_t.extend(xt);
        target.extend(v);
    }
    let x_t = Tensor::from_vec(x_t, &[total, d]);
    let target = Tensor::from_vec(target, &[total, d]);
    let predicted = den.velocity(&x_t, &ts, &z4)?;
    let value = per_token_sq(&predicted.sub(&target)?)?;
    Ok(LossValue {
        value,
        empty: false,
    })
}

fn check_loss_inputs(op: &'static str, x: &Tensor, z: &Tensor) -> Result<usize> {
    if x.shape().len() != 2 || z.shape().len() != 2 || x.shape()[0] != z.shape()[0] {
        return Err(Error::shape(
            op,
            format!("x {:?} vs z {:?}", x.shape(), z.shape()),
        ));
    }
    Ok(x.shape()[0])
}

/// Embedding-prediction loss: smoothed l1 between projected predictions and
/// target features, averaged over rows and feature dims. Targets must be
/// gradient-free.
pub fn prediction_loss(projected: &Tensor, targets: &Tensor, beta: f64) -> Result<Tensor> {
    if projected.shape() != targets.shape() {
        return Err(Error::shape(
            "prediction_loss",
            format!("{:?} vs {:?}", projected.shape(), targets.shape()),
        ));
    }
    debug_assert!(
        !targets.is_attached(),
        "prediction targets must be detached"
    );
    projected.smooth_l1(targets, beta)?.mean_all()
}

/// Combined objective: unweighted sum of the denoising and prediction terms.
pub fn total_loss(denoising: &Tensor, prediction: &Tensor) -> Result<Tensor> {
    for (name, t) in [("denoising", denoising), ("prediction", prediction)] {
        if !t.is_finite() {
            return Err(Error::non_finite("total_loss", name));
        }
    }
    denoising.add(prediction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stream, StreamId};

    /// ε̂ ≡ 0 and v̂ ≡ 0.
    struct ZeroDenoiser;
    impl TokenDenoiser for ZeroDenoiser {
        fn eps(&self, x_t: &Tensor, _: &[f64], _: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(x_t.shape()))
        }
        fn velocity(&self, x_t: &Tensor, _: &[f64], _: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(x_t.shape()))
        }
    }

    /// Perfect oracle for clean tokens fixed at zero: ε = x_t / √(1−ᾱ_t).
    struct PerfectEpsAtZero {
        schedule: NoiseSchedule,
    }
    impl TokenDenoiser for PerfectEpsAtZero {
        fn eps(&self, x_t: &Tensor, ts: &[f64], _: &Tensor) -> Result<Tensor> {
            let d = x_t.shape()[1];
            let mut out = vec![0.0; x_t.numel()];
            for (r, &t) in ts.iter().enumerate() {
                let (_, cn) = self.schedule.corruption_coeffs(t as usize - 1);
                for j in 0..d {
                    out[r * d + j] = x_t.data()[r * d + j] / cn;
                }
            }
            Ok(Tensor::from_vec(out, x_t.shape()))
        }
        fn velocity(&self, x_t: &Tensor, _: &[f64], _: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(x_t.shape()))
        }
    }

    #[test]
    fn zero_denoiser_expectation_is_token_dim() {
        // E‖ε − 0‖² = D; Monte-Carlo mean within 2%
        let schedule = NoiseSchedule::default_linear();
        let mut stream = Stream::derive(31, StreamId::Noise);
        let d = 6;
        let rows = 2_500;
        let mut acc = 0.0;
        let reps = 10;
        for _ in 0..reps {
            let x = Tensor::randn(&[rows, d], &mut stream);
            let z = Tensor::zeros(&[rows, 4]);
            let loss = diffusion_loss(&ZeroDenoiser, &schedule, &x, &z, &mut stream).unwrap();
            acc += loss.value.item();
        }
        let mean = acc / reps as f64;
        let rel = (mean - d as f64).abs() / d as f64;
        assert!(rel < 0.02, "mean {mean} vs {d}");
    }

    #[test]
    fn perfect_oracle_gives_zero_loss() {
        let schedule = NoiseSchedule::default_linear();
        let mut stream = Stream::derive(32, StreamId::Noise);
        let x = Tensor::zeros(&[50, 3]);
        let z = Tensor::zeros(&[50, 4]);
        let den = PerfectEpsAtZero {
            schedule: schedule.clone(),
        };
        let loss = diffusion_loss(&den, &schedule, &x, &z, &mut stream).unwrap();
        assert!(loss.value.item() < 1e-20, "loss {}", loss.value.item());
    }

    #[test]
    fn four_draw_loss_is_mean_of_single_draw_losses() {
        let schedule = NoiseSchedule::default_linear();
        let x = Tensor::from_vec(vec![0.3, -0.7], &[1, 2]);
        let z = Tensor::zeros(&[1, 4]);

        let mut s4 = Stream::derive(33, StreamId::Noise);
        let loss4 =
            diffusion_loss_with_draws(&ZeroDenoiser, &schedule, &x, &z, &mut s4, 4).unwrap();

        let mut s1 = Stream::derive(33, StreamId::Noise);
        let mut acc = 0.0;
        for _ in 0..4 {
            acc += diffusion_loss_with_draws(&ZeroDenoiser, &schedule, &x, &z, &mut s1, 1)
                .unwrap()
                .value
                .item();
        }
        assert!((loss4.value.item() - acc / 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_flags_and_zeroes() {
        let schedule = NoiseSchedule::default_linear();
        let mut stream = Stream::derive(34, StreamId::Noise);
        let x = Tensor::zeros(&[0, 3]);
        let z = Tensor::zeros(&[0, 4]);
        let loss = diffusion_loss(&ZeroDenoiser, &schedule, &x, &z, &mut stream).unwrap();
        assert!(loss.empty);
        assert_eq!(loss.value.item(), 0.0);
        let loss = flow_loss(&ZeroDenoiser, &x, &z, &mut stream).unwrap();
        assert!(loss.empty);
        assert_eq!(loss.value.item(), 0.0);
    }

    #[test]
    fn flow_pair_target_is_t_independent() {
        let x = [0.4, -1.2];
        let eps = [0.9, 0.1];
        let (_, v1) = flow_pair(&x, &eps, 0.1);
        let (_, v2) = flow_pair(&x, &eps, 0.9);
        assert_eq!(v1, v2);
        // x = ε → zero velocity target
        let (_, v0) = flow_pair(&eps, &eps, 0.5);
        assert!(v0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_zero_network_expectation() {
        // v̂ ≡ 0 → E‖x − ε‖² = ‖x‖² + D for fixed x
        let mut stream = Stream::derive(35, StreamId::Noise);
        let xfix = [0.5, -0.25, 1.0];
        let d = xfix.len();
        let rows = 2_500;
        let mut acc = 0.0;
        let reps = 10;
        for _ in 0..reps {
            let x = Tensor::from_vec(
                (0..rows).flat_map(|_| xfix.iter().cloned()).collect(),
                &[rows, d],
            );
            let z = Tensor::zeros(&[rows, 4]);
            acc += flow_loss(&ZeroDenoiser, &x, &z, &mut stream)
                .unwrap()
                .value
                .item();
        }
        let mean = acc / reps as f64;
        let expect = xfix.iter().map(|v| v * v).sum::<f64>() + d as f64;
        assert!(
            (mean - expect).abs() / expect < 0.02,
            "mean {mean} vs {expect}"
        );
    }

    #[test]
    fn prediction_loss_zero_on_match() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = a.detach();
        assert_eq!(prediction_loss(&a, &b, 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn prediction_loss_matches_scalar_reference() {
        let mut stream = Stream::derive(36, StreamId::Noise);
        let beta = 1.0;
        let a = Tensor::randn(&[5, 7], &mut stream);
        let b = Tensor::randn(&[5, 7], &mut stream);
        let loss = prediction_loss(&a, &b, beta).unwrap().item();

        let mut acc = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            let d: f64 = x - y;
            acc += if d.abs() < beta {
                0.5 * d * d / beta
            } else {
                d.abs() - 0.5 * beta
            };
        }
        let reference = acc / 35.0;
        assert!((loss - reference).abs() < 1e-12);
    }

    #[test]
    fn total_loss_sum_and_errors() {
        let zero = Tensor::scalar(0.0);
        let a = Tensor::scalar(1.25);
        assert_eq!(total_loss(&zero, &zero).unwrap().item(), 0.0);
        assert_eq!(total_loss(&a, &zero).unwrap().item(), 1.25);
        let bad = Tensor::scalar(f64::NAN);
        assert!(total_loss(&a, &bad).is_err());
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        use crate::tensor::Tape;
        let data = vec![0.5, -0.3, 0.8, 0.1];

        let grads_of = |which: u8| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(data.clone(), &[2, 2]);
            let l1 = x.silu().sum_all().unwrap();
            let l2 = x.mul(&x).unwrap().mean_all().unwrap();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => total_loss(&l1, &l2).unwrap(),
            };
            let g = tape.backward(&loss).unwrap();
            g.get(&x).unwrap().to_vec()
        };
        let g1 = grads_of(0);
        let g2 = grads_of(1);
        let gsum = grads_of(2);
        for i in 0..4 {
            assert!((gsum[i] - (g1[i] + g2[i])).abs() < 1e-14);
        }
    }
}
