//! Denoising MLP with adaptive layer-norm conditioning.
//!
//! Each residual block applies LayerNorm, a linear layer, SiLU, and a
//! second (zero-initialized) linear layer. The predicted embedding z is
//! added to the sinusoidal time embedding and conditions every LayerNorm
//! through a per-block affine map producing its gain and bias. Two output
//! heads share the trunk: one predicts the noise ε, the other a velocity
//! field for the flow objective.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

use super::backbone::linear;
use super::{trunc_normal, Binding, DenoiserConfig, ParamStore, TransformerConfig};

/// Which output head to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiseHead {
    Epsilon,
    Velocity,
}

pub(super) fn init_denoiser(
    store: &mut ParamStore,
    cfg: &TransformerConfig,
    den: &DenoiserConfig,
    stream: &mut Stream,
) {
    let h = den.hidden;
    let d = cfg.token_dim;
    let w = cfg.width;
    let te = den.time_dim;
    store.add("den.input.w", &[d, h], trunc_normal(d * h, 0.02, stream), false);
    store.add("den.input.b", &[h], vec![0.0; h], false);
    store.add("den.zproj.w", &[w, h], trunc_normal(w * h, 0.02, stream), false);
    store.add("den.zproj.b", &[h], vec![0.0; h], false);
    store.add("den.temb.w1", &[te, h], trunc_normal(te * h, 0.02, stream), false);
    store.add("den.temb.b1", &[h], vec![0.0; h], false);
    store.add("den.temb.w2", &[h, h], trunc_normal(h * h, 0.02, stream), false);
    store.add("den.temb.b2", &[h], vec![0.0; h], false);
    for b in 0..den.blocks {
        let p = format!("den.b{b}");
        // conditioning map starts at zero: plain LayerNorm at init
        store.add(&format!("{p}.ada.w"), &[h, 2 * h], vec![0.0; h * 2 * h], false);
        store.add(&format!("{p}.ada.b"), &[2 * h], vec![0.0; 2 * h], false);
        store.add(&format!("{p}.w1"), &[h, h], trunc_normal(h * h, 0.02, stream), false);
        store.add(&format!("{p}.b1"), &[h], vec![0.0; h], false);
        // residual-final projection: zero-initialized
        store.add(&format!("{p}.w2"), &[h, h], vec![0.0; h * h], false);
        store.add(&format!("{p}.b2"), &[h], vec![0.0; h], false);
    }
    store.add("den.out.ada.w", &[h, 2 * h], vec![0.0; h * 2 * h], false);
    store.add("den.out.ada.b", &[2 * h], vec![0.0; 2 * h], false);
    store.add("den.out.eps.w", &[h, d], vec![0.0; h * d], false);
    store.add("den.out.eps.b", &[d], vec![0.0; d], false);
    store.add("den.out.vel.w", &[h, d], vec![0.0; h * d], false);
    store.add("den.out.vel.b", &[d], vec![0.0; d], false);
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `[rows, dim]`.
/// Detached constant: the timestep is an input, not a parameter.
pub fn timestep_embedding(ts: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; ts.len() * dim];
    for (r, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out[r * dim + i] = (t * freq).cos();
            out[r * dim + half + i] = (t * freq).sin();
        }
    }
    Tensor::from_vec(out, &[ts.len(), dim])
}

/// LayerNorm whose gain and bias come from the conditioning vector.
fn ada_layer_norm(x: &Tensor, cond_act: &Tensor, bind: &Binding, prefix: &str) -> Result<Tensor> {
    let modulation = linear(
        cond_act,
        bind.get(&format!("{prefix}.ada.w")),
        bind.get(&format!("{prefix}.ada.b")),
    )?;
    let h = x.shape()[1];
    let scale = modulation.index_select(1, &(0..h).collect::<Vec<_>>())?;
    let shift = modulation.index_select(1, &(h..2 * h).collect::<Vec<_>>())?;
    x.layer_norm(&scale.add_scalar(1.0), &shift, 1e-6)
}

/// Run the denoising trunk and read one head.
///
/// `x_t` is `[rows, token_dim]`, `timesteps` one value per row (discrete
/// steps for the noise schedule, fractional t·1000 for the flow), and `z`
/// `[rows, width]` predicted embeddings.
pub fn denoise(
    bind: &Binding,
    cfg: &TransformerConfig,
    den: &DenoiserConfig,
    x_t: &Tensor,
    timesteps: &[f64],
    z: &Tensor,
    head: DenoiseHead,
) -> Result<Tensor> {
    let rows = if x_t.shape().len() == 2 {
        x_t.shape()[0]
    } else {
        return Err(Error::shape(
            "denoise",
            format!("expected [rows, token_dim], got {:?}", x_t.shape()),
        ));
    };
    if x_t.shape()[1] != cfg.token_dim {
        return Err(Error::shape(
            "denoise",
            format!("token dim {} vs config {}", x_t.shape()[1], cfg.token_dim),
        ));
    }
    if z.shape() != [rows, cfg.width] {
        return Err(Error::shape(
            "denoise",
            format!("z {:?} vs [{rows}, {}]", z.shape(), cfg.width),
        ));
    }
    if timesteps.len() != rows {
        return Err(Error::shape(
            "denoise",
            format!("{rows} rows vs {} timesteps", timesteps.len()),
        ));
    }

    let temb_raw = timestep_embedding(timesteps, den.time_dim);
    let temb = linear(
        &linear(&temb_raw, bind.get("den.temb.w1"), bind.get("den.temb.b1"))?.silu(),
        bind.get("den.temb.w2"),
        bind.get("den.temb.b2"),
    )?;
    let zc = linear(z, bind.get("den.zproj.w"), bind.get("den.zproj.b"))?;
    let cond_act = temb.add(&zc)?.silu();

    let mut hst = linear(x_t, bind.get("den.input.w"), bind.get("den.input.b"))?;
    for b in 0..den.blocks {
        let p = format!("den.b{b}");
        let xn = ada_layer_norm(&hst, &cond_act, bind, &p)?;
        let inner = linear(&xn, bind.get(&format!("{p}.w1")), bind.get(&format!("{p}.b1")))?
            .silu();
        let inner = linear(&inner, bind.get(&format!("{p}.w2")), bind.get(&format!("{p}.b2")))?;
        hst = hst.add(&inner)?;
    }
    let xn = ada_layer_norm(&hst, &cond_act, bind, "den.out")?;
    match head {
        DenoiseHead::Epsilon => linear(&xn, bind.get("den.out.eps.w"), bind.get("den.out.eps.b")),
        DenoiseHead::Velocity => {
            linear(&xn, bind.get("den.out.vel.w"), bind.get("den.out.vel.b"))
        }
    }
}
