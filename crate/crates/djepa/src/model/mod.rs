//! Model state: three transformer towers, projection head, denoising MLP,
//! embeddings, the EMA target copy, and the EMA-of-weights evaluation copy.

pub mod backbone;
pub mod denoiser;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Tape, Tensor};

/// Transformer shape shared by the context encoder, target encoder, and
/// feature predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// D: flattened patch dimension.
    pub token_dim: usize,
    /// N: tokens per sample.
    pub max_tokens: usize,
    pub num_classes: usize,
}

impl TransformerConfig {
    /// Desk-scale default profile.
    pub fn tiny(token_dim: usize, max_tokens: usize, num_classes: usize) -> Self {
        TransformerConfig {
            depth: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            token_dim,
            max_tokens,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("transformer depth must be >= 1"));
        }
        if self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.token_dim == 0 || self.max_tokens == 0 {
            return Err(Error::invalid("token_dim and max_tokens must be positive"));
        }
        Ok(())
    }

    /// Reserved label id for the null (guidance-dropout) class.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

/// Denoising MLP shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            blocks: 3,
            hidden: 128,
            time_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::invalid("denoiser needs at least one block"));
        }
        if self.hidden == 0 || self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::invalid(
                "denoiser hidden and even time_dim must be positive",
            ));
        }
        Ok(())
    }
}

/// One named learnable parameter.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Whether the weight-decay ramp applies (projection head and denoiser
    /// are exempt).
    pub decay: bool,
}

/// Ordered, name-addressable parameter list. Iteration order is creation
/// order and is the canonical layout for optimizer moments and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>, decay: bool) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            self.index_of(name).is_none(),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            decay,
        });
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Which parameter values a forward pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Current learnable values as tape leaves (training).
    Trainable,
    /// Current learnable values, detached (forward-only paths).
    Frozen,
    /// Target-encoder EMA values for encoder parameters plus the current
    /// shared embeddings, all detached.
    Target,
    /// EMA-of-weights evaluation copy, detached.
    EvalEma,
}

/// Name → tensor view over one choice of parameter values.
pub struct Binding {
    entries: Vec<(String, Tensor)>,
}

impl Binding {
    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("binding has no parameter {name}"))
            .1
    }

    /// Tensors in store order, for gradient collection.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// All learnable parameters plus the non-learnable EMA copies.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: TransformerConfig,
    pub denoiser: DenoiserConfig,
    pub params: ParamStore,
    /// φ̄: EMA copy of the encoder parameters, aligned with the encoder
    /// entries of `params` in store order. Never on the tape.
    pub target: Vec<Vec<f64>>,
    /// EMA of every learnable parameter, used for evaluation.
    pub eval_ema: Vec<Vec<f64>>,
    pub step: u64,
}

pub const ENCODER: &str = "encoder";
pub const PREDICTOR: &str = "predictor";

impl ModelState {
    /// Initialize parameters: truncated-normal weights (std 0.02), zero
    /// biases, and zero-initialized final projections on every residual
    /// branch. The target copy starts bit-identical to the encoder.
    pub fn init(
        config: TransformerConfig,
        denoiser: DenoiserConfig,
        stream: &mut Stream,
    ) -> Result<ModelState> {
        config.validate()?;
        denoiser.validate()?;
        let mut store = ParamStore::default();
        init_tower(&mut store, ENCODER, &config, true, stream);
        init_tower(&mut store, PREDICTOR, &config, false, stream);

        let w = config.width;
        // embeddings
        store.add(
            "embed.class",
            &[config.num_classes + 1, w],
            trunc_normal((config.num_classes + 1) * w, 0.02, stream),
            true,
        );
        store.add(
            "embed.pos",
            &[config.max_tokens, w],
            trunc_normal(config.max_tokens * w, 0.02, stream),
            true,
        );
        store.add("embed.mask", &[w], trunc_normal(w, 0.02, stream), true);

        // projection head u: affine → SiLU → affine, width-preserving
        store.add("proj.w1", &[w, w], trunc_normal(w * w, 0.02, stream), false);
        store.add("proj.b1", &[w], vec![0.0; w], false);
        store.add("proj.w2", &[w, w], trunc_normal(w * w, 0.02, stream), false);
        store.add("proj.b2", &[w], vec![0.0; w], false);

        denoiser::init_denoiser(&mut store, &config, &denoiser, stream);

        let target = store
            .iter()
            .filter(|p| p.name.starts_with(ENCODER))
            .map(|p| p.data.clone())
            .collect();
        let eval_ema = store.iter().map(|p| p.data.clone()).collect();
        Ok(ModelState {
            config,
            denoiser,
            params: store,
            target,
            eval_ema,
            step: 0,
        })
    }

    /// Learnable parameter count; the target copy is excluded by the usual
    /// counting convention.
    pub fn learnable_values(&self) -> usize {
        self.params.total_values()
    }

    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(ENCODER))
            .map(|p| p.name.clone())
            .collect()
    }

    /// Build a name → tensor view. `Trainable` must be given the step tape.
    pub fn bind(&self, mode: BindMode, tape: Option<&Tape>) -> Binding {
        let mut entries = Vec::with_capacity(self.params.len());
        match mode {
            BindMode::Trainable => {
                let tape = tape.expect("trainable binding requires a tape");
                for p in self.params.iter() {
                    entries.push((p.name.clone(), tape.leaf(p.data.clone(), &p.shape)));
                }
            }
            BindMode::Frozen => {
                for p in self.params.iter() {
                    entries.push((
                        p.name.clone(),
                        Tensor::from_vec(p.data.clone(), &p.shape),
                    ));
                }
            }
            BindMode::Target => {
                // EMA'd encoder weights; the shared embedding tables are not
                // part of φ̄ and are read at their current values (detached)
                let mut k = 0;
                for p in self.params.iter() {
                    if p.name.starts_with(ENCODER) {
                        entries.push((
                            p.name.clone(),
                            Tensor::from_vec(self.target[k].clone(), &p.shape),
                        ));
                        k += 1;
                    } else if p.name.starts_with("embed.") {
                        entries.push((
                            p.name.clone(),
                            Tensor::from_vec(p.data.clone(), &p.shape),
                        ));
                    }
                }
            }
            BindMode::EvalEma => {
                for (p, ema) in self.params.iter().zip(&self.eval_ema) {
                    entries.push((p.name.clone(), Tensor::from_vec(ema.clone(), &p.shape)));
                }
            }
        }
        Binding { entries }
    }

    /// φ̄ ← α·φ̄ + (1−α)·φ over the encoder parameters.
    pub fn ema_update_target(&mut self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("EMA alpha {alpha} outside [0, 1]")));
        }
        let mut k = 0;
        for p in self.params.iter() {
            if p.name.starts_with(ENCODER) {
                for (t, v) in self.target[k].iter_mut().zip(&p.data) {
                    *t = alpha * *t + (1.0 - alpha) * v;
                }
                k += 1;
            }
        }
        Ok(())
    }

    /// Evaluation EMA over all learnable parameters.
    pub fn ema_update_eval(&mut self, decay: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid(format!("EMA decay {decay} outside [0, 1]")));
        }
        for (ema, p) in self.eval_ema.iter_mut().zip(self.params.iter()) {
            for (e, v) in ema.iter_mut().zip(&p.data) {
                *e = decay * *e + (1.0 - decay) * v;
            }
        }
        Ok(())
    }
}

fn init_tower(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &TransformerConfig,
    with_input_proj: bool,
    stream: &mut Stream,
) {
    let w = cfg.width;
    if with_input_proj {
        store.add(
            &format!("{prefix}.input.w"),
            &[cfg.token_dim, w],
            trunc_normal(cfg.token_dim * w, 0.02, stream),
            true,
        );
        store.add(&format!("{prefix}.input.b"), &[w], vec![0.0; w], true);
    }
    let hidden = w * cfg.mlp_ratio;
    for b in 0..cfg.depth {
        let p = format!("{prefix}.b{b}");
        store.add(&format!("{p}.ln1.g"), &[w], vec![1.0; w], true);
        store.add(&format!("{p}.ln1.b"), &[w], vec![0.0; w], true);
        for nm in ["wq", "wk", "wv"] {
            store.add(
                &format!("{p}.attn.{nm}"),
                &[w, w],
                trunc_normal(w * w, 0.02, stream),
                true,
            );
        }
        for nm in ["bq", "bk", "bv"] {
            store.add(&format!("{p}.attn.{nm}"), &[w], vec![0.0; w], true);
        }
        // residual-final projection: zero-initialized
        store.add(&format!("{p}.attn.wo"), &[w, w], vec![0.0; w * w], true);
        store.add(&format!("{p}.attn.bo"), &[w], vec![0.0; w], true);
        store.add(&format!("{p}.ln2.g"), &[w], vec![1.0; w], true);
        store.add(&format!("{p}.ln2.b"), &[w], vec![0.0; w], true);
        store.add(
            &format!("{p}.mlp.w1"),
            &[w, hidden],
            trunc_normal(w * hidden, 0.02, stream),
            true,
        );
        store.add(&format!("{p}.mlp.b1"), &[hidden], vec![0.0; hidden], true);
        store.add(&format!("{p}.mlp.w2"), &[hidden, w], vec![0.0; hidden * w], true);
        store.add(&format!("{p}.mlp.b2"), &[w], vec![0.0; w], true);
    }
    store.add(&format!("{prefix}.out_ln.g"), &[w], vec![1.0; w], true);
    store.add(&format!("{prefix}.out_ln.b"), &[w], vec![0.0; w], true);
}

/// Truncated normal init: N(0, std²) restricted to ±2 std by rejection.
pub fn trunc_normal(n: usize, std: f64, stream: &mut Stream) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = stream.normal();
            if v.abs() <= 2.0 {
                break v * std;
            }
        })
        .collect()
}
