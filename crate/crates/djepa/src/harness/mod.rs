//! Training loop, checkpointing, and metrics.
//!
//! Every stochastic decision inside training is keyed on (seed, step) or
//! (seed, epoch) through counter-based streams, so a (config, seed) pair
//! fully determines the run and resuming from a checkpoint replays the
//! exact continuation.

pub mod eval;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{flip_horizontal, synth_dataset, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::io::{read_tensor_raw, read_u32, write_tensor_raw, write_u32};
use crate::losses::{
    diffusion_loss, flow_loss, prediction_loss, total_loss, LossValue, ModelDenoiser,
};
use crate::model::backbone::{encode_target, encode_tokens, predict_features, project};
use crate::model::{BindMode, DenoiserConfig, ModelState, ParamStore, TransformerConfig};
use crate::optim::AdamW;
use crate::rng::{mix, Stream, StreamId};
use crate::sampler::{Geometry, Objective};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tape, Tensor};
use crate::tokens::{build_mask_plan, patchify, sample_mask_ratio};

/// Where training data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Path { path: String },
    Synth { synth: SynthSpec },
}

/// Full description of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DataSource,
    pub model: TransformerConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    pub objective: Objective,
    pub patch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Fraction of total steps spent in linear warmup.
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_wd_start")]
    pub weight_decay_start: f64,
    #[serde(default = "default_wd_end")]
    pub weight_decay_end: f64,
    /// Decay of the EMA-of-weights evaluation copy.
    #[serde(default = "default_ema")]
    pub eval_ema_decay: f64,
    /// Target-encoder EMA coefficient.
    #[serde(default = "default_ema")]
    pub target_alpha: f64,
    /// Probability of replacing a label with the null class during training.
    #[serde(default = "default_label_dropout")]
    pub label_dropout: f64,
    #[serde(default = "default_beta")]
    pub smooth_l1_beta: f64,
    pub seed: u64,
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: usize,
    /// Horizontal-flip augmentation (image datasets only).
    #[serde(default = "default_true")]
    pub hflip: bool,
}

fn default_lr() -> f64 {
    8e-4
}
fn default_warmup() -> f64 {
    0.07
}
fn default_wd_start() -> f64 {
    0.02
}
fn default_wd_end() -> f64 {
    0.2
}
fn default_ema() -> f64 {
    0.9999
}
fn default_label_dropout() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    1.0
}
fn default_ckpt_every() -> usize {
    1000
}
fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.denoiser.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        for (name, v) in [
            ("warmup_fraction", self.warmup_fraction),
            ("label_dropout", self.label_dropout),
            ("eval_ema_decay", self.eval_ema_decay),
            ("target_alpha", self.target_alpha),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.lr <= 0.0 || self.smooth_l1_beta <= 0.0 {
            return Err(Error::invalid("lr and smooth_l1_beta must be positive"));
        }
        if self.weight_decay_start < 0.0 || self.weight_decay_end < self.weight_decay_start {
            return Err(Error::invalid("weight decay ramp must be non-decreasing"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DataSource::Path { path } => Dataset::load(Path::new(path)),
            DataSource::Synth { synth } => {
                let mut stream = Stream::derive(self.seed, StreamId::Data);
                synth_dataset(synth, &mut stream)
            }
        }
    }

    pub fn geometry(&self, ds: &Dataset) -> Geometry {
        Geometry {
            height: ds.height,
            width: ds.width,
            channels: ds.channels,
            patch: self.patch,
        }
    }

    /// Weight decay at a 0-based epoch: exactly linear between the ramp ends.
    pub fn weight_decay_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.weight_decay_start;
        }
        let f = epoch as f64 / (self.epochs - 1) as f64;
        self.weight_decay_start + (self.weight_decay_end - self.weight_decay_start) * f
    }

    /// Learning rate at a 0-based step under linear warmup.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        let warmup = (self.warmup_fraction * total_steps as f64).floor().max(0.0) as u64;
        if warmup == 0 || step >= warmup {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / warmup as f64
        }
    }
}

/// One metrics row per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub denoising_loss: f64,
    pub prediction_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    /// Collapse monitor: mean per-dimension std of the target features.
    pub target_std: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub wall_ms: u64,
}

pub fn write_metrics_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Mean over feature dims of the per-dim std across rows. Near zero means
/// the encoder produces input-independent outputs.
pub fn collapse_monitor(rows: &[f64], n_rows: usize, dim: usize) -> f64 {
    debug_assert_eq!(rows.len(), n_rows * dim);
    if n_rows < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for j in 0..dim {
        let mean: f64 = (0..n_rows).map(|r| rows[r * dim + j]).sum::<f64>() / n_rows as f64;
        let var: f64 = (0..n_rows)
            .map(|r| (rows[r * dim + j] - mean).powi(2))
            .sum::<f64>()
            / n_rows as f64;
        acc += var.sqrt();
    }
    acc / dim as f64
}

/// Result of a training run.
pub struct TrainOutput {
    pub state: ModelState,
    pub optimizer: AdamW,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Train from scratch (or resume when `resume` is given) per the config.
///
/// Checkpoints are written under `out_dir` every `checkpoint_every` steps
/// (keeping the last two) plus a final one. A non-finite loss or gradient
/// aborts with the last good checkpoint retained on disk.
pub fn train(
    config: &RunConfig,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    let dataset = config.dataset()?;
    let geometry = config.geometry(&dataset);
    geometry.validate()?;
    if geometry.tokens() != config.model.max_tokens
        || geometry.token_dim() != config.model.token_dim
    {
        return Err(Error::invalid(format!(
            "model expects {}×{}-d tokens but the dataset yields {}×{}-d",
            config.model.max_tokens,
            config.model.token_dim,
            geometry.tokens(),
            geometry.token_dim()
        )));
    }
    if dataset.num_classes != config.model.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model {}",
            dataset.num_classes, config.model.num_classes
        )));
    }

    let (mut state, mut opt) = match resume {
        Some(path) => {
            let (state, opt, saved) = read_checkpoint(path)?;
            let mut expect = config.clone();
            // the resumed run must describe the same experiment
            expect.checkpoint_every = saved.run.checkpoint_every;
            if serde_json::to_string(&expect)? != serde_json::to_string(&saved.run)? {
                return Err(Error::invalid(
                    "resume checkpoint was trained with a different config",
                ));
            }
            (state, opt)
        }
        None => {
            let mut init_stream = Stream::derive(config.seed, StreamId::Init);
            let state = ModelState::init(
                config.model.clone(),
                config.denoiser.clone(),
                &mut init_stream,
            )?;
            (state, AdamW::new(config.lr))
        }
    };

    let steps_per_epoch = dataset.len() / config.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::invalid(format!(
            "batch size {} exceeds dataset size {}",
            config.batch_size,
            dataset.len()
        )));
    }
    let total_steps = (steps_per_epoch * config.epochs) as u64;
    let schedule = NoiseSchedule::default_linear();
    let decay_mask: Vec<f64> = state
        .params
        .iter()
        .map(|p| if p.decay { 1.0 } else { 0.0 })
        .collect();

    let mut metrics = Vec::new();
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let started = Instant::now();

    let first_step = state.step;
    for step in first_step..total_steps {
        let epoch = (step / steps_per_epoch as u64) as usize;
        let batch_in_epoch = (step % steps_per_epoch as u64) as usize;

        // per-epoch permutation, re-derivable on resume
        let mut epoch_stream = Stream::derive(mix(config.seed, 0x0E50 + epoch as u64), StreamId::Data);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        epoch_stream.shuffle(&mut order);
        let batch_idx = &order[batch_in_epoch * config.batch_size..][..config.batch_size];

        // per-step stream drives every in-step draw
        let mut step_stream = Stream::derive(mix(config.seed, step), StreamId::Noise);

        let b = config.batch_size;
        let n = config.model.max_tokens;
        let d = config.model.token_dim;
        let mut tokens = Vec::with_capacity(b * n * d);
        let mut labels = Vec::with_capacity(b);
        let mut positions = Vec::new();
        for &si in batch_idx {
            let img = dataset.image(si).to_vec();
            let img = if config.hflip && dataset.width > 1 && step_stream.uniform() < 0.5 {
                flip_horizontal(&img, dataset.height, dataset.width, dataset.channels)
            } else {
                img
            };
            let (tk, pos) = patchify(
                &img,
                dataset.height,
                dataset.width,
                dataset.channels,
                config.patch,
            )?;
            if positions.is_empty() {
                positions = (0..pos.len()).collect();
            }
            tokens.extend(tk);
            let lab = dataset.labels[si];
            let lab = if step_stream.uniform() < config.label_dropout {
                config.model.null_class()
            } else {
                lab
            };
            labels.push(lab);
        }
        let tokens = Tensor::from_vec(tokens, &[b, n, d]);

        let ratio = sample_mask_ratio(&mut step_stream)?;
        let plan = build_mask_plan(n, ratio, &mut step_stream)?;
        let m = plan.masked_count();
        let w = config.model.width;

        // targets from the EMA encoder, gradient-free
        let target_bind = state.bind(BindMode::Target, None);
        let g = encode_target(
            &target_bind,
            &config.model,
            &tokens,
            &positions,
            &labels,
            &plan,
        )?
        .reshape(&[b * m, w])?;

        let tape = Tape::new();
        let bind = state.bind(BindMode::Trainable, Some(&tape));

        let ctx_tokens = tokens.index_select(1, &plan.context_idx)?;
        let features = encode_tokens(&bind, &config.model, &ctx_tokens, &plan.context_idx, &labels)?;
        let z = predict_features(&bind, &config.model, &features, &plan)?
            .reshape(&[b * m, w])?;
        let projected = project(&bind, &z)?;
        let l_pred = prediction_loss(&projected, &g, config.smooth_l1_beta)?;

        let x_masked = tokens
            .index_select(1, &plan.masked_idx)?
            .reshape(&[b * m, d])?
            .detach();
        let den = ModelDenoiser {
            bind: &bind,
            config: &config.model,
            denoiser: &config.denoiser,
        };
        let LossValue { value: l_den, .. } = match config.objective {
            Objective::Diffusion => {
                diffusion_loss(&den, &schedule, &x_masked, &z, &mut step_stream)?
            }
            Objective::Flow => flow_loss(&den, &x_masked, &z, &mut step_stream)?,
        };
        let loss = total_loss(&l_den, &l_pred)?;
        let loss_val = loss.item();
        let l_den_val = l_den.item();
        let l_pred_val = l_pred.item();

        let grads = tape.backward(&loss)?;
        let leaves: Vec<(&str, &Tensor)> = bind.tensors().collect();
        let grad_vecs: Vec<Vec<f64>> = leaves
            .iter()
            .map(|(_, t)| {
                grads
                    .get(t)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        let grad_norm = grad_vecs
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();

        opt.lr = config.lr_at(step, total_steps);
        opt.weight_decay = config.weight_decay_at(epoch);
        {
            let mut params: Vec<(&str, &mut [f64])> = state
                .params
                .iter_mut()
                .map(|p| (p.name.as_str(), p.data.as_mut_slice()))
                .collect();
            let grad_refs: Vec<&[f64]> = grad_vecs.iter().map(|g| g.as_slice()).collect();
            opt.step(&mut params, &grad_refs, &decay_mask)?;
        }
        state.ema_update_target(config.target_alpha)?;
        state.ema_update_eval(config.eval_ema_decay)?;
        state.step = step + 1;

        metrics.push(MetricsRecord {
            step: state.step,
            denoising_loss: l_den_val,
            prediction_loss: l_pred_val,
            total_loss: loss_val,
            grad_norm,
            target_std: collapse_monitor(g.data(), b * m, w),
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            wall_ms: started.elapsed().as_millis() as u64,
        });

        if let Some(dir) = out_dir {
            let is_last = state.step == total_steps;
            if state.step % config.checkpoint_every as u64 == 0 || is_last {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("step{:07}.djc", state.step));
                write_checkpoint(&path, &state, &opt, config)?;
                checkpoints.push(path);
                // last-two retention
                while checkpoints.len() > 2 {
                    let old = checkpoints.remove(0);
                    let _ = std::fs::remove_file(old);
                }
            }
        }
    }

    Ok(TrainOutput {
        state,
        optimizer: opt,
        metrics,
        checkpoints,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DJC1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON block stored at the head of a checkpoint. The run seed plus the
/// step counter are the complete rng state: all training randomness is
/// derived from (seed, step).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run: RunConfig,
    pub step: u64,
    pub opt_step: u64,
}

pub fn write_checkpoint(
    path: &Path,
    state: &ModelState,
    opt: &AdamW,
    run: &RunConfig,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut f, CHECKPOINT_VERSION)?;
    let meta = CheckpointMeta {
        run: run.clone(),
        step: state.step,
        opt_step: opt.step_count(),
    };
    let json = serde_json::to_vec(&meta)?;
    write_u32(&mut f, json.len() as u32)?;
    f.write_all(&json)?;

    let mut entries: Vec<(String, &[usize], Vec<f64>)> = Vec::new();
    for p in state.params.iter() {
        entries.push((format!("param.{}", p.name), &p.shape, p.data.clone()));
    }
    let mut k = 0;
    for p in state.params.iter() {
        if p.name.starts_with("encoder") {
            entries.push((format!("target.{}", p.name), &p.shape, state.target[k].clone()));
            k += 1;
        }
    }
    for (p, e) in state.params.iter().zip(&state.eval_ema) {
        entries.push((format!("ema.{}", p.name), &p.shape, e.clone()));
    }
    let (first, second) = opt.moments();
    if !first.is_empty() {
        for (p, m) in state.params.iter().zip(first) {
            entries.push((format!("opt.m.{}", p.name), &p.shape, m.clone()));
        }
        for (p, v) in state.params.iter().zip(second) {
            entries.push((format!("opt.v.{}", p.name), &p.shape, v.clone()));
        }
    }
    write_u32(&mut f, entries.len() as u32)?;
    for (name, shape, data) in entries {
        write_u32(&mut f, name.len() as u32)?;
        f.write_all(name.as_bytes())?;
        write_tensor_raw(&mut f, shape, &data)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelState, AdamW, CheckpointMeta)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut f)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let json_len = read_u32(&mut f)? as usize;
    let mut json = vec![0u8; json_len];
    f.read_exact(&mut json)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)?;

    let count = read_u32(&mut f)? as usize;
    let mut named: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut f)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("non-utf8 tensor name".to_string()))?;
        let (shape, data) = read_tensor_raw(&mut f)?;
        named.push((name, shape, data));
    }

    let mut params = ParamStore::default();
    let mut target = Vec::new();
    let mut eval_ema = Vec::new();
    let mut opt_m = Vec::new();
    let mut opt_v = Vec::new();
    for (name, shape, data) in named {
        if let Some(rest) = name.strip_prefix("param.") {
            let decay = !(rest.starts_with("proj.") || rest.starts_with("den."));
            params.add(rest, &shape, data, decay);
        } else if name.starts_with("target.") {
            target.push(data);
        } else if name.starts_with("ema.") {
            eval_ema.push(data);
        } else if name.starts_with("opt.m.") {
            opt_m.push(data);
        } else if name.starts_with("opt.v.") {
            opt_v.push(data);
        } else {
            return Err(Error::Format(format!("unknown checkpoint entry {name}")));
        }
    }
    let state = ModelState {
        config: meta.run.model.clone(),
        denoiser: meta.run.denoiser.clone(),
        params,
        target,
        eval_ema,
        step: meta.step,
    };
    let mut opt = AdamW::new(meta.run.lr);
    if !opt_m.is_empty() {
        opt.restore_moments(opt_m, opt_v, meta.opt_step);
    }
    Ok((state, opt, meta))
}

/// Convenience accessor for tools that only need the state.
pub fn load_state(path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let (state, _, meta) = read_checkpoint(path)?;
    Ok((state, meta))
}

pub use eval::{
    ar_step_sweep, energy_distance, grid_search, linear_probe, pooled_features, GridResult,
    ProbeOptions, ScoreProbe,
};

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> RunConfig {
        RunConfig {
            dataset: DataSource::Synth {
                synth: SynthSpec::Shapes {
                    classes: 2,
                    samples: 32,
                    noise: 0.02,
                },
            },
            model: TransformerConfig {
                depth: 1,
                width: 16,
                heads: 2,
                mlp_ratio: 2,
                token_dim: 64,
                max_tokens: 4,
                num_classes: 2,
            },
            denoiser: DenoiserConfig {
                blocks: 1,
                hidden: 16,
                time_dim: 8,
            },
            objective: Objective::Diffusion,
            patch: 8,
            epochs: 1,
            batch_size: 16,
            lr: 1e-3,
            warmup_fraction: 0.0,
            weight_decay_start: 0.02,
            weight_decay_end: 0.2,
            eval_ema_decay: 0.99,
            target_alpha: 0.99,
            label_dropout: 0.1,
            smooth_l1_beta: 1.0,
            seed: 7,
            checkpoint_every: 1000,
            hflip: true,
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut cfg = toy_config();
        cfg.lr = 1e-300; // adamw needs lr > 0; this is numerically zero
        cfg.weight_decay_start = 0.0;
        cfg.weight_decay_end = 0.0;
        let mut init_stream = Stream::derive(cfg.seed, StreamId::Init);
        let reference =
            ModelState::init(cfg.model.clone(), cfg.denoiser.clone(), &mut init_stream).unwrap();
        let out = train(&cfg, None, None).unwrap();
        for (p, q) in reference.params.iter().zip(out.state.params.iter()) {
            for (a, b) in p.data.iter().zip(&q.data) {
                assert!((a - b).abs() < 1e-12, "{} drifted", p.name);
            }
        }
    }

    #[test]
    fn smoke_training_runs_and_logs() {
        let cfg = toy_config();
        let out = train(&cfg, None, None).unwrap();
        assert_eq!(out.metrics.len(), 2); // 32 samples / 16 batch × 1 epoch
        assert!(out.metrics.iter().all(|m| m.total_loss.is_finite()));
        // steps strictly increasing
        assert!(out.metrics.windows(2).all(|w| w[1].step > w[0].step));
    }

    #[test]
    fn determinism_same_seed_same_metrics() {
        let cfg = toy_config();
        let a = train(&cfg, None, None).unwrap();
        let b = train(&cfg, None, None).unwrap();
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.total_loss.to_bits(), y.total_loss.to_bits());
            assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
        }
    }

    #[test]
    fn weight_decay_ramp_is_linear() {
        let mut cfg = toy_config();
        cfg.epochs = 5;
        for e in 0..5 {
            let expect = 0.02 + (0.2 - 0.02) * e as f64 / 4.0;
            assert!((cfg.weight_decay_at(e) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn collapse_monitor_basics() {
        // identical rows → 0
        let rows = vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        assert_eq!(collapse_monitor(&rows, 3, 2), 0.0);

        // unit-gaussian rows → ≈ 1 within 10%
        let mut stream = Stream::derive(5, StreamId::Eval);
        let n = 20_000;
        let g = stream.normal_vec(n * 4);
        let std = collapse_monitor(&g, n, 4);
        assert!((std - 1.0).abs() < 0.1, "std {std}");
    }

    #[test]
    fn checkpoint_round_trip_byte_identical() {
        let cfg = toy_config();
        let out = train(&cfg, None, None).unwrap();
        let dir = std::env::temp_dir().join(format!("djepa-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.djc");
        let p2 = dir.join("b.djc");
        write_checkpoint(&p1, &out.state, &out.optimizer, &cfg).unwrap();
        let (state, opt, meta) = read_checkpoint(&p1).unwrap();
        write_checkpoint(&p2, &state, &opt, &meta.run).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let mut cfg = toy_config();
        cfg.epochs = 2; // 4 steps total
        cfg.checkpoint_every = 2;
        let dir = std::env::temp_dir().join(format!("djepa-resume-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);

        let full = train(&cfg, Some(&dir), None).unwrap();
        let mid = dir.join("step0000002.djc");
        assert!(mid.exists());
        let resumed = train(&cfg, None, Some(&mid)).unwrap();

        // steps 3 and 4 of the resumed run must match the uninterrupted one
        let tail: Vec<&MetricsRecord> = full.metrics.iter().filter(|m| m.step > 2).collect();
        assert_eq!(tail.len(), resumed.metrics.len());
        for (a, b) in tail.iter().zip(&resumed.metrics) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.total_loss.to_bits(), b.total_loss.to_bits());
        }
        for (p, q) in full.state.params.iter().zip(resumed.state.params.iter()) {
            assert_eq!(p.data, q.data, "{} differs after resume", p.name);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
