use djepa::data::SynthSpec;
use djepa::harness::{train, DataSource, RunConfig};
use djepa::model::{DenoiserConfig, TransformerConfig};
use djepa::sampler::Objective;
use std::time::Instant;

fn main() {
    let cfg = RunConfig {
        dataset: DataSource::Synth {
            synth: SynthSpec::Shapes { classes: 4, samples: 256, noise: 0.02 },
        },
        model: TransformerConfig::tiny(16, 16, 4),
        denoiser: DenoiserConfig { blocks: 3, hidden: 128, time_dim: 64 },
        objective: Objective::Diffusion,
        patch: 4,
        epochs: 1,
        batch_size: 32,
        lr: 8e-4,
        warmup_fraction: 0.0,
        weight_decay_start: 0.02,
        weight_decay_end: 0.2,
        eval_ema_decay: 0.99,
        target_alpha: 0.995,
        label_dropout: 0.1,
        smooth_l1_beta: 1.0,
        seed: 1,
        checkpoint_every: 100000,
        hflip: true,
    };
    let t0 = Instant::now();
    let out = train(&cfg, None, None).unwrap();
    let steps = out.metrics.len();
    let el = t0.elapsed().as_secs_f64();
    println!("{} steps in {:.2}s = {:.3}s/step", steps, el, el / steps as f64);
    println!("last loss {:.4}", out.metrics.last().unwrap().total_loss);
}
