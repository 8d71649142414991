//! Joint-embedding predictive architecture with per-token diffusion and
//! flow-matching losses, trained and sampled entirely on CPU.
//!
//! Three identical transformer towers — a context encoder, an EMA target
//! encoder, and a feature predictor — are trained jointly with an embedding
//! prediction loss and a per-token denoising loss. Generation runs as
//! next set-of-tokens prediction: a cosine schedule decides how many tokens
//! each auto-regressive step emits, and each chosen token is drawn from its
//! conditional distribution by reverse diffusion or a flow ODE.
//!
//! Start with the runnable programs under `examples/`:
//!
//! ```text
//! cargo run --release --example tensor_autodiff       # tensor and tape API
//! cargo run --release --example train_shapes          # end-to-end toy training
//! cargo run --release --example sample_images         # generation + traces
//! cargo run --release --example inpaint               # seeded generation
//! cargo run --release --example flow_gmm2d            # flow objective on 2-d points
//! cargo run --release --example grid_search           # (guidance, temperature) sweep
//! cargo run --release --example ar_step_sweep         # auto-regressive step sweep
//! cargo run --release --example linear_probe          # frozen-feature evaluation
//! ```
//!
//! The same capabilities are scriptable through the `djepa` binary.

pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod tokens;

pub use error::{Error, Result};
pub use tensor::{check_finite, Gradients, Tape, Tensor};
