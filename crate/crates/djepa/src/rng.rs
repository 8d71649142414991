//! Seeded, counter-based randomness.
//!
//! Every stochastic operation in the crate draws from a [`Stream`] built out
//! of a ChaCha8 generator. ChaCha is a counter-mode cipher, so a (seed,
//! stream id) pair fully determines the sequence on every platform, and the
//! generator position can be saved and restored exactly for checkpointing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// A seeded random stream. Thin wrapper over `ChaCha8Rng` that standardizes
/// how per-purpose substreams are derived from a run seed.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
}

/// SplitMix64 round, for deriving per-step or per-epoch seeds from a run
/// seed. Training keys every stochastic decision on (seed, step), so a
/// resumed run replays the identical sequence from the step counter alone.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed substream ids so independent consumers never share a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamId {
    Init = 1,
    Masking = 2,
    Noise = 3,
    Data = 4,
    Sampler = 5,
    Eval = 6,
}

impl Stream {
    /// Root stream for a run seed.
    pub fn from_seed(seed: u64) -> Self {
        Stream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream identified by `id`.
    pub fn derive(seed: u64, id: StreamId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        Stream { rng }
    }

    pub fn gen_u64(&mut self) -> u64 {
        self.rng.gen()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Uniformly random subset of size `k` from `0..n`, returned sorted.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "subset size {k} exceeds population {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        // partial Fisher-Yates: the first k entries are a uniform k-subset
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        let mut chosen: Vec<usize> = idx[..k].to_vec();
        chosen.sort_unstable();
        chosen
    }

    /// Exact generator state for checkpointing.
    pub fn state(&self) -> StreamState {
        StreamState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: format!("{}", self.rng.get_word_pos()),
        }
    }

    pub fn restore(state: &StreamState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        let pos: u128 = state.word_pos.parse().expect("corrupt rng word position");
        rng.set_word_pos(pos);
        Stream { rng }
    }
}

/// Serializable snapshot of a [`Stream`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: [u8; 32],
    pub stream: u64,
    // u128 is not portable across json parsers; store as decimal text
    pub word_pos: String,
}
