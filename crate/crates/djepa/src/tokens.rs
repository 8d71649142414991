//! Patchification and masking.
//!
//! Images are cut into non-overlapping p×p patches, flattened row-major into
//! continuous tokens. Masking ratios come from a truncated normal
//! (mean 1.0, std 0.25, support [0.7, 1.0]) and the masked set is a uniform
//! random subset of exactly ⌈r·N⌉ indices.

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const MASK_RATIO_MEAN: f64 = 1.0;
pub const MASK_RATIO_STD: f64 = 0.25;
pub const MASK_RATIO_MIN: f64 = 0.7;
pub const MASK_RATIO_MAX: f64 = 1.0;

/// A batch of per-sample token sequences with grid positions and labels.
///
/// `tokens` is `[batch, tokens_per_image, token_dim]` flattened row-major.
/// The label table reserves one extra id (`num_classes`) for the null class
/// used by guidance dropout.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Vec<f64>,
    pub batch: usize,
    /// N: tokens per sample.
    pub seq_len: usize,
    /// D = p·p·channels.
    pub token_dim: usize,
    /// (row, col) grid position of each token index.
    pub positions: Vec<(usize, usize)>,
    /// One label per sample; `num_classes` is the null class.
    pub class_labels: Vec<usize>,
    pub num_classes: usize,
}

impl TokenBatch {
    pub fn token(&self, sample: usize, index: usize) -> &[f64] {
        let off = (sample * self.seq_len + index) * self.token_dim;
        &self.tokens[off..off + self.token_dim]
    }

    /// All tokens of one sample, `[seq_len × token_dim]`.
    pub fn sample_tokens(&self, sample: usize) -> &[f64] {
        let off = sample * self.seq_len * self.token_dim;
        &self.tokens[off..off + self.seq_len * self.token_dim]
    }
}

/// Partition of `0..N` into masked targets and visible context.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub masked_idx: Vec<usize>,
    pub context_idx: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn masked_count(&self) -> usize {
        self.masked_idx.len()
    }
}

/// Cut an `[H, W, C]` image (row-major, channel innermost) into p×p tokens.
///
/// Token `i` is the flattened p×p×C block at grid position
/// `(i / (W/p), i % (W/p))`, scanning the patch rows first.
pub fn patchify(
    image: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<(Vec<f64>, Vec<(usize, usize)>)> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::invalid(format!(
            "patchify: image {height}×{width} not divisible by patch size {patch}"
        )));
    }
    if image.len() != height * width * channels {
        return Err(Error::shape(
            "patchify",
            format!(
                "expected {} pixels, got {}",
                height * width * channels,
                image.len()
            ),
        ));
    }
    let grid_h = height / patch;
    let grid_w = width / patch;
    let dim = patch * patch * channels;
    let mut tokens = vec![0.0; grid_h * grid_w * dim];
    let mut positions = Vec::with_capacity(grid_h * grid_w);
    for gr in 0..grid_h {
        for gc in 0..grid_w {
            let t = gr * grid_w + gc;
            positions.push((gr, gc));
            for pr in 0..patch {
                for pc in 0..patch {
                    for ch in 0..channels {
                        let src = ((gr * patch + pr) * width + gc * patch + pc) * channels + ch;
                        tokens[t * dim + (pr * patch + pc) * channels + ch] = image[src];
                    }
                }
            }
        }
    }
    Ok((tokens, positions))
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(
    tokens: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<Vec<f64>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::invalid(format!(
            "unpatchify: image {height}×{width} not divisible by patch size {patch}"
        )));
    }
    let grid_h = height / patch;
    let grid_w = width / patch;
    let dim = patch * patch * channels;
    if tokens.len() != grid_h * grid_w * dim {
        return Err(Error::shape(
            "unpatchify",
            format!(
                "expected {} token values for {height}×{width}/{patch}, got {}",
                grid_h * grid_w * dim,
                tokens.len()
            ),
        ));
    }
    let mut image = vec![0.0; height * width * channels];
    for t in 0..grid_h * grid_w {
        let (gr, gc) = (t / grid_w, t % grid_w);
        for pr in 0..patch {
            for pc in 0..patch {
                for ch in 0..channels {
                    let dst = ((gr * patch + pr) * width + gc * patch + pc) * channels + ch;
                    image[dst] = tokens[t * dim + (pr * patch + pc) * channels + ch];
                }
            }
        }
    }
    Ok(image)
}

/// Draw a masking ratio from Normal(1.0, 0.25) truncated to [0.7, 1.0] by
/// rejection.
pub fn sample_mask_ratio(stream: &mut Stream) -> Result<f64> {
    const MAX_TRIES: usize = 10_000;
    for _ in 0..MAX_TRIES {
        let r = MASK_RATIO_MEAN + MASK_RATIO_STD * stream.normal();
        if (MASK_RATIO_MIN..=MASK_RATIO_MAX).contains(&r) {
            return Ok(r);
        }
    }
    Err(Error::invalid(
        "sample_mask_ratio: rejection cap exhausted".to_string(),
    ))
}

/// Uniformly random mask plan with exactly ⌈ratio·n⌉ masked indices.
pub fn build_mask_plan(n: usize, ratio: f64, stream: &mut Stream) -> Result<MaskPlan> {
    if n == 0 {
        return Err(Error::invalid("build_mask_plan: zero tokens"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "build_mask_plan: ratio {ratio} outside (0, 1]"
        )));
    }
    let k = (ratio * n as f64).ceil() as usize;
    let masked_idx = stream.subset(n, k);
    let mut is_masked = vec![false; n];
    for &i in &masked_idx {
        is_masked[i] = true;
    }
    let context_idx = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan {
        masked_idx,
        context_idx,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stream, StreamId};

    #[test]
    fn patchify_4x4_p2() {
        let image: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let (tokens, positions) = patchify(&image, 4, 4, 1, 2).unwrap();
        assert_eq!(tokens.len(), 16);
        assert_eq!(positions, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        // token 0 is the top-left 2×2 block
        assert_eq!(&tokens[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&tokens[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn constant_image_constant_tokens() {
        let image = vec![0.5; 64];
        let (tokens, _) = patchify(&image, 8, 8, 1, 2).unwrap();
        for chunk in tokens.chunks(4) {
            assert_eq!(chunk, &[0.5, 0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn round_trip_identity() {
        let mut stream = Stream::derive(11, StreamId::Data);
        let image: Vec<f64> = (0..36).map(|_| stream.uniform()).collect();
        let (tokens, _) = patchify(&image, 6, 6, 1, 3).unwrap();
        let back = unpatchify(&tokens, 6, 6, 1, 3).unwrap();
        assert_eq!(back, image);
    }

    #[test]
    fn indivisible_rejected() {
        let image = vec![0.0; 15];
        let err = patchify(&image, 5, 3, 1, 2).unwrap_err();
        assert!(format!("{err}").contains('5'));
    }

    #[test]
    fn unpatchify_wrong_count_rejected() {
        assert!(unpatchify(&[0.0; 10], 4, 4, 1, 2).is_err());
    }

    #[test]
    fn mask_ratio_within_bounds() {
        let mut stream = Stream::derive(5, StreamId::Masking);
        for _ in 0..10_000 {
            let r = sample_mask_ratio(&mut stream).unwrap();
            assert!((MASK_RATIO_MIN..=MASK_RATIO_MAX).contains(&r));
        }
    }

    #[test]
    fn mask_plan_partition_and_count() {
        let mut stream = Stream::derive(5, StreamId::Masking);
        for n in [1usize, 2, 7, 10, 64] {
            for r in [0.7, 0.85, 1.0] {
                let plan = build_mask_plan(n, r, &mut stream).unwrap();
                assert_eq!(plan.masked_count(), (r * n as f64).ceil() as usize);
                let mut all: Vec<usize> = plan
                    .masked_idx
                    .iter()
                    .chain(&plan.context_idx)
                    .cloned()
                    .collect();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn full_ratio_masks_everything() {
        let mut stream = Stream::derive(5, StreamId::Masking);
        let plan = build_mask_plan(10, 1.0, &mut stream).unwrap();
        assert_eq!(plan.masked_count(), 10);
        assert!(plan.context_idx.is_empty());
    }

    #[test]
    fn ceiling_formula() {
        let mut stream = Stream::derive(5, StreamId::Masking);
        let plan = build_mask_plan(10, 0.7, &mut stream).unwrap();
        assert_eq!(plan.masked_count(), 7);
    }

    #[test]
    fn masked_index_frequency_uniform() {
        // each index masked with frequency r ± 0.01 over 1e5 trials
        let mut stream = Stream::derive(17, StreamId::Masking);
        let (n, r, trials) = (10usize, 0.8f64, 100_000usize);
        let mut counts = vec![0usize; n];
        for _ in 0..trials {
            let plan = build_mask_plan(n, r, &mut stream).unwrap();
            for &i in &plan.masked_idx {
                counts[i] += 1;
            }
        }
        for &c in &counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - r).abs() < 0.01, "frequency {freq} too far from {r}");
        }
    }
}
