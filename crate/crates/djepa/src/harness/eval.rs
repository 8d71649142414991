//! Evaluation: frozen-feature linear probing, an independent pixel-space
//! probe classifier for scoring generated samples, energy distance for
//! point clouds, and parameter sweeps.

use std::io::Write;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::backbone::encode_tokens;
use crate::model::{BindMode, ModelState};
use crate::optim::AdamW;
use crate::rng::{mix, Stream, StreamId};
use crate::tensor::{Tape, Tensor};
use crate::tokens::patchify;

/// Globally average-pooled context-encoder features, one row per sample.
/// Pools over patch-token outputs (the class slot is excluded).
pub fn pooled_features(
    state: &ModelState,
    mode: BindMode,
    dataset: &Dataset,
    patch: usize,
) -> Result<Vec<f64>> {
    let bind = state.bind(mode, None);
    let cfg = &state.config;
    let n = cfg.max_tokens;
    let d = cfg.token_dim;
    let w = cfg.width;
    let positions: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(dataset.len() * w);
    let chunk = 64usize;
    let mut i = 0;
    while i < dataset.len() {
        let hi = (i + chunk).min(dataset.len());
        let b = hi - i;
        let mut tokens = Vec::with_capacity(b * n * d);
        for s in i..hi {
            let (tk, _) = patchify(
                dataset.image(s),
                dataset.height,
                dataset.width,
                dataset.channels,
                patch,
            )?;
            tokens.extend(tk);
        }
        let tokens = Tensor::from_vec(tokens, &[b, n, d]);
        // probing is label-free: use the null class for every sample
        let labels = vec![cfg.null_class(); b];
        let features = encode_tokens(&bind, cfg, &tokens, &positions, &labels)?;
        let patch_slots: Vec<usize> = (1..=n).collect();
        let pooled = features.index_select(1, &patch_slots)?.mean_axis(1)?;
        out.extend_from_slice(pooled.data());
        i = hi;
    }
    Ok(out)
}

/// Options for the affine probe trained on frozen features.
#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            iters: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// Train a single affine classifier on frozen pooled features of `train`
/// and report top-1 accuracy on `test`.
pub fn linear_probe(
    state: &ModelState,
    mode: BindMode,
    train: &Dataset,
    test: &Dataset,
    patch: usize,
    opts: &ProbeOptions,
) -> Result<f64> {
    if train.num_classes != state.config.num_classes {
        return Err(Error::invalid(format!(
            "probe classes {} vs model {}",
            train.num_classes, state.config.num_classes
        )));
    }
    let w = state.config.width;
    let k = train.num_classes;
    let feats_train = pooled_features(state, mode, train, patch)?;
    let feats_test = pooled_features(state, mode, test, patch)?;

    let mut stream = Stream::derive(opts.seed, StreamId::Eval);
    let mut weight = crate::model::trunc_normal(w * k, 0.02, &mut stream);
    let mut bias = vec![0.0; k];
    let mut opt = AdamW::new(opts.lr);
    let fx = Tensor::from_vec(feats_train.clone(), &[train.len(), w]);
    for _ in 0..opts.iters {
        let tape = Tape::new();
        let wt = tape.leaf(weight.clone(), &[w, k]);
        let bt = tape.leaf(bias.clone(), &[k]);
        let logits = fx
            .matmul(&wt)?
            .add(&bt.broadcast_to(&[train.len(), k])?)?;
        let loss = logits.cross_entropy(&train.labels)?;
        let grads = tape.backward(&loss)?;
        let gw = grads.get(&wt).unwrap().to_vec();
        let gb = grads.get(&bt).unwrap().to_vec();
        opt.step(
            &mut [("probe.w", &mut weight), ("probe.b", &mut bias)],
            &[&gw, &gb],
            &[0.0, 0.0],
        )?;
    }

    let mut correct = 0usize;
    for (i, &label) in test.labels.iter().enumerate() {
        let f = &feats_test[i * w..(i + 1) * w];
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..k {
            let mut v = bias[c];
            for (j, &fv) in f.iter().enumerate() {
                v += fv * weight[j * k + c];
            }
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Independent pixel-space classifier used to score generated samples:
/// a small MLP trained on the real dataset, nothing shared with the model.
#[derive(Debug, Clone)]
pub struct ScoreProbe {
    in_dim: usize,
    hidden: usize,
    classes: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl ScoreProbe {
    /// Train on the full dataset with minibatch AdamW. Deterministic in
    /// (dataset, seed).
    pub fn train(dataset: &Dataset, hidden: usize, iters: usize, seed: u64) -> Result<ScoreProbe> {
        let in_dim = dataset.sample_dim();
        let classes = dataset.num_classes;
        if classes < 2 {
            return Err(Error::invalid("score probe needs at least two classes"));
        }
        let mut stream = Stream::derive(seed, StreamId::Eval);
        let mut probe = ScoreProbe {
            in_dim,
            hidden,
            classes,
            w1: crate::model::trunc_normal(in_dim * hidden, 0.05, &mut stream),
            b1: vec![0.0; hidden],
            w2: crate::model::trunc_normal(hidden * classes, 0.05, &mut stream),
            b2: vec![0.0; classes],
        };
        let mut opt = AdamW::new(3e-3);
        let batch = dataset.len().min(128);
        for it in 0..iters {
            let mut bstream = Stream::derive(mix(seed, it as u64), StreamId::Eval);
            let idx: Vec<usize> = (0..batch).map(|_| bstream.below(dataset.len())).collect();
            let mut xs = Vec::with_capacity(batch * in_dim);
            let mut labels = Vec::with_capacity(batch);
            for &i in &idx {
                xs.extend_from_slice(dataset.image(i));
                labels.push(dataset.labels[i]);
            }
            let x = Tensor::from_vec(xs, &[batch, in_dim]);
            let tape = Tape::new();
            let w1 = tape.leaf(probe.w1.clone(), &[in_dim, hidden]);
            let b1 = tape.leaf(probe.b1.clone(), &[hidden]);
            let w2 = tape.leaf(probe.w2.clone(), &[hidden, classes]);
            let b2 = tape.leaf(probe.b2.clone(), &[classes]);
            let h = x
                .matmul(&w1)?
                .add(&b1.broadcast_to(&[batch, hidden])?)?
                .gelu();
            let logits = h.matmul(&w2)?.add(&b2.broadcast_to(&[batch, classes])?)?;
            let loss = logits.cross_entropy(&labels)?;
            let grads = tape.backward(&loss)?;
            let gs: Vec<Vec<f64>> = [&w1, &b1, &w2, &b2]
                .iter()
                .map(|t| grads.get(t).unwrap().to_vec())
                .collect();
            let grad_refs: Vec<&[f64]> = gs.iter().map(|g| g.as_slice()).collect();
            opt.step(
                &mut [
                    ("w1", &mut probe.w1),
                    ("b1", &mut probe.b1),
                    ("w2", &mut probe.w2),
                    ("b2", &mut probe.b2),
                ],
                &grad_refs,
                &[0.0; 4],
            )?;
        }
        Ok(probe)
    }

    pub fn classify(&self, image: &[f64]) -> usize {
        debug_assert_eq!(image.len(), self.in_dim);
        let mut h = vec![0.0; self.hidden];
        for (j, hv) in h.iter_mut().enumerate() {
            let mut v = self.b1[j];
            for (i, &x) in image.iter().enumerate() {
                v += x * self.w1[i * self.hidden + j];
            }
            // gelu (tanh form), matching the training network
            let t = (0.7978845608028654 * (v + 0.044715 * v * v * v)).tanh();
            *hv = 0.5 * v * (1.0 + t);
        }
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..self.classes {
            let mut v = self.b2[c];
            for (j, &hv) in h.iter().enumerate() {
                v += hv * self.w2[j * self.classes + c];
            }
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best
    }

    /// Top-1 accuracy over (image, label) pairs.
    pub fn accuracy(&self, images: &[Vec<f64>], labels: &[usize]) -> f64 {
        debug_assert_eq!(images.len(), labels.len());
        let correct = images
            .iter()
            .zip(labels)
            .filter(|(img, &lab)| self.classify(img) == lab)
            .count();
        correct as f64 / labels.len().max(1) as f64
    }
}

/// Energy distance between two point sets of equal dimension:
/// 2·E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖, each term the V-statistic over all
/// ordered pairs, so identical sets score exactly zero.
pub fn energy_distance(xs: &[f64], ys: &[f64], dim: usize) -> f64 {
    let nx = xs.len() / dim;
    let ny = ys.len() / dim;
    assert!(nx > 1 && ny > 1, "need at least two points per set");
    let d = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut cross = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            cross += d(&xs[i * dim..(i + 1) * dim], &ys[j * dim..(j + 1) * dim]);
        }
    }
    cross /= (nx * ny) as f64;
    let mut within_x = 0.0;
    for i in 0..nx {
        for j in i + 1..nx {
            within_x += d(&xs[i * dim..(i + 1) * dim], &xs[j * dim..(j + 1) * dim]);
        }
    }
    within_x *= 2.0 / (nx * nx) as f64;
    let mut within_y = 0.0;
    for i in 0..ny {
        for j in i + 1..ny {
            within_y += d(&ys[i * dim..(i + 1) * dim], &ys[j * dim..(j + 1) * dim]);
        }
    }
    within_y *= 2.0 / (ny * ny) as f64;
    2.0 * cross - within_x - within_y
}

/// One swept cell: coordinates along the sweep axes plus its score.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub coords: Vec<f64>,
    pub score: f64,
}

/// Rectangular sweep result.
#[derive(Debug, Clone)]
pub struct GridResult {
    pub axes: Vec<String>,
    pub cells: Vec<GridCell>,
    pub higher_is_better: bool,
}

impl GridResult {
    /// Best cell; ties resolve to the earliest cell.
    pub fn best(&self) -> &GridCell {
        let mut best = &self.cells[0];
        for c in &self.cells[1..] {
            let better = if self.higher_is_better {
                c.score > best.score
            } else {
                c.score < best.score
            };
            if better {
                best = c;
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{},score", self.axes.join(","))?;
        for c in &self.cells {
            let coords: Vec<String> = c.coords.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{}", coords.join(","), c.score)?;
        }
        Ok(())
    }
}

/// Cartesian (guidance, temperature) sweep. The score closure runs the
/// sampling pipeline for one cell; every cell uses the same seed.
pub fn grid_search(
    guidance: &[f64],
    temperature: &[f64],
    higher_is_better: bool,
    mut score: impl FnMut(f64, f64) -> Result<f64>,
) -> Result<GridResult> {
    if guidance.is_empty() || temperature.is_empty() {
        return Err(Error::invalid("grid_search: empty grid"));
    }
    let mut cells = Vec::with_capacity(guidance.len() * temperature.len());
    for &g in guidance {
        for &t in temperature {
            let s = score(g, t)?;
            if !s.is_finite() {
                return Err(Error::non_finite("grid_search score", format!("cfg={g} tau={t}")));
            }
            cells.push(GridCell {
                coords: vec![g, t],
                score: s,
            });
        }
    }
    Ok(GridResult {
        axes: vec!["cfg".to_string(), "tau".to_string()],
        cells,
        higher_is_better,
    })
}

/// Sweep over auto-regressive step counts.
pub fn ar_step_sweep(
    steps: &[usize],
    higher_is_better: bool,
    mut score: impl FnMut(usize) -> Result<f64>,
) -> Result<GridResult> {
    if steps.is_empty() {
        return Err(Error::invalid("ar_step_sweep: empty step list"));
    }
    let mut cells = Vec::with_capacity(steps.len());
    for &t in steps {
        let s = score(t)?;
        if !s.is_finite() {
            return Err(Error::non_finite("ar_step_sweep score", format!("T={t}")));
        }
        cells.push(GridCell {
            coords: vec![t as f64],
            score: s,
        });
    }
    Ok(GridResult {
        axes: vec!["ar_steps".to_string()],
        cells,
        higher_is_better,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;
    use crate::rng::{Stream, StreamId};

    #[test]
    fn energy_distance_zero_for_identical_sets() {
        let xs = vec![0.0, 0.0, 1.0, 1.0, 2.0, 0.5];
        let d = energy_distance(&xs, &xs, 2);
        assert!(d.abs() < 1e-12, "{d}");
    }

    #[test]
    fn energy_distance_separates_distributions() {
        let mut stream = Stream::derive(4, StreamId::Eval);
        let near: Vec<f64> = (0..400).map(|_| stream.normal() * 0.1).collect();
        let near2: Vec<f64> = (0..400).map(|_| stream.normal() * 0.1).collect();
        let far: Vec<f64> = (0..400).map(|_| 5.0 + stream.normal() * 0.1).collect();
        let close = energy_distance(&near, &near2, 2);
        let apart = energy_distance(&near, &far, 2);
        assert!(close < 0.1, "close {close}");
        assert!(apart > 1.0, "apart {apart}");
    }

    #[test]
    fn score_probe_learns_the_toy_classes() {
        let mut stream = Stream::derive(9, StreamId::Data);
        let train = crate::data::synth_dataset(
            &SynthSpec::Shapes {
                classes: 4,
                samples: 256,
                noise: 0.02,
            },
            &mut stream,
        )
        .unwrap();
        let test = crate::data::synth_dataset(
            &SynthSpec::Shapes {
                classes: 4,
                samples: 128,
                noise: 0.02,
            },
            &mut stream,
        )
        .unwrap();
        let probe = ScoreProbe::train(&train, 32, 300, 11).unwrap();
        let images: Vec<Vec<f64>> = (0..test.len()).map(|i| test.image(i).to_vec()).collect();
        let acc = probe.accuracy(&images, &test.labels);
        assert!(acc > 0.9, "probe accuracy {acc}");
    }

    #[test]
    fn grid_first_cell_wins_ties() {
        let result = grid_search(&[1.0, 2.0], &[0.9, 1.0], true, |_, _| Ok(0.5)).unwrap();
        assert_eq!(result.best().coords, vec![1.0, 0.9]);
        assert_eq!(result.cells.len(), 4);
    }

    #[test]
    fn grid_single_cell_returns_it() {
        let result = grid_search(&[3.0], &[0.97], false, |g, t| Ok(g + t)).unwrap();
        assert_eq!(result.best().coords, vec![3.0, 0.97]);
        assert_eq!(result.cells.len(), 1);
    }

    #[test]
    fn empty_grid_rejected() {
        assert!(grid_search(&[], &[1.0], true, |_, _| Ok(0.0)).is_err());
        assert!(ar_step_sweep(&[], true, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let result = ar_step_sweep(&[1, 8], true, |t| Ok(t as f64)).unwrap();
        let mut buf = Vec::new();
        result.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "ar_steps,score");
        assert_eq!(lines[1], "1,1");
    }
}
