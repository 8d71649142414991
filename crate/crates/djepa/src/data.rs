//! Dataset file format and synthetic data.
//!
//! The `DJD1` layout: magic, u32 sample count, u32 H, W, C, u32 class
//! count, then per sample a u32 label and H·W·C little-endian f32 pixels.
//!
//! Two synthetic families cover the toy experiments: "shapes" (K-class
//! 16×16 grayscale primitives with jittered parameters and noise) and
//! "gmm2d" (2-d Gaussian-mixture points stored as 1×1×2 images so a point
//! is a single token at patch size 1).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_u32, write_u32};
use crate::rng::Stream;

pub const DATASET_MAGIC: &[u8; 4] = b"DJD1";

/// In-memory dataset. Pixel values are held as f64 but are exactly
/// representable as f32, so file round-trips are bit-exact.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    /// Sample-major pixel buffer, H·W·C per sample.
    pub pixels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.sample_dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        write_u32(w, self.len() as u32)?;
        write_u32(w, self.height as u32)?;
        write_u32(w, self.width as u32)?;
        write_u32(w, self.channels as u32)?;
        write_u32(w, self.num_classes as u32)?;
        let d = self.sample_dim();
        for i in 0..self.len() {
            write_u32(w, self.labels[i] as u32)?;
            for &v in &self.pixels[i * d..(i + 1) * d] {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format(format!(
                "bad dataset magic {magic:?}, expected {DATASET_MAGIC:?}"
            )));
        }
        let count = read_u32(r)? as usize;
        let height = read_u32(r)? as usize;
        let width = read_u32(r)? as usize;
        let channels = read_u32(r)? as usize;
        let num_classes = read_u32(r)? as usize;
        let d = height * width * channels;
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count * d);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            let label = read_u32(r)? as usize;
            if label >= num_classes {
                return Err(Error::Format(format!(
                    "label {label} out of range for {num_classes} classes"
                )));
            }
            labels.push(label);
            for _ in 0..d {
                r.read_exact(&mut buf)?;
                pixels.push(f32::from_le_bytes(buf) as f64);
            }
        }
        Ok(Dataset {
            height,
            width,
            channels,
            num_classes,
            labels,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Dataset::read(&mut f)
    }
}

/// Mirror an image left-right.
pub fn flip_horizontal(pixels: &[f64], height: usize, width: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels.len()];
    for r in 0..height {
        for c in 0..width {
            for ch in 0..channels {
                out[(r * width + c) * channels + ch] =
                    pixels[(r * width + (width - 1 - c)) * channels + ch];
            }
        }
    }
    out
}

/// One Gaussian mixture component in the plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmComponent {
    pub mean: [f64; 2],
    pub std: f64,
    pub weight: f64,
}

/// Synthetic dataset description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthSpec {
    /// K-class 16×16 grayscale primitives: disk, square, plus, diagonal
    /// cross. Each image draws a random polarity (bright-on-dark or the
    /// inverse), a size jitter, intensity jitter, and pixel noise, so
    /// coherent samples require agreement across patches.
    Shapes {
        classes: usize,
        samples: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// 2-d Gaussian mixture, one point per sample, stored as 1×1×2 images.
    Gmm2d {
        samples: usize,
        components: Vec<GmmComponent>,
    },
}

fn default_noise() -> f64 {
    0.02
}

pub const SHAPES_SIDE: usize = 16;
pub const SHAPES_MAX_CLASSES: usize = 4;

impl SynthSpec {
    /// Standard two-component mixture inside the unit square.
    pub fn gmm2d_default(samples: usize) -> SynthSpec {
        SynthSpec::Gmm2d {
            samples,
            components: vec![
                GmmComponent {
                    mean: [0.30, 0.35],
                    std: 0.05,
                    weight: 0.5,
                },
                GmmComponent {
                    mean: [0.72, 0.68],
                    std: 0.05,
                    weight: 0.5,
                },
            ],
        }
    }
}

/// Generate a dataset from a spec. Labels are exactly balanced (round-robin
/// before shuffling).
pub fn synth_dataset(spec: &SynthSpec, stream: &mut Stream) -> Result<Dataset> {
    match spec {
        SynthSpec::Shapes {
            classes,
            samples,
            noise,
        } => synth_shapes(*classes, *samples, *noise, stream),
        SynthSpec::Gmm2d {
            samples,
            components,
        } => synth_gmm2d(*samples, components, stream),
    }
}

fn synth_shapes(classes: usize, samples: usize, noise: f64, stream: &mut Stream) -> Result<Dataset> {
    if classes == 0 || classes > SHAPES_MAX_CLASSES {
        return Err(Error::invalid(format!(
            "shapes supports 1..={SHAPES_MAX_CLASSES} classes, got {classes}"
        )));
    }
    if samples == 0 {
        return Err(Error::invalid("shapes: zero samples"));
    }
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    stream.shuffle(&mut labels);
    let side = SHAPES_SIDE;
    let mut pixels = Vec::with_capacity(samples * side * side);
    for &label in &labels {
        pixels.extend(render_shape(label, noise, stream));
    }
    Ok(Dataset {
        height: side,
        width: side,
        channels: 1,
        num_classes: classes,
        labels,
        pixels,
    })
}

/// Render one 16×16 primitive. The polarity flip is the coherence devices
/// the toy experiments rely on: every patch of one image shares it, so
/// independently sampled patches disagree visibly.
fn render_shape(label: usize, noise: f64, stream: &mut Stream) -> Vec<f64> {
    let side = SHAPES_SIDE;
    let center = (side as f64 - 1.0) / 2.0;
    let size = 5.0 + stream.uniform() * 1.0; // 5.0..6.0
    let fg = 0.82 + stream.uniform() * 0.10;
    let bg = 0.08 + stream.uniform() * 0.10;
    let flip = stream.uniform() < 0.5;
    let (hi, lo) = if flip { (bg, fg) } else { (fg, bg) };
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let dy = r as f64 - center;
            let dx = c as f64 - center;
            let inside = match label {
                // filled disk
                0 => (dx * dx + dy * dy).sqrt() <= size,
                // filled square
                1 => dx.abs() <= size - 0.8 && dy.abs() <= size - 0.8,
                // plus sign
                2 => {
                    (dx.abs() <= 1.6 && dy.abs() <= size + 1.0)
                        || (dy.abs() <= 1.6 && dx.abs() <= size + 1.0)
                }
                // diagonal cross
                _ => {
                    ((dx - dy).abs() <= 2.2 || (dx + dy).abs() <= 2.2)
                        && dx.abs() <= size + 1.0
                        && dy.abs() <= size + 1.0
                }
            };
            let v = if inside { hi } else { lo };
            out.push((v + noise * stream.normal()).clamp(0.0, 1.0));
        }
    }
    out
}

fn synth_gmm2d(
    samples: usize,
    components: &[GmmComponent],
    stream: &mut Stream,
) -> Result<Dataset> {
    if samples == 0 || components.is_empty() {
        return Err(Error::invalid("gmm2d: need samples and components"));
    }
    let total_w: f64 = components.iter().map(|c| c.weight).sum();
    if total_w <= 0.0 {
        return Err(Error::invalid("gmm2d: non-positive total weight"));
    }
    let mut pixels = Vec::with_capacity(samples * 2);
    for _ in 0..samples {
        let mut pick = stream.uniform() * total_w;
        let mut comp = &components[components.len() - 1];
        for c in components {
            if pick < c.weight {
                comp = c;
                break;
            }
            pick -= c.weight;
        }
        pixels.push(comp.mean[0] + comp.std * stream.normal());
        pixels.push(comp.mean[1] + comp.std * stream.normal());
    }
    Ok(Dataset {
        height: 1,
        width: 1,
        channels: 2,
        num_classes: 1,
        labels: vec![0; samples],
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stream, StreamId};

    #[test]
    fn file_round_trip_bit_exact() {
        let mut stream = Stream::derive(3, StreamId::Data);
        let ds = synth_dataset(
            &SynthSpec::Shapes {
                classes: 4,
                samples: 16,
                noise: 0.02,
            },
            &mut stream,
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        let back = Dataset::read(&mut buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        back.write(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn shapes_exact_balance() {
        let mut stream = Stream::derive(4, StreamId::Data);
        let ds = synth_dataset(
            &SynthSpec::Shapes {
                classes: 4,
                samples: 100,
                noise: 0.02,
            },
            &mut stream,
        )
        .unwrap();
        let mut counts = [0usize; 4];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [25, 25, 25, 25]);
    }

    #[test]
    fn shapes_single_class_all_zero_labels() {
        let mut stream = Stream::derive(4, StreamId::Data);
        let ds = synth_dataset(
            &SynthSpec::Shapes {
                classes: 1,
                samples: 10,
                noise: 0.02,
            },
            &mut stream,
        )
        .unwrap();
        assert!(ds.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn gmm2d_single_component_clt_bound() {
        // one component at the origin, σ = 1: sample mean within 3σ/√n
        let mut stream = Stream::derive(9, StreamId::Data);
        let n = 10_000usize;
        let ds = synth_dataset(
            &SynthSpec::Gmm2d {
                samples: n,
                components: vec![GmmComponent {
                    mean: [0.0, 0.0],
                    std: 1.0,
                    weight: 1.0,
                }],
            },
            &mut stream,
        )
        .unwrap();
        let bound = 3.0 / (n as f64).sqrt();
        for dim in 0..2 {
            let mean: f64 =
                (0..n).map(|i| ds.pixels[i * 2 + dim]).sum::<f64>() / n as f64;
            assert!(mean.abs() < bound, "dim {dim}: mean {mean} vs bound {bound}");
        }
    }

    #[test]
    fn flip_horizontal_involution() {
        let mut stream = Stream::derive(2, StreamId::Data);
        let img: Vec<f64> = (0..48).map(|_| stream.uniform()).collect();
        let flipped = flip_horizontal(&img, 4, 4, 3);
        assert_ne!(flipped, img);
        assert_eq!(flip_horizontal(&flipped, 4, 4, 3), img);
    }
}
