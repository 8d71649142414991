//! Operations over [`Tensor`] with hand-derived backward rules.
//!
//! Every op validates shapes up front and names itself in the error. The
//! backward closures capture reference-counted clones of whatever forward
//! data they need.

use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Last-axis decomposition: (row count, row length).
fn rows_of(shape: &[usize]) -> (usize, usize) {
    let l = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / l.max(1);
    (rows, l)
}

// ── dense matmul kernels ─────────────────────────────────────────────

/// c[m,n] += a[m,k] · b[k,n]
fn mm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// c[m,k] += a[m,n] · b[k,n]ᵀ
fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *cv += s;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

impl Tensor {
    // ── elementwise binary ───────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::record(
            "add",
            &[self, other],
            Rc::new(out),
            self.shape(),
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::record(
            "sub",
            &[self, other],
            Rc::new(out),
            self.shape(),
            Box::new(|g| {
                vec![
                    Some(g.to_vec()),
                    Some(g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        let a_data = Rc::clone(&self.data);
        let b_data = Rc::clone(&other.data);
        Ok(Tensor::record(
            "mul",
            &[self, other],
            Rc::new(out),
            self.shape(),
            Box::new(move |g| {
                let da = g.iter().zip(b_data.iter()).map(|(g, b)| g * b).collect();
                let db = g.iter().zip(a_data.iter()).map(|(g, a)| g * a).collect();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    // ── elementwise with constants ───────────────────────────────────

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        Tensor::record(
            "scale",
            &[self],
            Rc::new(out),
            self.shape(),
            Box::new(move |g| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        Tensor::record(
            "add_scalar",
            &[self],
            Rc::new(out),
            self.shape(),
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    // ── matmul ───────────────────────────────────────────────────────

    /// Matrix product. `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (self.shape(), other.shape());
        let (batch, m, k, n) = match (ash.len(), bsh.len()) {
            (2, 2) => {
                if ash[1] != bsh[0] {
                    return Err(Error::shape("matmul", format!("{ash:?} vs {bsh:?}")));
                }
                (1, ash[0], ash[1], bsh[1])
            }
            (3, 3) => {
                if ash[0] != bsh[0] || ash[2] != bsh[1] {
                    return Err(Error::shape("matmul", format!("{ash:?} vs {bsh:?}")));
                }
                (ash[0], ash[1], ash[2], bsh[2])
            }
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("unsupported ranks {ash:?} vs {bsh:?}"),
                ))
            }
        };
        let out_shape: Vec<usize> = if ash.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let mut out = vec![0.0; batch * m * n];
        for b in 0..batch {
            mm(
                &self.data()[b * m * k..(b + 1) * m * k],
                &other.data()[b * k * n..(b + 1) * k * n],
                &mut out[b * m * n..(b + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let a_data = Rc::clone(&self.data);
        let b_data = Rc::clone(&other.data);
        Ok(Tensor::record(
            "matmul",
            &[self, other],
            Rc::new(out),
            &out_shape,
            Box::new(move |g| {
                let mut da = vec![0.0; a_data.len()];
                let mut db = vec![0.0; b_data.len()];
                for b in 0..batch {
                    let gv = &g[b * m * n..(b + 1) * m * n];
                    // dA = dC · Bᵀ, dB = Aᵀ · dC
                    mm_nt(
                        gv,
                        &b_data[b * k * n..(b + 1) * k * n],
                        &mut da[b * m * k..(b + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    mm_tn(
                        &a_data[b * m * k..(b + 1) * m * k],
                        gv,
                        &mut db[b * k * n..(b + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    // ── shape manipulation ───────────────────────────────────────────

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {new_shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::record(
            "reshape",
            &[self],
            Rc::clone(&self.data),
            new_shape,
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Swap two axes (materialized).
    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if d0 >= rank || d1 >= rank {
            return Err(Error::shape(
                "transpose",
                format!("axes ({d0},{d1}) on shape {:?}", self.shape()),
            ));
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.swap(d0, d1);
        let out = permute_two(self.data(), self.shape(), d0, d1);
        let in_shape = self.shape().to_vec();
        Ok(Tensor::record(
            "transpose",
            &[self],
            Rc::new(out),
            &out_shape,
            Box::new(move |g| {
                let mut gsh = in_shape.clone();
                gsh.swap(d0, d1);
                vec![Some(permute_two(g, &gsh, d0, d1))]
            }),
        ))
    }

    /// Gather slices along `axis` at the given indices. Serves both slicing
    /// (contiguous indices) and general gather; embedding lookup is this op
    /// on axis 0 of the table.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(
                "index_select",
                format!("axis {axis} on shape {shape:?}"),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::shape(
                "index_select",
                format!("index {bad} out of range for axis {axis} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let l = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = indices.len();
        let mut out = vec![0.0; outer * indices.len() * inner];
        for o in 0..outer {
            for (j, &ix) in indices.iter().enumerate() {
                let src = &self.data()[(o * l + ix) * inner..(o * l + ix + 1) * inner];
                let dst = &mut out[(o * indices.len() + j) * inner..][..inner];
                dst.copy_from_slice(src);
            }
        }
        let idx = indices.to_vec();
        let in_numel = self.numel();
        Ok(Tensor::record(
            "index_select",
            &[self],
            Rc::new(out),
            &out_shape,
            Box::new(move |g| {
                // scatter-add; repeated indices accumulate
                let mut da = vec![0.0; in_numel];
                for o in 0..outer {
                    for (j, &ix) in idx.iter().enumerate() {
                        let src = &g[(o * idx.len() + j) * inner..][..inner];
                        let dst = &mut da[(o * l + ix) * inner..(o * l + ix + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Embedding lookup: rows of a `[vocab, width]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::shape(
                "embedding",
                format!("table must be 2-d, got {:?}", self.shape()),
            ));
        }
        self.index_select(0, ids)
    }

    /// Broadcast to `target` shape. Source dims must align right; each must
    /// equal the target dim or be 1.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor> {
        if target.len() < self.shape().len() {
            return Err(Error::shape(
                "broadcast",
                format!("{:?} to {target:?}", self.shape()),
            ));
        }
        let rank = target.len();
        let mut sshape = vec![1usize; rank - self.shape().len()];
        sshape.extend_from_slice(self.shape());
        for (s, t) in sshape.iter().zip(target) {
            if *s != *t && *s != 1 {
                return Err(Error::shape(
                    "broadcast",
                    format!("{:?} to {target:?}", self.shape()),
                ));
            }
        }
        let in_numel = self.numel();
        let out_numel: usize = target.iter().product();

        // fast path: source is a suffix of the target (whole-block repeat)
        if is_suffix_repeat(&sshape, target) {
            let copies = out_numel / in_numel.max(1);
            let mut out = Vec::with_capacity(out_numel);
            for _ in 0..copies {
                out.extend_from_slice(self.data());
            }
            return Ok(Tensor::record(
                "broadcast",
                &[self],
                Rc::new(out),
                target,
                Box::new(move |g| {
                    let mut da = vec![0.0; in_numel];
                    for chunk in g.chunks_exact(in_numel) {
                        for (d, s) in da.iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                    vec![Some(da)]
                }),
            ));
        }

        let sstr = strides(&sshape);
        let eff: Vec<usize> = sshape
            .iter()
            .zip(&sstr)
            .zip(target)
            .map(|((s, st), t)| if s == t { *st } else { 0 })
            .collect();
        let mut out = vec![0.0; out_numel];
        let src = self.data();
        walk_odometer(target, &eff, |i, si| out[i] = src[si]);
        let target_v = target.to_vec();
        Ok(Tensor::record(
            "broadcast",
            &[self],
            Rc::new(out),
            target,
            Box::new(move |g| {
                let mut da = vec![0.0; in_numel];
                walk_odometer(&target_v, &eff, |i, si| da[si] += g[i]);
                vec![Some(da)]
            }),
        ))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Ok(Tensor::record(
            "sum",
            &[self],
            Rc::new(vec![s]),
            &[],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        ))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::invalid("mean over empty tensor"));
        }
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Ok(Tensor::record(
            "mean",
            &[self],
            Rc::new(vec![s]),
            &[],
            Box::new(move |g| vec![Some(vec![g[0] / n as f64; n])]),
        ))
    }

    /// Sum along `axis` (the axis is removed).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis("sum", axis, false)
    }

    /// Mean along `axis` (the axis is removed).
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis("mean", axis, true)
    }

    fn reduce_axis(&self, kind: &'static str, axis: usize, mean: bool) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(
                kind,
                format!("axis {axis} on shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let l = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let denom = if mean { l as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for li in 0..l {
                let src = &self.data()[(o * l + li) * inner..][..inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= denom;
            }
        }
        Ok(Tensor::record(
            kind,
            &[self],
            Rc::new(out),
            &out_shape,
            Box::new(move |g| {
                let mut da = vec![0.0; outer * l * inner];
                for o in 0..outer {
                    let gsrc = &g[o * inner..(o + 1) * inner];
                    for li in 0..l {
                        let dst = &mut da[(o * l + li) * inner..][..inner];
                        for (d, s) in dst.iter_mut().zip(gsrc) {
                            *d += s / denom;
                        }
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    // ── softmax / normalization ──────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.shape().is_empty() {
            return Err(Error::shape("softmax", "scalar input".to_string()));
        }
        let (rows, l) = rows_of(self.shape());
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data()[r * l..(r + 1) * l];
            let y = &mut out[r * l..(r + 1) * l];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - m).exp();
                z += *yi;
            }
            for yi in y.iter_mut() {
                *yi /= z;
            }
        }
        let out = Rc::new(out);
        let saved = Rc::clone(&out);
        Ok(Tensor::record(
            "softmax",
            &[self],
            out,
            self.shape(),
            Box::new(move |g| {
                let mut da = vec![0.0; saved.len()];
                for r in 0..rows {
                    let y = &saved[r * l..(r + 1) * l];
                    let gy = &g[r * l..(r + 1) * l];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in
                        da[r * l..(r + 1) * l].iter_mut().zip(y).zip(gy)
                    {
                        *d = yi * (gi - dot);
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Layer normalization over the last axis with elementwise gain and bias.
    ///
    /// `gain` and `bias` must have the same shape as the input; broadcast a
    /// parameter vector up first. Per-token gains produced from conditioning
    /// go through the same path.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        same_shape("layer_norm", self, gain)?;
        same_shape("layer_norm", self, bias)?;
        let (rows, l) = rows_of(self.shape());
        if l == 0 {
            return Err(Error::shape("layer_norm", "empty last axis".to_string()));
        }
        let mut normalized = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &self.data()[r * l..(r + 1) * l];
            let mean = x.iter().sum::<f64>() / l as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for (n, &xi) in normalized[r * l..(r + 1) * l].iter_mut().zip(x) {
                *n = (xi - mean) * istd;
            }
        }
        let out: Vec<f64> = normalized
            .iter()
            .zip(gain.data())
            .zip(bias.data())
            .map(|((n, g), b)| n * g + b)
            .collect();
        let normalized = Rc::new(normalized);
        let inv_std = Rc::new(inv_std);
        let gain_data = Rc::clone(&gain.data);
        Ok(Tensor::record(
            "layer_norm",
            &[self, gain, bias],
            Rc::new(out),
            self.shape(),
            Box::new(move |g| {
                let numel = normalized.len();
                let mut dx = vec![0.0; numel];
                let mut dgain = vec![0.0; numel];
                let dbias = g.to_vec();
                for r in 0..rows {
                    let gy = &g[r * l..(r + 1) * l];
                    let n = &normalized[r * l..(r + 1) * l];
                    let gn = &gain_data[r * l..(r + 1) * l];
                    // dn = dy ⊙ gain; dx = istd (dn − mean(dn) − n · mean(dn ⊙ n))
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for ((&gyi, &gi), &ni) in gy.iter().zip(gn).zip(n) {
                        let dn = gyi * gi;
                        m1 += dn;
                        m2 += dn * ni;
                    }
                    m1 /= l as f64;
                    m2 /= l as f64;
                    let istd = inv_std[r];
                    for i in 0..l {
                        let dn = gy[i] * gn[i];
                        dx[r * l + i] = istd * (dn - m1 - n[i] * m2);
                        dgain[r * l + i] = gy[i] * n[i];
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            }),
        ))
    }

    // ── activations ──────────────────────────────────────────────────

    pub fn silu(&self) -> Tensor {
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        let x_data = Rc::clone(&self.data);
        Tensor::record(
            "silu",
            &[self],
            Rc::new(out),
            self.shape(),
            Box::new(move |g| {
                let da = g
                    .iter()
                    .zip(x_data.iter())
                    .map(|(&gi, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        gi * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                vec![Some(da)]
            }),
        )
    }

    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/π)
        const A: f64 = 0.044715;
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        let x_data = Rc::clone(&self.data);
        Tensor::record(
            "gelu",
            &[self],
            Rc::new(out),
            self.shape(),
            Box::new(move |g| {
                let da = g
                    .iter()
                    .zip(x_data.iter())
                    .map(|(&gi, &x)| {
                        let t = (C * (x + A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
                        gi * d
                    })
                    .collect();
                vec![Some(da)]
            }),
        )
    }

    // ── losses ───────────────────────────────────────────────────────

    /// Elementwise smoothed-l1 of the difference `self − target`:
    /// quadratic `0.5 d²/β` for `|d| < β`, else `|d| − 0.5 β`.
    pub fn smooth_l1(&self, target: &Tensor, beta: f64) -> Result<Tensor> {
        same_shape("smooth_l1", self, target)?;
        if beta <= 0.0 {
            return Err(Error::invalid("smooth_l1 threshold must be positive"));
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| {
                let d = a - b;
                if d.abs() < beta {
                    0.5 * d * d / beta
                } else {
                    d.abs() - 0.5 * beta
                }
            })
            .collect();
        let a_data = Rc::clone(&self.data);
        let b_data = Rc::clone(&target.data);
        Ok(Tensor::record(
            "smooth_l1",
            &[self, target],
            Rc::new(out),
            self.shape(),
            Box::new(move |g| {
                let mut da = vec![0.0; a_data.len()];
                let mut db = vec![0.0; b_data.len()];
                for i in 0..da.len() {
                    let d = a_data[i] - b_data[i];
                    let dd = if d.abs() < beta { d / beta } else { d.signum() };
                    da[i] = g[i] * dd;
                    db[i] = -g[i] * dd;
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits against labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("expected [rows, classes], got {shape:?}"),
            ));
        }
        let (rows, k) = (shape[0], shape[1]);
        if labels.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; rows * k];
        let mut loss = 0.0;
        for r in 0..rows {
            let x = &self.data()[r * k..(r + 1) * k];
            let p = &mut probs[r * k..(r + 1) * k];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pi, &xi) in p.iter_mut().zip(x) {
                *pi = (xi - m).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            loss -= (x[labels[r]] - m - z.ln()) / rows as f64;
        }
        let labels = labels.to_vec();
        Ok(Tensor::record(
            "cross_entropy",
            &[self],
            Rc::new(vec![loss]),
            &[],
            Box::new(move |g| {
                let mut da = probs.clone();
                for (r, &lab) in labels.iter().enumerate() {
                    da[r * k + lab] -= 1.0;
                }
                for v in &mut da {
                    *v *= g[0] / rows as f64;
                }
                vec![Some(da)]
            }),
        ))
    }
}

/// Concatenate along `axis`. All other dims must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("concat of zero tensors"));
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} on rank {rank}"),
        ));
    }
    for p in parts {
        if p.shape().len() != rank {
            return Err(Error::shape("concat", "rank mismatch".to_string()));
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != parts[0].shape()[d] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", parts[0].shape(), p.shape()),
                ));
            }
        }
    }
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total_l = out_shape[axis];
    let part_ls: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();

    let mut out = vec![0.0; outer * total_l * inner];
    for o in 0..outer {
        let mut off = 0;
        for (p, &pl) in parts.iter().zip(&part_ls) {
            let src = &p.data()[o * pl * inner..(o + 1) * pl * inner];
            let dst = &mut out[(o * total_l + off) * inner..][..pl * inner];
            dst.copy_from_slice(src);
            off += pl;
        }
    }
    let refs: Vec<&Tensor> = parts.to_vec();
    let part_numels: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    Ok(Tensor::record(
        "concat",
        &refs,
        Rc::new(out),
        &out_shape,
        Box::new(move |g| {
            let mut grads: Vec<Option<Vec<f64>>> = part_numels
                .iter()
                .map(|&n| Some(vec![0.0; n]))
                .collect();
            for o in 0..outer {
                let mut off = 0;
                for (pi, &pl) in part_ls.iter().enumerate() {
                    let src = &g[(o * total_l + off) * inner..][..pl * inner];
                    let dst = grads[pi].as_mut().unwrap();
                    dst[o * pl * inner..(o + 1) * pl * inner].copy_from_slice(src);
                    off += pl;
                }
            }
            grads
        }),
    ))
}

/// Scaled dot-product attention, composed from primitive ops.
///
/// `q`, `k`, `v` are `[batch, len, head_dim]` stacks (one slice per
/// batch-head). Differentiates through its parts; not a fused node.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let hd = *q
        .shape()
        .last()
        .ok_or_else(|| Error::shape("attention", "scalar q".to_string()))?;
    let scores = q
        .matmul(&k.transpose(k.shape().len() - 2, k.shape().len() - 1)?)?
        .scale(1.0 / (hd as f64).sqrt());
    scores.softmax()?.matmul(v)
}

/// True when `sshape` (already left-padded with 1s) equals the target on a
/// trailing segment and is all 1s before it: the broadcast is then a plain
/// repetition of the whole source block.
fn is_suffix_repeat(sshape: &[usize], target: &[usize]) -> bool {
    let mut split = 0;
    for (d, &s) in sshape.iter().enumerate() {
        if s != 1 {
            split = d;
            break;
        }
        split = d + 1;
    }
    sshape[..split].iter().all(|&s| s == 1) && sshape[split..] == target[split..]
}

/// Visit every linear index of `shape` together with the offset obtained by
/// accumulating `eff` strides (which may contain zeros for broadcast dims).
/// Odometer increments — no per-element division.
fn walk_odometer(shape: &[usize], eff: &[usize], mut visit: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..numel {
        visit(i, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= eff[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn permute_two(data: &[f64], shape: &[usize], d0: usize, d1: usize) -> Vec<f64> {
    if d0 == d1 {
        return data.to_vec();
    }
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let out_str = strides(&out_shape);
    // walking the input linearly corresponds to walking the output with the
    // input's dim order, i.e. with permuted output strides
    let mut eff = vec![0usize; rank];
    for d in 0..rank {
        let mut od = d;
        if d == d0 {
            od = d1;
        } else if d == d1 {
            od = d0;
        }
        eff[d] = out_str[od];
    }
    let mut out = vec![0.0; data.len()];
    walk_odometer(shape, &eff, |i, oi| out[oi] = data[i]);
    out
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let out = eye.matmul(&m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let x = Tensor::zeros(&[3]);
        let y = x.softmax().unwrap();
        assert_close(y.data(), &[1.0 / 3.0; 3], 1e-15);
    }

    #[test]
    fn layer_norm_matches_scalar_reference() {
        // scalar reference evaluated in place: x = [1,2,3], unit gain, zero bias
        let eps = 1e-6;
        let x = vec![1.0, 2.0, 3.0];
        let mean = 2.0;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        let expect: Vec<f64> = x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect();

        let t = Tensor::from_vec(x, &[3]);
        let gain = Tensor::full(&[3], 1.0);
        let bias = Tensor::zeros(&[3]);
        let y = t.layer_norm(&gain, &bias, eps).unwrap();
        assert_close(y.data(), &expect, 1e-15);

        // mean 0, variance 1 up to eps
        let m: f64 = y.data().iter().sum::<f64>() / 3.0;
        let v: f64 = y.data().iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 3.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-5);
    }

    #[test]
    fn index_select_gathers_and_scatters() {
        let tape = Tape::new();
        let x = tape.leaf((0..12).map(|v| v as f64).collect(), &[4, 3]);
        let y = x.index_select(0, &[2, 0, 2]).unwrap();
        assert_eq!(y.shape(), &[3, 3]);
        assert_eq!(&y.data()[..3], &[6.0, 7.0, 8.0]);
        let loss = y.sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        // row 2 selected twice → gradient 2, row 0 once, rows 1 and 3 zero
        let g = grads.get(&x).unwrap();
        assert_eq!(&g[0..3], &[1.0, 1.0, 1.0]);
        assert_eq!(&g[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(&g[6..9], &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_expands_and_reduces() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]);
        let y = x.broadcast_to(&[3, 2]).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let loss = y.sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], &[1, 2]);
        let b = tape.leaf(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]);
        let y = concat(&[&a, &b], 0).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let loss = y.index_select(0, &[0]).unwrap().sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&a).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.get(&b).unwrap(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let x = Tensor::from_vec((0..24).map(|v| v as f64).collect(), &[2, 3, 4]);
        let y = x.transpose(1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3]);
        let z = y.transpose(1, 2).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn smooth_l1_continuous_at_threshold() {
        // d = β exactly → both branches give 0.5 β
        let beta = 1.0;
        let a = Tensor::from_vec(vec![beta], &[1]);
        let b = Tensor::zeros(&[1]);
        let y = a.smooth_l1(&b, beta).unwrap();
        assert!((y.data()[0] - 0.5 * beta).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let x = Tensor::zeros(&[2, 4]);
        let loss = x.cross_entropy(&[0, 3]).unwrap();
        assert!((loss.item() - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_is_weighted_average() {
        // one query attending to two identical keys: output = mean of values
        let q = Tensor::from_vec(vec![1.0, 0.0], &[1, 1, 2]);
        let k = Tensor::from_vec(vec![0.5, 0.5, 0.5, 0.5], &[1, 2, 2]);
        let v = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_close(out.data(), &[2.0, 3.0], 1e-12);
    }
}
