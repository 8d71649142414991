//! On-disk formats.
//!
//! Raw tensors use the `DJT1` layout: magic bytes, u32 rank, rank×u64
//! extents, then the little-endian f64 payload in row-major order.
//! Grayscale samples are written as binary PGM (P5), which keeps golden
//! tests byte-exact without a codec dependency.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"DJT1";

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Serialize shape + data in the `DJT1` layout.
pub fn write_tensor_raw<W: Write>(w: &mut W, shape: &[usize], data: &[f64]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    w.write_all(TENSOR_MAGIC)?;
    write_u32(w, shape.len() as u32)?;
    for &e in shape {
        write_u64(w, e as u64)?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_raw<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}, expected {:?}",
            magic, TENSOR_MAGIC
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok((shape, data))
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_tensor_raw(w, t.shape(), t.data())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let (shape, data) = read_tensor_raw(r)?;
    Ok(Tensor::from_vec(data, &shape))
}

pub fn save_tensor(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor(path: &std::path::Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

/// Binary PGM (P5). Values are clamped to [0, 1] then quantized to 8 bits.
pub fn write_pgm<W: Write>(w: &mut W, pixels: &[f64], height: usize, width: usize) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::shape(
            "write_pgm",
            format!("{} pixels for {height}×{width}", pixels.len()),
        ));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn save_pgm(path: &std::path::Path, pixels: &[f64], height: usize, width: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pgm(&mut f, pixels, height, width)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let t = Tensor::from_vec(vec![1.5, -2.25, 3.125, 0.0, 5.0, -6.5], &[2, 3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..4], b"DJT1");
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"XXXX\0\0\0\0".to_vec();
        let err = read_tensor(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn pgm_header_and_quantization() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, &[0.0, 1.0, 0.5, 2.0], 2, 2).unwrap();
        let header_end = buf.iter().filter(|&&b| b == b'\n').count();
        assert!(header_end >= 3);
        assert_eq!(&buf[buf.len() - 4..], &[0u8, 255, 128, 255]);
    }
}
