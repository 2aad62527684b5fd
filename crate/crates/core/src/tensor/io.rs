//! Binary tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "QTSR" | dtype u8 (0=int8, 1=int32, 2=fp32) | rank u8 | 2 reserved bytes
//! rank x u32 extents
//! f32 scale            (int8 only)
//! element data, row-major
//! ```
//!
//! A rank-2 tensor therefore has a 16-byte header.

use std::io::{Read, Write};
use std::path::Path;

use super::{AccTensor, FpTensor, QuantTensor, Shape};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"QTSR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Int8 = 0,
    Int32 = 1,
    Fp32 = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    Int8(QuantTensor),
    Int32(AccTensor),
    Fp32(FpTensor),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::Int8(_) => DType::Int8,
            AnyTensor::Int32(_) => DType::Int32,
            AnyTensor::Fp32(_) => DType::Fp32,
        }
    }

    pub fn shape(&self) -> &Shape {
        match self {
            AnyTensor::Int8(t) => t.shape(),
            AnyTensor::Int32(t) => t.shape(),
            AnyTensor::Fp32(t) => t.shape(),
        }
    }

    pub fn into_quant(self) -> Result<QuantTensor> {
        match self {
            AnyTensor::Int8(t) => Ok(t),
            other => Err(Error::Format(format!("expected int8 tensor, got {:?}", other.dtype()))),
        }
    }

    pub fn into_acc(self) -> Result<AccTensor> {
        match self {
            AnyTensor::Int32(t) => Ok(t),
            other => Err(Error::Format(format!("expected int32 tensor, got {:?}", other.dtype()))),
        }
    }

    pub fn into_fp(self) -> Result<FpTensor> {
        match self {
            AnyTensor::Fp32(t) => Ok(t),
            other => Err(Error::Format(format!("expected fp32 tensor, got {:?}", other.dtype()))),
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &AnyTensor) -> Result<()> {
    let shape = t.shape();
    let rank = u8::try_from(shape.rank()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&[t.dtype() as u8, rank, 0, 0])?;
    for &d in shape.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match t {
        AnyTensor::Int8(q) => {
            w.write_all(&q.scale().to_le_bytes())?;
            let bytes: Vec<u8> = q.data().iter().map(|&v| v as u8).collect();
            w.write_all(&bytes)?;
        }
        AnyTensor::Int32(a) => {
            let mut bytes = Vec::with_capacity(a.data().len() * 4);
            a.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&bytes)?;
        }
        AnyTensor::Fp32(f) => {
            let mut bytes = Vec::with_capacity(f.data().len() * 4);
            f.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&bytes)?;
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated {what}: {e}")))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let mut head = [0u8; 8];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &head[..4])));
    }
    let dtype = match head[4] {
        0 => DType::Int8,
        1 => DType::Int32,
        2 => DType::Fp32,
        t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
    };
    let rank = head[5] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, "extents")?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let shape = Shape::new(dims).map_err(|e| Error::Format(e.to_string()))?;
    let n = shape.numel();
    let tensor = match dtype {
        DType::Int8 => {
            let mut s = [0u8; 4];
            read_exact(r, &mut s, "scale")?;
            let mut data = vec![0u8; n];
            read_exact(r, &mut data, "int8 data")?;
            AnyTensor::Int8(QuantTensor::new(
                data.into_iter().map(|b| b as i8).collect(),
                f32::from_le_bytes(s),
                shape,
            )?)
        }
        DType::Int32 => {
            let mut data = vec![0u8; n * 4];
            read_exact(r, &mut data, "int32 data")?;
            let v = data
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            AnyTensor::Int32(AccTensor::new(v, 1.0, shape)?)
        }
        DType::Fp32 => {
            let mut data = vec![0u8; n * 4];
            read_exact(r, &mut data, "fp32 data")?;
            let v = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            AnyTensor::Fp32(FpTensor::new(v, shape)?)
        }
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Ok(tensor)
}

pub fn write_tensor_file(path: &Path, t: &AnyTensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    std::fs::write(path, buf).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn read_tensor_file(path: &Path) -> Result<AnyTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_tensor(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank2_header_is_16_bytes() {
        let q = QuantTensor::new(vec![1, -2, 3, -4], 0.5, Shape::matrix(2, 2).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &AnyTensor::Int8(q)).unwrap();
        assert_eq!(&buf[..4], b"QTSR");
        assert_eq!(buf[4], 0);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &0.5f32.to_le_bytes());
        assert_eq!(buf.len(), 16 + 4 + 4);
    }

    #[test]
    fn rejects_corruption() {
        let f = FpTensor::new(vec![1.0, 2.0], Shape::vector(2).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &AnyTensor::Fp32(f)).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor(&mut bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 1];
        assert!(read_tensor(&mut &short[..]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_tensor(&mut long.as_slice()).is_err());
        let mut tag = buf;
        tag[4] = 9;
        assert!(read_tensor(&mut tag.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), kind in 0u8..3) {
            let n = rows * cols;
            let shape = Shape::matrix(rows, cols).unwrap();
            let mix = |i: usize| seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64).wrapping_mul(1442695040888963407);
            let t = match kind {
                0 => AnyTensor::Int8(QuantTensor::new((0..n).map(|i| mix(i) as i8).collect(), 0.125, shape).unwrap()),
                1 => AnyTensor::Int32(AccTensor::new((0..n).map(|i| mix(i) as i32).collect(), 1.0, shape).unwrap()),
                _ => AnyTensor::Fp32(FpTensor::new((0..n).map(|i| (mix(i) % 1000) as f32 * 0.01).collect(), shape).unwrap()),
            };
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            prop_assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
        }
    }
}
