//! Binary interchange formats, all little-endian:
//!
//! - point cloud: `b"SVPC"`, `u32` count, then `count` records of four `f32`
//!   (`x, y, z, reflectance`).
//! - tensor: `b"SVTN"`, `u32` ndim, `ndim` `u32` dims, then the row-major
//!   data as `f32`.
//!
//! Values are narrowed to `f32` on write.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pointcloud::PointCloud;

pub const POINT_CLOUD_MAGIC: &[u8; 4] = b"SVPC";
pub const TENSOR_MAGIC: &[u8; 4] = b"SVTN";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{what} {n} does not fit in u32")))
}

pub fn encode_point_cloud(cloud: &PointCloud) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 16);
    out.extend_from_slice(POINT_CLOUD_MAGIC);
    out.extend_from_slice(&len_u32(cloud.len(), "point count")?.to_le_bytes());
    for p in &cloud.points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(POINT_CLOUD_MAGIC)?;
    let n = r.u32()? as usize;
    if bytes.len() != 8 + n * 16 {
        return Err(Error::Format(format!("point count {n} does not match {} bytes", bytes.len())));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = [0.0; 4];
        for v in &mut p {
            *v = r.f32()? as f64;
        }
        points.push(p);
    }
    r.finish()?;
    PointCloud::new(points)
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&len_u32(t.ndim(), "ndim")?.to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(TENSOR_MAGIC)?;
    let ndim = r.u32()? as usize;
    let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    if bytes.len() - r.pos != numel * 4 {
        return Err(Error::Format(format!("shape {shape:?} does not match {} data bytes", bytes.len() - r.pos)));
    }
    let data: Vec<f64> = (0..numel).map(|_| r.f32().map(|v| v as f64)).collect::<Result<_>>()?;
    r.finish()?;
    Tensor::new(shape, data)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_bytes(path, &encode_point_cloud(cloud)?)
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    decode_point_cloud(&read_bytes(path)?)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_tensor(t)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_cloud_layout() {
        let c = PointCloud::new(vec![[1.0, -2.0, 0.5, 0.25]]).unwrap();
        let b = encode_point_cloud(&c).unwrap();
        assert_eq!(&b[..4], b"SVPC");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
        assert_eq!(decode_point_cloud(&b).unwrap(), c);
    }

    #[test]
    fn tensor_layout_and_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![0.5, 1.0, -1.5, 2.0, 0.0, 3.25]).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert_eq!(&b[..4], b"SVTN");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(decode_tensor(&b).unwrap(), t);
    }

    #[test]
    fn malformed_inputs_rejected() {
        assert!(decode_point_cloud(b"SVPX\0\0\0\0").is_err());
        assert!(decode_point_cloud(b"SVPC\x02\0\0\0").is_err());
        assert!(decode_tensor(b"SVTN\x01\0\0\0\x04\0\0\0\0\0").is_err());
        let mut b = encode_tensor(&Tensor::zeros(&[2])).unwrap();
        b.push(0);
        assert!(decode_tensor(&b).is_err());
    }
}
