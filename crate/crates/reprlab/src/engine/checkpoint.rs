//! Parameter checkpoint container.
//!
//! Layout: a header naming every segment (name, trainable flag, shape)
//! followed by raw little-endian values. The format is described in full
//! in the guide's file-formats chapter.
//!
//! ```text
//! magic  b"RPRC"
//! u16    version (1)
//! u8     dtype: 0 = f64, 1 = f32
//! u32    segment count
//! per segment:
//!   u16  name length, then UTF-8 name bytes
//!   u8   trainable flag
//!   u8   rank
//!   u32* extents
//! then per segment, in order: numel values, little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::engine::nn::{NetworkParams, Segment};
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RPRC";
const VERSION: u16 = 1;

/// Storage precision. Independent of the in-memory representation, which
/// is always 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn bytes_per_value(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

pub fn save_params(path: &Path, params: &NetworkParams, precision: Precision) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_params(&mut w, params, precision)
}

pub fn write_params(w: &mut impl Write, params: &NetworkParams, precision: Precision) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[match precision {
        Precision::F64 => 0u8,
        Precision::F32 => 1u8,
    }])?;
    w.write_all(&(params.segments().len() as u32).to_le_bytes())?;
    for seg in params.segments() {
        let name = seg.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::format("segment name too long"));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[seg.trainable as u8])?;
        w.write_all(&[seg.tensor.shape().len() as u8])?;
        for &d in seg.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for seg in params.segments() {
        match precision {
            Precision::F64 => {
                for &v in seg.tensor.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Precision::F32 => {
                for &v in seg.tensor.data() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn load_params(path: &Path) -> Result<NetworkParams> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_params(&mut r)
}

pub fn read_params(r: &mut impl Read) -> Result<NetworkParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("not a parameter checkpoint (bad magic)"));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let dtype = read_u8(r)?;
    let precision = match dtype {
        0 => Precision::F64,
        1 => Precision::F32,
        other => return Err(Error::format(format!("unknown dtype tag {other}"))),
    };
    let nsegs = read_u32(r)? as usize;
    let mut metas = Vec::with_capacity(nsegs);
    for _ in 0..nsegs {
        let name_len = read_u16(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("segment name not UTF-8"))?;
        let trainable = read_u8(r)? != 0;
        let rank = read_u8(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        metas.push((name, trainable, shape));
    }
    let mut segments = Vec::with_capacity(nsegs);
    for (name, trainable, shape) in metas {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match precision {
            Precision::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
            Precision::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
        }
        segments.push(Segment { name, tensor: Tensor::new(shape, data), trainable });
    }
    Ok(NetworkParams::from_segments(segments))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::nn::{init_params, LayerSpec, NetworkSpec};
    use crate::rng::SeedStream;

    #[test]
    fn f64_roundtrip_is_exact() {
        let spec = NetworkSpec::new(
            vec![3],
            vec![LayerSpec::Dense { units: 4, out_shape: None }, LayerSpec::BatchNorm { momentum: 0.9, epsilon: 1e-5 }],
        );
        let params = init_params(&spec, 0.1, &mut SeedStream::new(1).rng()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_params(&path, &params, Precision::F64).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(loaded.layout_id(), params.layout_id());
    }

    #[test]
    fn f32_roundtrip_preserves_layout_and_approximate_values() {
        let spec = NetworkSpec::new(vec![2], vec![LayerSpec::Dense { units: 2, out_shape: None }]);
        let params = init_params(&spec, 0.1, &mut SeedStream::new(2).rng()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p32.ckpt");
        save_params(&path, &params, Precision::F32).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.layout_id(), params.layout_id());
        for (a, b) in loaded.segments().iter().zip(params.segments()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_params(&path), Err(Error::Format(_))));
    }
}
