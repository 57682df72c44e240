//! Native tensor file format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic   4 bytes  "DSTF"
//! dtype   u8       1 = f32, 2 = f64, 3 = u32
//! rank    u8       0..=4
//! reserved u16     must be 0
//! dims    rank x u64
//! payload product(dims) scalars, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor, MAX_RANK};

const MAGIC: &[u8; 4] = b"DSTF";

/// A tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum DstfTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U32 { dims: Vec<usize>, data: Vec<u32> },
}

impl DstfTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            DstfTensor::F32(_) => Dtype::F32,
            DstfTensor::F64(_) => Dtype::F64,
            DstfTensor::U32 { .. } => Dtype::U32,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            DstfTensor::F32(t) => t.dims(),
            DstfTensor::F64(t) => t.dims(),
            DstfTensor::U32 { dims, .. } => dims,
        }
    }
}

/// Writes one tensor into an arbitrary stream (checkpoint embedding).
pub fn write_dstf_to<W: Write>(w: &mut W, t: &DstfTensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u8(t.dtype() as u8)?;
    w.write_u8(t.dims().len() as u8)?;
    w.write_u16::<LittleEndian>(0)?;
    for &d in t.dims() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    match t {
        DstfTensor::F32(t) => {
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        DstfTensor::F64(t) => {
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        DstfTensor::U32 { data, .. } => {
            for &v in data {
                w.write_u32::<LittleEndian>(v)?;
            }
        }
    }
    Ok(())
}

fn truncated(file: &str, context: &str) -> Error {
    Error::Truncated {
        file: file.to_string(),
        context: context.to_string(),
    }
}

/// Reads one tensor from an arbitrary stream without requiring EOF after.
pub fn read_dstf_from<R: Read>(r: &mut R, file: &str) -> Result<DstfTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| truncated(file, "header"))?;
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            file: file.to_string(),
            expected: format!("{MAGIC:?}"),
            found: format!("{magic:?}"),
        });
    }
    let dtype = r.read_u8().map_err(|_| truncated(file, "dtype"))?;
    let rank = r.read_u8().map_err(|_| truncated(file, "rank"))? as usize;
    let reserved = r
        .read_u16::<LittleEndian>()
        .map_err(|_| truncated(file, "reserved"))?;
    if reserved != 0 {
        return Err(Error::Format {
            file: file.to_string(),
            context: format!("reserved field is {reserved}, expected 0"),
        });
    }
    if rank > MAX_RANK {
        return Err(Error::Format {
            file: file.to_string(),
            context: format!("rank {rank} exceeds maximum {MAX_RANK}"),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = r
            .read_u64::<LittleEndian>()
            .map_err(|_| truncated(file, &format!("dim {i}")))?;
        dims.push(d as usize);
    }
    let numel: usize = dims.iter().product();
    let payload = format!("payload ({numel} elements)");
    match dtype {
        1 => {
            let mut data = vec![0f32; numel];
            r.read_f32_into::<LittleEndian>(&mut data)
                .map_err(|_| truncated(file, &payload))?;
            Ok(DstfTensor::F32(Tensor::from_vec(dims, data)?))
        }
        2 => {
            let mut data = vec![0f64; numel];
            r.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|_| truncated(file, &payload))?;
            Ok(DstfTensor::F64(Tensor::from_vec(dims, data)?))
        }
        3 => {
            let mut data = vec![0u32; numel];
            r.read_u32_into::<LittleEndian>(&mut data)
                .map_err(|_| truncated(file, &payload))?;
            Ok(DstfTensor::U32 { dims, data })
        }
        other => Err(Error::Format {
            file: file.to_string(),
            context: format!("unknown dtype tag {other}"),
        }),
    }
}

pub fn save_tensor(path: &Path, t: &DstfTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dstf_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<DstfTensor> {
    let file = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    let t = read_dstf_from(&mut r, &file)?;
    // a tensor file holds exactly one tensor
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format {
            file,
            context: "trailing bytes after payload".into(),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn f32_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dstf");
        let mut rng = crate::rng::rng_from(1, "dstf-test", 0);
        let data: Vec<f32> = (0..120).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let t = Tensor::from_vec(vec![2, 3, 4, 5], data).unwrap();
        save_tensor(&path, &DstfTensor::F32(t.clone())).unwrap();
        match load_tensor(&path).unwrap() {
            DstfTensor::F32(back) => {
                assert_eq!(back.dims(), t.dims());
                let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b);
            }
            other => panic!("wrong dtype {:?}", other.dtype()),
        }
    }

    #[test]
    fn rank0_scalar_supported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.dstf");
        save_tensor(&path, &DstfTensor::F64(Tensor::scalar(6.5))).unwrap();
        match load_tensor(&path).unwrap() {
            DstfTensor::F64(t) => {
                assert_eq!(t.rank(), 0);
                assert_eq!(t.item(), 6.5);
            }
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn truncated_payload_is_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dstf");
        save_tensor(&path, &DstfTensor::F32(Tensor::full(&[4], 1.0))).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_tensor(&path),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dstf");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_tensor(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn bad_dtype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dstf");
        std::fs::write(&path, b"DSTF\x09\x00\x00\x00").unwrap();
        let err = load_tensor(&path).unwrap_err();
        assert!(err.to_string().contains("dtype"));
    }
}
