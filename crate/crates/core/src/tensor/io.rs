//! `RAMMTEN1` tensor files: 8-byte magic, precision tag (4 or 8), rank,
//! `rank` little-endian u64 dims, then the little-endian IEEE-754 payload.

use std::fs;
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{RammError, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"RAMMTEN1";

/// A tensor read from disk at whatever precision it was stored in.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_precision<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + t.len() * T::TAG as usize);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::TAG);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *at + n;
    if end > bytes.len() {
        return Err(RammError::Truncated {
            what: "tensor file",
            needed: end,
            found: bytes.len(),
        });
    }
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_payload<T: Real>(bytes: &[u8], at: &mut usize, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let w = T::TAG as usize;
    let raw = take(bytes, at, n * w)?;
    let data = raw.chunks_exact(w).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    let mut at = 0;
    if take(bytes, &mut at, 8)? != TENSOR_MAGIC {
        return Err(RammError::BadMagic {
            what: "tensor file",
            expected: "RAMMTEN1",
        });
    }
    let head = take(bytes, &mut at, 2)?;
    let (tag, rank) = (head[0], head[1] as usize);
    if rank == 0 {
        return Err(RammError::format("tensor file", "rank must be at least 1"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| RammError::format("tensor file", "dim overflow"))?);
    }
    if shape.contains(&0) {
        return Err(RammError::format("tensor file", "zero-sized dimension"));
    }
    let t = match tag {
        4 => AnyTensor::F32(read_payload(bytes, &mut at, shape)?),
        8 => AnyTensor::F64(read_payload(bytes, &mut at, shape)?),
        other => {
            return Err(RammError::format(
                "tensor file",
                format!("unknown precision tag {other}"),
            ))
        }
    };
    if at != bytes.len() {
        return Err(RammError::format(
            "tensor file",
            format!("{} trailing bytes", bytes.len() - at),
        ));
    }
    Ok(t)
}

pub fn write_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RammError::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..8], b"RAMMTEN1");
        assert_eq!(b[8], 4);
        assert_eq!(b[9], 2);
        assert_eq!(u64::from_le_bytes(b[10..18].try_into().unwrap()), 2);
        assert_eq!(b.len(), 10 + 16 + 24);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let t = Tensor::<f64>::vector(vec![1.0, 2.0]);
        let good = encode_tensor(&t);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(RammError::BadMagic { .. })));
        assert!(matches!(
            decode_tensor(&good[..good.len() - 1]),
            Err(RammError::Truncated { .. })
        ));
        let mut bad = good.clone();
        bad[8] = 2;
        assert!(matches!(decode_tensor(&bad), Err(RammError::Format { .. })));
        let mut bad = good;
        bad.push(0);
        assert!(matches!(decode_tensor(&bad), Err(RammError::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            let AnyTensor::F64(back) = back else { panic!("precision changed") };
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);

            let t32 = t.cast::<f32>();
            let AnyTensor::F32(back32) = decode_tensor(&encode_tensor(&t32)).unwrap() else { panic!() };
            prop_assert!(back32.data().iter().zip(t32.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
