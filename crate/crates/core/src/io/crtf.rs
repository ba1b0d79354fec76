use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CRTF";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x01;

const FIXED_HEADER: usize = 8;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::invalid(format!("{} dimensions exceed 255", t.ndim())));
    }
    let mut out = Vec::with_capacity(FIXED_HEADER + 8 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, t.ndim() as u8, 0]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: FIXED_HEADER,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < FIXED_HEADER {
        return Err(Error::Truncated {
            expected: FIXED_HEADER,
            actual: bytes.len(),
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::BadVersion(bytes[4]));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::DtypeMismatch(bytes[5]));
    }
    let ndim = bytes[6] as usize;
    let header = FIXED_HEADER + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let shape: Vec<usize> = bytes[FIXED_HEADER..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format {
            what: "CRTF header",
            detail: format!("dimensions {shape:?} overflow"),
        })?;
    let expected = header + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            what: "CRTF payload",
            detail: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, -7.25, 1e30]).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..8], b"CRTF\x01\x01\x02\x00");
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 6 * 4);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let back = decode(&encode(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&sample()).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("bad magic"));

        let err = decode(&good[..good.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 48, actual: 45 }));
        assert!(err.to_string().contains("48") && err.to_string().contains("45"));

        let mut bad = good.clone();
        bad[5] = 0x02;
        assert!(matches!(decode(&bad), Err(Error::DtypeMismatch(2))));
    }
}
