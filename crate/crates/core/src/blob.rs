//! Tensor blob format.
//!
//! ```text
//! "PDMT" | version: u32 | rank: u32 | extents: u64[rank] | data: f64[prod(extents)]
//! ```
//! All integers and reals are little-endian. Blobs may be concatenated.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PDMT";
pub const VERSION: u32 = 1;

pub fn encoded_len(t: &Tensor) -> usize {
    12 + 8 * t.rank() + 8 * t.len()
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 * t.len());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Blob(format!("truncated blob: {e}")))?;
    Ok(b)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != MAGIC {
        return Err(Error::Blob(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(Error::Blob(format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(read_array(r)?) as usize;
    if rank > 16 {
        return Err(Error::Blob(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_array(r)?) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; 8 * n];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Blob(format!("truncated data: {e}")))?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t));
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Tensor> {
    read_tensor(&mut bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let b = to_bytes(&t);
        assert_eq!(&b[..4], b"PDMT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[28..36].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), encoded_len(&t));
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_bytes(b"NOPE0000").is_err());
        let mut b = to_bytes(&Tensor::zeros(&[3]));
        b.truncate(b.len() - 1);
        assert!(from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(
            shape in prop::collection::vec(0usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let mut r = crate::rng::RngStream::new(seed, 0);
            let t = r.gaussian(&shape).map(|v| v * 1e3);
            let back = from_bytes(&to_bytes(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
