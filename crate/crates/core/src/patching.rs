//! Lossless patch transform between `(N, H, W, C)` images and
//! `(N, H/P, W/P, C*P*P)` patch grids.
//!
//! Channel `j*P*C + i*C + c` of patch cell `(hp, wp)` holds pixel
//! `(hp*P + j, wp*P + i)` channel `c`: height offset slowest, then width
//! offset, then the original channel. This is the ordering produced by the
//! reshape/permute sequence of the reference PyTorch code and by
//! TensorFlow's `extract_patches`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub size: usize,
}

impl PatchConfig {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        Ok(Self { size })
    }

    pub fn to_patches(&self, x: &Tensor) -> Result<Tensor> {
        to_patches(x, self.size)
    }

    pub fn from_patches(&self, p: &Tensor) -> Result<Tensor> {
        from_patches(p, self.size)
    }
}

pub fn patched_shape(h: usize, w: usize, c: usize, p: usize) -> Result<(usize, usize, usize)> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::PatchDivisibility { h, w, p });
    }
    Ok((h / p, w / p, c * p * p))
}

pub fn to_patches(x: &Tensor, p: usize) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    let (hp, wp, cp) = patched_shape(h, w, c, p)?;
    if p == 1 {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut o = 0;
    for b in 0..n {
        for gy in 0..hp {
            for gx in 0..wp {
                for j in 0..p {
                    let row = ((b * h + gy * p + j) * w + gx * p) * c;
                    // the P*C values for fixed row offset j are contiguous in x
                    out[o..o + p * c].copy_from_slice(&src[row..row + p * c]);
                    o += p * c;
                }
            }
        }
    }
    Tensor::new(&[n, hp, wp, cp], out)
}

pub fn from_patches(x: &Tensor, p: usize) -> Result<Tensor> {
    let (n, hp, wp, cp) = x.dims4()?;
    if p == 0 || cp % (p * p) != 0 {
        return Err(Error::ChannelDivisibility {
            channels: cp,
            p2: p * p,
        });
    }
    if p == 1 {
        return Ok(x.clone());
    }
    let (h, w, c) = (hp * p, wp * p, cp / (p * p));
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut o = 0;
    for b in 0..n {
        for gy in 0..hp {
            for gx in 0..wp {
                for j in 0..p {
                    let row = ((b * h + gy * p + j) * w + gx * p) * c;
                    out[row..row + p * c].copy_from_slice(&src[o..o + p * c]);
                    o += p * c;
                }
            }
        }
    }
    Tensor::new(&[n, h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    /// Direct transcription of the index formula; independent of the
    /// block-copy implementation above.
    fn reference_patch(x: &Tensor, p: usize) -> Tensor {
        let (n, h, w, c) = x.dims4().unwrap();
        let (hp, wp, cp) = (h / p, w / p, c * p * p);
        let mut out = Tensor::zeros(&[n, hp, wp, cp]);
        for b in 0..n {
            for gy in 0..hp {
                for gx in 0..wp {
                    for j in 0..p {
                        for i in 0..p {
                            for ch in 0..c {
                                let src = ((b * h + gy * p + j) * w + gx * p + i) * c + ch;
                                let dst = ((b * hp + gy) * wp + gx) * cp + j * p * c + i * c + ch;
                                out.data_mut()[dst] = x.data()[src];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn hand_traced_two_by_two() {
        let x = Tensor::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = to_patches(&x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1, 4]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(from_patches(&p, 2).unwrap(), x);
    }

    #[test]
    fn two_channel_ordering() {
        // pixel (row, col, ch) holds 100*row + 10*col + ch
        let mut d = vec![];
        for r in 0..2 {
            for c in 0..2 {
                for ch in 0..2 {
                    d.push((100 * r + 10 * c + ch) as f64);
                }
            }
        }
        let x = Tensor::new(&[1, 2, 2, 2], d).unwrap();
        let p = to_patches(&x, 2).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 10.0, 11.0, 100.0, 101.0, 110.0, 111.0]);
    }

    #[test]
    fn shape_contract() {
        let x = Tensor::zeros(&[1, 256, 256, 3]);
        let p = to_patches(&x, 4).unwrap();
        assert_eq!(p.shape(), &[1, 64, 64, 48]);
        assert_eq!(from_patches(&p, 4).unwrap().shape(), &[1, 256, 256, 3]);
    }

    #[test]
    fn identity_for_p1() {
        let x = RngStream::new(3, 0).gaussian(&[2, 3, 5, 2]);
        assert_eq!(to_patches(&x, 1).unwrap(), x);
    }

    #[test]
    fn errors() {
        let x = Tensor::zeros(&[1, 6, 4, 1]);
        let msg = to_patches(&x, 4).unwrap_err().to_string();
        assert!(msg.contains("H=6") && msg.contains("W=4") && msg.contains('4'));
        let q = Tensor::zeros(&[1, 2, 2, 6]);
        assert!(from_patches(&q, 2).is_err());
        assert!(PatchConfig::new(0).is_err());
    }

    proptest! {
        #[test]
        fn matches_reference_and_round_trips(
            n in 1usize..3, gh in 1usize..4, gw in 1usize..4, c in 1usize..4,
            p in prop::sample::select(vec![1usize, 2, 3, 4, 8]),
            seed in any::<u64>(),
        ) {
            let x = RngStream::new(seed, 1).gaussian(&[n, gh * p, gw * p, c]);
            let y = to_patches(&x, p).unwrap();
            prop_assert_eq!(&y, &reference_patch(&x, p));
            prop_assert_eq!(from_patches(&y, p).unwrap(), x.clone());
            prop_assert!((y.sum_sq() - x.sum_sq()).abs() <= 1e-12 * x.sum_sq());
        }

        #[test]
        fn linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut r = RngStream::new(seed, 2);
            let x = r.gaussian(&[1, 4, 4, 2]);
            let y = r.gaussian(&[1, 4, 4, 2]);
            let lhs = to_patches(&x.axpby(a, &y, b).unwrap(), 2).unwrap();
            let rhs = to_patches(&x, 2).unwrap().axpby(a, &to_patches(&y, 2).unwrap(), b).unwrap();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
