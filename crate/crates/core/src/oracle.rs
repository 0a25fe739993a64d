//! Exact optimal denoiser over a finite empirical dataset.
//!
//! With a uniform prior over examples `x_i`, the posterior over which
//! example produced `z_t` has weights
//! `w_i ∝ exp(-|z_t - sqrt(a) x_i|^2 / (2 (1 - a)))`, the optimal
//! reconstruction is `sum_i w_i x_i`, and the marginal score is
//! `-(z_t - sqrt(a) x̄) / (1 - a)`.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDataset {
    item_shape: Vec<usize>,
    data: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl EmpiricalDataset {
    /// Builds a dataset from a stacked tensor whose leading axis indexes examples.
    pub fn new(examples: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = examples.batch_len();
        if examples.rank() == 0 || n == 0 {
            return Err(Error::Dataset("dataset must be non-empty".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Dataset(format!("{} labels for {n} examples", l.len())));
            }
        }
        let item_shape = examples.shape()[1..].to_vec();
        Ok(Self {
            item_shape,
            data: examples.into_data(),
            labels,
        })
    }

    pub fn from_items(items: &[Tensor], labels: Option<Vec<usize>>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dataset("dataset must be non-empty".into()))?;
        let shape = first.shape().to_vec();
        if let Some(bad) = items.iter().find(|t| t.shape() != shape.as_slice()) {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: bad.shape().to_vec(),
            });
        }
        let slices: Vec<&[f64]> = items.iter().map(|t| t.data()).collect();
        Self::new(Tensor::stack(&slices, &shape)?, labels)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.item_len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.item_shape
    }

    pub fn item_len(&self) -> usize {
        self.item_shape.iter().product()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let k = self.item_len();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0)
    }

    /// All examples stacked as `(M, ...item_shape)`.
    pub fn as_tensor(&self) -> Tensor {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.item_shape);
        Tensor::new(&shape, self.data.clone()).expect("consistent by construction")
    }

    /// Examples selected by index, stacked.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let items: Vec<&[f64]> = idx.iter().map(|&i| self.example(i)).collect();
        Tensor::stack(&items, &self.item_shape).expect("consistent by construction")
    }

    pub fn mean_example(&self) -> Vec<f64> {
        let k = self.item_len();
        let mut m = vec![0.0; k];
        for i in 0..self.len() {
            for (a, b) in m.iter_mut().zip(self.example(i)) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    fn in_class(&self, i: usize, class: Option<usize>) -> bool {
        match (class, &self.labels) {
            (None, _) => true,
            (Some(c), Some(l)) => l[i] == c,
            (Some(_), None) => false,
        }
    }

    /// Unnormalized log posterior weights; `-inf` for examples outside `class`.
    fn log_weights(&self, z: &[f64], alpha_cum: f64, class: Option<usize>) -> Vec<f64> {
        let sa = alpha_cum.sqrt();
        let denom = 2.0 * (1.0 - alpha_cum);
        (0..self.len())
            .map(|i| {
                if !self.in_class(i, class) {
                    return f64::NEG_INFINITY;
                }
                let d2: f64 = z
                    .iter()
                    .zip(self.example(i))
                    .map(|(zv, xv)| (zv - sa * xv) * (zv - sa * xv))
                    .sum();
                -d2 / denom
            })
            .collect()
    }

    /// Posterior probability that each example generated `z`.
    pub fn posterior_weights(&self, z: &[f64], alpha_cum: f64, class: Option<usize>) -> Result<Vec<f64>> {
        if z.len() != self.item_len() {
            return Err(Error::ShapeMismatch {
                left: vec![z.len()],
                right: self.item_shape.clone(),
            });
        }
        let lw = self.log_weights(z, alpha_cum, class);
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Dataset(format!("no examples with class {class:?}")));
        }
        let mut w: Vec<f64> = lw.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        Ok(w)
    }

    pub fn denoise_one(&self, z: &[f64], alpha_cum: f64, class: Option<usize>) -> Result<Vec<f64>> {
        let w = self.posterior_weights(z, alpha_cum, class)?;
        let mut out = vec![0.0; self.item_len()];
        for (i, wi) in w.iter().enumerate() {
            if *wi == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(self.example(i)) {
                *o += wi * x;
            }
        }
        Ok(out)
    }

    /// Exact `log q(z)` of the Gaussian mixture `sum_i N(sqrt(a) x_i, (1-a) I) / M`.
    pub fn log_marginal_density(&self, z: &[f64], alpha_cum: f64) -> f64 {
        let lw = self.log_weights(z, alpha_cum, None);
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lw.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let d = z.len() as f64;
        lse - (self.len() as f64).ln() - 0.5 * d * (2.0 * std::f64::consts::PI * (1.0 - alpha_cum)).ln()
    }
}

fn level(alpha_cum: &[f64], i: usize) -> f64 {
    if alpha_cum.len() == 1 {
        alpha_cum[0]
    } else {
        alpha_cum[i]
    }
}

fn check_batch(ds: &EmpiricalDataset, z: &Tensor, alpha_cum: &[f64], classes: Option<&[usize]>) -> Result<()> {
    if z.shape()[1..] != *ds.item_shape() {
        return Err(Error::ShapeMismatch {
            left: z.shape().to_vec(),
            right: ds.item_shape().to_vec(),
        });
    }
    let n = z.batch_len();
    if alpha_cum.len() != 1 && alpha_cum.len() != n {
        return Err(Error::Config(format!("{} signal levels for batch of {n}", alpha_cum.len())));
    }
    if let Some(c) = classes {
        if c.len() != n {
            return Err(Error::Config(format!("{} class ids for batch of {n}", c.len())));
        }
    }
    Ok(())
}

/// Posterior mean `E[x | z_t]` for each batch entry.
pub fn optimal_denoiser(
    ds: &EmpiricalDataset,
    z: &Tensor,
    alpha_cum: &[f64],
    classes: Option<&[usize]>,
) -> Result<Tensor> {
    check_batch(ds, z, alpha_cum, classes)?;
    let mut out = z.clone();
    for i in 0..z.batch_len() {
        let x = ds.denoise_one(z.item(i), level(alpha_cum, i), classes.map(|c| c[i]))?;
        out.item_mut(i).copy_from_slice(&x);
    }
    Ok(out)
}

/// Draws one dataset example per batch entry from `q(x | z_t)`.
pub fn posterior_sample(
    ds: &EmpiricalDataset,
    z: &Tensor,
    alpha_cum: &[f64],
    classes: Option<&[usize]>,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let idx = posterior_sample_indices(ds, z, alpha_cum, classes, rng)?;
    let mut out = z.clone();
    for (i, k) in idx.into_iter().enumerate() {
        out.item_mut(i).copy_from_slice(ds.example(k));
    }
    Ok(out)
}

pub fn posterior_sample_indices(
    ds: &EmpiricalDataset,
    z: &Tensor,
    alpha_cum: &[f64],
    classes: Option<&[usize]>,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    check_batch(ds, z, alpha_cum, classes)?;
    (0..z.batch_len())
        .map(|i| {
            let w = ds.posterior_weights(z.item(i), level(alpha_cum, i), classes.map(|c| c[i]))?;
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut pick = None;
            for (k, wk) in w.iter().enumerate() {
                if *wk > 0.0 {
                    acc += wk;
                    pick = Some(k);
                    if u < acc {
                        break;
                    }
                }
            }
            Ok(pick.expect("weights are non-empty"))
        })
        .collect()
}

/// `grad log q(z_t) = -(z_t - sqrt(a) x̄(z_t)) / (1 - a)`.
pub fn marginal_score(ds: &EmpiricalDataset, z: &Tensor, alpha_cum: &[f64]) -> Result<Tensor> {
    let xbar = optimal_denoiser(ds, z, alpha_cum, None)?;
    let mut out = z.clone();
    for i in 0..z.batch_len() {
        let a = level(alpha_cum, i);
        let (sa, d) = (a.sqrt(), 1.0 - a);
        let xb = xbar.item(i);
        for (o, x) in out.item_mut(i).iter_mut().zip(xb) {
            *o = -(*o - sa * x) / d;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_ds(v: &[f64]) -> EmpiricalDataset {
        EmpiricalDataset::new(Tensor::new(&[v.len(), 1], v.to_vec()).unwrap(), None).unwrap()
    }

    #[test]
    fn single_example() {
        let ds = scalar_ds(&[0.3]);
        assert_eq!(ds.posterior_weights(&[5.0], 0.1, None).unwrap(), vec![1.0]);
        let z = Tensor::new(&[3, 1], vec![-2.0, 0.0, 9.0]).unwrap();
        let x = optimal_denoiser(&ds, &z, &[0.4], None).unwrap();
        assert!(x.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        let mut r = RngStream::new(0, 0);
        let s = posterior_sample(&ds, &z, &[0.4], None, &mut r).unwrap();
        assert!(s.data().iter().all(|v| *v == 0.3));
        let sc = marginal_score(&ds, &z, &[0.4]).unwrap();
        for (zi, si) in z.data().iter().zip(sc.data()) {
            let g = -(zi - 0.4f64.sqrt() * 0.3) / 0.6;
            assert!((si - g).abs() < 1e-12);
        }
    }

    #[test]
    fn equidistant_is_even() {
        let ds = scalar_ds(&[1.0, -1.0]);
        let w = ds.posterior_weights(&[0.0], 0.5, None).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        let sc = marginal_score(&ds, &Tensor::new(&[1, 1], vec![0.0]).unwrap(), &[0.5]).unwrap();
        assert!(sc.data()[0].abs() < 1e-15);
    }

    #[test]
    fn two_point_closed_form() {
        let ds = scalar_ds(&[1.0, -1.0]);
        let x = ds.denoise_one(&[1.0], 0.5, None).unwrap()[0];
        assert!((x - 2f64.sqrt().tanh()).abs() < 1e-14);
        assert!((x - 0.88839).abs() < 1e-5);
    }

    #[test]
    fn brute_force_densities() {
        let mut r = RngStream::new(11, 0);
        let ex = r.gaussian(&[5, 3]).map(|v| v.tanh());
        let ds = EmpiricalDataset::new(ex, None).unwrap();
        let z = r.gaussian(&[3]);
        let a: f64 = 0.37;
        let dens: Vec<f64> = (0..5)
            .map(|i| {
                let d2: f64 = z.data().iter().zip(ds.example(i)).map(|(z, x)| (z - a.sqrt() * x).powi(2)).sum();
                (2.0 * std::f64::consts::PI * (1.0 - a)).powf(-1.5) * (-d2 / (2.0 * (1.0 - a))).exp()
            })
            .collect();
        let tot: f64 = dens.iter().sum();
        let w = ds.posterior_weights(z.data(), a, None).unwrap();
        for (wi, di) in w.iter().zip(&dens) {
            assert!((wi - di / tot).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((ds.log_marginal_density(z.data(), a) - (tot / 5.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_weights_do_not_underflow() {
        let ds = scalar_ds(&[0.9, -0.9]);
        let w = ds.posterior_weights(&[0.9], 0.9999, None).unwrap();
        assert_eq!(w[0], 1.0);
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn class_filter() {
        let ex = Tensor::new(&[3, 1], vec![1.0, -1.0, 0.5]).unwrap();
        let ds = EmpiricalDataset::new(ex, Some(vec![0, 1, 0])).unwrap();
        let w = ds.posterior_weights(&[-1.0], 0.5, Some(0)).unwrap();
        assert_eq!(w[1], 0.0);
        assert!(ds.posterior_weights(&[0.0], 0.5, Some(7)).is_err());
        assert_eq!(ds.num_classes(), 2);
    }

    #[test]
    fn convex_hull() {
        let mut r = RngStream::new(2, 0);
        let ds = EmpiricalDataset::new(r.gaussian(&[7, 4]).map(|v| v.tanh()), None).unwrap();
        for _ in 0..20 {
            let z = r.gaussian(&[4]);
            let w = ds.posterior_weights(z.data(), r.uniform() * 0.99 + 0.005, None).unwrap();
            assert!(w.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn invalid_datasets() {
        assert!(EmpiricalDataset::new(Tensor::zeros(&[0, 2]), None).is_err());
        assert!(EmpiricalDataset::new(Tensor::zeros(&[2, 2]), Some(vec![0])).is_err());
        assert!(EmpiricalDataset::from_items(&[Tensor::zeros(&[2]), Tensor::zeros(&[3])], None).is_err());
    }
}
