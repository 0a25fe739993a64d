//! Prediction parameterizations (x, eps, v), thresholding and guidance.
//!
//! All conversions take per-example signal levels `alpha_cum`: either a
//! single value shared by the batch or one value per leading-axis entry.
//! With `z = sqrt(a) x + sqrt(1-a) eps` and `v = sqrt(a) eps - sqrt(1-a) x`:
//!
//! ```text
//! x   = (z - sqrt(1-a) eps) / sqrt(a)  =  sqrt(a) z - sqrt(1-a) v
//! eps = (z - sqrt(a) x) / sqrt(1-a)    =  sqrt(1-a) z + sqrt(a) v
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::tensor::{abs_percentile, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PredictionKind {
    X,
    Eps,
    V,
}

impl PredictionKind {
    pub const ALL: [PredictionKind; 3] = [PredictionKind::X, PredictionKind::Eps, PredictionKind::V];

    pub fn name(self) -> &'static str {
        match self {
            PredictionKind::X => "x",
            PredictionKind::Eps => "eps",
            PredictionKind::V => "v",
        }
    }
}

impl std::str::FromStr for PredictionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(PredictionKind::X),
            "eps" | "epsilon" => Ok(PredictionKind::Eps),
            "v" => Ok(PredictionKind::V),
            other => Err(Error::Config(format!("unknown prediction kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    kind: PredictionKind,
    value: Tensor,
}

impl Prediction {
    pub fn new(kind: PredictionKind, value: Tensor) -> Self {
        Self { kind, value }
    }

    pub fn kind(&self) -> PredictionKind {
        self.kind
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    /// Data estimate implied by this prediction.
    pub fn to_x(&self, z_t: &Tensor, alpha_cum: &[f64]) -> Result<Tensor> {
        match self.kind {
            PredictionKind::X => Ok(self.value.clone()),
            PredictionKind::Eps => x_from_eps(z_t, &self.value, alpha_cum),
            PredictionKind::V => x_from_v(z_t, &self.value, alpha_cum),
        }
    }

    /// Re-expresses this prediction in another parameterization.
    pub fn convert(&self, kind: PredictionKind, z_t: &Tensor, alpha_cum: &[f64]) -> Result<Prediction> {
        if kind == self.kind {
            return Ok(self.clone());
        }
        let x = self.to_x(z_t, alpha_cum)?;
        let value = match kind {
            PredictionKind::X => x,
            PredictionKind::Eps => eps_from_x(z_t, &x, alpha_cum)?,
            PredictionKind::V => {
                let eps = match self.kind {
                    PredictionKind::V => eps_from_v(z_t, &self.value, alpha_cum)?,
                    _ => eps_from_x(z_t, &x, alpha_cum)?,
                };
                v_from(&x, &eps, alpha_cum)?
            }
        };
        Ok(Prediction::new(kind, value))
    }
}

/// Per-example `alpha_cum` for a batch of timesteps.
pub fn alpha_cums(schedule: &Schedule, ts: &[usize]) -> Vec<f64> {
    ts.iter().map(|&t| schedule.alpha_cum(t)).collect()
}

/// Applies `f(a, p, q)` elementwise, `a` selected per leading-axis entry.
fn combine(p: &Tensor, q: &Tensor, alpha_cum: &[f64], f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            left: p.shape().to_vec(),
            right: q.shape().to_vec(),
        });
    }
    let n = p.batch_len();
    if alpha_cum.len() != 1 && alpha_cum.len() != n {
        return Err(Error::Config(format!(
            "{} signal levels for batch of {n}",
            alpha_cum.len()
        )));
    }
    let mut out = p.clone();
    let k = p.item_len();
    for i in 0..n {
        let a = if alpha_cum.len() == 1 { alpha_cum[0] } else { alpha_cum[i] };
        let qi = q.item(i);
        for (j, o) in out.data_mut()[i * k..(i + 1) * k].iter_mut().enumerate() {
            *o = f(a, *o, qi[j]);
        }
    }
    Ok(out)
}

pub fn eps_from_x(z_t: &Tensor, x: &Tensor, alpha_cum: &[f64]) -> Result<Tensor> {
    combine(z_t, x, alpha_cum, |a, z, x| (z - a.sqrt() * x) / (1.0 - a).sqrt())
}

pub fn x_from_eps(z_t: &Tensor, eps: &Tensor, alpha_cum: &[f64]) -> Result<Tensor> {
    combine(z_t, eps, alpha_cum, |a, z, e| (z - (1.0 - a).sqrt() * e) / a.sqrt())
}

pub fn v_from(x: &Tensor, eps: &Tensor, alpha_cum: &[f64]) -> Result<Tensor> {
    combine(x, eps, alpha_cum, |a, x, e| a.sqrt() * e - (1.0 - a).sqrt() * x)
}

pub fn x_from_v(z_t: &Tensor, v: &Tensor, alpha_cum: &[f64]) -> Result<Tensor> {
    combine(z_t, v, alpha_cum, |a, z, v| a.sqrt() * z - (1.0 - a).sqrt() * v)
}

pub fn eps_from_v(z_t: &Tensor, v: &Tensor, alpha_cum: &[f64]) -> Result<Tensor> {
    combine(z_t, v, alpha_cum, |a, z, v| (1.0 - a).sqrt() * z + a.sqrt() * v)
}

/// Regression target for `kind` given the clean data and the noise.
pub fn target(kind: PredictionKind, x: &Tensor, eps: &Tensor, alpha_cum: &[f64]) -> Result<Tensor> {
    match kind {
        PredictionKind::X => Ok(x.clone()),
        PredictionKind::Eps => Ok(eps.clone()),
        PredictionKind::V => v_from(x, eps, alpha_cum),
    }
}

/// Lipschitz factor from a perturbation of the prediction to the induced
/// perturbation of the x estimate.
pub fn x_error_amplification(kind: PredictionKind, alpha_cum: f64) -> f64 {
    match kind {
        PredictionKind::X => 1.0,
        PredictionKind::Eps => (1.0 - alpha_cum).sqrt() / alpha_cum.sqrt(),
        PredictionKind::V => (1.0 - alpha_cum).sqrt(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdMode {
    None,
    Static,
    Dynamic { percentile: f64 },
}

pub const DEFAULT_DYNAMIC_PERCENTILE: f64 = 99.5;

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::Dynamic {
            percentile: DEFAULT_DYNAMIC_PERCENTILE,
        }
    }
}

impl ThresholdMode {
    pub fn validate(&self) -> Result<()> {
        if let ThresholdMode::Dynamic { percentile } = *self {
            if !(percentile > 0.0 && percentile <= 100.0) {
                return Err(Error::Config(format!("percentile {percentile} outside (0, 100]")));
            }
        }
        Ok(())
    }
}

/// Clips (static) or rescales (dynamic) each batch entry into `[-1, 1]`.
pub fn threshold(x: &Tensor, mode: ThresholdMode) -> Tensor {
    match mode {
        ThresholdMode::None => x.clone(),
        ThresholdMode::Static => x.map(|v| v.clamp(-1.0, 1.0)),
        ThresholdMode::Dynamic { percentile } => {
            let mut out = x.clone();
            for i in 0..x.batch_len() {
                let item = out.item_mut(i);
                let s = abs_percentile(item, percentile);
                if s > 1.0 {
                    for v in item.iter_mut() {
                        *v = v.clamp(-s, s) / s;
                    }
                } else {
                    for v in item.iter_mut() {
                        *v = v.clamp(-1.0, 1.0);
                    }
                }
            }
            out
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
    pub threshold: ThresholdMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 1.0,
            threshold: ThresholdMode::default(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("guidance weight {} must be >= 0", self.w)));
        }
        self.threshold.validate()
    }
}

/// `uncond + w (cond - uncond)`.
pub fn guide(cond: &Prediction, uncond: &Prediction, w: f64) -> Result<Prediction> {
    if cond.kind != uncond.kind {
        return Err(Error::KindMismatch(cond.kind, uncond.kind));
    }
    if w == 1.0 {
        return Ok(cond.clone());
    }
    if w == 0.0 {
        return Ok(uncond.clone());
    }
    let value = cond.value.zip_map(&uncond.value, |c, u| u + w * (c - u))?;
    Ok(Prediction::new(cond.kind, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn s(v: f64) -> Tensor {
        Tensor::new(&[1, 1], vec![v]).unwrap()
    }

    #[test]
    fn hand_values() {
        let a = [0.25];
        let eps = eps_from_x(&s(1.8660), &s(2.0), &a).unwrap();
        assert!((eps.data()[0] - 1.0).abs() < 1e-4);
        let v = v_from(&s(2.0), &s(1.0), &a).unwrap();
        assert!((v.data()[0] - (0.5 - 0.75f64.sqrt() * 2.0)).abs() < 1e-15);
        assert!((v.data()[0] + 1.2321).abs() < 1e-4);
        let z = 1.0 + 0.75f64.sqrt();
        let x = x_from_v(&s(z), &v, &a).unwrap();
        assert!((x.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn endpoint_identities() {
        let x = s(0.7);
        let e = s(-0.3);
        assert_eq!(v_from(&x, &e, &[1.0]).unwrap(), e);
        assert_eq!(v_from(&x, &e, &[0.0]).unwrap(), s(-0.7));
        let eps = eps_from_x(&s(0.4), &s(0.4), &[1.0 - 1e-12]).unwrap();
        assert!(eps.data()[0].abs() < 1e-6);
    }

    #[test]
    fn amplification_values() {
        for a in [0.01, 0.5, 0.99] {
            assert_eq!(x_error_amplification(PredictionKind::X, a), 1.0);
        }
        let f = x_error_amplification(PredictionKind::Eps, 0.25);
        assert!((f - 3f64.sqrt()).abs() < 1e-15);
        assert!((f - 1.7321).abs() < 1e-4);
    }

    #[test]
    fn amplification_ordering_on_default_schedule() {
        let sch = crate::schedule::ScheduleConfig::default().build().unwrap();
        let mut prev = 0.0;
        for t in 1..=sch.len() {
            let a = sch.alpha_cum(t);
            let fe = x_error_amplification(PredictionKind::Eps, a);
            let fv = x_error_amplification(PredictionKind::V, a);
            assert!(fe > prev);
            prev = fe;
            if a < 0.5 {
                assert!(fe > 1.0 && fv < 1.0);
            }
        }
    }

    #[test]
    fn threshold_cases() {
        let inside = Tensor::new(&[1, 3], vec![-1.0, 0.2, 0.9]).unwrap();
        assert_eq!(threshold(&inside, ThresholdMode::Static), inside);
        assert_eq!(threshold(&inside, ThresholdMode::default()), inside);
        let x = Tensor::new(&[1, 2], vec![0.0, 2.0]).unwrap();
        let y = threshold(&x, ThresholdMode::Dynamic { percentile: 100.0 });
        assert_eq!(y.data(), &[0.0, 1.0]);
        assert!(ThresholdMode::Dynamic { percentile: 0.0 }.validate().is_err());
    }

    #[test]
    fn dynamic_threshold_is_per_sample() {
        let x = Tensor::new(&[2, 2], vec![0.0, 4.0, 0.5, -0.5]).unwrap();
        let y = threshold(&x, ThresholdMode::Dynamic { percentile: 100.0 });
        assert_eq!(y.data(), &[0.0, 1.0, 0.5, -0.5]);
    }

    #[test]
    fn guidance_fixed_points() {
        let mut r = RngStream::new(5, 0);
        let c = Prediction::new(PredictionKind::X, r.gaussian(&[2, 3]));
        let u = Prediction::new(PredictionKind::X, r.gaussian(&[2, 3]));
        assert_eq!(guide(&c, &u, 1.0).unwrap(), c);
        assert_eq!(guide(&c, &u, 0.0).unwrap(), u);
        let one = Prediction::new(PredictionKind::Eps, s(1.0));
        let zero = Prediction::new(PredictionKind::Eps, s(0.0));
        assert_eq!(guide(&one, &zero, 1.5).unwrap().value().data(), &[1.5]);
        let other = Prediction::new(PredictionKind::V, s(0.0));
        assert!(matches!(guide(&one, &other, 2.0), Err(Error::KindMismatch(..))));
    }

    proptest! {
        #[test]
        fn conversion_cycles_close(seed in any::<u64>(), a in 0.001f64..0.999) {
            let mut r = RngStream::new(seed, 9);
            let x = r.gaussian(&[2, 5]);
            let e = r.gaussian(&[2, 5]);
            let ac = [a, 1.0 - a];
            let zt = combine(&x, &e, &ac, |a, x, e| a.sqrt() * x + (1.0 - a).sqrt() * e).unwrap();
            let v = v_from(&x, &e, &ac).unwrap();
            let tol = 1e-12;
            let close = |p: &Tensor, q: &Tensor| p.data().iter().zip(q.data()).all(|(a, b)| (a - b).abs() < tol);
            prop_assert!(close(&x_from_eps(&zt, &eps_from_x(&zt, &x, &ac).unwrap(), &ac).unwrap(), &x));
            prop_assert!(close(&x_from_v(&zt, &v, &ac).unwrap(), &x));
            prop_assert!(close(&eps_from_v(&zt, &v, &ac).unwrap(), &e));
            for from in PredictionKind::ALL {
                let start = Prediction::new(PredictionKind::X, x.clone()).convert(from, &zt, &ac).unwrap();
                for to in PredictionKind::ALL {
                    let back = start.convert(to, &zt, &ac).unwrap().convert(from, &zt, &ac).unwrap();
                    prop_assert!(close(back.value(), start.value()));
                }
            }
        }

        #[test]
        fn guide_is_identity_when_equal(seed in any::<u64>(), w in 0.0f64..5.0) {
            let t = RngStream::new(seed, 3).gaussian(&[1, 4]);
            let p = Prediction::new(PredictionKind::V, t);
            let g = guide(&p, &p, w).unwrap();
            let same = g.value().data().iter().zip(p.value().data()).all(|(a, b)| (a - b).abs() < 1e-12);
            prop_assert!(same);
        }

        #[test]
        fn dynamic_output_in_unit_box(seed in any::<u64>(), scale in 0.1f64..20.0, pct in 1.0f64..100.0) {
            let t = RngStream::new(seed, 4).gaussian(&[3, 7]).scale(scale);
            let y = threshold(&t, ThresholdMode::Dynamic { percentile: pct });
            prop_assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
