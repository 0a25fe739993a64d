//! Ancestral reverse-process sampling with guidance, thresholding and
//! model splitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::param::{guide, threshold, GuidanceConfig, Prediction, ThresholdMode};
use crate::rng::RngStream;
use crate::schedule::Schedule;
use crate::tensor::Tensor;

/// Noise variance of each reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// The posterior variance of q(z_{t-1} | z_t, x).
    #[default]
    Posterior,
    /// The forward-step variance beta_t.
    Beta,
}

/// One model, or a low-noise model for `t <= s` and a high-noise model for
/// `t > s` (training timestep labels).
pub enum ModelSet<'a> {
    Single(&'a dyn Denoiser),
    Split {
        s: usize,
        low: &'a dyn Denoiser,
        high: &'a dyn Denoiser,
    },
}

impl<'a> ModelSet<'a> {
    pub fn split(s: usize, low: &'a dyn Denoiser, high: &'a dyn Denoiser) -> Self {
        ModelSet::Split { s, low, high }
    }

    fn models(&self) -> Vec<&'a dyn Denoiser> {
        match *self {
            ModelSet::Single(m) => vec![m],
            ModelSet::Split { low, high, .. } => vec![low, high],
        }
    }

    fn validate(&self, schedule: &Schedule) -> Result<()> {
        if let ModelSet::Split { s, .. } = *self {
            if s == 0 || s >= schedule.train_steps() {
                return Err(Error::Config(format!(
                    "split point {s} outside [1, {})",
                    schedule.train_steps()
                )));
            }
        }
        let models = self.models();
        let first = models[0];
        for m in &models {
            if m.patch_size() != first.patch_size() || m.kind() != first.kind() {
                return Err(Error::ModelMismatch("split models differ in patch size or prediction kind".into()));
            }
            if let Some(fp) = m.schedule_fingerprint() {
                if fp != schedule.fingerprint() {
                    return Err(Error::ModelMismatch(format!(
                        "model schedule {fp} does not match {}",
                        schedule.fingerprint()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The model responsible for training timestep `t`.
pub fn split_dispatch<'a>(t: usize, models: &ModelSet<'a>) -> &'a dyn Denoiser {
    match *models {
        ModelSet::Single(m) => m,
        ModelSet::Split { s, low, high } => {
            if t <= s {
                low
            } else {
                high
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleRequest {
    pub count: usize,
    pub classes: Option<Vec<usize>>,
    pub steps: usize,
    pub guidance: GuidanceConfig,
    pub variance: ReverseVariance,
    pub seed: u64,
}

impl Default for SampleRequest {
    fn default() -> Self {
        Self {
            count: 1,
            classes: None,
            steps: 250,
            guidance: GuidanceConfig::default(),
            variance: ReverseVariance::default(),
            seed: 0,
        }
    }
}

impl SampleRequest {
    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be positive".into()));
        }
        if self.steps == 0 || self.steps > schedule.len() {
            return Err(Error::Config(format!(
                "steps {} outside [1, {}]",
                self.steps,
                schedule.len()
            )));
        }
        if let Some(c) = &self.classes {
            if c.len() != self.count {
                return Err(Error::Config(format!("{} class ids for {} samples", c.len(), self.count)));
            }
        }
        self.guidance.validate()
    }
}

/// One reverse step from step `k` of `schedule` (possibly respaced).
/// Returns the thresholded posterior mean exactly when `k == 1`.
pub fn ancestral_step(
    z_t: &Tensor,
    k: usize,
    prediction: &Prediction,
    schedule: &Schedule,
    threshold_mode: ThresholdMode,
    variance: ReverseVariance,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if prediction.value().shape() != z_t.shape() {
        return Err(Error::ShapeMismatch {
            left: prediction.value().shape().to_vec(),
            right: z_t.shape().to_vec(),
        });
    }
    let x_hat = threshold(&prediction.to_x(z_t, &[schedule.alpha_cum(k)])?, threshold_mode);
    let (mean, post_var) = schedule.posterior_params(z_t, &x_hat, k)?;
    if k == 1 {
        return Ok(mean);
    }
    let var = match variance {
        ReverseVariance::Posterior => post_var,
        ReverseVariance::Beta => schedule.beta(k),
    };
    let xi = rng.gaussian(z_t.shape());
    mean.axpby(1.0, &xi, var.sqrt())
}

/// Guided prediction at training timestep `t`: one evaluation when
/// unconditional or `w == 1`, two otherwise.
pub fn guided_prediction(
    model: &dyn Denoiser,
    z: &Tensor,
    t: usize,
    classes: Option<&[usize]>,
    w: f64,
) -> Result<Prediction> {
    let ts = vec![t; z.batch_len()];
    match classes {
        Some(c) if w != 1.0 => {
            let cond = model.predict(z, &ts, Some(c))?;
            let uncond = model.predict(z, &ts, None)?;
            guide(&cond, &uncond, w)
        }
        _ => model.predict(z, &ts, classes),
    }
}

/// Draws `request.count` samples of shape `item_shape`. `schedule` is the
/// full training schedule; it is respaced to `request.steps`.
pub fn sample(
    request: &SampleRequest,
    models: &ModelSet<'_>,
    schedule: &Schedule,
    item_shape: &[usize],
) -> Result<Tensor> {
    request.validate(schedule)?;
    models.validate(schedule)?;
    let spaced = schedule.respace(request.steps)?;
    let mut rng = RngStream::named(request.seed, "sample");
    let mut shape = vec![request.count];
    shape.extend_from_slice(item_shape);
    let mut z = rng.gaussian(&shape);
    for k in (1..=spaced.len()).rev() {
        let t = spaced.timestep(k);
        let model = split_dispatch(t, models);
        let pred = guided_prediction(model, &z, t, request.classes.as_deref(), request.guidance.w)?;
        z = ancestral_step(&z, k, &pred, &spaced, request.guidance.threshold, request.variance, &mut rng)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CountingDenoiser, OracleModel};
    use crate::oracle::EmpiricalDataset;

    fn two_point(a: f64) -> EmpiricalDataset {
        EmpiricalDataset::new(Tensor::new(&[2, 1], vec![a, -a]).unwrap(), Some(vec![0, 1])).unwrap()
    }

    #[test]
    fn dispatch_boundary() {
        let s = Schedule::linear(10, 1e-3, 0.1).unwrap();
        let ds = two_point(0.5);
        let a = OracleModel::new(&ds, &s);
        let b = OracleModel::new(&ds, &s);
        let set = ModelSet::split(4, &a, &b);
        assert!(std::ptr::addr_eq(split_dispatch(4, &set), &a as &dyn Denoiser));
        assert!(std::ptr::addr_eq(split_dispatch(5, &set), &b as &dyn Denoiser));
    }

    #[test]
    fn final_step_is_noise_free() {
        let s = Schedule::linear(10, 1e-3, 0.1).unwrap();
        let z = Tensor::new(&[1, 2], vec![0.3, 2.5]).unwrap();
        let p = Prediction::new(crate::param::PredictionKind::X, Tensor::new(&[1, 2], vec![0.4, 3.0]).unwrap());
        let out = ancestral_step(&z, 1, &p, &s, ThresholdMode::Static, ReverseVariance::Posterior, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(out.data(), &[0.4, 1.0]);
    }

    #[test]
    fn single_example_converges() {
        let s = Schedule::linear(100, 1e-4, 0.05).unwrap();
        let ds = EmpiricalDataset::new(Tensor::new(&[1, 3], vec![0.2, -0.7, 0.9]).unwrap(), None).unwrap();
        let m = OracleModel::new(&ds, &s);
        for seed in 0..3 {
            let req = SampleRequest {
                count: 4,
                steps: 100,
                seed,
                ..Default::default()
            };
            let out = sample(&req, &ModelSet::Single(&m), &s, &[3]).unwrap();
            for i in 0..4 {
                for (a, b) in out.item(i).iter().zip(ds.example(0)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn evaluation_count_and_split_identity() {
        let s = Schedule::linear(50, 1e-4, 0.05).unwrap();
        let ds = two_point(0.9);
        let m = CountingDenoiser::new(OracleModel::new(&ds, &s));
        let guided = SampleRequest {
            count: 2,
            classes: Some(vec![0, 1]),
            steps: 20,
            guidance: GuidanceConfig { w: 3.0, ..Default::default() },
            seed: 7,
            ..Default::default()
        };
        let a = sample(&guided, &ModelSet::Single(&m), &s, &[1]).unwrap();
        assert_eq!(m.calls(), 40);
        let b = sample(&guided, &ModelSet::split(25, &m, &m), &s, &[1]).unwrap();
        assert_eq!(a, b);
        m.reset();
        let cond = SampleRequest {
            guidance: GuidanceConfig { w: 1.0, ..Default::default() },
            ..guided
        };
        sample(&cond, &ModelSet::Single(&m), &s, &[1]).unwrap();
        assert_eq!(m.calls(), 20);
    }

    #[test]
    fn seed_determinism() {
        let s = Schedule::linear(30, 1e-4, 0.05).unwrap();
        let ds = two_point(0.9);
        let m = OracleModel::new(&ds, &s);
        let req = SampleRequest { count: 3, steps: 30, ..Default::default() };
        let a = sample(&req, &ModelSet::Single(&m), &s, &[1]).unwrap();
        let b = sample(&req, &ModelSet::Single(&m), &s, &[1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_requests() {
        let s = Schedule::linear(30, 1e-4, 0.05).unwrap();
        let ds = two_point(0.9);
        let m = OracleModel::new(&ds, &s);
        let other = Schedule::linear(30, 1e-4, 0.06).unwrap();
        let foreign = OracleModel::new(&ds, &other);
        let req = SampleRequest { steps: 10, ..Default::default() };
        assert!(sample(&req, &ModelSet::Single(&foreign), &s, &[1]).is_err());
        assert!(sample(&req, &ModelSet::split(30, &m, &m), &s, &[1]).is_err());
        let too_many = SampleRequest { steps: 31, ..Default::default() };
        assert!(sample(&too_many, &ModelSet::Single(&m), &s, &[1]).is_err());
    }
}
