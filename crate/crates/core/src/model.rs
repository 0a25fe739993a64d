//! The interface samplers, trainers and benchmarks use to query a denoiser.

use std::cell::Cell;

use crate::error::Result;
use crate::oracle::{optimal_denoiser, EmpiricalDataset};
use crate::param::{Prediction, PredictionKind};
use crate::schedule::Schedule;
use crate::tensor::Tensor;

pub trait Denoiser {
    fn kind(&self) -> PredictionKind;

    fn patch_size(&self) -> usize {
        1
    }

    /// Fingerprint of the schedule the model was trained for, if any.
    fn schedule_fingerprint(&self) -> Option<&str> {
        None
    }

    /// Predicts for a batch `z` at per-example training timesteps. `classes`
    /// of `None` requests the unconditional prediction.
    fn predict(&self, z: &Tensor, timesteps: &[usize], classes: Option<&[usize]>) -> Result<Prediction>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn kind(&self) -> PredictionKind {
        (**self).kind()
    }
    fn patch_size(&self) -> usize {
        (**self).patch_size()
    }
    fn schedule_fingerprint(&self) -> Option<&str> {
        (**self).schedule_fingerprint()
    }
    fn predict(&self, z: &Tensor, timesteps: &[usize], classes: Option<&[usize]>) -> Result<Prediction> {
        (**self).predict(z, timesteps, classes)
    }
}

/// The exact posterior-mean denoiser of an empirical dataset, as a model.
pub struct OracleModel<'a> {
    dataset: &'a EmpiricalDataset,
    schedule: &'a Schedule,
}

impl<'a> OracleModel<'a> {
    /// `schedule` must be the full training schedule, since timesteps are
    /// looked up by their training label.
    pub fn new(dataset: &'a EmpiricalDataset, schedule: &'a Schedule) -> Self {
        Self { dataset, schedule }
    }

    pub fn dataset(&self) -> &EmpiricalDataset {
        self.dataset
    }
}

impl Denoiser for OracleModel<'_> {
    fn kind(&self) -> PredictionKind {
        PredictionKind::X
    }

    fn schedule_fingerprint(&self) -> Option<&str> {
        Some(self.schedule.fingerprint())
    }

    fn predict(&self, z: &Tensor, timesteps: &[usize], classes: Option<&[usize]>) -> Result<Prediction> {
        for &t in timesteps {
            self.schedule.check_t(t)?;
        }
        // rows of z are flattened items of the dataset's shape
        let ac: Vec<f64> = timesteps.iter().map(|&t| self.schedule.alpha_cum(t)).collect();
        let x = optimal_denoiser(self.dataset, z, &ac, classes)?;
        Ok(Prediction::new(PredictionKind::X, x))
    }
}

/// Counts `predict` calls (one per batched function evaluation).
pub struct CountingDenoiser<D> {
    inner: D,
    calls: Cell<usize>,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn reset(&self) {
        self.calls.set(0);
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn kind(&self) -> PredictionKind {
        self.inner.kind()
    }
    fn patch_size(&self) -> usize {
        self.inner.patch_size()
    }
    fn schedule_fingerprint(&self) -> Option<&str> {
        self.inner.schedule_fingerprint()
    }
    fn predict(&self, z: &Tensor, timesteps: &[usize], classes: Option<&[usize]>) -> Result<Prediction> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(z, timesteps, classes)
    }
}
