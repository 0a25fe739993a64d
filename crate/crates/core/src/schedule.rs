//! Variance-preserving forward process arithmetic.
//!
//! Timesteps are 1-based: step `t` has noise level `beta(t)` and cumulative
//! signal fraction `alpha_cum(t)`, with `alpha_cum(0) = 1`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_1: f64 = 1e-4;
pub const DEFAULT_BETA_T: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_1: DEFAULT_BETA_1,
            beta_t: DEFAULT_BETA_T,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::linear(self.steps, self.beta_1, self.beta_t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha_cum: Vec<f64>,
    gamma: Vec<f64>,
    /// Original training timestep of each step (identity unless respaced).
    timesteps: Vec<usize>,
    train_steps: usize,
    fingerprint: String,
}

fn fingerprint(beta: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update((beta.len() as u64).to_le_bytes());
    for b in beta {
        h.update(b.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn gamma_of(a: f64) -> f64 {
    (a / (1.0 - a)).sqrt()
}

impl Schedule {
    /// Linear betas from `beta_1` to `beta_t` inclusive.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("need at least one timestep".into()));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(Error::Schedule(format!(
                "require 0 < beta_1 <= beta_T < 1, got beta_1={beta_1}, beta_T={beta_t}"
            )));
        }
        let beta = if steps == 1 {
            vec![beta_t]
        } else {
            (0..steps)
                .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Schedule("need at least one timestep".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_cum = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_cum.push(acc);
        }
        let gamma = alpha_cum.iter().map(|&a| gamma_of(a)).collect();
        let steps = beta.len();
        let fingerprint = fingerprint(&beta);
        Ok(Self {
            beta,
            alpha_cum,
            gamma,
            timesteps: (1..=steps).collect(),
            train_steps: steps,
            fingerprint,
        })
    }

    /// Number of steps in this (possibly respaced) schedule.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// `T` of the schedule this one was derived from.
    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Timestep { t, max: self.len() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_cum(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_cum[t - 1]
        }
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha_cum(t);
        a / (1.0 - a)
    }

    /// Training timestep label of step `t` (what the denoiser is conditioned on).
    pub fn timestep(&self, t: usize) -> usize {
        self.timesteps[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_cums(&self) -> &[f64] {
        &self.alpha_cum
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Step whose SNR is closest to `target`.
    pub fn nearest_snr(&self, target: f64) -> usize {
        (1..=self.len())
            .min_by(|&a, &b| {
                (self.snr(a) - target)
                    .abs()
                    .total_cmp(&(self.snr(b) - target).abs())
            })
            .expect("non-empty schedule")
    }

    /// `sqrt(alpha_cum) x + sqrt(1 - alpha_cum) noise`
    pub fn forward_marginal(&self, x: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let a = self.alpha_cum(t);
        x.axpby(a.sqrt(), noise, (1.0 - a).sqrt())
    }

    /// Forward marginal with one timestep per leading-axis entry.
    pub fn forward_marginal_batch(&self, x: &Tensor, ts: &[usize], noise: &Tensor) -> Result<Tensor> {
        if x.shape() != noise.shape() {
            return Err(Error::ShapeMismatch {
                left: x.shape().to_vec(),
                right: noise.shape().to_vec(),
            });
        }
        if ts.len() != x.batch_len() {
            return Err(Error::Config(format!(
                "{} timesteps for batch of {}",
                ts.len(),
                x.batch_len()
            )));
        }
        let mut out = x.clone();
        for (i, &t) in ts.iter().enumerate() {
            self.check_t(t)?;
            let a = self.alpha_cum(t);
            let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
            for (o, e) in out.item_mut(i).iter_mut().zip(noise.item(i)) {
                *o = sa * *o + sn * e;
            }
        }
        Ok(out)
    }

    /// `sqrt(1 - beta_t) z_prev + sqrt(beta_t) noise`
    pub fn forward_transition(&self, z_prev: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let b = self.beta(t);
        z_prev.axpby((1.0 - b).sqrt(), noise, b.sqrt())
    }

    /// Coefficients `(c_x, c_z, variance)` of q(z_{t-1} | z_t, x):
    /// mean = c_x x + c_z z_t.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64, f64) {
        if t == 1 {
            return (1.0, 0.0, 0.0);
        }
        let b = self.beta(t);
        let a = self.alpha_cum(t);
        let a_prev = self.alpha_cum(t - 1);
        let c_x = a_prev.sqrt() * b / (1.0 - a);
        let c_z = (1.0 - b).sqrt() * (1.0 - a_prev) / (1.0 - a);
        let var = b * (1.0 - a_prev) / (1.0 - a);
        (c_x, c_z, var)
    }

    pub fn posterior_params(&self, z_t: &Tensor, x: &Tensor, t: usize) -> Result<(Tensor, f64)> {
        self.check_t(t)?;
        if z_t.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                left: z_t.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        if t == 1 {
            return Ok((x.clone(), 0.0));
        }
        let (cx, cz, var) = self.posterior_coefficients(t);
        Ok((x.axpby(cx, z_t, cz)?, var))
    }

    /// Evenly strided sub-schedule of `steps` steps that always keeps `T`.
    pub fn respace(&self, steps: usize) -> Result<Schedule> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(Error::Schedule(format!(
                "cannot respace {total} steps to {steps}"
            )));
        }
        if steps == total {
            return Ok(self.clone());
        }
        let kept: Vec<usize> = (1..=steps)
            .map(|k| (2 * k * total + steps) / (2 * steps))
            .collect();
        let mut beta = Vec::with_capacity(steps);
        let mut alpha_cum = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &t in &kept {
            let a = self.alpha_cum(t);
            beta.push(1.0 - a / prev);
            alpha_cum.push(a);
            prev = a;
        }
        let gamma = alpha_cum.iter().map(|&a| gamma_of(a)).collect();
        Ok(Schedule {
            beta,
            alpha_cum,
            gamma,
            timesteps: kept.iter().map(|&t| self.timestep(t)).collect(),
            train_steps: self.train_steps,
            fingerprint: self.fingerprint.clone(),
        })
    }

    /// CSV rows `t,beta,alpha_cum,snr,gamma`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha_cum,snr,gamma\n");
        for t in 1..=self.len() {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                self.timestep(t),
                self.beta(t),
                self.alpha_cum(t),
                self.snr(t),
                self.gamma(t)
            ));
        }
        s
    }
}
