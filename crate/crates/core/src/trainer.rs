//! Weighted denoising objective, Adam with linear warmup, and EMA.
//!
//! The objective is `gamma_t * mean((x̂ - x)^2)` with
//! `gamma_t = sqrt(alpha_cum / (1 - alpha_cum))`. Models predicting eps or
//! v regress their native target with weight `gamma_t * k^2`, where `k` is
//! the x-space amplification factor of that parameterization, so every kind
//! optimizes the same x-space objective.

use serde::{Deserialize, Serialize};

use crate::denoiser::{self, Checkpoint, DenoiserConfig, ParamMap};
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::oracle::EmpiricalDataset;
use crate::param::{alpha_cums, target, x_error_amplification, PredictionKind};
use crate::rng::RngStream;
use crate::schedule::Schedule;
use crate::tensor::{rmse, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    Native,
    XSpaceReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup: u64,
    pub iters: u64,
    pub ema_decay: f64,
    pub ema_every: u64,
    pub cond_dropout: f64,
    pub kind: PredictionKind,
    pub loss_space: LossSpace,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            warmup: 5000,
            iters: 1000,
            ema_decay: 0.99,
            ema_every: 100,
            cond_dropout: 0.1,
            kind: PredictionKind::X,
            loss_space: LossSpace::XSpaceReport,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("cond_dropout {} outside [0, 1]", self.cond_dropout)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.ema_every == 0 {
            return Err(Error::Config("ema_every must be positive".into()));
        }
        Ok(())
    }
}

/// Randomness for one objective evaluation, drawn independently of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub indices: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
    /// Per-example: replace the label with the null class.
    pub drop_label: Vec<bool>,
}

pub fn draw(ds: &EmpiricalDataset, schedule: &Schedule, batch: usize, cond_dropout: f64, rng: &mut RngStream) -> Draws {
    let indices: Vec<usize> = (0..batch).map(|_| rng.below(ds.len())).collect();
    let timesteps: Vec<usize> = (0..batch).map(|_| 1 + rng.below(schedule.len())).collect();
    let mut shape = vec![batch];
    shape.extend_from_slice(ds.item_shape());
    let noise = rng.gaussian(&shape);
    let drop_label = (0..batch).map(|_| rng.uniform() < cond_dropout).collect();
    Draws {
        indices,
        timesteps,
        noise,
        drop_label,
    }
}

/// Weight on the native-space squared error of `kind` at timestep `t`.
pub fn native_weight(kind: PredictionKind, schedule: &Schedule, t: usize) -> f64 {
    let k = x_error_amplification(kind, schedule.alpha_cum(t));
    schedule.gamma(t) * k * k
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub x_space_rmse: f64,
    pub per_example: Vec<f64>,
}

fn class_ids(config: &DenoiserConfig, ds: &EmpiricalDataset, draws: &Draws) -> Option<Vec<usize>> {
    let null = config.null_class()?;
    Some(
        draws
            .indices
            .iter()
            .zip(&draws.drop_label)
            .map(|(&i, &drop)| match ds.label(i) {
                Some(l) if !drop => l,
                _ => null,
            })
            .collect(),
    )
}

/// Loss and parameter gradients for fixed draws.
pub fn loss_with_draws(
    config: &DenoiserConfig,
    params: &ParamMap,
    ds: &EmpiricalDataset,
    schedule: &Schedule,
    draws: &Draws,
) -> Result<(LossReport, ParamMap)> {
    let x = ds.gather(&draws.indices);
    let z = schedule.forward_marginal_batch(&x, &draws.timesteps, &draws.noise)?;
    let ac = alpha_cums(schedule, &draws.timesteps);
    let classes = class_ids(config, ds, draws);
    let (pred, cache) = denoiser::forward(config, params, &z, &draws.timesteps, classes.as_deref())?;
    let tgt = target(config.kind, &x, &draws.noise, &ac)?;

    let n = x.batch_len();
    let d = x.item_len() as f64;
    let mut grad = pred.clone();
    let mut per_example = Vec::with_capacity(n);
    for i in 0..n {
        let wgt = native_weight(config.kind, schedule, draws.timesteps[i]);
        let (p, t) = (pred.item(i), tgt.item(i));
        let se: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d;
        per_example.push(wgt * se);
        let scale = 2.0 * wgt / (d * n as f64);
        for (g, (a, b)) in grad.item_mut(i).iter_mut().zip(p.iter().zip(t)) {
            *g = scale * (a - b);
        }
    }
    let loss = per_example.iter().sum::<f64>() / n as f64;
    let x_hat = crate::param::Prediction::new(config.kind, pred).to_x(&z, &ac)?;
    let grads = denoiser::backward(config, params, &cache, &grad)?;
    Ok((
        LossReport {
            loss,
            x_space_rmse: rmse(&x_hat, &x)?,
            per_example,
        },
        grads,
    ))
}

/// Draws a batch of `(t, eps, label dropout)` for the given examples and
/// returns the loss and gradients of the live parameters.
pub fn loss_and_grads(
    ckpt: &Checkpoint,
    ds: &EmpiricalDataset,
    schedule: &Schedule,
    rng: &mut RngStream,
    cfg: &TrainConfig,
) -> Result<(LossReport, ParamMap)> {
    let draws = draw(ds, schedule, cfg.batch, cfg.cond_dropout, rng);
    loss_with_draws(&ckpt.config, &ckpt.params, ds, schedule, &draws)
}

/// Per-draw weighted x-space losses `gamma_t * mean((x̂ - x)^2)` for any model.
pub fn objective_per_draw(
    model: &dyn Denoiser,
    ds: &EmpiricalDataset,
    schedule: &Schedule,
    draws: &Draws,
    classes: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let x = ds.gather(&draws.indices);
    let z = schedule.forward_marginal_batch(&x, &draws.timesteps, &draws.noise)?;
    let ac = alpha_cums(schedule, &draws.timesteps);
    let x_hat = model.predict(&z, &draws.timesteps, classes)?.to_x(&z, &ac)?;
    let d = x.item_len() as f64;
    Ok((0..x.batch_len())
        .map(|i| {
            let se: f64 = x_hat
                .item(i)
                .iter()
                .zip(x.item(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d;
            schedule.gamma(draws.timesteps[i]) * se
        })
        .collect())
}

/// Linear warmup to `cfg.lr` over `cfg.warmup` steps, constant afterwards.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup == 0 || step >= cfg.warmup {
        cfg.lr
    } else {
        cfg.lr * step as f64 / cfg.warmup as f64
    }
}

/// One bias-corrected Adam update; increments the step counter first.
pub fn adam_step(ckpt: &mut Checkpoint, grads: &ParamMap, cfg: &TrainConfig) -> Result<()> {
    ckpt.opt.step += 1;
    let step = ckpt.opt.step;
    let lr = lr_at(step, cfg);
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (name, p) in ckpt.params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                left: g.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        let m = ckpt.opt.m.get_mut(name).expect("adam state matches params");
        let v = ckpt.opt.v.get_mut(name).expect("adam state matches params");
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// `ema <- decay * ema + (1 - decay) * params`
pub fn ema_update(ckpt: &mut Checkpoint, decay: f64) {
    for (name, e) in ckpt.ema.iter_mut() {
        let p = &ckpt.params[name];
        for (ev, pv) in e.data_mut().iter_mut().zip(p.data()) {
            *ev = decay * *ev + (1.0 - decay) * pv;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub native_loss: f64,
    pub x_space_rmse: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketRow {
    pub t_lo: usize,
    pub t_hi: usize,
    pub x_space_rmse: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
    pub buckets: Vec<BucketRow>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,native_loss,x_space_rmse,lr\n");
    for r in rows {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.native_loss, r.x_space_rmse, r.lr));
    }
    s
}

pub fn buckets_csv(rows: &[BucketRow]) -> String {
    let mut s = String::from("t_lo,t_hi,x_space_rmse\n");
    for r in rows {
        s.push_str(&format!("{},{},{:e}\n", r.t_lo, r.t_hi, r.x_space_rmse));
    }
    s
}

/// x-space RMSE of the model in `buckets` equal-width timestep ranges,
/// `draws_per_bucket` examples each.
pub fn bucket_rmse(
    model: &dyn Denoiser,
    ds: &EmpiricalDataset,
    schedule: &Schedule,
    buckets: usize,
    draws_per_bucket: usize,
    rng: &mut RngStream,
) -> Result<Vec<BucketRow>> {
    let total = schedule.len();
    let buckets = buckets.clamp(1, total);
    let mut rows = Vec::with_capacity(buckets);
    for b in 0..buckets {
        let lo = b * total / buckets + 1;
        let hi = (b + 1) * total / buckets;
        let idx: Vec<usize> = (0..draws_per_bucket).map(|_| rng.below(ds.len())).collect();
        let ts: Vec<usize> = (0..draws_per_bucket).map(|_| lo + rng.below(hi - lo + 1)).collect();
        let x = ds.gather(&idx);
        let noise = rng.gaussian(x.shape());
        let z = schedule.forward_marginal_batch(&x, &ts, &noise)?;
        let ac = alpha_cums(schedule, &ts);
        let x_hat = model.predict(&z, &ts, None)?.to_x(&z, &ac)?;
        rows.push(BucketRow {
            t_lo: lo,
            t_hi: hi,
            x_space_rmse: rmse(&x_hat, &x)?,
        });
    }
    Ok(rows)
}

/// Trains from `init` for `cfg.iters` steps. `on_step` sees every metric row
/// and the checkpoint after the update (for save cadences).
pub fn train_loop(
    init: Checkpoint,
    ds: &EmpiricalDataset,
    schedule: &Schedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&MetricRow, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if init.schedule_fingerprint != schedule.fingerprint() {
        return Err(Error::ModelMismatch(format!(
            "checkpoint schedule {} does not match {}",
            init.schedule_fingerprint,
            schedule.fingerprint()
        )));
    }
    let mut ckpt = init;
    let mut batch_rng = RngStream::named(cfg.seed, "train/batch");
    let mut metrics = Vec::with_capacity(cfg.iters as usize);
    for _ in 0..cfg.iters {
        let (report, grads) = loss_and_grads(&ckpt, ds, schedule, &mut batch_rng, cfg)?;
        adam_step(&mut ckpt, &grads, cfg)?;
        if ckpt.opt.step % cfg.ema_every == 0 {
            ema_update(&mut ckpt, cfg.ema_decay);
        }
        let row = MetricRow {
            step: ckpt.opt.step,
            native_loss: report.loss,
            x_space_rmse: report.x_space_rmse,
            lr: lr_at(ckpt.opt.step, cfg),
        };
        on_step(&row, &ckpt)?;
        metrics.push(row);
    }
    let mut eval_rng = RngStream::named(cfg.seed, "train/eval");
    let buckets = if cfg.iters > 0 {
        bucket_rmse(&ckpt.network(false), ds, schedule, 10, 64, &mut eval_rng)?
    } else {
        Vec::new()
    };
    Ok(TrainOutcome {
        checkpoint: ckpt,
        metrics,
        buckets,
    })
}

/// Trains one model per prediction kind on identical batches and seeds.
/// Returns the outcomes in `PredictionKind::ALL` order.
pub fn compare_kinds(
    model_cfg: &DenoiserConfig,
    ds: &EmpiricalDataset,
    schedule: &Schedule,
    cfg: &TrainConfig,
) -> Result<Vec<(PredictionKind, TrainOutcome)>> {
    PredictionKind::ALL
        .iter()
        .map(|&kind| {
            let mc = DenoiserConfig {
                kind,
                ..model_cfg.clone()
            };
            let tc = TrainConfig { kind, ..cfg.clone() };
            let init = Checkpoint::init(mc, schedule.fingerprint(), &mut RngStream::named(cfg.seed, "train/init"))?;
            Ok((kind, train_loop(init, ds, schedule, &tc, |_, _| Ok(()))?))
        })
        .collect()
}

/// `step` followed by one column per kind, in x-space RMSE or native loss.
pub fn comparison_csv(runs: &[(PredictionKind, TrainOutcome)], space: LossSpace) -> String {
    let metric = |r: &MetricRow| match space {
        LossSpace::Native => r.native_loss,
        LossSpace::XSpaceReport => r.x_space_rmse,
    };
    let label = match space {
        LossSpace::Native => "native_loss",
        LossSpace::XSpaceReport => "x_space_rmse",
    };
    let mut s = String::from("step");
    for (k, _) in runs {
        s.push_str(&format!(",{label}_{}", k.name()));
    }
    s.push('\n');
    let steps = runs.iter().map(|(_, o)| o.metrics.len()).min().unwrap_or(0);
    for i in 0..steps {
        s.push_str(&runs[0].1.metrics[i].step.to_string());
        for (_, o) in runs {
            s.push_str(&format!(",{:e}", metric(&o.metrics[i])));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_ds() -> EmpiricalDataset {
        let mut r = RngStream::new(3, 0);
        EmpiricalDataset::new(r.gaussian(&[4, 4, 4, 1]).map(|v| v.tanh()), None).unwrap()
    }

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            channels: 1,
            patch: 2,
            width: 8,
            blocks: 1,
            kernel: 3,
            time_dim: 8,
            classes: None,
            kind: PredictionKind::X,
            train_steps: 50,
            positional: true,
        }
    }

    #[test]
    fn warmup_ramp() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(1, &cfg), 1e-4 / 5000.0);
        assert_eq!(lr_at(5000, &cfg), 1e-4);
        assert_eq!(lr_at(9000, &cfg), 1e-4);
    }

    #[test]
    fn zero_grads_leave_params() {
        let s = Schedule::linear(50, 1e-3, 0.05).unwrap();
        let mut ck = Checkpoint::init(tiny_cfg(), s.fingerprint(), &mut RngStream::new(1, 0)).unwrap();
        let before = ck.params.clone();
        let zeros: ParamMap = before.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        adam_step(&mut ck, &zeros, &TrainConfig::default()).unwrap();
        assert_eq!(ck.params, before);
        assert_eq!(ck.opt.step, 1);
    }

    #[test]
    fn ema_recurrence() {
        let s = Schedule::linear(50, 1e-3, 0.05).unwrap();
        let mut ck = Checkpoint::init(tiny_cfg(), s.fingerprint(), &mut RngStream::new(1, 0)).unwrap();
        for t in ck.ema.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let d = 0.3;
        ema_update(&mut ck, d);
        ema_update(&mut ck, d);
        let p = ck.params["embed.w"].data()[0];
        let e = ck.ema["embed.w"].data()[0];
        assert!((e - ((1.0 - d) * p + d * (1.0 - d) * p)).abs() < 1e-15);
        let mut copy = ck.clone();
        ema_update(&mut copy, 0.0);
        assert_eq!(copy.ema, copy.params);
    }

    #[test]
    fn adam_solves_scalar_quadratic() {
        // minimize (p - 3)^2 through the checkpoint machinery on a one-entry map
        let s = Schedule::linear(50, 1e-3, 0.05).unwrap();
        let mut ck = Checkpoint::init(tiny_cfg(), s.fingerprint(), &mut RngStream::new(1, 0)).unwrap();
        ck.params.retain(|k, _| k == "out.b");
        ck.params.insert("out.b".into(), Tensor::zeros(&[1]));
        ck.opt.m = ck.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        ck.opt.v = ck.opt.m.clone();
        let cfg = TrainConfig {
            lr: 1e-2,
            warmup: 0,
            ..Default::default()
        };
        for _ in 0..10_000 {
            let p = ck.params["out.b"].data()[0];
            let mut g = ParamMap::new();
            g.insert("out.b".into(), Tensor::new(&[1], vec![2.0 * (p - 3.0)]).unwrap());
            adam_step(&mut ck, &g, &cfg).unwrap();
        }
        assert!((ck.params["out.b"].data()[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn exact_target_gives_zero_loss_and_grads() {
        // a dataset of one all-zero image: the zero-initialized x-predictor is exact
        let ds = EmpiricalDataset::new(Tensor::zeros(&[1, 4, 4, 1]), None).unwrap();
        let s = Schedule::linear(50, 1e-3, 0.05).unwrap();
        let ck = Checkpoint::init(tiny_cfg(), s.fingerprint(), &mut RngStream::new(1, 0)).unwrap();
        let cfg = TrainConfig { batch: 4, ..Default::default() };
        let (rep, grads) = loss_and_grads(&ck, &ds, &s, &mut RngStream::new(9, 9), &cfg).unwrap();
        assert_eq!(rep.loss, 0.0);
        assert!(grads.values().all(|g| g.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn native_weights_agree_in_x_space() {
        let s = Schedule::linear(100, 1e-4, 0.05).unwrap();
        for t in [1, 10, 50, 100] {
            let a = s.alpha_cum(t);
            assert_eq!(native_weight(PredictionKind::X, &s, t), s.gamma(t));
            let we = native_weight(PredictionKind::Eps, &s, t);
            assert!((we - s.gamma(t) * (1.0 - a) / a).abs() < 1e-12 * we);
        }
    }

    #[test]
    fn zero_iterations_return_init() {
        let ds = tiny_ds();
        let s = Schedule::linear(50, 1e-3, 0.05).unwrap();
        let init = Checkpoint::init(tiny_cfg(), s.fingerprint(), &mut RngStream::new(1, 0)).unwrap();
        let cfg = TrainConfig { iters: 0, ..Default::default() };
        let out = train_loop(init.clone(), &ds, &s, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(out.checkpoint, init);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn training_is_reproducible() {
        let ds = tiny_ds();
        let s = Schedule::linear(50, 1e-3, 0.05).unwrap();
        let init = Checkpoint::init(tiny_cfg(), s.fingerprint(), &mut RngStream::new(1, 0)).unwrap();
        let cfg = TrainConfig {
            iters: 5,
            batch: 4,
            warmup: 2,
            lr: 1e-3,
            ema_every: 2,
            ..Default::default()
        };
        let a = train_loop(init.clone(), &ds, &s, &cfg, |_, _| Ok(())).unwrap();
        let b = train_loop(init, &ds, &s, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn comparison_has_three_aligned_columns() {
        let ds = tiny_ds();
        let s = Schedule::linear(50, 1e-3, 0.05).unwrap();
        let cfg = TrainConfig {
            iters: 3,
            batch: 2,
            ..Default::default()
        };
        let runs = compare_kinds(&tiny_cfg(), &ds, &s, &cfg).unwrap();
        let csv = comparison_csv(&runs, LossSpace::XSpaceReport);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,x_space_rmse_x,x_space_rmse_eps,x_space_rmse_v");
        assert_eq!(lines.len(), 4);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));
    }

    #[test]
    fn invalid_configs() {
        let bad = TrainConfig { cond_dropout: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { ema_decay: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
