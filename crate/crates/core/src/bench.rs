//! Sampling throughput, analytic activation memory, and distortion curves.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Checkpoint, DenoiserConfig};
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::oracle::EmpiricalDataset;
use crate::param::alpha_cums;
use crate::rng::RngStream;
use crate::sampler::{sample, ModelSet, SampleRequest};
use crate::schedule::Schedule;
use crate::tensor::{percentile, rmse_slice};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputRow {
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
    pub params: usize,
    pub image: [usize; 3],
    pub batch: usize,
    pub steps: usize,
    pub reps: usize,
    pub workers: usize,
    pub median_images_per_sec: f64,
    pub min_images_per_sec: f64,
    pub max_images_per_sec: f64,
}

/// The width (multiple of 4) whose parameter count is closest to `budget`.
pub fn matched_width(base: &DenoiserConfig, patch: usize, budget: usize) -> usize {
    (1..=256)
        .map(|k| 4 * k)
        .min_by_key(|&w| {
            let c = DenoiserConfig {
                patch,
                width: w,
                ..base.clone()
            };
            c.param_count().abs_diff(budget)
        })
        .unwrap_or(4)
}

/// Median images/second of full sampling loops, after one untimed warmup run.
pub fn throughput(
    configs: &[DenoiserConfig],
    image: [usize; 3],
    batch: usize,
    steps: usize,
    reps: usize,
) -> Result<Vec<ThroughputRow>> {
    if reps == 0 || batch == 0 {
        return Err(Error::Config("reps and batch must be positive".into()));
    }
    let [h, w, c] = image;
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        if cfg.channels != c {
            return Err(Error::Config(format!("config has {} channels, image has {c}", cfg.channels)));
        }
        let schedule = Schedule::linear(cfg.train_steps, 1e-4, 0.02)?;
        let mut rng = RngStream::named(0, "bench/init");
        let mut ck = Checkpoint::init(cfg.clone(), schedule.fingerprint(), &mut rng)?;
        // a nonzero output layer so the timed work matches a trained model
        for v in ck.params.get_mut("out.w").expect("out.w").data_mut() {
            *v = 0.01 * rng.normal();
        }
        let net = ck.network(false);
        let req = SampleRequest {
            count: batch,
            steps,
            ..Default::default()
        };
        let models = ModelSet::Single(&net);
        sample(&req, &models, &schedule, &[h, w, c])?;
        let mut rates = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            sample(&req, &models, &schedule, &[h, w, c])?;
            rates.push(batch as f64 / start.elapsed().as_secs_f64().max(1e-9));
        }
        rows.push(ThroughputRow {
            patch: cfg.patch,
            width: cfg.width,
            blocks: cfg.blocks,
            params: cfg.param_count(),
            image,
            batch,
            steps,
            reps,
            workers: 1,
            median_images_per_sec: percentile(&rates, 50.0),
            min_images_per_sec: rates.iter().cloned().fold(f64::INFINITY, f64::min),
            max_images_per_sec: rates.iter().cloned().fold(0.0, f64::max),
        });
    }
    Ok(rows)
}

pub fn throughput_csv(rows: &[ThroughputRow]) -> String {
    let mut s = String::from(
        "patch,width,blocks,params,height,width_px,channels,batch,steps,reps,workers,median_images_per_sec,min_images_per_sec,max_images_per_sec\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.patch,
            r.width,
            r.blocks,
            r.params,
            r.image[0],
            r.image[1],
            r.image[2],
            r.batch,
            r.steps,
            r.reps,
            r.workers,
            r.median_images_per_sec,
            r.min_images_per_sec,
            r.max_images_per_sec
        ));
    }
    s
}

/// Activation elements retained for backward in one named stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRow {
    pub stage: String,
    pub resolution: usize,
    pub elements: u64,
    pub bytes: u64,
}

pub fn memory_total(rows: &[StageRow]) -> u64 {
    rows.iter().map(|r| r.bytes).sum()
}

pub fn memory_csv(rows: &[StageRow]) -> String {
    let mut s = String::from("stage,resolution,elements,bytes\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.stage, r.resolution, r.elements, r.bytes));
    }
    s.push_str(&format!("total,,{},{}\n", rows.iter().map(|r| r.elements).sum::<u64>(), memory_total(rows)));
    s
}

/// Counting rule for this crate's denoiser: every layer keeps its input.
/// Per residual block that is the block input, the normalized input, the
/// pre-activation, the activation and the branch output.
pub fn denoiser_activations(config: &DenoiserConfig, batch: usize, h: usize, w: usize, elem_bytes: u64) -> Result<Vec<StageRow>> {
    config.validate()?;
    let (gh, gw, cin) = crate::patching::patched_shape(h, w, config.channels, config.patch)?;
    let cells = (batch * gh * gw) as u64;
    let width = config.width as u64;
    let row = |stage: String, elements: u64| StageRow {
        stage,
        resolution: gh,
        elements,
        bytes: elements * elem_bytes,
    };
    let mut rows = vec![row("embed".into(), cells * cin as u64)];
    for b in 0..config.blocks {
        rows.push(row(format!("block{b}"), 5 * cells * width));
    }
    rows.push(row("out".into(), 2 * cells * width));
    Ok(rows)
}

/// A U-Net in the style of the reference diffusion U-Nets: residual blocks
/// per resolution, self-attention at selected resolutions, a middle
/// block, and a decoder with one extra block per level fed by skips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub resolution: usize,
    pub in_channels: usize,
    pub base: usize,
    pub multipliers: Vec<usize>,
    pub blocks: usize,
    pub attention: Vec<usize>,
    pub head_channels: usize,
}

impl UNetSpec {
    /// FFHQ 1024² configuration on the 256² patch grid (P = 4).
    pub fn ffhq(patch: usize) -> Self {
        Self {
            resolution: 1024 / patch,
            in_channels: 3 * patch * patch,
            base: 128,
            multipliers: vec![1, 2, 2, 4, 4, 4],
            blocks: 2,
            attention: vec![16, 8],
            head_channels: 64,
        }
    }

    pub fn assumptions() -> &'static [&'static str] {
        &[
            "activations only: weights, optimizer state and framework workspace excluded",
            "every layer keeps its input for backward; resblock = 3 inputs on each side of the time injection",
            "attention keeps norm/qkv inputs, qkv output, softmax weights (heads x L^2) and projection input",
            "the P=1 baseline reuses the same channel multipliers at full resolution",
            "attention only at the listed resolutions that occur in the network",
            "float32 elements",
        ]
    }

    pub fn activations(&self, batch: usize, elem_bytes: u64) -> Vec<StageRow> {
        let b = batch as u64;
        let mut rows: Vec<StageRow> = Vec::new();
        let mut add = |stage: String, res: usize, elements: u64| {
            let e = elements * b;
            match rows.iter_mut().find(|r| r.stage == stage) {
                Some(r) => {
                    r.elements += e;
                    r.bytes += e * elem_bytes;
                }
                None => rows.push(StageRow {
                    stage,
                    resolution: res,
                    elements: e,
                    bytes: e * elem_bytes,
                }),
            }
        };
        let px = |r: usize| (r * r) as u64;
        let resblock = |r: usize, cin: usize, cout: usize| {
            let skip = if cin != cout { cin } else { 0 };
            px(r) * (3 * cin + 3 * cout + skip) as u64
        };
        let attn = |r: usize, ch: usize| {
            let heads = (ch / self.head_channels).max(1) as u64;
            px(r) * (ch as u64 * 6) + 2 * heads * px(r) * px(r)
        };

        let mut res = self.resolution;
        let mut ch = self.base * self.multipliers[0];
        add("input".into(), res, px(res) * self.in_channels as u64);
        let mut skips = vec![ch];
        for (level, &m) in self.multipliers.iter().enumerate() {
            let out = self.base * m;
            let stage = format!("down{res}");
            for _ in 0..self.blocks {
                add(stage.clone(), res, resblock(res, ch, out));
                ch = out;
                if self.attention.contains(&res) {
                    add(stage.clone(), res, attn(res, ch));
                }
                skips.push(ch);
            }
            if level + 1 < self.multipliers.len() {
                add(stage, res, px(res) * ch as u64);
                res /= 2;
                skips.push(ch);
            }
        }
        let stage = format!("middle{res}");
        add(stage.clone(), res, 2 * resblock(res, ch, ch));
        add(stage, res, attn(res, ch));
        for (level, &m) in self.multipliers.iter().enumerate().rev() {
            let out = self.base * m;
            let stage = format!("up{res}");
            for _ in 0..=self.blocks {
                let skip = skips.pop().expect("skip per decoder block");
                add(stage.clone(), res, resblock(res, ch + skip, out));
                ch = out;
                if self.attention.contains(&res) {
                    add(stage.clone(), res, attn(res, ch));
                }
            }
            if level > 0 {
                res *= 2;
                add(stage, res, px(res) * ch as u64);
            }
        }
        add("output".into(), res, 3 * px(res) * ch as u64);
        rows
    }
}

/// Total activation bytes of the FFHQ U-Net at P = 1 over P = 4.
pub fn ffhq_memory_ratio(batch: usize) -> f64 {
    let p1 = memory_total(&UNetSpec::ffhq(1).activations(batch, 4));
    let p4 = memory_total(&UNetSpec::ffhq(4).activations(batch, 4));
    p1 as f64 / p4 as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistortionRow {
    pub t: usize,
    pub rmse: f64,
    pub stderr: f64,
}

/// Mean over examples and `draws` noise draws of `rmse(x, x̂(z_t, t))`.
pub fn distortion_curve(
    model: &dyn Denoiser,
    ds: &EmpiricalDataset,
    schedule: &Schedule,
    t_grid: &[usize],
    draws: usize,
    rng: &mut RngStream,
) -> Result<Vec<DistortionRow>> {
    if draws == 0 {
        return Err(Error::Config("need at least one draw".into()));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let x = ds.gather(&all);
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        schedule.check_t(t)?;
        let ts = vec![t; ds.len()];
        let ac = alpha_cums(schedule, &ts);
        let mut vals = Vec::with_capacity(ds.len() * draws);
        for _ in 0..draws {
            let noise = rng.gaussian(x.shape());
            let z = schedule.forward_marginal_batch(&x, &ts, &noise)?;
            let x_hat = model.predict(&z, &ts, None)?.to_x(&z, &ac)?;
            for i in 0..ds.len() {
                vals.push(rmse_slice(x_hat.item(i), x.item(i)));
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        rows.push(DistortionRow {
            t,
            rmse: mean,
            stderr: (var / n).sqrt(),
        });
    }
    Ok(rows)
}

/// Divides `curve` by `baseline` at matching timesteps.
pub fn distortion_ratio(curve: &[DistortionRow], baseline: &[DistortionRow]) -> Result<Vec<(usize, f64)>> {
    curve
        .iter()
        .map(|r| {
            let b = baseline
                .iter()
                .find(|b| b.t == r.t)
                .ok_or_else(|| Error::Config(format!("baseline has no row for t={}", r.t)))?;
            Ok((r.t, r.rmse / b.rmse))
        })
        .collect()
}

pub fn distortion_csv(columns: &[(String, Vec<DistortionRow>)]) -> String {
    let mut s = String::from("t");
    for (name, _) in columns {
        s.push_str(&format!(",{name}"));
    }
    s.push('\n');
    if let Some((_, first)) = columns.first() {
        for (i, r) in first.iter().enumerate() {
            s.push_str(&r.t.to_string());
            for (_, col) in columns {
                s.push_str(&format!(",{:e}", col[i].rmse));
            }
            s.push('\n');
        }
    }
    s
}
