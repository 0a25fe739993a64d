use patchdiff::data::toy_images;
use patchdiff::denoiser::{Checkpoint, DenoiserConfig};
use patchdiff::model::OracleModel;
use patchdiff::param::PredictionKind;
use patchdiff::rng::RngStream;
use patchdiff::schedule::ScheduleConfig;
use patchdiff::trainer::{draw, objective_per_draw, train_loop, TrainConfig};

fn setup(iters: u64) -> (DenoiserConfig, TrainConfig) {
    let model = DenoiserConfig {
        channels: 1,
        patch: 2,
        width: 16,
        blocks: 2,
        kind: PredictionKind::V,
        ..Default::default()
    };
    let train = TrainConfig {
        batch: 16,
        lr: 2e-3,
        warmup: 100,
        iters,
        ema_every: 10,
        kind: PredictionKind::V,
        seed: 5,
        ..Default::default()
    };
    (model, train)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn training_reduces_error_and_respects_the_floor() {
    let ds = toy_images(16, 8, 1, 1).unwrap();
    let s = ScheduleConfig::default().build().unwrap();
    let (model, cfg) = setup(2000);
    let init = Checkpoint::init(model, s.fingerprint(), &mut RngStream::named(5, "init")).unwrap();

    let mut rng = RngStream::named(5, "eval");
    let draws = draw(&ds, &s, 2000, 0.0, &mut rng);
    let before = mean(&objective_per_draw(&init.network(false), &ds, &s, &draws, None).unwrap());

    let out = train_loop(init, &ds, &s, &cfg, |_, _| Ok(())).unwrap();
    let after_per = objective_per_draw(&out.checkpoint.network(false), &ds, &s, &draws, None).unwrap();
    let after = mean(&after_per);
    assert!(after < 0.5 * before, "objective {before} -> {after}");

    let oracle_per = objective_per_draw(&OracleModel::new(&ds, &s), &ds, &s, &draws, None).unwrap();
    let diff: Vec<f64> = after_per.iter().zip(&oracle_per).map(|(a, b)| a - b).collect();
    let m = mean(&diff);
    let var = diff.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diff.len() - 1) as f64;
    let se = (var / diff.len() as f64).sqrt();
    assert!(m > -3.0 * se, "model beats the optimum: gap {m} (se {se})");
    assert_eq!(out.buckets.len(), 10);
}

#[test]
fn ema_stays_inside_the_iterate_envelope() {
    let ds = toy_images(8, 8, 1, 2).unwrap();
    let s = ScheduleConfig::default().build().unwrap();
    let (model, cfg) = setup(200);
    let init = Checkpoint::init(model, s.fingerprint(), &mut RngStream::named(5, "init")).unwrap();
    let flat = |c: &Checkpoint, ema: bool| -> Vec<f64> {
        let m = if ema { &c.ema } else { &c.params };
        m.values().flat_map(|t| t.data().to_vec()).collect()
    };
    let start = flat(&init, false);
    let mut lo = start.clone();
    let mut hi = start;
    let out = train_loop(init, &ds, &s, &cfg, |_, ck| {
        for (i, v) in flat(ck, false).into_iter().enumerate() {
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
        Ok(())
    })
    .unwrap();
    let ema = flat(&out.checkpoint, true);
    for (i, v) in ema.iter().enumerate() {
        assert!(*v >= lo[i] - 1e-12 && *v <= hi[i] + 1e-12, "ema coordinate {i} escaped");
    }
    assert_ne!(ema, flat(&out.checkpoint, false));
}
