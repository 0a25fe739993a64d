use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use patchdiff::bench;
use patchdiff::checks;
use patchdiff::data::{self, DatasetSpec};
use patchdiff::denoiser::{Checkpoint, DenoiserConfig};
use patchdiff::figures;
use patchdiff::model::{Denoiser, OracleModel};
use patchdiff::param::{GuidanceConfig, PredictionKind, ThresholdMode, DEFAULT_DYNAMIC_PERCENTILE};
use patchdiff::rng::RngStream;
use patchdiff::sampler::{self, ModelSet, ReverseVariance, SampleRequest};
use patchdiff::schedule::ScheduleConfig;
use patchdiff::trainer::{self, LossSpace, TrainConfig};

#[derive(Parser)]
#[command(name = "pdm", version, about = "Patched diffusion toolkit")]
struct Cli {
    /// Root seed; every subsystem derives a named stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Serialize all work. Every subsystem already runs on one thread, so
    /// this is accepted for compatibility and changes nothing.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output root; overridden by PDM_OUT.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the noise schedule as CSV.
    Schedule {
        #[command(flatten)]
        schedule: ScheduleArgs,
        /// Show a strided sub-schedule of this many steps.
        #[arg(long)]
        respace: Option<usize>,
    },
    /// Optimal-denoiser strip x*(z_t, t) across timesteps.
    Oracle {
        #[arg(long)]
        dataset: String,
        #[arg(long, value_delimiter = ',', default_value = "0,250,500,750,970")]
        timesteps: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Noisy image followed by exact posterior reconstructions.
    PosteriorSample {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 500)]
        t: usize,
        #[arg(long, default_value_t = 6)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Train a denoiser from a JSON config plus overrides.
    Train(TrainArgs),
    /// Sample images from one checkpoint or a split pair.
    Sample(SampleArgs),
    /// Throughput, memory or distortion benchmarks.
    Bench {
        #[command(subcommand)]
        which: BenchCmd,
    },
    /// Distortion-vs-timestep curves (same as `bench distortion`).
    Distortion(DistortionArgs),
    /// Timestep whose SNR is closest to the target.
    SplitPoint {
        #[arg(long, default_value_t = 0.25)]
        snr: f64,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Run the acceptance suite and print a pass/fail table.
    Check,
}

#[derive(Args, Clone, Copy)]
struct ScheduleArgs {
    #[arg(long, default_value_t = patchdiff::schedule::DEFAULT_STEPS)]
    steps_total: usize,
    #[arg(long, default_value_t = patchdiff::schedule::DEFAULT_BETA_1)]
    beta_1: f64,
    #[arg(long, default_value_t = patchdiff::schedule::DEFAULT_BETA_T)]
    beta_t: f64,
}

impl ScheduleArgs {
    fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.steps_total,
            beta_1: self.beta_1,
            beta_t: self.beta_t,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with `dataset`, `model`, `train`, `schedule` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<PredictionKind>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Save a checkpoint every N steps (0 = only at the end).
    #[arg(long)]
    save_every: Option<u64>,
    /// Initialize weights from an existing checkpoint (warm start).
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Train x, eps and v models on identical batches and compare.
    #[arg(long)]
    compare: bool,
    /// Condition on dataset labels (adds a null class for guidance).
    #[arg(long)]
    conditional: bool,
    /// Run directory name under the output root.
    #[arg(long, default_value = "train")]
    name: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunConfig {
    dataset: DatasetSpec,
    #[serde(default)]
    model: DenoiserConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    schedule: ScheduleConfig,
    #[serde(default)]
    save_every: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdArg {
    None,
    Static,
    Dynamic,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint manifest for unsplit sampling.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Split spec `S:low.json:high.json`; the low model serves t <= S.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 250)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    w: f64,
    #[arg(long, value_enum, default_value = "dynamic")]
    threshold: ThresholdArg,
    #[arg(long, default_value_t = DEFAULT_DYNAMIC_PERCENTILE)]
    percentile: f64,
    /// Class ids, cycled over the samples.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<usize>>,
    /// Noise the reverse steps with beta_t instead of the posterior variance.
    #[arg(long)]
    beta_variance: bool,
    /// Use the EMA weights.
    #[arg(long)]
    ema: bool,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    /// Also write a grid sheet of all samples.
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value = "samples")]
    name: String,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Images/sec of full sampling loops at a matched parameter budget.
    Throughput {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        patches: Vec<usize>,
        /// Width of the P=2 model that sets the parameter budget.
        #[arg(long, default_value_t = 32)]
        budget_width: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Analytic activation memory of the FFHQ U-Net at P=1 and P=4.
    Memory {
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 4)]
        patch: usize,
    },
    Distortion(DistortionArgs),
}

#[derive(Args)]
struct DistortionArgs {
    #[arg(long)]
    dataset: String,
    /// Checkpoint manifests, or `oracle`.
    #[arg(long, value_delimiter = ',', default_value = "oracle")]
    models: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,100,200,300,400,500,600,700,800,900,1000")]
    t_grid: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    draws: usize,
    /// Divide every curve by the curve of this model.
    #[arg(long)]
    baseline: Option<String>,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

fn parse_kind(s: &str) -> std::result::Result<PredictionKind, String> {
    s.parse().map_err(|e: patchdiff::Error| e.to_string())
}

struct Ctx {
    seed: u64,
    seed_given: bool,
    root: PathBuf,
}

impl Ctx {
    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.root.join(name);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let _ = cli.deterministic;
    let root = std::env::var_os("PDM_OUT").map(PathBuf::from).unwrap_or(cli.out);
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(0),
        seed_given: cli.seed.is_some(),
        root,
    };
    match cli.cmd {
        Cmd::Schedule { schedule, respace } => {
            let mut s = schedule.config().build()?;
            if let Some(k) = respace {
                s = s.respace(k)?;
            }
            print!("{}", s.to_csv());
        }
        Cmd::Oracle {
            dataset,
            timesteps,
            example,
            schedule,
        } => {
            let ds = DatasetSpec::parse(&dataset)?.load()?;
            let s = schedule.config().build()?;
            check_example(example, ds.len())?;
            let path = ctx.dir("oracle")?.join(strip_name(ds.item_shape(), "oracle_strip"));
            figures::write_oracle_strip(&path, &ds, &s, example, &timesteps, ctx.seed)?;
            println!("{}", path.display());
        }
        Cmd::PosteriorSample {
            dataset,
            t,
            samples,
            example,
            schedule,
        } => {
            let ds = DatasetSpec::parse(&dataset)?.load()?;
            let s = schedule.config().build()?;
            check_example(example, ds.len())?;
            let mut rng = RngStream::named(ctx.seed, "figures/posterior");
            let strip = figures::posterior_strip(&ds, &s, example, t, samples, &mut rng)?;
            let path = ctx.dir("posterior")?.join(strip_name(ds.item_shape(), "posterior_strip"));
            data::write_pnm(&path, &data::grid(&strip, samples + 1, figures::STRIP_PAD)?)?;
            println!("{}", path.display());
        }
        Cmd::Train(args) => train(&ctx, args)?,
        Cmd::Sample(args) => sample(&ctx, args)?,
        Cmd::Bench { which } => match which {
            BenchCmd::Throughput {
                patches,
                budget_width,
                blocks,
                size,
                channels,
                batch,
                steps,
                reps,
            } => {
                let base = DenoiserConfig {
                    channels,
                    blocks,
                    ..Default::default()
                };
                let budget = DenoiserConfig {
                    patch: 2,
                    width: budget_width,
                    ..base.clone()
                }
                .param_count();
                let configs: Vec<DenoiserConfig> = patches
                    .iter()
                    .map(|&p| DenoiserConfig {
                        patch: p,
                        width: bench::matched_width(&base, p, budget),
                        ..base.clone()
                    })
                    .collect();
                let rows = bench::throughput(&configs, [size, size, channels], batch, steps, reps)?;
                let csv = bench::throughput_csv(&rows);
                fs::write(ctx.dir("bench")?.join("throughput.csv"), &csv)?;
                print!("{csv}");
            }
            BenchCmd::Memory { batch, patch } => {
                let dir = ctx.dir("bench")?;
                let base = bench::UNetSpec::ffhq(1).activations(batch, 4);
                let patched = bench::UNetSpec::ffhq(patch).activations(batch, 4);
                fs::write(dir.join("memory_p1.csv"), bench::memory_csv(&base))?;
                fs::write(dir.join(format!("memory_p{patch}.csv")), bench::memory_csv(&patched))?;
                println!("# FFHQ U-Net (base 128, multipliers 1,2,2,4,4,4, 2 blocks, attention 16,8)");
                for a in bench::UNetSpec::assumptions() {
                    println!("# assumption: {a}");
                }
                println!("## P=1 at 1024x1024");
                print!("{}", bench::memory_csv(&base));
                println!("## P={patch} at {0}x{0}", 1024 / patch);
                print!("{}", bench::memory_csv(&patched));
                let ratio = bench::memory_total(&base) as f64 / bench::memory_total(&patched) as f64;
                println!("# reduction P=1 / P={patch}: {ratio:.2}x");
            }
            BenchCmd::Distortion(args) => distortion(&ctx, args)?,
        },
        Cmd::Distortion(args) => distortion(&ctx, args)?,
        Cmd::SplitPoint { snr, schedule } => {
            let s = schedule.config().build()?;
            let t = s.nearest_snr(snr);
            println!("target SNR {snr}");
            println!("timestep (1-based) {t}");
            println!("index (0-based)    {}", t - 1);
            println!("SNR at timestep    {:.6}", s.snr(t));
            println!("schedule {} steps, beta {}..{}", s.len(), schedule.beta_1, schedule.beta_t);
        }
        Cmd::Check => {
            let mut failed = 0;
            for check in checks::ALL {
                let r = check();
                println!("{r}");
                if !r.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks::ALL.len());
            }
        }
    }
    Ok(())
}

fn check_example(i: usize, n: usize) -> Result<()> {
    if i >= n {
        bail!("example {i} out of range for a dataset of {n}");
    }
    Ok(())
}

fn strip_name(item_shape: &[usize], stem: &str) -> String {
    let ext = if item_shape.last() == Some(&3) { "ppm" } else { "pgm" };
    format!("{stem}.{ext}")
}

fn load_run_config(ctx: &Ctx, args: &TrainArgs) -> Result<RunConfig> {
    let mut rc: RunConfig = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfig {
            dataset: DatasetSpec::Toy {
                count: 16,
                size: 8,
                channels: 1,
                seed: 0,
            },
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleConfig::default(),
            save_every: 0,
        },
    };
    if let Some(d) = &args.dataset {
        rc.dataset = DatasetSpec::parse(d)?;
    }
    let t = &mut rc.train;
    if ctx.seed_given {
        t.seed = ctx.seed;
    }
    t.iters = args.iters.unwrap_or(t.iters);
    t.batch = args.batch.unwrap_or(t.batch);
    t.lr = args.lr.unwrap_or(t.lr);
    t.warmup = args.warmup.unwrap_or(t.warmup);
    if let Some(k) = args.kind {
        t.kind = k;
    }
    rc.model.kind = t.kind;
    let m = &mut rc.model;
    m.patch = args.patch.unwrap_or(m.patch);
    m.width = args.width.unwrap_or(m.width);
    m.blocks = args.blocks.unwrap_or(m.blocks);
    m.train_steps = rc.schedule.steps;
    rc.save_every = args.save_every.unwrap_or(rc.save_every);
    Ok(rc)
}

fn train(ctx: &Ctx, args: TrainArgs) -> Result<()> {
    let mut rc = load_run_config(ctx, &args)?;
    let ds = rc.dataset.load()?;
    let s = rc.schedule.build()?;
    match ds.item_shape() {
        [_, _, c] => rc.model.channels = *c,
        other => bail!("training needs (H, W, C) images, dataset has item shape {other:?}"),
    }
    if args.conditional {
        let labels = ds.labels().context("--conditional needs a labelled dataset")?;
        rc.model.classes = Some(labels.iter().max().map_or(0, |m| m + 1));
    }
    if args.compare {
        rc.train.loss_space = LossSpace::XSpaceReport;
    }
    let dir = ctx.dir(&args.name)?;
    fs::write(dir.join("effective_config.json"), serde_json::to_string_pretty(&rc)?)?;
    println!("{}", serde_json::to_string_pretty(&rc)?);

    if args.compare {
        let runs = trainer::compare_kinds(&rc.model, &ds, &s, &rc.train)?;
        fs::write(dir.join("comparison_x_space.csv"), trainer::comparison_csv(&runs, LossSpace::XSpaceReport))?;
        fs::write(dir.join("comparison_native.csv"), trainer::comparison_csv(&runs, LossSpace::Native))?;
        for (kind, run) in &runs {
            run.checkpoint.save(&dir.join(format!("model_{}.json", kind.name())))?;
            fs::write(dir.join(format!("buckets_{}.csv", kind.name())), trainer::buckets_csv(&run.buckets))?;
        }
        println!("wrote comparison CSVs to {}", dir.display());
        return Ok(());
    }

    let init = match &args.init_from {
        Some(p) => {
            let src = Checkpoint::load(p)?;
            if src.config != rc.model {
                bail!("{}: model config differs from the run config", p.display());
            }
            if src.schedule_fingerprint != s.fingerprint() {
                bail!("{}: schedule fingerprint {} does not match {}", p.display(), src.schedule_fingerprint, s.fingerprint());
            }
            let mut warm = Checkpoint::init(rc.model.clone(), s.fingerprint(), &mut RngStream::named(rc.train.seed, "train/init"))?;
            warm.ema = src.params.clone();
            warm.params = src.params;
            warm
        }
        None => Checkpoint::init(rc.model.clone(), s.fingerprint(), &mut RngStream::named(rc.train.seed, "train/init"))?,
    };
    let save_every = rc.save_every;
    let out = trainer::train_loop(init, &ds, &s, &rc.train, |row, ck| {
        if save_every > 0 && row.step % save_every == 0 {
            ck.save(&dir.join(format!("model_step{}.json", row.step)))?;
        }
        Ok(())
    })?;
    fs::write(dir.join("metrics.csv"), trainer::metrics_csv(&out.metrics))?;
    fs::write(dir.join("buckets.csv"), trainer::buckets_csv(&out.buckets))?;
    let path = dir.join("model.json");
    out.checkpoint.save(&path)?;
    if let (Some(first), Some(last)) = (out.metrics.first(), out.metrics.last()) {
        println!(
            "step {}: x-space rmse {:.4} -> {:.4}",
            last.step, first.x_space_rmse, last.x_space_rmse
        );
    }
    println!("{}", path.display());
    Ok(())
}

fn sample(ctx: &Ctx, args: SampleArgs) -> Result<()> {
    let s = args.schedule.config().build()?;
    let threshold = match args.threshold {
        ThresholdArg::None => ThresholdMode::None,
        ThresholdArg::Static => ThresholdMode::Static,
        ThresholdArg::Dynamic => ThresholdMode::Dynamic {
            percentile: args.percentile,
        },
    };
    let request = SampleRequest {
        count: args.count,
        classes: args
            .classes
            .as_ref()
            .map(|c| (0..args.count).map(|i| c[i % c.len()]).collect()),
        steps: args.steps,
        guidance: GuidanceConfig { w: args.w, threshold },
        variance: if args.beta_variance {
            ReverseVariance::Beta
        } else {
            ReverseVariance::Posterior
        },
        seed: ctx.seed,
    };
    let (checkpoints, split) = match (&args.model, &args.split) {
        (Some(m), None) => (vec![Checkpoint::load(m)?], None),
        (None, Some(spec)) => {
            let parts: Vec<&str> = spec.splitn(3, ':').collect();
            if parts.len() != 3 {
                bail!("split spec must be S:low.json:high.json, got {spec:?}");
            }
            let at: usize = parts[0].parse().with_context(|| format!("split point {:?}", parts[0]))?;
            (
                vec![Checkpoint::load(Path::new(parts[1]))?, Checkpoint::load(Path::new(parts[2]))?],
                Some(at),
            )
        }
        _ => bail!("give exactly one of --model or --split"),
    };
    let nets: Vec<_> = checkpoints.iter().map(|c| c.network(args.ema)).collect();
    let models = match split {
        None => ModelSet::Single(&nets[0]),
        Some(at) => ModelSet::split(at, &nets[0], &nets[1]),
    };
    let channels = checkpoints[0].config.channels;
    let out = sampler::sample(&request, &models, &s, &[args.height, args.width, channels])?;
    let dir = ctx.dir(&args.name)?;
    let ext = if channels == 3 { "ppm" } else { "pgm" };
    for i in 0..args.count {
        let img = patchdiff::Tensor::new(&[args.height, args.width, channels], out.item(i).to_vec())?;
        data::write_pnm(&dir.join(format!("sample_{i:04}.{ext}")), &img)?;
    }
    if args.grid {
        let cols = (args.count as f64).sqrt().ceil() as usize;
        data::write_pnm(&dir.join(format!("grid.{ext}")), &data::grid(&out, cols, 1)?)?;
    }
    fs::write(dir.join("request.json"), serde_json::to_string_pretty(&request)?)?;
    println!("wrote {} samples to {}", args.count, dir.display());
    Ok(())
}

fn distortion(ctx: &Ctx, args: DistortionArgs) -> Result<()> {
    let ds = DatasetSpec::parse(&args.dataset)?.load()?;
    let s = args.schedule.config().build()?;
    let checkpoints: Vec<(String, Option<Checkpoint>)> = args
        .models
        .iter()
        .map(|m| {
            if m == "oracle" {
                Ok((m.clone(), None))
            } else {
                Ok((m.clone(), Some(Checkpoint::load(Path::new(m))?)))
            }
        })
        .collect::<Result<_>>()?;
    let oracle = OracleModel::new(&ds, &s);
    let mut columns = Vec::new();
    for (name, ck) in &checkpoints {
        let model: &dyn Denoiser = match ck {
            Some(c) => c,
            None => &oracle,
        };
        let mut rng = RngStream::named(ctx.seed, "bench/distortion");
        columns.push((name.clone(), bench::distortion_curve(model, &ds, &s, &args.t_grid, args.draws, &mut rng)?));
    }
    let dir = ctx.dir("bench")?;
    let csv = bench::distortion_csv(&columns);
    fs::write(dir.join("distortion.csv"), &csv)?;
    print!("{csv}");
    if let Some(b) = &args.baseline {
        let base = columns
            .iter()
            .find(|(n, _)| n == b)
            .with_context(|| format!("baseline {b:?} is not among --models"))?
            .1
            .clone();
        let mut out = String::from("t");
        for (n, _) in &columns {
            out.push_str(&format!(",{n}_over_{b}"));
        }
        out.push('\n');
        let ratios: Vec<Vec<(usize, f64)>> = columns
            .iter()
            .map(|(_, c)| bench::distortion_ratio(c, &base))
            .collect::<patchdiff::Result<_>>()?;
        for (i, &t) in args.t_grid.iter().enumerate() {
            out.push_str(&t.to_string());
            for r in &ratios {
                out.push_str(&format!(",{:.6}", r[i].1));
            }
            out.push('\n');
        }
        fs::write(dir.join("distortion_ratio.csv"), &out)?;
        print!("{out}");
    }
    Ok(())
}
