//! A small patched denoiser with exact reverse-mode gradients.
//!
//! Pipeline: patchify, pointwise embedding to `width` channels, fixed 2D
//! sinusoidal positional encodings, `blocks` residual blocks on the patch
//! grid, group norm and a zero-initialized pointwise projection back to
//! `C * P * P` channels, unpatchify.
//!
//! Each residual block computes
//!
//! ```text
//! h + conv2(silu(conv1(gn(h)) + temb)) * sigmoid(class_embedding)
//! ```
//!
//! where `temb` is a per-block projection of the shared time MLP output.
//! The class gate is present only for class-conditional configs; the
//! null class (id `classes`) serves the unconditional pass.

pub mod checkpoint;
pub mod layers;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::param::{Prediction, PredictionKind};
use crate::patching::{from_patches, patched_shape, to_patches};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use checkpoint::{AdamState, Checkpoint};
use layers::{Grid, NormCache};

pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Image channels `C`.
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub time_dim: usize,
    /// Number of real classes; one extra null class is allocated.
    pub classes: Option<usize>,
    pub kind: PredictionKind,
    /// `T` used to scale timesteps into `[0, 1]`.
    pub train_steps: usize,
    #[serde(default = "default_true")]
    pub positional: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            patch: 2,
            width: 16,
            blocks: 2,
            kernel: 3,
            time_dim: 16,
            classes: None,
            kind: PredictionKind::X,
            train_steps: crate::schedule::DEFAULT_STEPS,
            positional: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if self.patch == 0 {
            return bad("patch size must be positive");
        }
        if self.width == 0 {
            return bad("width must be positive");
        }
        if self.blocks == 0 {
            return bad("need at least one residual block");
        }
        if self.kernel != 1 && self.kernel != 3 {
            return bad("kernel must be 1 or 3");
        }
        if self.time_dim < 2 {
            return bad("time_dim must be at least 2");
        }
        if self.train_steps == 0 {
            return bad("train_steps must be positive");
        }
        if self.classes == Some(0) {
            return bad("class-conditional config needs at least one class");
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Class id used for the unconditional pass.
    pub fn null_class(&self) -> Option<usize> {
        self.classes
    }

    /// Parameter names and shapes, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (cin, w, k, td) = (self.in_channels(), self.width, self.kernel, self.time_dim);
        let mut v: Vec<(String, Vec<usize>)> = vec![
            ("embed.w".into(), vec![cin, w]),
            ("embed.b".into(), vec![w]),
            ("time.w1".into(), vec![td, w]),
            ("time.b1".into(), vec![w]),
            ("time.w2".into(), vec![w, w]),
            ("time.b2".into(), vec![w]),
        ];
        for b in 0..self.blocks {
            let p = |s: &str| format!("block{b}.{s}");
            v.push((p("norm.g"), vec![w]));
            v.push((p("norm.b"), vec![w]));
            v.push((p("conv1.w"), vec![k, k, w, w]));
            v.push((p("conv1.b"), vec![w]));
            v.push((p("temb.w"), vec![w, w]));
            v.push((p("temb.b"), vec![w]));
            v.push((p("conv2.w"), vec![k, k, w, w]));
            v.push((p("conv2.b"), vec![w]));
            if let Some(c) = self.classes {
                v.push((p("class"), vec![c + 1, w]));
            }
        }
        v.push(("out.norm.g".into(), vec![w]));
        v.push(("out.norm.b".into(), vec![w]));
        v.push(("out.w".into(), vec![w, cin]));
        v.push(("out.b".into(), vec![cin]));
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Fan-in scaled Gaussian weights, zero biases, unit norm gains, zero class
/// embeddings and a zero output projection (the initial model predicts 0).
pub fn init_params(config: &DenoiserConfig, rng: &mut RngStream) -> Result<ParamMap> {
    config.validate()?;
    let mut params = ParamMap::new();
    for (name, shape) in config.param_shapes() {
        let t = if name.ends_with("norm.g") {
            Tensor::full(&shape, 1.0)
        } else if name == "out.w" || name.ends_with(".b") || name.ends_with("class") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[..shape.len() - 1].iter().product();
            rng.gaussian(&shape).scale(1.0 / (fan_in as f64).sqrt())
        };
        params.insert(name, t);
    }
    Ok(params)
}

struct BlockCache {
    input: Vec<f64>,
    norm: NormCache,
    normed: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
    branch: Vec<f64>,
    gate_logit: Option<Vec<f64>>,
}

/// Intermediates recorded by [`forward`] for [`backward`].
pub struct ForwardCache {
    grid: Grid,
    image_shape: (usize, usize, usize, usize),
    patched: Vec<f64>,
    time_feat: Vec<f64>,
    time_hidden: Vec<f64>,
    temb: Vec<f64>,
    class_ids: Option<Vec<usize>>,
    blocks: Vec<BlockCache>,
    final_in: Vec<f64>,
    final_norm: NormCache,
    final_normed: Vec<f64>,
}

fn get<'a>(params: &'a ParamMap, name: &str) -> &'a [f64] {
    params
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .data()
}

pub fn time_features(config: &DenoiserConfig, timesteps: &[usize]) -> Vec<f64> {
    let td = config.time_dim;
    let mut out = vec![0.0; timesteps.len() * td];
    for (i, &t) in timesteps.iter().enumerate() {
        let s = t as f64 / config.train_steps as f64;
        layers::sinusoid(1000.0 * s, td, &mut out[i * td..(i + 1) * td]);
    }
    out
}

fn resolve_classes(config: &DenoiserConfig, n: usize, classes: Option<&[usize]>) -> Result<Option<Vec<usize>>> {
    match (config.classes, classes) {
        (None, None) => Ok(None),
        (None, Some(_)) => Err(Error::Config("model is not class-conditional".into())),
        (Some(k), None) => Ok(Some(vec![k; n])),
        (Some(k), Some(c)) => {
            if c.len() != n {
                return Err(Error::Config(format!("{} class ids for batch of {n}", c.len())));
            }
            if let Some(bad) = c.iter().find(|&&id| id > k) {
                return Err(Error::Config(format!("class id {bad} exceeds null id {k}")));
            }
            Ok(Some(c.to_vec()))
        }
    }
}

/// Runs the network, returning the raw prediction tensor (image layout) and
/// the cache needed for [`backward`].
pub fn forward(
    config: &DenoiserConfig,
    params: &ParamMap,
    z: &Tensor,
    timesteps: &[usize],
    classes: Option<&[usize]>,
) -> Result<(Tensor, ForwardCache)> {
    let (n, h, w, c) = z.dims4()?;
    if c != config.channels {
        return Err(Error::Config(format!("model expects {} channels, got {c}", config.channels)));
    }
    let (gh, gw, cin) = patched_shape(h, w, c, config.patch)?;
    if timesteps.len() != n {
        return Err(Error::Config(format!("{} timesteps for batch of {n}", timesteps.len())));
    }
    if let Some(&bad) = timesteps.iter().find(|&&t| t == 0 || t > config.train_steps) {
        return Err(Error::Timestep {
            t: bad,
            max: config.train_steps,
        });
    }
    let class_ids = resolve_classes(config, n, classes)?;
    let grid = Grid { n, h: gh, w: gw };
    let rows = grid.rows();
    let width = config.width;

    let patched = to_patches(z, config.patch)?.into_data();
    let mut hcur = layers::linear(&patched, rows, cin, get(params, "embed.w"), get(params, "embed.b"), width);
    if config.positional {
        let pe = layers::positional_encoding(gh, gw, width);
        for chunk in hcur.chunks_exact_mut(gh * gw * width) {
            for (v, p) in chunk.iter_mut().zip(&pe) {
                *v += p;
            }
        }
    }

    let time_feat = time_features(config, timesteps);
    let time_hidden = layers::linear(&time_feat, n, config.time_dim, get(params, "time.w1"), get(params, "time.b1"), width);
    let temb = layers::linear(&layers::silu(&time_hidden), n, width, get(params, "time.w2"), get(params, "time.b2"), width);

    let cells = grid.cells();
    let mut blocks = Vec::with_capacity(config.blocks);
    for b in 0..config.blocks {
        let p = |s: &str| format!("block{b}.{s}");
        let input = hcur;
        let (normed, norm) = layers::group_norm(&input, n, cells, width, get(params, &p("norm.g")), get(params, &p("norm.b")));
        let mut pre_act = layers::conv2d(&normed, grid, width, config.kernel, get(params, &p("conv1.w")), get(params, &p("conv1.b")), width);
        let tb = layers::linear(&temb, n, width, get(params, &p("temb.w")), get(params, &p("temb.b")), width);
        for s in 0..n {
            for cell in pre_act[s * cells * width..(s + 1) * cells * width].chunks_exact_mut(width) {
                for (v, t) in cell.iter_mut().zip(&tb[s * width..(s + 1) * width]) {
                    *v += t;
                }
            }
        }
        let act = layers::silu(&pre_act);
        let branch = layers::conv2d(&act, grid, width, config.kernel, get(params, &p("conv2.w")), get(params, &p("conv2.b")), width);
        let mut out = input.clone();
        let gate_logit = match &class_ids {
            Some(ids) => {
                let table = get(params, &p("class"));
                let logits: Vec<f64> = ids
                    .iter()
                    .flat_map(|&id| table[id * width..(id + 1) * width].iter().copied())
                    .collect();
                for s in 0..n {
                    let gate: Vec<f64> = logits[s * width..(s + 1) * width].iter().map(|&l| layers::sigmoid(l)).collect();
                    let range = s * cells * width..(s + 1) * cells * width;
                    for (oc, bc) in out[range.clone()].chunks_exact_mut(width).zip(branch[range].chunks_exact(width)) {
                        for j in 0..width {
                            oc[j] += bc[j] * gate[j];
                        }
                    }
                }
                Some(logits)
            }
            None => {
                for (o, bv) in out.iter_mut().zip(&branch) {
                    *o += bv;
                }
                None
            }
        };
        blocks.push(BlockCache {
            input,
            norm,
            normed,
            pre_act,
            act,
            branch,
            gate_logit,
        });
        hcur = out;
    }

    let (final_normed, final_norm) = layers::group_norm(&hcur, n, cells, width, get(params, "out.norm.g"), get(params, "out.norm.b"));
    let y = layers::linear(&final_normed, rows, width, get(params, "out.w"), get(params, "out.b"), cin);
    let out = from_patches(&Tensor::new(&[n, gh, gw, cin], y)?, config.patch)?;
    let cache = ForwardCache {
        grid,
        image_shape: (n, h, w, c),
        patched,
        time_feat,
        time_hidden,
        temb,
        class_ids,
        blocks,
        final_in: hcur,
        final_norm,
        final_normed,
    };
    Ok((out, cache))
}

fn accumulate(grads: &mut ParamMap, params: &ParamMap, name: &str, g: Vec<f64>) {
    let shape = params[name].shape().to_vec();
    match grads.get_mut(name) {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => {
            grads.insert(name.to_string(), Tensor::new(&shape, g).expect("gradient shape"));
        }
    }
}

/// Gradients of a scalar loss with respect to every trainable parameter,
/// given `d_out = dL/d(prediction)` in image layout.
pub fn backward(config: &DenoiserConfig, params: &ParamMap, cache: &ForwardCache, d_out: &Tensor) -> Result<ParamMap> {
    let (n, h, w, c) = cache.image_shape;
    if d_out.shape() != [n, h, w, c] {
        return Err(Error::ShapeMismatch {
            left: d_out.shape().to_vec(),
            right: vec![n, h, w, c],
        });
    }
    let grid = cache.grid;
    let (rows, cells, width, cin) = (grid.rows(), grid.cells(), config.width, config.in_channels());
    let mut grads = ParamMap::new();

    // from_patches is a permutation; its adjoint is to_patches
    let dy = to_patches(d_out, config.patch)?.into_data();
    let (d_normed, dw, db) = layers::linear_backward(&cache.final_normed, &dy, rows, width, get(params, "out.w"), cin, true);
    accumulate(&mut grads, params, "out.w", dw);
    accumulate(&mut grads, params, "out.b", db);
    let (mut dh, dg, dbeta) = layers::group_norm_backward(&d_normed, &cache.final_norm, n, cells, width, get(params, "out.norm.g"));
    accumulate(&mut grads, params, "out.norm.g", dg);
    accumulate(&mut grads, params, "out.norm.b", dbeta);
    debug_assert_eq!(dh.len(), cache.final_in.len());

    let mut d_temb = vec![0.0; n * width];
    for b in (0..config.blocks).rev() {
        let p = |s: &str| format!("block{b}.{s}");
        let bc = &cache.blocks[b];
        // residual: dh flows to the input unchanged, plus through the branch
        let mut d_branch = dh.clone();
        if let (Some(logits), Some(ids)) = (&bc.gate_logit, &cache.class_ids) {
            let mut d_table = vec![0.0; (config.classes.unwrap() + 1) * width];
            for s in 0..n {
                let lg = &logits[s * width..(s + 1) * width];
                let gate: Vec<f64> = lg.iter().map(|&l| layers::sigmoid(l)).collect();
                let mut d_gate = vec![0.0; width];
                let range = s * cells * width..(s + 1) * cells * width;
                for (dbc, (dhc, brc)) in d_branch[range.clone()]
                    .chunks_exact_mut(width)
                    .zip(dh[range.clone()].chunks_exact(width).zip(bc.branch[range].chunks_exact(width)))
                {
                    for j in 0..width {
                        d_gate[j] += dhc[j] * brc[j];
                        dbc[j] = dhc[j] * gate[j];
                    }
                }
                let id = ids[s];
                for j in 0..width {
                    d_table[id * width + j] += d_gate[j] * gate[j] * (1.0 - gate[j]);
                }
            }
            accumulate(&mut grads, params, &p("class"), d_table);
        }
        let (d_act, dw2, db2) = layers::conv2d_backward(&bc.act, &d_branch, grid, width, config.kernel, get(params, &p("conv2.w")), width);
        accumulate(&mut grads, params, &p("conv2.w"), dw2);
        accumulate(&mut grads, params, &p("conv2.b"), db2);
        let d_pre = layers::silu_backward(&bc.pre_act, &d_act);
        let mut d_tb = vec![0.0; n * width];
        for s in 0..n {
            for cell in d_pre[s * cells * width..(s + 1) * cells * width].chunks_exact(width) {
                for j in 0..width {
                    d_tb[s * width + j] += cell[j];
                }
            }
        }
        let (d_temb_b, dwt, dbt) = layers::linear_backward(&cache.temb, &d_tb, n, width, get(params, &p("temb.w")), width, true);
        accumulate(&mut grads, params, &p("temb.w"), dwt);
        accumulate(&mut grads, params, &p("temb.b"), dbt);
        for (a, g) in d_temb.iter_mut().zip(&d_temb_b) {
            *a += g;
        }
        let (d_normed, dw1, db1) = layers::conv2d_backward(&bc.normed, &d_pre, grid, width, config.kernel, get(params, &p("conv1.w")), width);
        accumulate(&mut grads, params, &p("conv1.w"), dw1);
        accumulate(&mut grads, params, &p("conv1.b"), db1);
        let (d_in, dg, dbeta) = layers::group_norm_backward(&d_normed, &bc.norm, n, cells, width, get(params, &p("norm.g")));
        accumulate(&mut grads, params, &p("norm.g"), dg);
        accumulate(&mut grads, params, &p("norm.b"), dbeta);
        debug_assert_eq!(bc.input.len(), d_in.len());
        for (a, g) in dh.iter_mut().zip(&d_in) {
            *a += g;
        }
    }

    // positional encodings are fixed; dh goes straight to the embedding
    let (_, dwe, dbe) = layers::linear_backward(&cache.patched, &dh, rows, cin, get(params, "embed.w"), width, false);
    accumulate(&mut grads, params, "embed.w", dwe);
    accumulate(&mut grads, params, "embed.b", dbe);

    let hidden_act = layers::silu(&cache.time_hidden);
    let (d_hidden_act, dw2, db2) = layers::linear_backward(&hidden_act, &d_temb, n, width, get(params, "time.w2"), width, true);
    accumulate(&mut grads, params, "time.w2", dw2);
    accumulate(&mut grads, params, "time.b2", db2);
    let d_hidden = layers::silu_backward(&cache.time_hidden, &d_hidden_act);
    let (_, dw1, db1) = layers::linear_backward(&cache.time_feat, &d_hidden, n, config.time_dim, get(params, "time.w1"), width, false);
    accumulate(&mut grads, params, "time.w1", dw1);
    accumulate(&mut grads, params, "time.b1", db1);

    // parameters that received no gradient path (e.g. unused class rows) still get zeros
    for (name, shape) in config.param_shapes() {
        grads.entry(name).or_insert_with(|| Tensor::zeros(&shape));
    }
    Ok(grads)
}

/// A read-only view of a parameter set as a [`Denoiser`].
pub struct Network<'a> {
    pub config: &'a DenoiserConfig,
    pub params: &'a ParamMap,
    pub fingerprint: Option<&'a str>,
}

impl Denoiser for Network<'_> {
    fn kind(&self) -> PredictionKind {
        self.config.kind
    }

    fn patch_size(&self) -> usize {
        self.config.patch
    }

    fn schedule_fingerprint(&self) -> Option<&str> {
        self.fingerprint
    }

    fn predict(&self, z: &Tensor, timesteps: &[usize], classes: Option<&[usize]>) -> Result<Prediction> {
        let (out, _) = forward(self.config, self.params, z, timesteps, classes)?;
        Ok(Prediction::new(self.config.kind, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DenoiserConfig {
        DenoiserConfig {
            channels: 2,
            patch: 2,
            width: 8,
            blocks: 2,
            kernel: 3,
            time_dim: 6,
            classes: Some(3),
            kind: PredictionKind::X,
            train_steps: 100,
            positional: true,
        }
    }

    #[test]
    fn param_count_matches_hand_formula() {
        let c = cfg();
        let (cin, w, k, td, k1) = (8, 8, 3, 6, 4);
        let per_block = 2 * w + 2 * (k * k * w * w + w) + (w * w + w) + k1 * w;
        let expected = (cin * w + w) + (td * w + w) + (w * w + w) + 2 * per_block + 2 * w + (w * cin + cin);
        assert_eq!(c.param_count(), expected);
    }

    #[test]
    fn init_is_deterministic_and_predicts_zero() {
        let c = cfg();
        let a = init_params(&c, &mut RngStream::new(1, 0)).unwrap();
        let b = init_params(&c, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(a, b);
        let z = RngStream::new(2, 0).gaussian(&[3, 4, 6, 2]);
        let (y, _) = forward(&c, &a, &z, &[1, 50, 100], Some(&[0, 1, 3])).unwrap();
        assert_eq!(y.shape(), z.shape());
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = cfg();
        let p = init_params(&c, &mut RngStream::new(1, 0)).unwrap();
        let z = Tensor::zeros(&[1, 3, 4, 2]);
        assert!(forward(&c, &p, &z, &[1], None).is_err());
        let z = Tensor::zeros(&[1, 4, 4, 2]);
        assert!(forward(&c, &p, &z, &[0], None).is_err());
        assert!(forward(&c, &p, &z, &[101], None).is_err());
        assert!(forward(&c, &p, &z, &[5], Some(&[4])).is_err());
        let mut bad = c.clone();
        bad.kernel = 2;
        assert!(bad.validate().is_err());
    }
}
