//! Image strips of the optimal denoiser and of posterior reconstructions.

use std::path::Path;

use crate::data::{grid, write_pnm};
use crate::error::Result;
use crate::oracle::{optimal_denoiser, posterior_sample, EmpiricalDataset};
use crate::rng::RngStream;
use crate::schedule::Schedule;
use crate::tensor::Tensor;

/// `x*(z_t, t)` for one example and one fixed noise draw at each timestep;
/// `t = 0` yields the clean example.
pub fn oracle_strip(
    ds: &EmpiricalDataset,
    schedule: &Schedule,
    example: usize,
    timesteps: &[usize],
    rng: &mut RngStream,
) -> Result<Tensor> {
    let x = ds.gather(&[example]);
    let noise = rng.gaussian(x.shape());
    let mut items = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        if t == 0 {
            items.push(x.data().to_vec());
            continue;
        }
        let z = schedule.forward_marginal(&x, t, &noise)?;
        items.push(optimal_denoiser(ds, &z, &[schedule.alpha_cum(t)], None)?.into_data());
    }
    let slices: Vec<&[f64]> = items.iter().map(|v| v.as_slice()).collect();
    Tensor::stack(&slices, ds.item_shape())
}

/// The noisy `z_t` (clamped for display) followed by `samples` draws from
/// the exact posterior `q(x | z_t)` of the empirical dataset.
pub fn posterior_strip(
    ds: &EmpiricalDataset,
    schedule: &Schedule,
    example: usize,
    t: usize,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    let x = ds.gather(&[example]);
    let noise = rng.gaussian(x.shape());
    let z = schedule.forward_marginal(&x, t, &noise)?;
    let rep: Vec<&[f64]> = (0..samples).map(|_| z.data()).collect();
    let zs = Tensor::stack(&rep, ds.item_shape())?;
    let draws = posterior_sample(ds, &zs, &[schedule.alpha_cum(t)], None, rng)?;
    let shown = z.map(|v| v.clamp(-1.0, 1.0));
    let mut items: Vec<&[f64]> = vec![shown.data()];
    items.extend((0..samples).map(|i| draws.item(i)));
    Tensor::stack(&items, ds.item_shape())
}

/// Border width between strip cells, in pixels.
pub const STRIP_PAD: usize = 1;

/// Writes the optimal-denoiser strip for `timesteps` as one PPM/PGM row.
pub fn write_oracle_strip(
    path: &Path,
    ds: &EmpiricalDataset,
    schedule: &Schedule,
    example: usize,
    timesteps: &[usize],
    seed: u64,
) -> Result<()> {
    let mut rng = RngStream::named(seed, "figures/oracle");
    let strip = oracle_strip(ds, schedule, example, timesteps, &mut rng)?;
    write_pnm(path, &grid(&strip, timesteps.len(), STRIP_PAD)?)
}
