use wasm_bindgen::prelude::*;

use patchdiff::data::{grid, toy_images};
use patchdiff::figures::{oracle_strip, posterior_strip, STRIP_PAD};
use patchdiff::param::{x_error_amplification, PredictionKind};
use patchdiff::rng::RngStream;
use patchdiff::schedule::{Schedule, ScheduleConfig};
use patchdiff::Tensor;

/// An RGBA raster ready for `ImageData`.
#[wasm_bindgen]
pub struct Picture {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Picture {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl Picture {
    fn from_image(img: &Tensor) -> Picture {
        let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let mut rgba = Vec::with_capacity(h * w * 4);
        for px in img.data().chunks(c) {
            let byte = |v: f64| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
            if c == 3 {
                rgba.extend(px.iter().map(|&v| byte(v)));
            } else {
                rgba.extend([byte(px[0]); 3]);
            }
            rgba.push(255);
        }
        Picture { width: w, height: h, rgba }
    }
}

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<Schedule, JsError> {
    ScheduleConfig { steps, beta_1, beta_t }.build().map_err(err)
}

/// Per-timestep alpha_cum, log10 SNR and the x-space error amplification of
/// each prediction kind, as a JSON object of arrays.
#[wasm_bindgen]
pub fn schedule_curves(steps: usize, beta_1: f64, beta_t: f64) -> Result<String, JsError> {
    let s = schedule(steps, beta_1, beta_t)?;
    let amp = |kind| -> Vec<f64> {
        s.alpha_cums().iter().map(|&a| x_error_amplification(kind, a)).collect()
    };
    let curves = serde_json::json!({
        "t": s.timesteps(),
        "alpha_cum": s.alpha_cums(),
        "log10_snr": (1..=s.len()).map(|t| s.snr(t).log10()).collect::<Vec<_>>(),
        "amp_x": amp(PredictionKind::X),
        "amp_eps": amp(PredictionKind::Eps),
        "amp_v": amp(PredictionKind::V),
        "split_snr_quarter": s.nearest_snr(0.25),
    });
    Ok(curves.to_string())
}

/// Optimal-denoiser outputs for one toy example across `timesteps`
/// (comma separated), laid out left to right.
#[wasm_bindgen]
pub fn oracle_blur(count: usize, size: usize, example: usize, timesteps: &str, seed: u64) -> Result<Picture, JsError> {
    let ts: Vec<usize> = timesteps
        .split(',')
        .map(|t| t.trim().parse().map_err(err))
        .collect::<Result<_, _>>()?;
    let ds = toy_images(count, size, 1, seed).map_err(err)?;
    if example >= ds.len() {
        return Err(JsError::new("example out of range"));
    }
    let s = ScheduleConfig::default().build().map_err(err)?;
    let mut rng = RngStream::named(seed, "figures/oracle");
    let strip = oracle_strip(&ds, &s, example, &ts, &mut rng).map_err(err)?;
    Ok(Picture::from_image(&grid(&strip, ts.len(), STRIP_PAD).map_err(err)?))
}

/// The noisy image at `t` followed by `samples` exact posterior draws.
#[wasm_bindgen]
pub fn posterior_samples(count: usize, size: usize, example: usize, t: usize, samples: usize, seed: u64) -> Result<Picture, JsError> {
    let ds = toy_images(count, size, 1, seed).map_err(err)?;
    if example >= ds.len() {
        return Err(JsError::new("example out of range"));
    }
    let s = ScheduleConfig::default().build().map_err(err)?;
    let mut rng = RngStream::named(seed, "figures/posterior");
    let strip = posterior_strip(&ds, &s, example, t, samples, &mut rng).map_err(err)?;
    Ok(Picture::from_image(&grid(&strip, samples + 1, STRIP_PAD).map_err(err)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_cover_every_step() {
        let v: serde_json::Value = serde_json::from_str(&schedule_curves(1000, 1e-4, 0.02).unwrap()).unwrap();
        assert_eq!(v["amp_eps"].as_array().unwrap().len(), 1000);
        assert_eq!(v["split_snr_quarter"], 397);
    }

    #[test]
    fn strips_have_rgba_pixels() {
        let p = oracle_blur(8, 8, 0, "0,500,1000", 1).unwrap();
        assert_eq!((p.width, p.height), (3 * 8 + 4, 10));
        assert_eq!(p.rgba.len(), p.width * p.height * 4);
        let q = posterior_samples(8, 8, 2, 400, 4, 1).unwrap();
        assert_eq!(q.width, 5 * 8 + 6);
    }
}
