//! Checkpoints: a JSON manifest plus one blob of concatenated tensors.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{init_params, DenoiserConfig, Network, ParamMap};
use crate::blob;
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::param::{Prediction, PredictionKind};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub m: ParamMap,
    pub v: ParamMap,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub params: ParamMap,
    pub ema: ParamMap,
    pub opt: AdamState,
    pub schedule_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: DenoiserConfig,
    schedule_fingerprint: String,
    opt_step: u64,
    blob: String,
    tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "pdm-checkpoint";

impl Checkpoint {
    pub fn init(config: DenoiserConfig, schedule_fingerprint: &str, rng: &mut RngStream) -> Result<Self> {
        let params = init_params(&config, rng)?;
        let zeros: ParamMap = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Ok(Self {
            ema: params.clone(),
            opt: AdamState {
                m: zeros.clone(),
                v: zeros,
                step: 0,
            },
            params,
            config,
            schedule_fingerprint: schedule_fingerprint.to_string(),
        })
    }

    /// The live (`use_ema = false`) or averaged weights as a model.
    pub fn network(&self, use_ema: bool) -> Network<'_> {
        Network {
            config: &self.config,
            params: if use_ema { &self.ema } else { &self.params },
            fingerprint: Some(&self.schedule_fingerprint),
        }
    }

    pub fn forward(&self, z: &Tensor, timesteps: &[usize], classes: Option<&[usize]>, use_ema: bool) -> Result<Prediction> {
        self.network(use_ema).predict(z, timesteps, classes)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    fn groups(&self) -> [(&'static str, &ParamMap); 4] {
        [
            ("params", &self.params),
            ("ema", &self.ema),
            ("adam_m", &self.opt.m),
            ("adam_v", &self.opt.v),
        ]
    }

    /// Writes `path` (manifest) and the sibling `.bin` blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_path = path.with_extension("bin");
        let mut entries = Vec::new();
        let mut w = BufWriter::new(fs::File::create(&blob_path)?);
        let mut offset = 0u64;
        for (group, map) in self.groups() {
            for (name, t) in map {
                blob::write_tensor(&mut w, t)?;
                entries.push(TensorEntry {
                    group: group.into(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += blob::encoded_len(t) as u64;
            }
        }
        w.flush()?;
        let manifest = Manifest {
            format: FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            schedule_fingerprint: self.schedule_fingerprint.clone(),
            opt_step: self.opt.step,
            blob: blob_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tensors: entries,
        };
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        if manifest.format != FORMAT {
            return Err(Error::Blob(format!("{}: not a checkpoint manifest", path.display())));
        }
        manifest.config.validate()?;
        let blob_path: PathBuf = path.with_file_name(&manifest.blob);
        let bytes = fs::read(&blob_path)?;
        let mut ck = Checkpoint {
            config: manifest.config,
            params: ParamMap::new(),
            ema: ParamMap::new(),
            opt: AdamState {
                step: manifest.opt_step,
                ..Default::default()
            },
            schedule_fingerprint: manifest.schedule_fingerprint,
        };
        for e in manifest.tensors {
            let start = e.offset as usize;
            if start > bytes.len() {
                return Err(Error::Blob(format!("{}: offset {start} past end", blob_path.display())));
            }
            let t = blob::from_bytes(&bytes[start..])?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Blob(format!("{}: shape mismatch for {}", blob_path.display(), e.name)));
            }
            let map = match e.group.as_str() {
                "params" => &mut ck.params,
                "ema" => &mut ck.ema,
                "adam_m" => &mut ck.opt.m,
                "adam_v" => &mut ck.opt.v,
                other => return Err(Error::Blob(format!("unknown tensor group {other}"))),
            };
            map.insert(e.name, t);
        }
        for (name, shape) in ck.config.param_shapes() {
            for (group, map) in ck.groups() {
                match map.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    _ => return Err(Error::Blob(format!("{group}.{name} missing or misshapen"))),
                }
            }
        }
        Ok(ck)
    }

    pub fn kind(&self) -> PredictionKind {
        self.config.kind
    }
}

impl Denoiser for Checkpoint {
    fn kind(&self) -> PredictionKind {
        self.config.kind
    }
    fn patch_size(&self) -> usize {
        self.config.patch
    }
    fn schedule_fingerprint(&self) -> Option<&str> {
        Some(&self.schedule_fingerprint)
    }
    fn predict(&self, z: &Tensor, timesteps: &[usize], classes: Option<&[usize]>) -> Result<Prediction> {
        self.network(false).predict(z, timesteps, classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_bit_exact() {
        let cfg = DenoiserConfig {
            classes: Some(2),
            ..Default::default()
        };
        let mut ck = Checkpoint::init(cfg, "abc", &mut RngStream::new(4, 0)).unwrap();
        ck.opt.step = 17;
        ck.opt.m.get_mut("embed.w").unwrap().data_mut()[0] = 0.1 + 0.2;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        ck.save(&p).unwrap();
        assert!(dir.path().join("model.bin").exists());
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn load_rejects_missing_tensor() {
        let ck = Checkpoint::init(DenoiserConfig::default(), "x", &mut RngStream::new(4, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        ck.save(&p).unwrap();
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        m["tensors"].as_array_mut().unwrap().pop();
        fs::write(&p, m.to_string()).unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
