//! Dataset ingestion (PPM/PGM, IDX, synthetic) and image output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::EmpiricalDataset;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub fn byte_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// A decoded image in `(H, W, C)` layout, values in `[-1, 1]`.
pub type Image = Tensor;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("number out of range"))
    }
}

/// Parses binary PPM (P6) or PGM (P5) with maxval up to 255.
pub fn parse_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut h = Header { bytes, pos: 0, path };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(h.err("expected magic P6 or P5")),
    };
    h.pos = 2;
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(h.err(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(h.err("zero image extent"));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(h.err("expected whitespace before raster")),
    }
    let need = width * height * channels;
    let raster = &bytes[h.pos..];
    if raster.len() < need {
        h.pos = bytes.len();
        return Err(h.err(format!("raster truncated: need {need} bytes, have {}", raster.len())));
    }
    let scale = 255.0 / maxval as f64;
    let data = raster[..need]
        .iter()
        .map(|&v| {
            if maxval == 255 {
                byte_to_unit(v)
            } else {
                (v as f64 * scale) / 127.5 - 1.0
            }
        })
        .collect();
    Tensor::new(&[height, width, channels], data)
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    parse_pnm(&fs::read(path)?, path)
}

/// Encodes an `(H, W, C)` image with C = 1 (PGM) or C = 3 (PPM).
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let (h, w, c) = match *img.shape() {
        [h, w, c] => (h, w, c),
        _ => {
            return Err(Error::InvalidShape {
                shape: img.shape().to_vec(),
                reason: "expected (H, W, C)".into(),
            })
        }
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::InvalidShape {
                shape: img.shape().to_vec(),
                reason: "PNM output needs 1 or 3 channels".into(),
            })
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| unit_to_byte(v)));
    Ok(out)
}

pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_pnm(img)?)?;
    Ok(())
}

/// Tiles a batch `(N, H, W, C)` into a grid with `cols` columns and a
/// `pad`-pixel white border between cells.
pub fn grid(batch: &Tensor, cols: usize, pad: usize) -> Result<Image> {
    let (n, h, w, c) = batch.dims4()?;
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let gh = rows * h + (rows + 1) * pad;
    let gw = cols * w + (cols + 1) * pad;
    let mut out = Tensor::full(&[gh, gw, c], 1.0);
    for i in 0..n {
        let (r, col) = (i / cols, i % cols);
        let (oy, ox) = (pad + r * (h + pad), pad + col * (w + pad));
        let item = batch.item(i);
        for y in 0..h {
            let dst = ((oy + y) * gw + ox) * c;
            out.data_mut()[dst..dst + w * c].copy_from_slice(&item[y * w * c..(y + 1) * w * c]);
        }
    }
    Ok(out)
}

/// Parses an IDX unsigned-byte file of rank 3 (images) or 1 (labels).
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let err = |offset: usize, reason: String| Error::Malformed {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    if bytes.len() < 4 {
        return Err(err(0, "missing IDX magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(err(0, format!("expected unsigned-byte IDX magic, found {:02x?}", &bytes[..4])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(err(3, "rank 0".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        let o = 4 + 4 * k;
        let d = bytes
            .get(o..o + 4)
            .ok_or_else(|| err(o, "truncated dimension header".into()))?;
        dims.push(u32::from_be_bytes([d[0], d[1], d[2], d[3]]) as usize);
    }
    let start = 4 + 4 * rank;
    let need: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < need {
        return Err(err(bytes.len(), format!("payload truncated: need {need} bytes, have {have}")));
    }
    Ok((dims, bytes[start..start + need].to_vec()))
}

/// IDX images `(N, H, W)` as `(N, H, W, 1)`, with optional IDX labels.
pub fn load_idx(images: &Path, labels: Option<&Path>, limit: Option<usize>) -> Result<EmpiricalDataset> {
    let (dims, raw) = parse_idx(&fs::read(images)?, images)?;
    if dims.len() != 3 {
        return Err(Error::Malformed {
            path: images.to_path_buf(),
            offset: 3,
            reason: format!("expected rank-3 images (magic 0x00000803), got rank {}", dims.len()),
        });
    }
    let n = limit.map_or(dims[0], |l| l.min(dims[0]));
    let per = dims[1] * dims[2];
    let data = raw[..n * per].iter().map(|&v| byte_to_unit(v)).collect();
    let examples = Tensor::new(&[n, dims[1], dims[2], 1], data)?;
    let labels = match labels {
        Some(p) => {
            let (ld, lraw) = parse_idx(&fs::read(p)?, p)?;
            if ld.len() != 1 || ld[0] < n {
                return Err(Error::Dataset(format!("{}: label file does not cover {n} images", p.display())));
            }
            Some(lraw[..n].iter().map(|&v| v as usize).collect())
        }
        None => None,
    };
    EmpiricalDataset::new(examples, labels)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

fn is_pnm(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("ppm" | "pgm" | "pnm")
    )
}

/// Loads every PPM/PGM under `dir` in lexicographic order. Subdirectories,
/// if present, are classes (labelled in lexicographic order).
pub fn load_pnm_dir(dir: &Path) -> Result<EmpiricalDataset> {
    let entries = sorted_entries(dir)?;
    let subdirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut items = Vec::new();
    let mut labels = Vec::new();
    if subdirs.is_empty() {
        for p in entries.iter().filter(|p| is_pnm(p)) {
            items.push(read_pnm(p)?);
        }
    } else {
        for (class, sub) in subdirs.iter().enumerate() {
            for p in sorted_entries(sub)?.iter().filter(|p| is_pnm(p)) {
                items.push(read_pnm(p)?);
                labels.push(class);
            }
        }
    }
    if items.is_empty() {
        return Err(Error::Dataset(format!("{}: no PPM/PGM images", dir.display())));
    }
    EmpiricalDataset::from_items(&items, (!labels.is_empty()).then_some(labels))
}

/// `two_point(a, dims)`: the examples `+a` and `-a` (all coordinates),
/// labelled 0 and 1.
pub fn two_point(a: f64, dims: usize) -> Result<EmpiricalDataset> {
    let mut data = vec![a; dims];
    data.extend(std::iter::repeat_n(-a, dims));
    EmpiricalDataset::new(Tensor::new(&[2, dims], data)?, Some(vec![0, 1]))
}

/// Two-mode smooth images: class 0 is a bright disk on a dark ground,
/// class 1 a dark bar on a bright ground, each with random placement,
/// size and tint. Examples alternate between the classes.
pub fn toy_images(count: usize, size: usize, channels: usize, seed: u64) -> Result<EmpiricalDataset> {
    if count == 0 || size == 0 || channels == 0 {
        return Err(Error::Dataset("toy images need positive count, size and channels".into()));
    }
    let mut rng = RngStream::named(seed, "data/toy");
    let s = size as f64;
    let mut data = Vec::with_capacity(count * size * size * channels);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % 2;
        let cy = s * (0.25 + 0.5 * rng.uniform());
        let cx = s * (0.25 + 0.5 * rng.uniform());
        let r = s * (0.15 + 0.2 * rng.uniform());
        let tint: Vec<f64> = (0..channels).map(|_| 0.6 + 0.4 * rng.uniform()).collect();
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = if class == 0 {
                    let d = (dy * dy + dx * dx).sqrt();
                    1.0 / (1.0 + ((d - r) / (0.08 * s)).exp())
                } else {
                    1.0 / (1.0 + ((dy.abs() - 0.5 * r) / (0.08 * s)).exp())
                };
                for t in &tint {
                    let v = if class == 0 { -0.8 + 1.6 * inside } else { 0.8 - 1.6 * inside };
                    data.push(v * t);
                }
            }
        }
        labels.push(class);
    }
    EmpiricalDataset::new(Tensor::new(&[count, size, size, channels], data)?, Some(labels))
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    PpmDir {
        path: PathBuf,
    },
    Idx {
        path: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
    },
    TwoPoint {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "one")]
        dims: usize,
    },
    Toy {
        count: usize,
        size: usize,
        #[serde(default = "one")]
        channels: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_a() -> f64 {
    0.9
}

fn one() -> usize {
    1
}

impl DatasetSpec {
    /// Parses the CLI shorthand: `ppm:DIR`, `idx:FILE[:LABELS]`,
    /// `two_point[:A[:DIMS]]`, `toy:COUNT:SIZE[:CHANNELS[:SEED]]`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<Option<f64>> {
            parts
                .get(i)
                .map(|p| p.parse::<f64>().map_err(|_| Error::Config(format!("bad number {p:?} in dataset spec {s:?}"))))
                .transpose()
        };
        match parts[0] {
            "ppm" if parts.len() == 2 && !parts[1].is_empty() => Ok(DatasetSpec::PpmDir { path: parts[1].into() }),
            "idx" if (2..=3).contains(&parts.len()) && parts.iter().all(|p| !p.is_empty()) => Ok(DatasetSpec::Idx {
                path: parts[1].into(),
                labels: parts.get(2).map(PathBuf::from),
                limit: None,
            }),
            "two_point" if parts.len() <= 3 => Ok(DatasetSpec::TwoPoint {
                a: num(1)?.unwrap_or(0.9),
                dims: num(2)?.map_or(1, |v| v as usize),
            }),
            "toy" if (3..=5).contains(&parts.len()) => Ok(DatasetSpec::Toy {
                count: num(1)?.unwrap_or(0.0) as usize,
                size: num(2)?.unwrap_or(0.0) as usize,
                channels: num(3)?.map_or(1, |v| v as usize),
                seed: num(4)?.map_or(0, |v| v as u64),
            }),
            _ => Err(Error::Config(format!("unrecognized dataset spec {s:?}"))),
        }
    }

    pub fn load(&self) -> Result<EmpiricalDataset> {
        let ds = match self {
            DatasetSpec::PpmDir { path } => load_pnm_dir(path)?,
            DatasetSpec::Idx { path, labels, limit } => load_idx(path, labels.as_deref(), *limit)?,
            DatasetSpec::TwoPoint { a, dims } => {
                if !(a.abs() <= 1.0) {
                    return Err(Error::Dataset(format!("two_point amplitude {a} outside [-1, 1]")));
                }
                two_point(*a, *dims)?
            }
            DatasetSpec::Toy {
                count,
                size,
                channels,
                seed,
            } => toy_images(*count, *size, *channels, *seed)?,
        };
        if ds.as_tensor().data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Dataset("values outside [-1, 1] after normalization".into()));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test.pgm")
    }

    #[test]
    fn pgm_normalization() {
        let mut b = b"P5\n2 2\n255\n".to_vec();
        b.extend([0, 255, 127, 128]);
        let img = parse_pnm(&b, p()).unwrap();
        assert_eq!(img.shape(), &[2, 2, 1]);
        let want = [-1.0, 1.0, 127.0 / 127.5 - 1.0, 128.0 / 127.5 - 1.0];
        assert_eq!(img.data(), &want);
        assert!((img.data()[2] + 0.00392).abs() < 1e-5);
    }

    #[test]
    fn header_comments_and_round_trip() {
        let mut b = b"P6 # comment\n1 2\n# another\n255\n".to_vec();
        b.extend([0, 10, 20, 30, 40, 255]);
        let img = parse_pnm(&b, p()).unwrap();
        assert_eq!(img.shape(), &[2, 1, 3]);
        let again = encode_pnm(&img).unwrap();
        assert_eq!(parse_pnm(&again, p()).unwrap(), img);
    }

    #[test]
    fn malformed_reports_offset_and_name() {
        let b = b"P5\n2 x\n255\n".to_vec();
        let e = parse_pnm(&b, Path::new("bad.pgm")).unwrap_err().to_string();
        assert!(e.contains("bad.pgm") && e.contains("byte 5"), "{e}");
        let mut short = b"P5\n2 2\n255\n".to_vec();
        short.extend([1, 2]);
        assert!(parse_pnm(&short, p()).unwrap_err().to_string().contains("truncated"));
        assert!(parse_pnm(b"P3\n", p()).is_err());
    }

    #[test]
    fn byte_codec_inverts() {
        for v in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(v)), v);
        }
    }

    #[test]
    fn idx_images() {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2];
        b.extend([0, 255, 51, 204]);
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("img.idx");
        fs::write(&f, &b).unwrap();
        let lf = dir.path().join("lab.idx");
        fs::write(&lf, [0, 0, 8, 1, 0, 0, 0, 2, 3, 7]).unwrap();
        let ds = load_idx(&f, Some(&lf), None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.item_shape(), &[1, 2, 1]);
        assert_eq!(ds.example(1), &[byte_to_unit(51), byte_to_unit(204)]);
        assert_eq!(ds.labels(), Some(&[3, 7][..]));
        let mut bad = b.clone();
        bad[2] = 9;
        assert!(parse_idx(&bad, &f).is_err());
        assert!(parse_idx(&b[..18], &f).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn two_point_definition() {
        let ds = DatasetSpec::parse("two_point:0.9:1").unwrap().load().unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.example(0), &[0.9]);
        assert_eq!(ds.example(1), &[-0.9]);
    }

    #[test]
    fn toy_images_in_range_and_deterministic() {
        let a = toy_images(6, 8, 3, 1).unwrap();
        assert_eq!(a, toy_images(6, 8, 3, 1).unwrap());
        assert!(a.as_tensor().data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(a.labels().unwrap(), &[0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn directory_order_and_classes() {
        let dir = tempfile::tempdir().unwrap();
        for (sub, name, v) in [("b", "2.pgm", 200u8), ("a", "1.pgm", 100), ("a", "0.pgm", 50)] {
            fs::create_dir_all(dir.path().join(sub)).unwrap();
            let mut b = b"P5 1 1 255\n".to_vec();
            b.push(v);
            fs::write(dir.path().join(sub).join(name), b).unwrap();
        }
        let ds = load_pnm_dir(dir.path()).unwrap();
        assert_eq!(ds.labels().unwrap(), &[0, 0, 1]);
        assert_eq!(ds.example(0), &[byte_to_unit(50)]);
        assert_eq!(ds.example(2), &[byte_to_unit(200)]);
    }

    #[test]
    fn grid_layout() {
        let b = Tensor::new(&[3, 1, 1, 1], vec![-1.0, 0.0, 0.5]).unwrap();
        let g = grid(&b, 2, 1).unwrap();
        assert_eq!(g.shape(), &[5, 5, 1]);
        assert_eq!(g.data()[5 + 1], -1.0);
        assert_eq!(g.data()[5 + 3], 0.0);
        assert_eq!(g.data()[3 * 5 + 1], 0.5);
        assert_eq!(g.data()[3 * 5 + 3], 1.0);
    }
}
