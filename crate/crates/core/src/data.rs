//! Datasets, image I/O and the raw tensor container.
//!
//! Images are held as one `[N, H, W, C]` tensor with values in `[-1, 1]`.
//! 8-bit sources map through `x / 127.5 − 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"CDT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    SyntheticGaussian,
    SyntheticPatterns,
    Folder,
    TensorFile,
}

/// The `[data]` block of an experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Source for `folder` and `tensor_file`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Item count for synthetic sets.
    #[serde(default = "default_n")]
    pub n: usize,
    pub image_size: usize,
    pub channels: usize,
    #[serde(default)]
    pub seed: u64,
    /// Mean of `synthetic_gaussian`.
    #[serde(default)]
    pub mean: f64,
    /// Standard deviation of `synthetic_gaussian`.
    #[serde(default = "default_std")]
    pub std: f64,
    /// Half-width of the uniform per-pixel jitter of `synthetic_patterns`.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_n() -> usize {
    4096
}

fn default_std() -> f64 {
    0.3
}

fn default_jitter() -> f64 {
    0.1
}

impl DataConfig {
    pub fn patterns(n: usize, image_size: usize, seed: u64) -> Self {
        Self {
            kind: DataKind::SyntheticPatterns,
            path: None,
            n,
            image_size,
            channels: 1,
            seed,
            mean: 0.0,
            std: default_std(),
            jitter: default_jitter(),
        }
    }
}

/// Parameters of a synthetic set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Synthetic {
    /// `N(mean, std²)` per element, clipped to `[-1, 1]`.
    Gaussian { mean: f64, std: f64 },
    /// A fixed motif plus uniform jitter in `[-jitter, jitter]`, clipped.
    Patterns { jitter: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    kind: DataKind,
    /// Motif index per item for `synthetic_patterns`.
    labels: Vec<usize>,
}

impl Dataset {
    pub fn from_tensor(images: Tensor<f32>, kind: DataKind) -> Result<Self> {
        ensure!(images.rank() == 4 && images.batch() >= 1, "dataset tensor must be [N, H, W, C] with N >= 1");
        ensure!(
            images.data().iter().all(|v| (-1.0..=1.0).contains(v)),
            "dataset values must lie in [-1, 1]"
        );
        Ok(Self {
            images,
            kind,
            labels: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers the given items into one batch.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let [h, w, c] = self.image_shape();
        Tensor::new([indices.len(), h, w, c], data).expect("sized from shape")
    }
}

pub const MOTIF_COUNT: usize = 6;

/// Motif `k` sampled at `(y, x)` of an `s × s` grid, in `[-1, 1]`.
fn motif(k: usize, y: usize, x: usize, s: usize) -> f32 {
    // Work in 8×8 motif coordinates so every size shows the same shapes.
    let (v, u) = ((y * 8) / s, (x * 8) / s);
    let (fy, fx) = (v as f32 - 3.5, u as f32 - 3.5);
    let on = match k {
        0 => (v / 2) % 2 == 0,
        1 => (u / 2) % 2 == 0,
        2 => (v / 2 + u / 2) % 2 == 0,
        3 => fy * fy + fx * fx < 6.0,
        4 => (u + v) % 4 < 2,
        _ => {
            let r2 = fy * fy + fx * fx;
            (5.0..13.0).contains(&r2)
        }
    };
    if on {
        0.8
    } else {
        -0.8
    }
}

/// Noise-free motif `k` as an `[s, s, c]` tensor.
pub fn motif_image(k: usize, size: usize, channels: usize) -> Tensor<f32> {
    Tensor::from_fn([size, size, channels], |i| {
        let p = i / channels;
        motif(k, p / size, p % size, size)
    })
}

pub fn make_synthetic(kind: Synthetic, n: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    ensure!(n >= 1, "synthetic dataset needs n >= 1");
    let [h, w, c] = shape;
    ensure!(h >= 1 && w >= 1 && c >= 1, "empty image shape {shape:?}");
    let per = h * w * c;
    match kind {
        Synthetic::Gaussian { mean, std } => {
            ensure!(std >= 0.0 && std.is_finite() && mean.is_finite(), "invalid gaussian parameters");
            let mut r = rng::stream(seed, "synthetic-gaussian", 0);
            let z: Tensor<f64> = rng::normal_tensor(&mut r, &[n, h, w, c]);
            let images = z.map(|v| (mean + std * v).clamp(-1.0, 1.0)).cast();
            Dataset::from_tensor(images, DataKind::SyntheticGaussian)
        }
        Synthetic::Patterns { jitter } => {
            ensure!((0.0..=1.0).contains(&jitter), "jitter must lie in [0, 1]");
            ensure!(h == w, "pattern images must be square");
            let mut r = rng::stream(seed, "synthetic-patterns", 0);
            let motifs: Vec<Tensor<f32>> = (0..MOTIF_COUNT).map(|k| motif_image(k, h, c)).collect();
            let mut data = Vec::with_capacity(n * per);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let k = r.random_range(0..MOTIF_COUNT);
                labels.push(k);
                for &m in motifs[k].data() {
                    let j = if jitter > 0.0 { r.random_range(-jitter..=jitter) } else { 0.0 };
                    data.push((f64::from(m) + j).clamp(-1.0, 1.0) as f32);
                }
            }
            let mut ds = Dataset::from_tensor(Tensor::new([n, h, w, c], data)?, DataKind::SyntheticPatterns)?;
            ds.labels = labels;
            Ok(ds)
        }
    }
}

/// Builds the dataset a config describes.
pub fn load_dataset(cfg: &DataConfig) -> Result<Dataset> {
    let shape = [cfg.image_size, cfg.image_size, cfg.channels];
    let ds = match cfg.kind {
        DataKind::SyntheticGaussian => make_synthetic(
            Synthetic::Gaussian {
                mean: cfg.mean,
                std: cfg.std,
            },
            cfg.n,
            shape,
            cfg.seed,
        )?,
        DataKind::SyntheticPatterns => make_synthetic(Synthetic::Patterns { jitter: cfg.jitter }, cfg.n, shape, cfg.seed)?,
        DataKind::Folder | DataKind::TensorFile => {
            let path = cfg
                .path
                .as_deref()
                .ok_or_else(|| Error::Config(format!("data.path is required for {:?}", cfg.kind)))?;
            let ds = if cfg.kind == DataKind::Folder {
                load_folder(path)?
            } else {
                Dataset::from_tensor(load_tensor(path)?, DataKind::TensorFile)?
            };
            if ds.image_shape() != shape {
                return Err(Error::Config(format!(
                    "data at {} has shape {:?}, config says {shape:?}",
                    path.display(),
                    ds.image_shape()
                )));
            }
            ds
        }
    };
    Ok(ds)
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

/// Decodes an 8-bit PNG to `[H, W, C]` in `[-1, 1]`. Alpha is dropped.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (src_c, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(png_err(path, "unexpanded palette image")),
    };
    let bytes = &buf[..info.buffer_size()];
    let mut data = Vec::with_capacity(w * h * keep);
    for px in bytes.chunks_exact(src_c) {
        data.extend(px[..keep].iter().map(|&b| f32::from(b) / 127.5 - 1.0));
    }
    Tensor::new([h, w, keep], data)
}

/// Encodes `[H, W, C]` (`C` = 1 or 3) values in `[-1, 1]` as an 8-bit PNG,
/// rounding to nearest.
pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    ensure!(image.rank() == 3, "write_png expects [H, W, C]");
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::invalid(format!("cannot encode {c} channels as PNG"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// `[-1, 1] → [0, 255]`, rounding to nearest.
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Loads every `*.png` in `dir` (sorted by name).
pub fn load_folder(dir: &Path) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    ensure!(!paths.is_empty(), "no PNG files in {}", dir.display());
    let images = paths.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
    let shape = images[0].shape().to_vec();
    for (img, p) in images.iter().zip(&paths) {
        if img.shape() != shape {
            return Err(png_err(p, format!("shape {:?} differs from {shape:?}", img.shape())));
        }
    }
    let parts: Vec<Tensor<f32>> = images
        .into_iter()
        .map(|t| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshape(s).expect("same numel")
        })
        .collect();
    Dataset::from_tensor(Tensor::concat_batch(&parts)?, DataKind::Folder)
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::format("payload", e.to_string()))?;
    let mut pos = 0usize;
    let mut take = |n: usize, field: &str| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::format(field, "unexpected end of data"))?;
        pos += n;
        Ok(s)
    };
    if take(4, "magic")? != TENSOR_MAGIC {
        return Err(Error::format("magic", "expected CDT1"));
    }
    let word = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
    let rank = word(take(8, "rank")?);
    if rank > 8 {
        return Err(Error::format("rank", format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for j in 0..rank as usize {
        dims.push(word(take(8, &format!("dims[{j}]"))?) as usize);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format("dims", "element count overflows"))?;
    let rest = bytes.len() - pos;
    if numel.checked_mul(4) != Some(rest) {
        return Err(Error::format(
            "payload",
            format!("dims imply {numel} floats but {rest} bytes remain"),
        ));
    }
    let data = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(dims, data)
}

pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(BufReader::new(file)).map_err(|e| match e {
        Error::Format { field, message } => Error::Format {
            field,
            message: format!("{message} (in {})", path.display()),
        },
        other => other,
    })
}

/// Seeded epoch-wise shuffling. Batch `s` covers positions
/// `s·B .. (s+1)·B` of the concatenated epoch permutations, so any step's
/// batch can be recomputed without replaying earlier ones.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        ensure!(n >= 1 && batch >= 1, "batch sampler needs n >= 1 and batch >= 1");
        Ok(Self {
            n,
            batch,
            seed,
            cached: None,
        })
    }

    /// Item order of `epoch`.
    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut rng::stream(self.seed, "data-order", epoch));
        idx
    }

    pub fn indices(&mut self, step: u64) -> Vec<usize> {
        let start = step * self.batch as u64;
        (start..start + self.batch as u64)
            .map(|p| {
                let epoch = p / self.n as u64;
                if self.cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    self.cached = Some((epoch, self.permutation(epoch)));
                }
                self.cached.as_ref().expect("just filled").1[(p % self.n as u64) as usize]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_container_round_trip() {
        let t = Tensor::from_fn([2, 3, 1], |i| i as f32 * -0.25);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(read_tensor(&buf[..]).unwrap(), t);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor(&bad[..]), Err(Error::Format { field, .. }) if field == "magic"));
        let short = &buf[..buf.len() - 4];
        assert!(matches!(read_tensor(short), Err(Error::Format { field, .. }) if field == "payload"));
    }

    #[test]
    fn patterns_stay_near_their_motif() {
        let ds = make_synthetic(Synthetic::Patterns { jitter: 0.1 }, 50, [8, 8, 1], 4).unwrap();
        for (i, &k) in ds.labels().iter().enumerate() {
            let item = ds.gather(&[i]);
            let m = motif_image(k, 8, 1);
            let dev = item.data().iter().zip(m.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(dev <= 0.1 + 1e-6);
        }
        let again = make_synthetic(Synthetic::Patterns { jitter: 0.1 }, 50, [8, 8, 1], 4).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn motifs_are_distinct() {
        for a in 0..MOTIF_COUNT {
            for b in a + 1..MOTIF_COUNT {
                assert_ne!(motif_image(a, 8, 1), motif_image(b, 8, 1), "{a} {b}");
            }
        }
    }

    #[test]
    fn epoch_permutations_cover_every_item() {
        let mut s = BatchSampler::new(10, 4, 1).unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|k| s.indices(k)).collect();
        let first: Vec<usize> = seen.drain(..10).collect();
        let mut sorted = first.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(s.indices(1), BatchSampler::new(10, 4, 1).unwrap().indices(1));
    }

    #[test]
    fn pixel_mapping_endpoints() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(0u8 as f32 / 127.5 - 1.0, -1.0);
        assert_eq!(255u8 as f32 / 127.5 - 1.0, 1.0);
    }
}
