//! Datasets and batching. Samples are rank-2 [N, D] tensors with every
//! value in [0, 1]; image datasets come from IDX files (big-endian magic,
//! extents, u8 payload scaled by 1/255) and synthetic 2-D clouds are
//! generated into the unit square directly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{SeedTree, Stream, StreamTag};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Tensor,
    labels: Option<Vec<u8>>,
    /// (rows, cols) when the samples are raster images.
    image_dims: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Option<Vec<u8>>) -> Result<Self> {
        if samples.shape().len() != 2 {
            return Err(Error::shape("Dataset::new", format!("{:?}", samples.shape())));
        }
        if !samples.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::Contract("dataset values must lie in [0, 1]".to_string()));
        }
        if let Some(l) = &labels {
            if l.len() != samples.rows() {
                return Err(Error::Contract(format!(
                    "{} labels for {} samples",
                    l.len(),
                    samples.rows()
                )));
            }
        }
        Ok(Dataset { samples, labels, image_dims: None })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.image_dims
    }

    /// Rows `idx` as a batch tensor.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        self.samples.gather_rows(idx)
    }

    /// The first `n` samples (all of them when `n` is 0 or exceeds the set).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n >= self.len() {
            return Ok(self.clone());
        }
        let idx: Vec<usize> = (0..n).collect();
        let mut ds = Dataset::new(self.samples.gather_rows(&idx)?, self.labels.as_ref().map(|l| l[..n].to_vec()))?;
        ds.image_dims = self.image_dims;
        Ok(ds)
    }
}

fn read_u32_be(bytes: &[u8], off: usize, path: &Path, what: &str) -> Result<u32> {
    if off + 4 > bytes.len() {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: off as u64,
            detail: format!("unexpected end of file reading {what}"),
        });
    }
    Ok(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()))
}

/// Loads an IDX image file, optionally with its label file. Pixel bytes are
/// scaled to [0, 1] by 1/255.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let bytes = fs::read(images).map_err(|e| Error::io(images.display().to_string(), e))?;
    let magic = read_u32_be(&bytes, 0, images, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            path: images.display().to_string(),
            offset: 0,
            detail: format!("bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"),
        });
    }
    let n = read_u32_be(&bytes, 4, images, "count")? as usize;
    let rows = read_u32_be(&bytes, 8, images, "row extent")? as usize;
    let cols = read_u32_be(&bytes, 12, images, "column extent")? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Format {
            path: images.display().to_string(),
            offset: bytes.len() as u64,
            detail: format!("payload ends early, expected {need} bytes"),
        });
    }
    let data: Vec<f64> = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let samples = Tensor::new(vec![n, rows * cols], data)?;

    let labels = match labels {
        None => None,
        Some(lp) => {
            let lb = fs::read(lp).map_err(|e| Error::io(lp.display().to_string(), e))?;
            let lmagic = read_u32_be(&lb, 0, lp, "magic")?;
            if lmagic != LABEL_MAGIC {
                return Err(Error::Format {
                    path: lp.display().to_string(),
                    offset: 0,
                    detail: format!("bad label magic 0x{lmagic:08x}, expected 0x{LABEL_MAGIC:08x}"),
                });
            }
            let ln = read_u32_be(&lb, 4, lp, "count")? as usize;
            if ln != n {
                return Err(Error::Format {
                    path: lp.display().to_string(),
                    offset: 4,
                    detail: format!("{ln} labels for {n} images"),
                });
            }
            if lb.len() < 8 + ln {
                return Err(Error::Format {
                    path: lp.display().to_string(),
                    offset: lb.len() as u64,
                    detail: "label payload ends early".to_string(),
                });
            }
            Some(lb[8..8 + ln].to_vec())
        }
    };

    let mut ds = Dataset::new(samples, labels)?;
    ds.image_dims = Some((rows, cols));
    Ok(ds)
}

/// Writes a dataset back to IDX. Sample values are mapped to bytes by
/// round(v * 255); loading a file and saving it again reproduces the file
/// byte for byte.
pub fn save_idx(ds: &Dataset, images: &Path, labels: Option<&Path>) -> Result<()> {
    let (rows, cols) = ds.image_dims().ok_or_else(|| {
        Error::Contract("save_idx needs an image dataset (load_idx or set dims)".to_string())
    })?;
    let n = ds.len();
    let mut bytes = Vec::with_capacity(16 + n * rows * cols);
    bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in ds.samples().data() {
        bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(images, bytes).map_err(|e| Error::io(images.display().to_string(), e))?;

    if let Some(lp) = labels {
        let l = ds
            .labels()
            .ok_or_else(|| Error::Contract("dataset has no labels to save".to_string()))?;
        let mut lb = Vec::with_capacity(8 + l.len());
        lb.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(l.len() as u32).to_be_bytes());
        lb.extend_from_slice(l);
        fs::write(lp, lb).map_err(|e| Error::io(lp.display().to_string(), e))?;
    }
    Ok(())
}

/// Synthetic 2-D families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    TwoMoons,
    /// k x k lattice of isotropic Gaussians.
    GaussianGrid { k: usize },
}

/// Grid component centers sit at ((i + 1/2)/k, (j + 1/2)/k); this is the
/// per-axis standard deviation, chosen so 7.5 sigma fits inside the margin.
pub fn grid_sigma(k: usize) -> f64 {
    1.0 / (15.0 * k as f64)
}

/// Deterministic 2-D cloud of `n` points in the unit square; labels carry
/// the component (grid cell or moon index).
pub fn synth_2d(kind: SynthKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("synth_2d needs n > 0".to_string()));
    }
    let mut stream = SeedTree::new(seed).stream(StreamTag::DataSynth, 0);
    match kind {
        SynthKind::GaussianGrid { k } => {
            if k == 0 || k * k > 256 {
                return Err(Error::Contract(format!("grid k must be in 1..=16, got {k}")));
            }
            let sigma = grid_sigma(k);
            let mut data = Vec::with_capacity(n * 2);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let c = stream.below(k * k);
                let (i, j) = (c % k, c / k);
                let noise = stream.normal_vec(2);
                let x = ((i as f64 + 0.5) / k as f64 + sigma * noise[0]).clamp(0.0, 1.0);
                let y = ((j as f64 + 0.5) / k as f64 + sigma * noise[1]).clamp(0.0, 1.0);
                data.push(x);
                data.push(y);
                labels.push(c as u8);
            }
            Dataset::new(Tensor::new(vec![n, 2], data)?, Some(labels))
        }
        SynthKind::TwoMoons => {
            let noise_sd = 0.05;
            let mut raw = Vec::with_capacity(n * 2);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let t = stream.uniform_vec(1)[0] * std::f64::consts::PI;
                let moon = stream.below(2);
                let noise = stream.normal_vec(2);
                let (mut x, mut y) = if moon == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                x += noise_sd * noise[0];
                y += noise_sd * noise[1];
                raw.push(x);
                raw.push(y);
                labels.push(moon as u8);
            }
            // Per-axis min-max rescale into the unit square.
            for axis in 0..2 {
                let vals: Vec<f64> = raw.iter().skip(axis).step_by(2).copied().collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let span = if hi > lo { hi - lo } else { 1.0 };
                for v in raw.iter_mut().skip(axis).step_by(2) {
                    *v = (*v - lo) / span;
                }
            }
            Dataset::new(Tensor::new(vec![n, 2], raw)?, Some(labels))
        }
    }
}

/// One epoch of index batches under a seeded permutation. A short final
/// batch is kept as long as it has at least 2 indices (the residual
/// variance estimator needs that many); a leftover singleton is dropped.
pub struct BatchIterator {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, stream: &mut Stream) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Contract(format!(
                "batch_size must be at least 2, got {batch_size}"
            )));
        }
        Ok(BatchIterator {
            order: stream.permutation(n),
            batch_size,
            pos: 0,
        })
    }

    pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
        n / batch_size + usize::from(n % batch_size >= 2)
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let end = (self.pos + self.batch_size).min(self.order.len());
        if end - self.pos < 2 {
            return None;
        }
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(b)
    }
}
