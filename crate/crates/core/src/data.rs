//! Dataset readers (MNIST IDX, CIFAR-10 binary), a procedural toy corpus,
//! and shuffled batching.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;
pub const CIFAR_RECORD: usize = 3073;
pub const IMAGE_SIZE: usize = 32;
/// Environment variable naming the directory that holds dataset files.
pub const DATA_ROOT_ENV: &str = "CDIFF_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Mnist,
    Cifar10,
    Synthetic,
}

/// Images as an `(N, C, H, W)` f32 tensor with values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub split: Split,
    pub source: Source,
}

impl Dataset {
    pub fn new(images: Tensor, split: Split, source: Source) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!("dataset images must be (N, C, H, W), got {:?}", images.dims())));
        }
        Ok(Dataset { images, split, source })
    }

    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.dims()[1]
    }

    /// First `n` images (or all of them if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Ok(Dataset {
            images: self.images.narrow(0, 0, n)?,
            ..self.clone()
        })
    }

    /// Gather a batch by index.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("index {bad} out of range for {n} images")));
        }
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, indices.len(), self.images.device())?;
        Ok(self.images.index_select(&idx, 0)?)
    }

    /// Bilinearly resample every image to `size × size`.
    pub fn resized(&self, size: usize) -> Result<Dataset> {
        let (n, c, h, w) = self.images.dims4()?;
        if size == 0 {
            return Err(Error::InvalidArgument("target size must be positive".into()));
        }
        if (h, w) == (size, size) {
            return Ok(self.clone());
        }
        let src = self.images.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let plane = h * w;
        let out: Vec<f32> = src
            .chunks_exact(plane)
            .flat_map(|p| resize_bilinear(p, h, w, size, size))
            .collect();
        Ok(Dataset {
            images: Tensor::from_vec(out, (n, c, size, size), self.images.device())?,
            ..self.clone()
        })
    }

    pub fn to_device(&self, device: &Device, dtype: DType) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.to_dtype(dtype)?.to_device(device)?,
            ..self.clone()
        })
    }
}

fn scale_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let chunk = bytes.get(at..at + 4).ok_or(Error::Truncated {
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("slice of length 4")))
}

/// Raw IDX image file contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Raw IDX label file contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxLabels {
    pub labels: Vec<u8>,
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { found, expected });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize) -> Result<&'a [u8]> {
    let expected = header.checked_add(len).ok_or_else(|| Error::DimOverflow(vec![len as u32]))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(&bytes[header..expected])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGE_MAGIC)?;
    let dims = [read_u32(bytes, 4)?, read_u32(bytes, 8)?, read_u32(bytes, 12)?];
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|&n| n <= isize::MAX as usize)
        .ok_or_else(|| Error::DimOverflow(dims.to_vec()))?;
    let pixels = payload(bytes, 16, len)?.to_vec();
    Ok(IdxImages {
        count: dims[0] as usize,
        rows: dims[1] as usize,
        cols: dims[2] as usize,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<IdxLabels> {
    check_magic(bytes, IDX_LABEL_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    Ok(IdxLabels {
        labels: payload(bytes, 8, n)?.to_vec(),
    })
}

pub fn serialize_idx_images(images: &IdxImages) -> Result<Vec<u8>> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::Shape(format!(
            "{} pixels for {}x{}x{}",
            images.pixels.len(),
            images.count,
            images.rows,
            images.cols
        )));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    Ok(out)
}

pub fn serialize_idx_labels(labels: &IdxLabels) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.labels.len() as u32).to_be_bytes());
    out.extend_from_slice(&labels.labels);
    out
}

impl IdxImages {
    /// First `n` images.
    pub fn subset(&self, n: usize) -> IdxImages {
        let n = n.min(self.count);
        IdxImages {
            count: n,
            pixels: self.pixels[..n * self.rows * self.cols].to_vec(),
            ..*self
        }
    }

    /// Scale to `[-1, 1]` and resize each image to 32×32.
    pub fn to_dataset(&self, split: Split) -> Result<Dataset> {
        let plane = self.rows * self.cols;
        let mut out = Vec::with_capacity(self.count * IMAGE_SIZE * IMAGE_SIZE);
        for i in 0..self.count {
            let img: Vec<f32> = self.pixels[i * plane..(i + 1) * plane].iter().map(|&b| scale_byte(b)).collect();
            out.extend(resize_bilinear(&img, self.rows, self.cols, IMAGE_SIZE, IMAGE_SIZE));
        }
        let images = Tensor::from_vec(out, (self.count, 1, IMAGE_SIZE, IMAGE_SIZE), &Device::Cpu)?;
        Dataset::new(images, split, Source::Mnist)
    }
}

/// Parse an IDX image file into a `(N, 1, 32, 32)` dataset.
pub fn parse_idx(bytes: &[u8], split: Split) -> Result<Dataset> {
    parse_idx_images(bytes)?.to_dataset(split)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if h == oh && w == ow {
        return src.to_vec();
    }
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (pos.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = coords(h, oh);
    let xs = coords(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Parse concatenated CIFAR-10 binary records. Labels are dropped.
pub fn parse_cifar_bin(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::RecordLength {
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let data: Vec<f32> = bytes
        .chunks_exact(CIFAR_RECORD)
        .flat_map(|rec| rec[1..].iter().map(|&b| scale_byte(b)))
        .collect();
    let images = Tensor::from_vec(data, (n, 3, IMAGE_SIZE, IMAGE_SIZE), &Device::Cpu)?;
    Dataset::new(images, split, Source::Cifar10)
}

/// Procedural `(1, 32, 32)` images: one filled rectangle or disc on a dark
/// background.
pub mod toy {
    pub const BACKGROUND: f32 = -1.0;
    pub const RECT_SIDE: (usize, usize) = (4, 16);
    pub const DISC_RADIUS: (usize, usize) = (3, 8);
    pub const INTENSITY: (f32, f32) = (-0.2, 1.0);
}

fn draw_toy<R: Rng + ?Sized>(rng: &mut R, out: &mut [f32]) {
    let s = IMAGE_SIZE;
    out.fill(toy::BACKGROUND);
    let value = rng.random_range(toy::INTENSITY.0..toy::INTENSITY.1);
    if rng.random_bool(0.5) {
        let wd = rng.random_range(toy::RECT_SIDE.0..=toy::RECT_SIDE.1);
        let ht = rng.random_range(toy::RECT_SIDE.0..=toy::RECT_SIDE.1);
        let x0 = rng.random_range(0..=s - wd);
        let y0 = rng.random_range(0..=s - ht);
        for y in y0..y0 + ht {
            out[y * s + x0..y * s + x0 + wd].fill(value);
        }
    } else {
        let r = rng.random_range(toy::DISC_RADIUS.0..=toy::DISC_RADIUS.1);
        let cx = rng.random_range(r..s - r) as i64;
        let cy = rng.random_range(r..s - r) as i64;
        let r = r as i64;
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                    out[y as usize * s + x as usize] = value;
                }
            }
        }
    }
}

/// `n` toy images, deterministic under the generator state.
pub fn synthetic_toy<R: Rng + ?Sized>(n: usize, split: Split, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic_toy needs n >= 1".into()));
    }
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0.0f32; n * plane];
    for img in data.chunks_exact_mut(plane) {
        draw_toy(rng, img);
    }
    let images = Tensor::from_vec(data, (n, 1, IMAGE_SIZE, IMAGE_SIZE), &Device::Cpu)?;
    Dataset::new(images, split, Source::Synthetic)
}

/// Lattice points with `dx² + dy² ≤ r²`.
fn disc_area(r: usize) -> usize {
    let r = r as i64;
    (-r..=r)
        .flat_map(|y| (-r..=r).map(move |x| (x, y)))
        .filter(|(x, y)| x * x + y * y <= r * r)
        .count()
}

/// Expected pixel value of [`synthetic_toy`] images, averaged over pixels.
pub fn synthetic_toy_mean() -> f64 {
    let mean_over = |lo: usize, hi: usize, f: &dyn Fn(usize) -> f64| {
        (lo..=hi).map(f).sum::<f64>() / (hi - lo + 1) as f64
    };
    let side = mean_over(toy::RECT_SIDE.0, toy::RECT_SIDE.1, &|v| v as f64);
    let rect_area = side * side;
    let disc = mean_over(toy::DISC_RADIUS.0, toy::DISC_RADIUS.1, &|r| disc_area(r) as f64);
    let area = 0.5 * rect_area + 0.5 * disc;
    let lift = 0.5 * (toy::INTENSITY.0 + toy::INTENSITY.1) as f64 - toy::BACKGROUND as f64;
    toy::BACKGROUND as f64 + area / (IMAGE_SIZE * IMAGE_SIZE) as f64 * lift
}

/// Shuffled index batches covering `0..n` once per epoch. The final batch may
/// be smaller.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Dataset directory from the environment, if set.
pub fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).filter(|p| !p.as_os_str().is_empty())
}

fn read_first(root: &Path, names: &[&str]) -> Result<Vec<u8>> {
    for name in names {
        let path = root.join(name);
        if path.is_file() {
            return Ok(std::fs::read(path)?);
        }
    }
    Err(Error::Dataset(format!("none of {names:?} found under {}", root.display())))
}

pub fn load_mnist(root: &Path, split: Split) -> Result<Dataset> {
    let names: &[&str] = match split {
        Split::Train => &["train-images-idx3-ubyte", "train-images.idx3-ubyte", "mnist/train-images-idx3-ubyte"],
        Split::Test => &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte", "mnist/t10k-images-idx3-ubyte"],
    };
    parse_idx(&read_first(root, names)?, split)
}

pub fn load_cifar10(root: &Path, split: Split) -> Result<Dataset> {
    let dir = if root.join("cifar-10-batches-bin").is_dir() {
        root.join("cifar-10-batches-bin")
    } else {
        root.to_path_buf()
    };
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut bytes = Vec::new();
    for f in &files {
        bytes.extend(read_first(&dir, &[f.as_str()])?);
    }
    parse_cifar_bin(&bytes, split)
}
