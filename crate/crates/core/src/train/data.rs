//! Labeled image sets held as 8-bit planar RGB, plus batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::RgbImage;
use pn_tensor::{Element, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config, Error, Result};

/// One CIFAR record: label byte then 32×32 planes of R, G and B.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    CifarBinary,
    ImageFolder,
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::CifarBinary => "cifar-binary",
            DatasetFormat::ImageFolder => "image-folder",
        })
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar-binary" => Ok(DatasetFormat::CifarBinary),
            "image-folder" => Ok(DatasetFormat::ImageFolder),
            _ => config(format!("unknown dataset format `{s}` (cifar-binary, image-folder)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation on the `[0, 1]` pixel scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// Training-set statistics of CIFAR-10.
    pub const CIFAR10: Normalization =
        Normalization { mean: [0.4914, 0.4822, 0.4465], std: [0.2470, 0.2435, 0.2616] };
    /// The usual ImageNet statistics, used for image folders.
    pub const IMAGENET: Normalization = Normalization { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] };

    pub fn for_format(f: DatasetFormat) -> Normalization {
        match f {
            DatasetFormat::CifarBinary => Normalization::CIFAR10,
            DatasetFormat::ImageFolder => Normalization::IMAGENET,
        }
    }
}

/// Square images of one side length, planar RGB, one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(side: usize, num_classes: usize, pixels: Vec<u8>, labels: Vec<usize>) -> Result<Dataset> {
        if pixels.len() != labels.len() * 3 * side * side {
            return Err(Error::Contract(format!("{} pixel bytes for {} images of side {side}", pixels.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return config(format!("label {l} outside {num_classes} classes"));
        }
        Ok(Dataset { side, num_classes, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Planar `[3, side, side]` bytes of image `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        let n = 3 * self.side * self.side;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// The first `n` samples (all of them when `n` is 0 or too large).
    pub fn truncated(mut self, n: usize) -> Dataset {
        if n > 0 && n < self.len() {
            self.labels.truncate(n);
            self.pixels.truncate(n * 3 * self.side * self.side);
        }
        self
    }

    pub fn to_rgb(&self, i: usize) -> RgbImage {
        planar_to_rgb(self.image(i), self.side)
    }
}

pub fn planar_to_rgb(planar: &[u8], side: usize) -> RgbImage {
    let plane = side * side;
    RgbImage::from_fn(side as u32, side as u32, |x, y| {
        let p = y as usize * side + x as usize;
        image::Rgb([planar[p], planar[plane + p], planar[2 * plane + p]])
    })
}

/// Parses concatenated CIFAR records.
pub fn parse_cifar_records(bytes: &[u8], path: &Path, base_offset: u64) -> Result<(Vec<u8>, Vec<usize>)> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::MalformedRecord {
            path: path.to_path_buf(),
            offset: base_offset + whole as u64,
            detail: format!("truncated record: {} trailing bytes", bytes.len() - whole),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                offset: base_offset + (i * CIFAR_RECORD) as u64,
                detail: format!("label {label} outside 0..{CIFAR_CLASSES}"),
            });
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

fn cifar_files(path: &Path, split: Split) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path)? {
        let p = entry?.path();
        let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("");
        let wanted = match split {
            Split::Train => name.starts_with("data_batch") && name.ends_with(".bin"),
            Split::Test => name == "test_batch.bin",
        };
        if wanted {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads a CIFAR-10 binary file, or the `data_batch_*.bin` / `test_batch.bin`
/// files of a directory.
pub fn load_cifar_binary(path: &Path, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in cifar_files(path, split)? {
        let bytes = fs::read(&f)?;
        let (p, l) = parse_cifar_records(&bytes, &f, 0)?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(Error::DatasetEmpty(path.to_path_buf()));
    }
    Dataset::new(CIFAR_SIDE, CIFAR_CLASSES, pixels, labels)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// One subdirectory per class, classes in name order, files in name order.
/// Images are resized to `side`×`side`. A `train`/`test` subdirectory is
/// used when present.
pub fn load_image_folder(path: &Path, split: Split, side: usize) -> Result<Dataset> {
    let sub = path.join(match split {
        Split::Train => "train",
        Split::Test => "test",
    });
    let root = if sub.is_dir() { sub } else { path.to_path_buf() };
    let mut classes: Vec<PathBuf> = fs::read_dir(&root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    classes.sort();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (ci, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_image(p)).collect();
        files.sort();
        for f in files {
            let img = image::open(&f).map_err(|e| Error::Image { path: f.clone(), detail: e.to_string() })?.to_rgb8();
            let img = image::imageops::resize(&img, side as u32, side as u32, FilterType::Triangle);
            pixels.extend(rgb_to_planar(&img));
            labels.push(ci);
        }
    }
    if labels.is_empty() {
        return Err(Error::DatasetEmpty(root));
    }
    Dataset::new(side, classes.len(), pixels, labels)
}

pub fn rgb_to_planar(img: &RgbImage) -> Vec<u8> {
    let plane = (img.width() * img.height()) as usize;
    let mut out = vec![0u8; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        out[i] = px[0];
        out[plane + i] = px[1];
        out[2 * plane + i] = px[2];
    }
    out
}

pub fn load_dataset(path: &Path, format: DatasetFormat, split: Split, side: usize) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} does not exist", path.display()))));
    }
    match format {
        DatasetFormat::CifarBinary => load_cifar_binary(path, split),
        DatasetFormat::ImageFolder => load_image_folder(path, split, side),
    }
}

/// Sample order for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

/// Consecutive chunks of `order`; the last may be short.
pub fn batches(order: &[usize], batch: usize) -> Vec<&[usize]> {
    order.chunks(batch.max(1)).collect()
}

/// Resizes (bilinear) to `side` when needed and normalizes to a `[3, side, side]` block.
pub fn normalize_image<T: Element>(img: &RgbImage, side: usize, norm: &Normalization, out: &mut Vec<T>) {
    let resized;
    let img = if img.width() as usize == side && img.height() as usize == side {
        img
    } else {
        resized = image::imageops::resize(img, side as u32, side as u32, FilterType::Triangle);
        &resized
    };
    for c in 0..3 {
        let (m, s) = (norm.mean[c], norm.std[c]);
        out.extend(img.pixels().map(|p| T::from_f64_lossy((p[c] as f64 / 255.0 - m) / s)));
    }
}

/// Evaluation batch: no augmentation.
pub fn eval_batch<T: Element>(ds: &Dataset, idx: &[usize], side: usize, norm: &Normalization) -> Result<(Tensor<T>, Vec<usize>)> {
    let mut data = Vec::with_capacity(idx.len() * 3 * side * side);
    for &i in idx {
        normalize_image(&ds.to_rgb(i), side, norm, &mut data);
    }
    let labels = idx.iter().map(|&i| ds.label(i)).collect();
    Ok((Tensor::new(&[idx.len(), 3, side, side], data)?, labels))
}
