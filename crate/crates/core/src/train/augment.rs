//! Training-time augmentation. Flip and padded crop act per image; mixup and
//! cutmix act on a normalized batch and its soft targets.

use image::{Rgb, RgbImage};
use pn_tensor::{Element, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};

use crate::error::{config, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Zero padding before a random crop back to the original size; 0 disables.
    pub crop_pad: usize,
    /// Beta concentration; 0 disables.
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    /// Operations per image; 0 disables.
    pub randaugment_ops: usize,
    pub randaugment_magnitude: f64,
    pub randaugment_mstd: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            crop_pad: 4,
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            randaugment_ops: 0,
            randaugment_magnitude: 0.0,
            randaugment_mstd: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Nothing applied.
    pub fn none() -> Self {
        AugmentConfig { flip: false, crop_pad: 0, ..AugmentConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixup_alpha < 0.0 || self.cutmix_alpha < 0.0 {
            return config("mixup and cutmix alphas must be >= 0");
        }
        if !(0.0..=10.0).contains(&self.randaugment_magnitude) || self.randaugment_mstd < 0.0 {
            return config("randaugment magnitude must be in [0, 10] and its spread >= 0");
        }
        Ok(())
    }

    pub fn mixes(&self) -> bool {
        self.mixup_alpha > 0.0 || self.cutmix_alpha > 0.0
    }
}

pub fn hflip(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

/// Pads by `pad` zeros on every side and cuts a window of the original size
/// at `(dx, dy)` in the padded frame.
pub fn padded_crop(img: &RgbImage, pad: usize, dx: usize, dy: usize) -> RgbImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let sx = x as i64 + dx as i64 - pad as i64;
        let sy = y as i64 + dy as i64 - pad as i64;
        if sx < 0 || sy < 0 || sx >= w || sy >= h {
            Rgb([0, 0, 0])
        } else {
            *img.get_pixel(sx as u32, sy as u32)
        }
    })
}

/// RandAugment operations implemented here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandOp {
    Identity,
    AutoContrast,
    Equalize,
    Solarize,
    Posterize,
    Contrast,
    Brightness,
    Color,
    TranslateX,
    TranslateY,
}

pub const RAND_OPS: [RandOp; 10] = [
    RandOp::Identity,
    RandOp::AutoContrast,
    RandOp::Equalize,
    RandOp::Solarize,
    RandOp::Posterize,
    RandOp::Contrast,
    RandOp::Brightness,
    RandOp::Color,
    RandOp::TranslateX,
    RandOp::TranslateY,
];

fn map_channels(img: &RgbImage, f: impl Fn(usize, u8) -> u8) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            p[c] = f(c, p[c]);
        }
    }
    out
}

fn blend(a: &RgbImage, b: &RgbImage, factor: f64) -> RgbImage {
    let mut out = a.clone();
    for (o, (pa, pb)) in out.pixels_mut().zip(a.pixels().zip(b.pixels())) {
        for c in 0..3 {
            o[c] = (pb[c] as f64 + factor * (pa[c] as f64 - pb[c] as f64)).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

fn grey(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let l = (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8;
        *p = Rgb([l, l, l]);
    }
    out
}

fn shift(img: &RgbImage, dx: i64, dy: i64) -> RgbImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        if sx < 0 || sy < 0 || sx >= w || sy >= h {
            Rgb([128, 128, 128])
        } else {
            *img.get_pixel(sx as u32, sy as u32)
        }
    })
}

/// Applies one operation at magnitude `m` in `[0, 10]`; `sign` flips signed ops.
pub fn apply_op(img: &RgbImage, op: RandOp, m: f64, sign: f64) -> RgbImage {
    let t = m / 10.0;
    match op {
        RandOp::Identity => img.clone(),
        RandOp::AutoContrast => {
            let mut lo = [255u8; 3];
            let mut hi = [0u8; 3];
            for p in img.pixels() {
                for c in 0..3 {
                    lo[c] = lo[c].min(p[c]);
                    hi[c] = hi[c].max(p[c]);
                }
            }
            map_channels(img, |c, v| {
                if hi[c] <= lo[c] {
                    v
                } else {
                    ((v - lo[c]) as f64 * 255.0 / (hi[c] - lo[c]) as f64).round() as u8
                }
            })
        }
        RandOp::Equalize => {
            let n = (img.width() * img.height()) as f64;
            let mut lut = [[0u8; 256]; 3];
            for (c, table) in lut.iter_mut().enumerate() {
                let mut hist = [0usize; 256];
                for p in img.pixels() {
                    hist[p[c] as usize] += 1;
                }
                let mut acc = 0usize;
                for (v, slot) in table.iter_mut().enumerate() {
                    acc += hist[v];
                    *slot = ((acc as f64 / n) * 255.0).round() as u8;
                }
            }
            map_channels(img, |c, v| lut[c][v as usize])
        }
        RandOp::Solarize => {
            let thresh = (256.0 - 256.0 * t).round() as u16;
            map_channels(img, |_, v| if v as u16 >= thresh { 255 - v } else { v })
        }
        RandOp::Posterize => {
            let bits = (8.0 - 4.0 * t).round().clamp(1.0, 8.0) as u32;
            let mask = !(((1u16 << (8 - bits)) - 1) as u8);
            map_channels(img, |_, v| v & mask)
        }
        RandOp::Contrast => {
            let mean = grey(img).pixels().map(|p| p[0] as f64).sum::<f64>() / (img.width() * img.height()) as f64;
            let flat = RgbImage::from_pixel(img.width(), img.height(), Rgb([mean.round() as u8; 3]));
            blend(img, &flat, 1.0 + 0.9 * t * sign)
        }
        RandOp::Brightness => {
            let black = RgbImage::new(img.width(), img.height());
            blend(img, &black, 1.0 + 0.9 * t * sign)
        }
        RandOp::Color => blend(img, &grey(img), 1.0 + 0.9 * t * sign),
        RandOp::TranslateX => shift(img, (sign * 0.45 * t * img.width() as f64).round() as i64, 0),
        RandOp::TranslateY => shift(img, 0, (sign * 0.45 * t * img.height() as f64).round() as i64),
    }
}

/// `n` random operations, each applied with probability one half at a
/// magnitude drawn around `m`.
pub fn rand_augment(img: &RgbImage, n: usize, m: f64, mstd: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut out = img.clone();
    for _ in 0..n {
        let op = RAND_OPS[rng.random_range(0..RAND_OPS.len())];
        if !rng.random_bool(0.5) {
            continue;
        }
        let mag = if mstd > 0.0 {
            Normal::new(m, mstd).map(|d| d.sample(rng)).unwrap_or(m).clamp(0.0, 10.0)
        } else {
            m
        };
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        out = apply_op(&out, op, mag, sign);
    }
    out
}

/// Per-image augmentation in a fixed draw order.
pub fn augment_image(img: &RgbImage, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut out = img.clone();
    if cfg.randaugment_ops > 0 {
        out = rand_augment(&out, cfg.randaugment_ops, cfg.randaugment_magnitude, cfg.randaugment_mstd, rng);
    }
    if cfg.crop_pad > 0 {
        let dx = rng.random_range(0..=2 * cfg.crop_pad);
        let dy = rng.random_range(0..=2 * cfg.crop_pad);
        out = padded_crop(&out, cfg.crop_pad, dx, dy);
    }
    if cfg.flip && rng.random_bool(0.5) {
        out = hflip(&out);
    }
    out
}

/// Rows of `(1 − ε)·onehot + ε/k`.
pub fn smoothed_targets(labels: &[usize], k: usize, eps: f64) -> Vec<f64> {
    let mut t = vec![eps / k as f64; labels.len() * k];
    for (r, &l) in labels.iter().enumerate() {
        t[r * k + l] += 1.0 - eps;
    }
    t
}

/// Which batch mix was applied and with what weight on the original rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mix {
    None,
    Mixup(f64),
    Cutmix(f64),
}

/// Mixes each row with the row at the mirrored batch position. Targets are
/// combined with the same weight, so rows stay on the simplex.
pub fn mix_batch<T: Element>(x: &mut Tensor<T>, targets: &mut [f64], k: usize, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Mix {
    if !cfg.mixes() || x.shape()[0] < 2 {
        return Mix::None;
    }
    let use_cutmix = match (cfg.mixup_alpha > 0.0, cfg.cutmix_alpha > 0.0) {
        (true, true) => rng.random_bool(0.5),
        (false, true) => true,
        _ => false,
    };
    let alpha = if use_cutmix { cfg.cutmix_alpha } else { cfg.mixup_alpha };
    let lam = Beta::new(alpha, alpha).map(|d| d.sample(rng)).unwrap_or(1.0);
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let per = c * h * w;
    let src = x.data().to_vec();
    let lam = if use_cutmix {
        let cut = (1.0 - lam).sqrt();
        let (ch, cw) = ((h as f64 * cut) as usize, (w as f64 * cut) as usize);
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        let (y0, y1) = (cy.saturating_sub(ch / 2), (cy + ch / 2).min(h));
        let (x0, x1) = (cx.saturating_sub(cw / 2), (cx + cw / 2).min(w));
        let d = x.data_mut();
        for r in 0..n {
            let o = n - 1 - r;
            for ci in 0..c {
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let off = ci * h * w + yy * w + xx;
                        d[r * per + off] = src[o * per + off];
                    }
                }
            }
        }
        1.0 - ((y1 - y0) * (x1 - x0)) as f64 / (h * w) as f64
    } else {
        let d = x.data_mut();
        for r in 0..n {
            let o = n - 1 - r;
            for j in 0..per {
                let a = src[r * per + j].to_f64_lossy();
                let b = src[o * per + j].to_f64_lossy();
                d[r * per + j] = T::from_f64_lossy(lam * a + (1.0 - lam) * b);
            }
        }
        lam
    };
    let t0 = targets.to_vec();
    for r in 0..n {
        let o = n - 1 - r;
        for j in 0..k {
            targets[r * k + j] = lam * t0[r * k + j] + (1.0 - lam) * t0[o * k + j];
        }
    }
    if use_cutmix {
        Mix::Cutmix(lam)
    } else {
        Mix::Mixup(lam)
    }
}
