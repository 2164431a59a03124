//! Datasets, augmentation, and clean/distorted pair construction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distortions::{self, DistortionSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

/// CIFAR-10 geometry: one label byte then 32x32 planar RGB.
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

pub fn num_classes(items: &[LabeledImage]) -> usize {
    items.iter().map(|s| s.label + 1).max().unwrap_or(0)
}

/// Parses CIFAR-10 binary records from memory.
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    let rem = bytes.len() % CIFAR_RECORD;
    if rem != 0 {
        return Err(Error::format(
            (bytes.len() - rem) as u64,
            format!(
                "length {} is not a multiple of the {CIFAR_RECORD}-byte record size",
                bytes.len()
            ),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::format(
                    (i * CIFAR_RECORD) as u64,
                    format!("label {label} outside 0..{CIFAR_CLASSES}"),
                ));
            }
            let data = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledImage {
                image: Image::from_raw(CIFAR_SIDE, CIFAR_SIDE, 3, data),
                label,
            })
        })
        .collect()
}

pub fn load_cifar_binary(path: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Serializes 32x32 RGB samples in the CIFAR-10 layout, quantizing
/// intensities to `round(v * 255)`.
pub fn encode_cifar_binary(items: &[LabeledImage]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(items.len() * CIFAR_RECORD);
    for (i, s) in items.iter().enumerate() {
        let img = &s.image;
        if img.height() != CIFAR_SIDE || img.width() != CIFAR_SIDE || img.channels() != 3 {
            return Err(Error::Input(format!(
                "sample {i} is {}x{}x{}, CIFAR layout needs 32x32x3",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        if s.label >= CIFAR_CLASSES {
            return Err(Error::Input(format!("sample {i} label {} >= 10", s.label)));
        }
        out.push(s.label as u8);
        out.extend(img.data().iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_cifar_binary(items: &[LabeledImage], path: &Path) -> Result<()> {
    let bytes = encode_cifar_binary(items)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Shape families of the synthetic dataset, one per class.
const SHAPES: [&str; 10] = [
    "disk", "ring", "square", "frame", "triangle", "plus", "cross", "hbars", "vbars", "pair",
];

pub fn synth_class_names(num_classes: usize) -> &'static [&'static str] {
    &SHAPES[..num_classes.min(SHAPES.len())]
}

fn inside(class: usize, dx: f32, dy: f32, r: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let rr = (dx * dx + dy * dy).sqrt();
    let t = r * 0.3;
    match class {
        0 => rr <= r,
        1 => rr <= r && rr >= r - t,
        2 => ax <= r * 0.85 && ay <= r * 0.85,
        3 => ax <= r * 0.85 && ay <= r * 0.85 && (ax >= r * 0.85 - t || ay >= r * 0.85 - t),
        4 => {
            // upward triangle with its base at dy = r * 0.8
            let v = (dy + r) / (1.8 * r);
            (0.0..=1.0).contains(&v) && ax <= v * r
        }
        5 => (ax <= t * 0.6 && ay <= r) || (ay <= t * 0.6 && ax <= r),
        6 => {
            let d1 = (dx - dy).abs() / std::f32::consts::SQRT_2;
            let d2 = (dx + dy).abs() / std::f32::consts::SQRT_2;
            rr <= r * 1.1 && (d1 <= t * 0.6 || d2 <= t * 0.6)
        }
        7 => ax <= r && ay <= r && ((dy + r) / (2.0 * r) * 5.0).floor() as i32 % 2 == 0,
        8 => ax <= r && ay <= r && ((dx + r) / (2.0 * r) * 5.0).floor() as i32 % 2 == 0,
        _ => {
            let s = r * 0.5;
            let q = r * 0.42;
            ((dx - s).powi(2) + dy * dy).sqrt() <= q || ((dx + s).powi(2) + dy * dy).sqrt() <= q
        }
    }
}

fn random_color(r: &mut Rng, lo: f32, hi: f32) -> [f32; 3] {
    [r.random_range(lo..hi), r.random_range(lo..hi), r.random_range(lo..hi)]
}

/// Deterministic toy dataset of bright colored shapes on dark textured
/// backgrounds.
/// Class `c` is a shape family (disk, ring, square, frame, triangle, plus,
/// cross, horizontal bars, vertical bars, disk pair); position, size, and
/// colors vary per sample. Labels cycle `0, 1, ..., num_classes - 1`, so
/// the class histogram is balanced within one.
pub fn synth_shapes(n: usize, num_classes: usize, image_size: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if !(2..=SHAPES.len()).contains(&num_classes) {
        return Err(Error::Parameter(format!(
            "num_classes must be in 2..=10, got {num_classes}"
        )));
    }
    if image_size < 8 {
        return Err(Error::Parameter(format!("image_size {image_size} too small")));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let class = i % num_classes;
            let mut r = rng::stream(seed, &[0x5a, i as u64]);
            let s = image_size as f32;
            let radius = s * r.random_range(0.28f32..0.42);
            let cx = r.random_range(radius * 0.8..s - radius * 0.8);
            let cy = r.random_range(radius * 0.8..s - radius * 0.8);
            let bg = random_color(&mut r, 0.0, 0.4);
            let fg = random_color(&mut r, 0.6, 1.0);
            let texture = r.random_range(0.0f32..0.08);
            let plane = image_size * image_size;
            let mut data = vec![0.0f32; 3 * plane];
            for y in 0..image_size {
                for x in 0..image_size {
                    let dx = x as f32 + 0.5 - cx;
                    let dy = y as f32 + 0.5 - cy;
                    let on = inside(class, dx, dy, radius);
                    let col = if on { &fg } else { &bg };
                    for c in 0..3 {
                        let jitter = r.random_range(-1.0f32..1.0) * texture;
                        data[c * plane + y * image_size + x] = (col[c] + jitter).clamp(0.0, 1.0);
                    }
                }
            }
            Ok(LabeledImage {
                image: Image::from_raw(image_size, image_size, 3, data),
                label: class,
            })
        })
        .collect()
}

/// Random-resized-crop and horizontal-flip settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    /// Range of the crop area as a fraction of the image area.
    pub scale: (f64, f64),
    pub flip_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale: (0.5, 1.0),
            flip_prob: 0.5,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self {
            scale: (1.0, 1.0),
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale range ({lo}, {hi}) not within (0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} not in [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

pub fn hflip(img: &Image) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = Vec::with_capacity(img.data().len());
    for ch in 0..c {
        let p = img.plane(ch);
        for y in 0..h {
            data.extend(p[y * w..(y + 1) * w].iter().rev());
        }
    }
    Image::from_raw(h, w, c, data)
}

/// Bilinear resample of the square window at `(x0, y0)` with side `side`
/// back to the full image size.
fn resized_crop(img: &Image, x0: usize, y0: usize, side: usize) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if side == w && side == h {
        return img.clone();
    }
    let sx = side as f32 / w as f32;
    let sy = side as f32 / h as f32;
    let mut data = vec![0.0f32; img.data().len()];
    for y in 0..h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (side - 1) as f32);
        let iy = fy.floor() as usize;
        let ty = fy - iy as f32;
        let iy1 = (iy + 1).min(side - 1);
        for x in 0..w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (side - 1) as f32);
            let ix = fx.floor() as usize;
            let tx = fx - ix as f32;
            let ix1 = (ix + 1).min(side - 1);
            for ch in 0..c {
                let g = |yy: usize, xx: usize| img.get(ch, y0 + yy, x0 + xx);
                let top = g(iy, ix) * (1.0 - tx) + g(iy, ix1) * tx;
                let bot = g(iy1, ix) * (1.0 - tx) + g(iy1, ix1) * tx;
                data[(ch * h + y) * w + x] = (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0);
            }
        }
    }
    Image::from_raw(h, w, c, data)
}

/// Random resized crop (square window, area fraction drawn uniformly from
/// `params.scale`, bilinear resize back) followed by a horizontal flip with
/// probability `params.flip_prob`. Exactly four values are drawn from `rng`
/// on every call.
pub fn augment(img: &Image, rng: &mut Rng, params: &AugmentParams) -> Image {
    let (lo, hi) = params.scale;
    let area: f64 = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let u_x: f64 = rng.random();
    let u_y: f64 = rng.random();
    let flip = rng.random::<f64>() < params.flip_prob;

    let size = img.width().min(img.height());
    let side = ((area.sqrt() * size as f64).round() as usize).clamp(1, size);
    let x0 = (u_x * (img.width() - side + 1) as f64) as usize;
    let y0 = (u_y * (img.height() - side + 1) as f64) as usize;
    let cropped = resized_crop(img, x0.min(img.width() - side), y0.min(img.height() - side), side);
    if flip {
        hflip(&cropped)
    } else {
        cropped
    }
}

/// Clean and distorted views of the same augmented samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub clean: Vec<Image>,
    pub distorted: Vec<Image>,
    pub labels: Option<Vec<usize>>,
    /// Stream index handed to [`distortions::apply`] for each element.
    pub stream: Vec<u64>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// Distortion stream index for sample `index` in `epoch`.
pub fn stream_index(epoch: u64, index: usize) -> u64 {
    rng::mix(epoch, &[index as u64])
}

/// Builds a pair batch: each sample is augmented once (rng derived from
/// `(seed, epoch, index)`), that view is the clean image, and a copy passed
/// through [`distortions::apply`] is the distorted image.
pub fn make_pair_batch(
    samples: &[LabeledImage],
    spec: &DistortionSpec,
    indices: &[usize],
    aug: &AugmentParams,
    seed: u64,
    epoch: u64,
) -> Result<PairBatch> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= samples.len()) {
        return Err(Error::Input(format!("sample index {bad} out of range {}", samples.len())));
    }
    let views: Vec<(Image, Image, u64)> = indices
        .par_iter()
        .map(|&i| {
            let mut r = rng::stream(seed, &[0xa9, epoch, i as u64]);
            let clean = augment(&samples[i].image, &mut r, aug);
            let stream = stream_index(epoch, i);
            let distorted = distortions::apply(spec, &clean, stream)?;
            Ok((clean, distorted, stream))
        })
        .collect::<Result<_>>()?;
    let labels = Some(indices.iter().map(|&i| samples[i].label).collect());
    let mut batch = PairBatch {
        clean: Vec::with_capacity(views.len()),
        distorted: Vec::with_capacity(views.len()),
        labels,
        stream: Vec::with_capacity(views.len()),
    };
    for (c, d, s) in views {
        batch.clean.push(c);
        batch.distorted.push(d);
        batch.stream.push(s);
    }
    Ok(batch)
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[0x5f, epoch]));
    idx
}

/// Class-stratified subset holding `round(fraction * n_c)` samples of each
/// class `c`. Each class is ordered by a seeded permutation that does not
/// depend on `fraction`, so smaller fractions give nested subsets. Returns
/// indices in ascending order.
pub fn stratified_subset(items: &[LabeledImage], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} not in (0, 1]")));
    }
    let classes = num_classes(items);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in items.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut out = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng::stream(seed, &[0x57, c as u64]));
        let take = (fraction * members.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::Config(format!(
                "label fraction {fraction} leaves no samples of class {c} ({} available)",
                members.len()
            )));
        }
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}
