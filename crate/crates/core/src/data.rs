//! Dataset readers (CIFAR-10 and STL-10 binaries, PNG/PPM folders), image
//! files, and deterministic batching.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use jscc_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const STL_SIDE: usize = 96;
pub const STL_RECORD: usize = 3 * STL_SIDE * STL_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Cifar10,
    Stl10,
    Folder,
    /// Procedurally generated images, see [`synthetic`].
    Synthetic,
}

/// Images of a common `[C, H, W]` shape with values in `[0, 1]`, stored
/// contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub source: Source,
    shape: [usize; 3],
    pixels: Vec<f32>,
}

impl Dataset {
    pub fn new(source: Source, shape: [usize; 3], pixels: Vec<f32>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || pixels.len() % per != 0 {
            return Err(Error::Config(format!(
                "{} pixel values do not split into {shape:?} images",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { source, shape, pixels })
    }

    pub fn from_images(source: Source, images: &[Tensor<f32>]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Config("no images".into()))?;
        let shape: [usize; 3] = first
            .shape()
            .try_into()
            .map_err(|_| Error::Config(format!("images must be [C, H, W], got {:?}", first.shape())))?;
        let mut pixels = Vec::with_capacity(images.len() * first.numel());
        for (i, img) in images.iter().enumerate() {
            if img.shape() != shape {
                return Err(Error::Config(format!(
                    "image {i} has shape {:?}, expected {shape:?}",
                    img.shape()
                )));
            }
            pixels.extend_from_slice(img.data());
        }
        Self::new(source, shape, pixels)
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        let n = self.image_len();
        Tensor::new(self.shape.to_vec(), self.pixels[i * n..(i + 1) * n].to_vec()).expect("stored shape")
    }

    /// Stacks the selected images into a `[B, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        let [c, h, w] = self.shape;
        Tensor::new(vec![indices.len(), c, h, w], data).expect("stored shape")
    }

    /// Images `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let n = self.image_len();
        let end = end.min(self.len());
        let start = start.min(end);
        Dataset {
            source: self.source,
            shape: self.shape,
            pixels: self.pixels[start * n..end * n].to_vec(),
        }
    }

    /// First `count` images and the rest.
    pub fn split(&self, count: usize) -> (Dataset, Dataset) {
        (self.slice(0, count), self.slice(count, self.len()))
    }

    /// Pixelwise mean over all images.
    pub fn mean_image(&self) -> Tensor<f32> {
        let n = self.image_len();
        let mut acc = vec![0f64; n];
        for img in self.pixels.chunks(n) {
            acc.iter_mut().zip(img).for_each(|(a, &v)| *a += v as f64);
        }
        let count = self.len().max(1) as f64;
        Tensor::new(self.shape.to_vec(), acc.iter().map(|a| (a / count) as f32).collect()).expect("stored shape")
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_records(path: &Path, len: usize, record: usize) -> Result<()> {
    if len % record != 0 {
        let offset = len - len % record;
        return Err(Error::format(
            path,
            format!(
                "size {len} is not a multiple of the {record}-byte record; partial record at offset {offset}"
            ),
        ));
    }
    Ok(())
}

/// Reads CIFAR-10 binary batches: records of one label byte followed by the
/// R, G and B planes of a 32x32 image. Labels are discarded.
pub fn load_cifar10(paths: &[PathBuf], max_count: Option<usize>) -> Result<Dataset> {
    let limit = max_count.unwrap_or(usize::MAX);
    let mut pixels = Vec::new();
    let mut count = 0;
    for path in paths {
        let bytes = read(path)?;
        check_records(path, bytes.len(), CIFAR_RECORD)?;
        for rec in bytes.chunks(CIFAR_RECORD) {
            if count == limit {
                break;
            }
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("CIFAR-10 input holds no images".into()));
    }
    Dataset::new(Source::Cifar10, [3, 32, 32], pixels)
}

/// Reads an STL-10 binary file: 96x96 images stored plane by plane, each
/// plane column-major. Pixels are transposed to row-major on load.
pub fn load_stl10(path: &Path, max_count: Option<usize>) -> Result<Dataset> {
    let bytes = read(path)?;
    check_records(path, bytes.len(), STL_RECORD)?;
    let limit = max_count.unwrap_or(usize::MAX);
    let s = STL_SIDE;
    let mut pixels = Vec::new();
    for rec in bytes.chunks(STL_RECORD).take(limit) {
        for plane in rec.chunks(s * s) {
            for row in 0..s {
                for col in 0..s {
                    pixels.push(plane[col * s + row] as f32 / 255.0);
                }
            }
        }
    }
    if pixels.is_empty() {
        return Err(Error::Config(format!("{} holds no images", path.display())));
    }
    Dataset::new(Source::Stl10, [3, s, s], pixels)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Byte planes of an image, `[C, H, W]` order.
fn to_bytes(image: &[f32]) -> Vec<u8> {
    image.iter().map(|&v| quantize(v)).collect()
}

/// Writes `data` in the CIFAR-10 binary layout with label 0.
pub fn write_cifar10(path: &Path, data: &Dataset) -> Result<()> {
    if data.shape() != [3, 32, 32] {
        return Err(Error::Config(format!("CIFAR-10 images are [3, 32, 32], got {:?}", data.shape())));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for img in data.pixels().chunks(data.image_len()) {
        out.push(0);
        out.extend(to_bytes(img));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `data` in the STL-10 binary layout (column-major planes).
pub fn write_stl10(path: &Path, data: &Dataset) -> Result<()> {
    let s = STL_SIDE;
    if data.shape() != [3, s, s] {
        return Err(Error::Config(format!("STL-10 images are [3, 96, 96], got {:?}", data.shape())));
    }
    let mut out = Vec::with_capacity(data.len() * STL_RECORD);
    for img in data.pixels().chunks(data.image_len()) {
        for plane in img.chunks(s * s) {
            for col in 0..s {
                for row in 0..s {
                    out.push(quantize(plane[row * s + col]));
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Splits a PPM header into tokens, skipping `#` comments. Returns the
/// tokens and the offset of the first raster byte.
fn ppm_header(bytes: &[u8]) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    (i < bytes.len()).then_some((tokens, i + 1))
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |d: &str| Error::format(path, format!("PPM: {d}"));
    let (tokens, start) = ppm_header(bytes).ok_or_else(|| bad("incomplete header"))?;
    let num = |i: usize| tokens[i].parse::<usize>().map_err(|_| bad(&format!("bad header field `{}`", tokens[i])));
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    if max != 255 {
        return Err(bad(&format!("only 8-bit rasters (maxval 255) are supported, got {max}")));
    }
    let raster = &bytes[start..];
    if raster.len() != w * h * 3 {
        return Err(bad(&format!("expected {} raster bytes, found {}", w * h * 3, raster.len())));
    }
    Ok(interleaved_to_planar(raster, w, h))
}

fn interleaved_to_planar(raster: &[u8], w: usize, h: usize) -> Tensor<f32> {
    let mut data = vec![0f32; 3 * w * h];
    for (p, px) in raster.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("planar layout")
}

fn planar_to_interleaved(image: &Tensor<f32>) -> (Vec<u8>, usize, usize) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * w * h);
    for p in 0..w * h {
        for c in 0..3 {
            out.push(quantize(d[c * w * h + p]));
        }
    }
    (out, w, h)
}

/// Reads a PNG or binary PPM (P6) file as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read(path)?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(path, &bytes);
    }
    if bytes.starts_with(PNG_MAGIC) {
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        return Ok(interleaved_to_planar(img.as_raw(), w, h));
    }
    Err(Error::format(path, "unsupported image format; supported formats: PNG, PPM (P6)"))
}

/// Encodes a `[3, H, W]` image as PNG bytes.
pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    check_rgb(image)?;
    let (raster, w, h) = planar_to_interleaved(image);
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raster).expect("raster size");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Config(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

fn check_rgb(image: &Tensor<f32>) -> Result<()> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::Config(format!("expected a [3, H, W] image, got {:?}", image.shape())));
    }
    Ok(())
}

/// Writes a `[3, H, W]` image; the format follows the extension (`.png`,
/// `.ppm`).
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    check_rgb(image)?;
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("png") => encode_png(image)?,
        Some("ppm") => {
            let (raster, w, h) = planar_to_interleaved(image);
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            out.extend(raster);
            out
        }
        _ => {
            return Err(Error::format(
                path,
                "unsupported image format; supported formats: PNG, PPM (P6)",
            ))
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads every `.png` / `.ppm` file of `dir` in file-name order.
pub fn load_folder(dir: &Path, max_count: Option<usize>) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm")
            )
        })
        .collect();
    files.sort();
    files.truncate(max_count.unwrap_or(usize::MAX));
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG or PPM images in {}", dir.display())));
    }
    let images = files.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
    Dataset::from_images(Source::Folder, &images)
}

/// Lays out `[3, H, W]` images in rows separated by white gutters.
pub fn compose_grid(rows: &[Vec<Tensor<f32>>], gutter: usize) -> Result<Tensor<f32>> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::Config("grid needs at least one image".into()))?;
    check_rgb(first)?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gw = cols * w + (cols - 1) * gutter;
    let gh = rows.len() * h + (rows.len() - 1) * gutter;
    let mut data = vec![1f32; 3 * gw * gh];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.shape() != first.shape() {
                return Err(Error::Config(format!(
                    "grid cell ({r}, {c}) has shape {:?}, expected {:?}",
                    img.shape(),
                    first.shape()
                )));
            }
            let (y0, x0) = (r * (h + gutter), c * (w + gutter));
            for ch in 0..3 {
                for y in 0..h {
                    let src = &img.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                    let dst = (ch * gh + y0 + y) * gw + x0;
                    data[dst..dst + w].copy_from_slice(src);
                }
            }
        }
    }
    Ok(Tensor::new(vec![3, gh, gw], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
    pub shuffle: bool,
}

impl BatchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Index batches over `n` items for one epoch. The permutation depends only
/// on `(plan.seed, epoch)`.
pub fn make_batches(n: usize, plan: &BatchPlan, epoch: usize) -> Result<Vec<Vec<usize>>> {
    plan.validate()?;
    let mut order: Vec<usize> = (0..n).collect();
    if plan.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(plan.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
    }
    Ok(order
        .chunks(plan.batch_size)
        .filter(|c| !plan.drop_last || c.len() == plan.batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Procedural RGB images: a smooth two-color gradient background with a few
/// filled rectangles, discs and stripe patches. Pixel values are quantized to
/// 8 bits so the set survives a binary round trip unchanged.
pub fn synthetic(count: usize, side: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x5917]));
    let plane = side * side;
    let mut pixels = Vec::with_capacity(count * 3 * plane);
    let s = side as f32;
    for _ in 0..count {
        let mut img = vec![0f32; 3 * plane];
        let (a, b): ([f32; 3], [f32; 3]) = (rng.random(), rng.random());
        let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        for y in 0..side {
            for x in 0..side {
                let t = (((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy) + 0.71) / 1.42;
                for c in 0..3 {
                    img[c * plane + y * side + x] = a[c] * (1.0 - t) + b[c] * t;
                }
            }
        }
        for _ in 0..rng.random_range(2..5) {
            let color: [f32; 3] = rng.random();
            let cx = rng.random_range(0.0..s);
            let cy = rng.random_range(0.0..s);
            let r = rng.random_range(s / 10.0..s / 3.5);
            let shape = rng.random_range(0..3);
            let period = rng.random_range(2.0..5.0f32);
            for y in 0..side {
                for x in 0..side {
                    let (fx, fy) = (x as f32 - cx, y as f32 - cy);
                    let inside = match shape {
                        0 => fx.abs() < r && fy.abs() < r * 0.7,
                        1 => fx * fx + fy * fy < r * r,
                        _ => fx.abs() < r && fy.abs() < r && ((x as f32 / period).floor() as i32) % 2 == 0,
                    };
                    if inside {
                        for c in 0..3 {
                            img[c * plane + y * side + x] = color[c];
                        }
                    }
                }
            }
        }
        pixels.extend(img.iter().map(|&v| quantize(v) as f32 / 255.0));
    }
    Dataset::new(Source::Synthetic, [3, side, side], pixels).expect("generated pixels are in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_partition_indices() {
        let plan = BatchPlan {
            batch_size: 3,
            seed: 4,
            drop_last: false,
            shuffle: true,
        };
        let batches = make_batches(10, &plan, 0).unwrap();
        assert_eq!(batches.len(), 4);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let dropped = make_batches(10, &BatchPlan { drop_last: true, ..plan }, 0).unwrap();
        assert_eq!(dropped.len(), 3);
        assert_eq!(make_batches(10, &plan, 1).unwrap(), make_batches(10, &plan, 1).unwrap());
        assert_ne!(make_batches(10, &plan, 1).unwrap(), make_batches(10, &plan, 2).unwrap());
    }

    #[test]
    fn zero_batch_size_rejected() {
        let plan = BatchPlan {
            batch_size: 0,
            seed: 0,
            drop_last: false,
            shuffle: false,
        };
        assert!(make_batches(4, &plan, 0).is_err());
    }

    #[test]
    fn grid_width() {
        let img = Tensor::full(&[3, 4, 6], 0.5f32);
        let grid = compose_grid(&[vec![img.clone(); 5]], 2).unwrap();
        assert_eq!(grid.shape(), &[3, 4, 5 * 6 + 4 * 2]);
        let single = compose_grid(&[vec![img.clone()]], 2).unwrap();
        assert_eq!(single, img);
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic(4, 32, 1);
        assert_eq!(a, synthetic(4, 32, 1));
        assert_ne!(a, synthetic(4, 32, 2));
        assert_eq!(a.len(), 4);
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mean_image_and_split() {
        let d = Dataset::new(Source::Synthetic, [1, 1, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(d.mean_image().data(), &[0.5, 0.5]);
        let (a, b) = d.split(1);
        assert_eq!((a.len(), b.len()), (1, 1));
        assert_eq!(b.image(0).data(), &[1.0, 0.0]);
    }
}
