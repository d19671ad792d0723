//! Samples, synthetic crack generation, dataset layout on disk and mask IO.

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{resample_matrix, ResampleKind};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

/// One image/mask pair at both working resolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    /// `tag/stem`.
    pub id: String,
    pub dataset_tag: String,
    /// `[3, S, S]` in `[-1, 1]`.
    pub image: Tensor<f32>,
    /// `[1, S, S]` in `{0, 1}`.
    pub mask_full: Tensor<f32>,
    /// `[1, s, s]` in `{-1, +1}`: nearest downsample of `mask_full`.
    pub mask_diff: Tensor<f32>,
}

/// Nearest-neighbour resize of a square single-channel grid.
pub fn nearest_resize(data: &[f32], side: usize, out: usize) -> Vec<f32> {
    let m = resample_matrix::<f32>(ResampleKind::Nearest, side, out);
    let src: Vec<usize> = m
        .data()
        .chunks(side)
        .map(|row| row.iter().position(|&v| v == 1.0).expect("one-hot row"))
        .collect();
    let mut o = Vec::with_capacity(out * out);
    for &r in &src {
        for &c in &src {
            o.push(data[r * side + c]);
        }
    }
    o
}

impl SegmentationSample {
    /// Build from a full-resolution image and `{0,1}` mask, deriving `mask_diff`.
    pub fn new(
        dataset_tag: &str,
        stem: &str,
        image: Tensor<f32>,
        mask_full: Tensor<f32>,
        diff_side: usize,
    ) -> Result<Self> {
        let side = *mask_full.shape().last().unwrap_or(&0);
        let small = nearest_resize(mask_full.data(), side, diff_side);
        let mask_diff = Tensor::new(
            vec![1, diff_side, diff_side],
            small.into_iter().map(|v| if v > 0.5 { 1.0 } else { -1.0 }).collect(),
        )?;
        let s = SegmentationSample {
            id: format!("{dataset_tag}/{stem}"),
            dataset_tag: dataset_tag.to_string(),
            image,
            mask_full,
            mask_diff,
        };
        s.check()?;
        Ok(s)
    }

    pub fn side(&self) -> usize {
        self.mask_full.shape()[2]
    }

    pub fn diff_side(&self) -> usize {
        self.mask_diff.shape()[2]
    }

    pub fn stem(&self) -> &str {
        self.id.rsplit('/').next().unwrap_or(&self.id)
    }

    /// Shape, range and cross-resolution consistency checks.
    pub fn check(&self) -> Result<()> {
        let side = self.side();
        let bad = |m: String| Err(Error::Data(format!("{}: {m}", self.id)));
        if self.image.shape() != [3, side, side] || self.mask_full.shape() != [1, side, side] {
            return bad(format!(
                "image {:?} and mask {:?} disagree",
                self.image.shape(),
                self.mask_full.shape()
            ));
        }
        if !self.image.all_finite() || self.image.data().iter().any(|v| v.abs() > 1.0) {
            return bad("image values outside [-1, 1]".into());
        }
        if self.mask_full.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return bad("mask_full is not binary".into());
        }
        let d = self.diff_side();
        let expect = nearest_resize(self.mask_full.data(), side, d);
        let ok = expect
            .iter()
            .zip(self.mask_diff.data())
            .all(|(&e, &m)| m == if e > 0.5 { 1.0 } else { -1.0 });
        if !ok {
            return bad("mask_diff is not the downsampled mask_full".into());
        }
        Ok(())
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask_full.sum_f64() / self.mask_full.numel() as f64
    }
}

/// Mini-batch stacked along a new leading axis.
#[derive(Debug, Clone)]
pub struct Batch {
    pub image: Tensor<f32>,
    pub mask_full: Tensor<f32>,
    pub mask_diff: Tensor<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[&SegmentationSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let cat = |f: fn(&SegmentationSample) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            let items: Vec<Tensor<f32>> = samples
                .iter()
                .map(|s| {
                    let t = f(s);
                    let mut shape = vec![1];
                    shape.extend_from_slice(t.shape());
                    t.clone().reshape(shape)
                })
                .collect::<Result<_>>()?;
            Tensor::stack(&items)
        };
        Ok(Batch {
            image: cat(|s| &s.image)?,
            mask_full: cat(|s| &s.mask_full)?,
            mask_diff: cat(|s| &s.mask_diff)?,
        })
    }

    pub fn len(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Synthetic corpus settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub side: usize,
    pub diff_side: usize,
    pub cracks: RangeInclusive<usize>,
    pub width: RangeInclusive<usize>,
}

impl SynthConfig {
    pub fn desk() -> Self {
        SynthConfig {
            side: 64,
            diff_side: 32,
            cracks: 1..=2,
            width: 1..=3,
        }
    }
}

const MAX_ATTEMPTS: usize = 32;

fn random_polyline<R: Rng>(side: usize, rng: &mut R) -> Vec<(f64, f64)> {
    let s = side as f64;
    let length = rng.random_range(0.6..1.0) * s;
    let step = s / 12.0;
    let n = (length / step).ceil() as usize;
    let start = (rng.random_range(0.2..0.8) * s, rng.random_range(0.2..0.8) * s);
    let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let bend = Normal::new(0.0, 0.25).expect("valid normal");
    // grow both ways from a central point so the crack crosses the frame
    let mut grow = |dir: f64| {
        let mut pts = Vec::new();
        let (mut x, mut y) = start;
        let mut a = heading + dir;
        for _ in 0..n / 2 {
            a += bend.sample(rng);
            x += step * a.cos();
            y += step * a.sin();
            pts.push((x, y));
        }
        pts
    };
    let fwd = grow(0.0);
    let back = grow(std::f64::consts::PI);
    back.into_iter().rev().chain(std::iter::once(start)).chain(fwd).collect()
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Distance from every pixel centre to the polyline.
fn distance_field(pts: &[(f64, f64)], side: usize) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; side * side];
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let x0 = (a.0.min(b.0) - 4.0).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + 4.0).ceil().max(0.0) as usize).min(side);
        let y0 = (a.1.min(b.1) - 4.0).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + 4.0).ceil().max(0.0) as usize).min(side);
        for y in y0..y1 {
            for x in x0..x1 {
                let v = segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b);
                let cell = &mut d[y * side + x];
                *cell = cell.min(v);
            }
        }
    }
    d
}

/// 8-connected single-pixel rasterization of a polyline.
fn thin_line(pts: &[(f64, f64)], side: usize, mask: &mut [f32]) {
    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as usize) < side && (y as usize) < side {
            mask[y as usize * side + x as usize] = 1.0;
        }
    };
    for w in pts.windows(2) {
        let (mut x, mut y) = (w[0].0.floor() as i64, w[0].1.floor() as i64);
        let (x1, y1) = (w[1].0.floor() as i64, w[1].1.floor() as i64);
        let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
        let (sx, sy) = ((x1 - x).signum(), (y1 - y).signum());
        let mut err = dx + dy;
        loop {
            put(x, y);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
    // joints between segments can leave solid 2x2 blocks
    for y in 0..side - 1 {
        for x in 0..side - 1 {
            let idx = [y * side + x, y * side + x + 1, (y + 1) * side + x, (y + 1) * side + x + 1];
            if idx.iter().all(|&i| mask[i] == 1.0) {
                mask[idx[0]] = 0.0;
            }
        }
    }
}

fn background<R: Rng>(side: usize, rng: &mut R) -> Vec<f64> {
    let coarse = 5;
    let grid: Vec<f64> = (0..coarse * coarse).map(|_| rng.random_range(0.45..0.75)).collect();
    let m = resample_matrix::<f64>(ResampleKind::Bilinear, coarse, side);
    let m = m.data();
    let fine = Normal::new(0.0, 0.03).expect("valid normal");
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut v = 0.0;
            for i in 0..coarse {
                for j in 0..coarse {
                    v += m[y * coarse + i] * m[x * coarse + j] * grid[i * coarse + j];
                }
            }
            out[y * side + x] = v + fine.sample(rng);
        }
    }
    out
}

/// Random slender-crack sample: textured background, `n_cracks` smooth
/// polylines of width drawn from `width`, darkened in the image.
pub fn synth_crack<R: Rng>(
    side: usize,
    diff_side: usize,
    n_cracks: usize,
    width: RangeInclusive<usize>,
    stem: &str,
    rng: &mut R,
) -> Result<SegmentationSample> {
    if side < 32 {
        return Err(Error::InvalidArgument(format!("synthetic side {side} below 32")));
    }
    if *width.start() == 0 || width.is_empty() {
        return Err(Error::InvalidArgument(format!("crack width range {width:?}")));
    }
    let bg = background(side, rng);
    let mut mask = vec![0.0f32; side * side];
    let mut shade = vec![0.0f64; side * side];
    for _ in 0..n_cracks {
        let w = rng.random_range(width.clone());
        let depth = rng.random_range(0.4..0.65);
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let pts = random_polyline(side, rng);
            let dist = distance_field(&pts, side);
            let mut m = vec![0.0f32; side * side];
            if w == 1 {
                thin_line(&pts, side, &mut m);
            } else {
                let r = w as f64 / 2.0;
                for (mi, &d) in m.iter_mut().zip(&dist) {
                    if d <= r {
                        *mi = 1.0;
                    }
                }
            }
            let count = m.iter().filter(|&&v| v == 1.0).count();
            if count < side / 4 {
                continue;
            }
            let halo = w as f64 / 2.0 + 1.0;
            for i in 0..side * side {
                if m[i] == 1.0 {
                    mask[i] = 1.0;
                    shade[i] = shade[i].max(depth + rng.random_range(-0.05..0.05));
                } else if dist[i] <= halo {
                    shade[i] = shade[i].max(0.25 * depth);
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Data(format!("could not place a crack in a {side}px frame")));
        }
    }
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(-0.05..0.05)).collect();
    let mut img = Vec::with_capacity(3 * side * side);
    for t in &tint {
        for i in 0..side * side {
            let v = (bg[i] * (1.0 + t) * (1.0 - shade[i])).clamp(0.0, 1.0);
            img.push((v * 2.0 - 1.0) as f32);
        }
    }
    SegmentationSample::new(
        "synth",
        stem,
        Tensor::new(vec![3, side, side], img)?,
        Tensor::new(vec![1, side, side], mask)?,
        diff_side,
    )
}

/// `n` samples, sample `i` drawn from its own stream of `seed`.
pub fn synth_dataset(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<SegmentationSample>> {
    (0..n)
        .map(|i| {
            let mut r = seed::rng(seed, Stream::Synth, i as u64);
            let k = r.random_range(cfg.cracks.clone());
            synth_crack(cfg.side, cfg.diff_side, k, cfg.width.clone(), &format!("{i:05}"), &mut r)
        })
        .collect()
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn stem_of(p: &Path) -> Option<String> {
    p.file_stem().and_then(|s| s.to_str()).map(str::to_string)
}

fn has_ext(p: &Path, exts: &[&str]) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// RGB image as `[3, side, side]` in `[-1, 1]`, resized if needed.
pub fn read_image(path: &Path, side: usize) -> Result<Tensor<f32>> {
    let mut img = open_image(path)?.to_rgb8();
    if img.width() as usize != side || img.height() as usize != side {
        log::warn!("{}: resizing {}x{} to {side}", path.display(), img.width(), img.height());
        img = image::imageops::resize(&img, side as u32, side as u32, FilterType::Triangle);
    }
    let mut out = vec![0.0f32; 3 * side * side];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * side * side + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, side, side], out)
}

/// Grayscale mask binarized at 128/255, as `[1, side, side]` in `{0, 1}`.
pub fn read_mask(path: &Path, side: usize) -> Result<Tensor<f32>> {
    let mut m = open_image(path)?.to_luma8();
    if m.width() as usize != side || m.height() as usize != side {
        log::warn!("{}: resizing mask {}x{} to {side}", path.display(), m.width(), m.height());
        m = image::imageops::resize(&m, side as u32, side as u32, FilterType::Nearest);
    }
    let data = m.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![1, side, side], data)
}

/// Grayscale image in `[0, 1]` as `(pixels, width, height)`.
pub fn read_gray(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.pixels().map(|p| p[0] as f64 / 255.0).collect(), w, h))
}

/// Read a mask at its native square size.
pub fn read_mask_native(path: &Path) -> Result<Tensor<f32>> {
    let img = open_image(path)?;
    if img.width() != img.height() {
        return Err(Error::Data(format!("{}: mask is not square", path.display())));
    }
    read_mask(path, img.width() as usize)
}

fn save<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn square_side(t: &Tensor<f32>) -> Result<usize> {
    let side = *t.shape().last().unwrap_or(&0);
    if side * side != t.numel() {
        return Err(Error::shape("save_mask", format!("{:?} is not one square plane", t.shape())));
    }
    Ok(side)
}

/// Binary mask as 8-bit `{0, 255}`.
pub fn save_binary_mask(mask: &Tensor<f32>, path: &Path) -> Result<()> {
    let side = square_side(mask)? as u32;
    let px = mask.data().iter().map(|&v| if v >= 0.5 { 255u8 } else { 0 }).collect();
    let img = GrayImage::from_raw(side, side, px).expect("buffer size");
    save(&img, path)
}

/// Soft mask in `[0, 1]` as 16-bit grayscale.
pub fn save_soft_mask(mask: &Tensor<f32>, path: &Path) -> Result<()> {
    let side = square_side(mask)? as u32;
    let px: Vec<u16> = mask
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(side, side, px).expect("buffer size");
    save(&img, path)
}

/// Read a 16-bit soft mask back to `[0, 1]`.
pub fn read_soft_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = open_image(path)?.to_luma16();
    let side = img.width() as usize;
    let data = img.pixels().map(|p| p[0] as f32 / 65535.0).collect();
    Tensor::new(vec![1, side, img.height() as usize], data)
}

/// RGB image in `[-1, 1]` as 8-bit PNG.
pub fn save_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("save_image", format!("{s:?}"))),
    };
    if c != 3 {
        return Err(Error::shape("save_image", format!("{c} channels")));
    }
    let d = image.data();
    let mut px = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            px.push(((d[ch * h * w + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, px).expect("buffer size");
    save(&img, path)
}

/// Write samples in the `<root>/<tag>/{images,masks}/<stem>.png` layout.
pub fn write_dataset(root: &Path, samples: &[SegmentationSample]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for s in samples {
        let dir = root.join(&s.dataset_tag);
        save_image(&s.image, &dir.join("images").join(format!("{}.png", s.stem())))?;
        save_binary_mask(&s.mask_full, &dir.join("masks").join(format!("{}.png", s.stem())))?;
    }
    Ok(())
}

/// Load every `<root>/<tag>/images/*` with a matching `masks/<stem>.png`,
/// ordered by id. `tags` restricts to the named datasets.
pub fn load_dataset(root: &Path, side: usize, diff_side: usize, tags: Option<&[String]>) -> Result<Vec<SegmentationSample>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut out = Vec::new();
    for tag_dir in sorted_entries(root)? {
        let Some(tag) = tag_dir.file_name().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        if !tag_dir.join("images").is_dir() || tags.is_some_and(|t| !t.contains(&tag)) {
            continue;
        }
        for img_path in sorted_entries(&tag_dir.join("images"))? {
            if !has_ext(&img_path, &IMAGE_EXTS) {
                continue;
            }
            let stem = stem_of(&img_path).ok_or_else(|| Error::Data(format!("bad file name {}", img_path.display())))?;
            let mask_path = tag_dir.join("masks").join(format!("{stem}.png"));
            if !mask_path.is_file() {
                return Err(Error::Data(format!("{}: no mask at {}", img_path.display(), mask_path.display())));
            }
            let image = read_image(&img_path, side)?;
            let mask = read_mask(&mask_path, side)?;
            out.push(SegmentationSample::new(&tag, &stem, image, mask, diff_side)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no image/mask pairs under {}", root.display())));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Id lists for a seeded train/val/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffle the sorted ids with `seed` and cut off validation and test fractions.
pub fn split_ids(ids: &[String], seed: u64, val_frac: f64, test_frac: f64) -> Result<Split> {
    if val_frac < 0.0 || test_frac < 0.0 || val_frac + test_frac > 1.0 {
        return Err(Error::Config(format!("split fractions {val_frac} + {test_frac}")));
    }
    use rand::seq::SliceRandom;
    let mut v = ids.to_vec();
    v.sort();
    v.shuffle(&mut seed::rng(seed, Stream::Split, 0));
    let n = v.len();
    let n_test = (n as f64 * test_frac).round() as usize;
    let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_test);
    let test = v.split_off(n - n_test);
    let val = v.split_off(v.len() - n_val);
    Ok(Split { train: v, val, test })
}

pub fn write_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let mut s = ids.join("\n");
    if !ids.is_empty() {
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(s.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// Keep the samples whose ids appear in `ids`, in manifest order.
pub fn select(samples: &[SegmentationSample], ids: &[String]) -> Result<Vec<SegmentationSample>> {
    ids.iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| &s.id == id)
                .cloned()
                .ok_or_else(|| Error::Data(format!("manifest id '{id}' not in dataset")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synth_is_consistent_and_deterministic() {
        let cfg = SynthConfig::desk();
        let a = synth_dataset(&cfg, 4, 11).unwrap();
        let b = synth_dataset(&cfg, 4, 11).unwrap();
        assert_eq!(a, b);
        for s in &a {
            s.check().unwrap();
            assert!(s.foreground_fraction() > 0.0);
        }
    }

    #[test]
    fn no_cracks_is_background() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let s = synth_crack(64, 32, 0, 1..=3, "x", &mut r).unwrap();
        assert_eq!(s.mask_full.sum_f64(), 0.0);
        assert!(s.mask_diff.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn width_one_is_thin() {
        for seed in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let s = synth_crack(64, 32, 1, 1..=1, "x", &mut r).unwrap();
            let m = s.mask_full.data();
            for y in 0..63 {
                for x in 0..63 {
                    let block = [m[y * 64 + x], m[y * 64 + x + 1], m[(y + 1) * 64 + x], m[(y + 1) * 64 + x + 1]];
                    assert!(block.contains(&0.0), "solid 2x2 block at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn foreground_fraction_in_slender_regime() {
        let s = synth_dataset(&SynthConfig::desk(), 64, 5).unwrap();
        let mean = s.iter().map(|s| s.foreground_fraction()).sum::<f64>() / 64.0;
        assert!((0.01..0.06).contains(&mean), "mean foreground {mean}");
    }

    #[test]
    fn small_side_rejected() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(synth_crack(16, 8, 1, 1..=1, "x", &mut r).is_err());
    }

    #[test]
    fn split_partitions_ids() {
        let ids: Vec<String> = (0..10).map(|i| format!("t/{i}")).collect();
        let s = split_ids(&ids, 3, 0.2, 0.3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 2, 3));
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(all, sorted);
        assert_eq!(split_ids(&ids, 3, 0.2, 0.3).unwrap(), s);
    }
}
