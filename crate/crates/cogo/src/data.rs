//! Procedural 10-class image dataset and image file IO.
//!
//! Classes are shape x texture composites (5 shapes, 2 textures) rendered at
//! 32x32 RGB with randomized colors, positions and sizes. Rendered pixels are
//! quantized to the u8 grid so the in-memory dataset, the PNG files and a
//! reload from disk are all bit-identical for a given seed.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{CogoError, Result};
use crate::rng::CogoRng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIZE: usize = 32;

const SHAPES: [&str; 5] = ["circle", "square", "triangle", "plus", "ring"];
const TEXTURES: [&str; 2] = ["solid", "checker"];

pub fn class_name(label: usize) -> String {
    format!("{}_{}", SHAPES[label / 2 % 5], TEXTURES[label % 2])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl Split {
    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Val, Split::Eval]
    }

    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        }
    }

    fn stream_base(&self) -> u64 {
        match self {
            Split::Train => 1 << 32,
            Split::Val => 2 << 32,
            Split::Eval => 3 << 32,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` samples (generation interleaves classes, so prefixes stay
    /// class-balanced when n is a multiple of the class count).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub eval: Dataset,
}

/// Render one split: `10 * n_per_class` samples, classes interleaved
/// (sample i has class i % 10).
pub fn render_split(seed: u64, split: Split, n_per_class: usize) -> Dataset {
    let total = NUM_CLASSES * n_per_class;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % NUM_CLASSES;
        let mut rng = CogoRng::new(seed, split.stream_base() + i as u64);
        images.push(render_sample(class, &mut rng));
        labels.push(class);
    }
    Dataset { images, labels }
}

/// Render all three splits with the same per-class count.
pub fn procedural_splits(seed: u64, n_per_class: usize) -> DatasetSplits {
    DatasetSplits {
        train: render_split(seed, Split::Train, n_per_class),
        val: render_split(seed, Split::Val, n_per_class),
        eval: render_split(seed, Split::Eval, n_per_class),
    }
}

fn shape_mask(shape_idx: usize, dx: f32, dy: f32, e: f32) -> bool {
    match shape_idx {
        0 => dx * dx + dy * dy <= (0.80 * e) * (0.80 * e),
        1 => dx.abs().max(dy.abs()) <= 0.70 * e,
        2 => {
            // apex up, base down
            let half_span = 0.55 * (dy + 0.80 * e);
            dy >= -0.80 * e && dy <= 0.80 * e && half_span >= 0.0 && dx.abs() <= half_span
        }
        3 => {
            (dx.abs() <= 0.30 * e && dy.abs() <= 0.90 * e)
                || (dy.abs() <= 0.30 * e && dx.abs() <= 0.90 * e)
        }
        4 => {
            let r2 = dx * dx + dy * dy;
            r2 >= (0.45 * e) * (0.45 * e) && r2 <= (0.85 * e) * (0.85 * e)
        }
        _ => unreachable!("shape index"),
    }
}

/// Render a (3, 32, 32) sample of the given class, values on the u8 grid.
pub fn render_sample(class: usize, rng: &mut CogoRng) -> Tensor {
    let shape_idx = class / 2 % 5;
    let checker = class % 2 == 1;
    let n = IMAGE_SIZE;

    let bg = [
        rng.uniform_f32(0.02, 0.30),
        rng.uniform_f32(0.02, 0.30),
        rng.uniform_f32(0.02, 0.30),
    ];
    let fg = [
        rng.uniform_f32(0.55, 1.0),
        rng.uniform_f32(0.55, 1.0),
        rng.uniform_f32(0.55, 1.0),
    ];
    let fg2 = [fg[0] * 0.30, fg[1] * 0.30, fg[2] * 0.30];
    let cx = rng.uniform_f32(13.0, 19.0);
    let cy = rng.uniform_f32(13.0, 19.0);
    let e = rng.uniform_f32(7.0, 12.0);
    let phase = rng.below(2);

    let mut img = Tensor::zeros(&[3, n, n]);
    let mut noise = vec![0.0f32; 3 * n * n];
    rng.fill_normal(&mut noise, 0.0, 0.02);
    let data = img.data_mut();
    for y in 0..n {
        for x in 0..n {
            let inside = shape_mask(shape_idx, x as f32 - cx, y as f32 - cy, e);
            let cell = ((x / 3 + y / 3 + phase) % 2) == 0;
            for c in 0..3 {
                let base = if inside {
                    if checker && !cell {
                        fg2[c]
                    } else {
                        fg[c]
                    }
                } else {
                    bg[c]
                };
                let v = (base + noise[(c * n + y) * n + x]).clamp(0.0, 1.0);
                data[(c * n + y) * n + x] = (v * 255.0).round() / 255.0;
            }
        }
    }
    img
}

// ---- image file IO ------------------------------------------------------

/// Save a (3, H, W) tensor in [0, 1] as an RGB PNG.
pub fn save_rgb_png(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CogoError::InvalidShape {
            op: "save_rgb_png",
            shape: s.to_vec(),
            reason: "expected (3, H, W)".into(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let data = image.data();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (data[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Load an RGB PNG as a (3, H, W) tensor with values k/255.
pub fn load_rgb_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[3, h, w]);
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[(c * h + y) * w + x] = px.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Save an (H, W) tensor in [0, 1] as a grayscale PNG.
pub fn save_gray_png(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(CogoError::InvalidShape {
            op: "save_gray_png",
            shape: s.to_vec(),
            reason: "expected (H, W)".into(),
        });
    }
    let (h, w) = (s[0], s[1]);
    let data = map.data();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (data[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

// ---- dataset on disk ------------------------------------------------------

/// Write one split: PNG per sample plus a `labels.csv` manifest (path,label).
pub fn save_split(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut writer = csv::Writer::from_path(dir.join("labels.csv"))?;
    writer.write_record(["path", "label"])?;
    for (i, (img, label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let name = format!("img_{i:05}.png");
        save_rgb_png(dir.join(&name), img)?;
        writer.write_record([name.as_str(), &label.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_splits(dir: impl AsRef<Path>, splits: &DatasetSplits) -> Result<()> {
    let dir = dir.as_ref();
    save_split(dir.join(Split::Train.dir_name()), &splits.train)?;
    save_split(dir.join(Split::Val.dir_name()), &splits.val)?;
    save_split(dir.join(Split::Eval.dir_name()), &splits.eval)?;
    Ok(())
}

/// Load one split directory written by [`save_split`] (or any directory of
/// images with a `labels.csv` manifest).
pub fn load_split(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = dir.join("labels.csv");
    if !manifest.exists() {
        return Err(CogoError::Dataset(format!(
            "no labels.csv manifest in {}",
            dir.display()
        )));
    }
    let mut reader = csv::Reader::from_path(&manifest)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let path = record
            .get(0)
            .ok_or_else(|| CogoError::Dataset("manifest row missing path".into()))?;
        let label: usize = record
            .get(1)
            .ok_or_else(|| CogoError::Dataset("manifest row missing label".into()))?
            .parse()
            .map_err(|_| CogoError::Dataset(format!("bad label in manifest row for {path}")))?;
        if label >= NUM_CLASSES {
            return Err(CogoError::Dataset(format!(
                "label {label} out of range for {NUM_CLASSES} classes"
            )));
        }
        images.push(load_rgb_png(dir.join(path))?);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(CogoError::Dataset(format!(
            "empty manifest in {}",
            dir.display()
        )));
    }
    Ok(Dataset { images, labels })
}
