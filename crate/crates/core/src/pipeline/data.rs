//! Image-file datasets: deterministic splits and random resized crops.

use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Rgb};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::field::ImageField;
use crate::io::read_image;
use crate::rng::{child_rng, Rng};

const EXTENSIONS: [&str; 3] = ["ppm", "png", "pnm"];
const TRAIN_FRACTION: f64 = 0.80;
const VAL_FRACTION: f64 = 0.05;
const MIN_CROP_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    /// File stem, used to label report rows.
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Image files and their 80/5/15 train/validation/test assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    records: Vec<ImageRecord>,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

impl DatasetIndex {
    /// Index every image file directly inside `dir`.
    pub fn scan(dir: &Path, seed: u64) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut records = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if is_image && path.is_file() {
                let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                records.push(ImageRecord { name, path });
            }
        }
        Self::from_records(records, seed)
    }

    /// Split `records` after sorting them by path, so the assignment depends
    /// only on the file set and the seed.
    pub fn from_records(mut records: Vec<ImageRecord>, seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("dataset contains no images".into()));
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        let n = records.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut child_rng(seed, "split", 0));
        let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
        let n_val = (((n as f64) * VAL_FRACTION).round() as usize).min(n - n_train);
        let sorted = |range: std::ops::Range<usize>| {
            let mut v = order[range].to_vec();
            v.sort_unstable();
            v
        };
        Ok(Self {
            train: sorted(0..n_train),
            val: sorted(n_train..n_train + n_val),
            test: sorted(n_train + n_val..n),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self, split: Split) -> Vec<&ImageRecord> {
        let ids = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        };
        ids.iter().map(|&i| &self.records[i]).collect()
    }
}

/// Read `record` and take a random resized crop of it.
pub fn load_patch(record: &ImageRecord, patch_size: usize, rng: &mut Rng) -> Result<ImageField> {
    crop_patch(&read_image(&record.path)?, patch_size, rng)
}

/// Random resized crop: a square whose side is a uniform fraction in
/// `[0.5, 1]` of the shorter image side, at a uniform position, resized to
/// `patch_size × patch_size` with a triangle filter and clamped to `[0, 1]`.
pub fn crop_patch(img: &ImageField, patch_size: usize, rng: &mut Rng) -> Result<ImageField> {
    let (c, h, w) = img.shape();
    if c != 3 {
        return Err(Error::Config(format!("patches are cut from RGB images, got {c} channels")));
    }
    let short = h.min(w);
    if patch_size == 0 || short < patch_size {
        return Err(Error::TooSmall(format!("{h}x{w} image cannot yield a {patch_size}-pixel patch")));
    }
    let scale = rng.random_range(MIN_CROP_SCALE..=1.0);
    let side = ((scale * short as f64).round() as usize).clamp(1, short);
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    let crop = img.crop(top, left, side, side)?;
    if side == patch_size {
        return Ok(crop);
    }
    let mut buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::new(side as u32, side as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        *px = Rgb([0, 1, 2].map(|ch| crop.get(ch, y, x) as f32));
    }
    let resized = imageops::resize(&buf, patch_size as u32, patch_size as u32, imageops::FilterType::Triangle);
    Ok(ImageField::from_fn(3, patch_size, patch_size, |ch, y, x| {
        f64::from(resized.get_pixel(x as u32, y as u32)[ch]).clamp(0.0, 1.0)
    }))
}
