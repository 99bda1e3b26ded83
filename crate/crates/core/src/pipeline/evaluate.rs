//! Corpus evaluation: corrupt every test image under each configured
//! condition, restore it, and score both the corrupted input and the
//! restoration against the clean image.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::ImageField;
use crate::forward::TrainingMode;
use crate::io::{read_image, Checkpoint};
use crate::jpeg::{compress_decompress, double_compress, DoubleJpegConfig, JpegConfig};
use crate::metrics::{ImageMetrics, MetricsReport};
use crate::rng::derive_seed;

use super::data::{DatasetIndex, Split};
use super::restore::Restorer;
use super::{DataSource, ExperimentConfig};

/// Name of the rows that score the corrupted input itself.
pub const JPEG_METHOD: &str = "jpeg";

/// One corruption applied during evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    Single(JpegConfig),
    Double(DoubleJpegConfig),
}

impl Condition {
    pub fn label(&self) -> String {
        match self {
            Condition::Single(c) => format!("qf{}", c.qf),
            Condition::Double(c) => format!("dj{}-{}", c.qf1, c.qf2),
        }
    }

    /// The corrupted image and the part of `clean` it should be compared with.
    pub fn apply(&self, clean: &ImageField) -> Result<(ImageField, ImageField)> {
        match self {
            Condition::Single(c) => Ok((clean.clone(), compress_decompress(clean, c)?)),
            Condition::Double(c) => {
                let (_, h, w) = clean.shape();
                let reference = clean.crop(c.shift_y, c.shift_x, h - c.shift_y, w - c.shift_x)?;
                Ok((reference, double_compress(clean, c)?))
            }
        }
    }
}

fn method_name(mode: TrainingMode) -> &'static str {
    match mode {
        TrainingMode::Score => "driftrec",
        TrainingMode::Regression => "regression",
    }
}

fn centre_crop(img: &ImageField, size: usize) -> Result<ImageField> {
    let (_, h, w) = img.shape();
    if size == 0 {
        return Ok(img.clone());
    }
    if h < size || w < size {
        return Err(Error::TooSmall(format!("{h}x{w} test image is smaller than the {size}-pixel crop")));
    }
    img.crop((h - size) / 2, (w - size) / 2, size, size)
}

/// Evaluate `checkpoint` on the test split under the conditions in
/// `cfg.evaluation`.
pub fn evaluate(cfg: &ExperimentConfig, checkpoint: &Checkpoint) -> Result<MetricsReport> {
    let ev = &cfg.evaluation;
    let mut conditions: Vec<Condition> = ev
        .qfs
        .iter()
        .map(|&qf| Condition::Single(JpegConfig::new(qf).with_subsampling(cfg.data.subsampling)))
        .collect();
    conditions.extend(ev.double.iter().map(|&d| Condition::Double(d)));
    evaluate_with(cfg, checkpoint, &conditions)
}

/// Like [`evaluate`] with an explicit list of conditions.
///
/// Rows are ordered by test image, then condition, with the JPEG row before
/// the restored row. Restoration of image `i` under condition `c` uses the
/// seed `derive_seed(derive_seed(seed, "evaluate", i), label(c), 0)`.
pub fn evaluate_with(cfg: &ExperimentConfig, checkpoint: &Checkpoint, conditions: &[Condition]) -> Result<MetricsReport> {
    if cfg.data.source != DataSource::Corpus {
        return Err(Error::Config("evaluation needs an image corpus".into()));
    }
    let index = DatasetIndex::scan(&cfg.data.dir, cfg.seed)?;
    let mut records = index.records(Split::Test);
    if cfg.evaluation.max_images > 0 {
        records.truncate(cfg.evaluation.max_images);
    }
    if records.is_empty() {
        return Err(Error::Empty("test split".into()));
    }
    let restorer = Restorer::from_checkpoint(checkpoint)?;
    let method = method_name(restorer.mode());

    let per_image = records
        .par_iter()
        .enumerate()
        .map(|(i, record)| -> Result<Vec<(String, &'static str, String, ImageMetrics)>> {
            let clean = centre_crop(&read_image(&record.path)?, cfg.evaluation.crop)?;
            let image_seed = derive_seed(cfg.seed, "evaluate", i as u64);
            let mut rows = Vec::new();
            for cond in conditions {
                let label = cond.label();
                let (reference, y) = cond.apply(&clean)?;
                let seed = derive_seed(image_seed, &label, 0);
                let restored = restorer.restore(&y, &cfg.sampler, &cfg.restoration, seed)?;
                rows.push((record.name.clone(), JPEG_METHOD, label.clone(), ImageMetrics::compute(&reference, &y)?));
                rows.push((record.name.clone(), method, label, ImageMetrics::compute(&reference, &restored)?));
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = MetricsReport::default();
    for (image, method, condition, metrics) in per_image.into_iter().flatten() {
        report.push(&image, method, &condition, metrics);
    }
    Ok(report)
}
