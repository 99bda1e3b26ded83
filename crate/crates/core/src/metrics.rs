//! Full-reference image quality metrics: MSE, PSNR, SSIM, the blocking-effect
//! factor (BEF) and the blockiness-penalised PSNR-B.
//!
//! All metrics take the ground truth first. Pixel values are expected in
//! `[0, 1]`, so the data range is fixed at 1. SSIM and BEF are computed on
//! BT.601 luma; MSE and PSNR use every channel.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ImageField;

/// Value written in place of an infinite PSNR so that CSV aggregates stay
/// finite.
pub const PSNR_CAP_DB: f64 = 99.0;

/// BEF values are multiplied by this factor in reports.
pub const BEF_REPORT_SCALE: f64 = 1e4;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const BLOCK: usize = 8;

pub fn mse(reference: &ImageField, test: &ImageField) -> Result<f64> {
    reference.check_same_shape(test)?;
    if reference.is_empty() {
        return Err(Error::Empty("cannot compare empty images".into()));
    }
    let sum: f64 = reference
        .as_slice()
        .iter()
        .zip(test.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.len() as f64)
}

/// `10·log10(1/MSE)`; `+∞` for identical inputs.
pub fn psnr(reference: &ImageField, test: &ImageField) -> Result<f64> {
    Ok(mse_to_db(mse(reference, test)?))
}

fn mse_to_db(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// BT.601 luma of an RGB field; single-channel fields are returned as is.
pub fn luma(img: &ImageField) -> Result<ImageField> {
    match img.channels() {
        1 => Ok(img.clone()),
        3 => {
            let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
            let data = (0..img.plane_len())
                .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
                .collect();
            ImageField::from_vec(1, img.height(), img.width(), data)
        }
        c => Err(Error::Config(format!("luma needs 1 or 3 channels, got {c}"))),
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable "valid" filtering: the output has one value per window position
/// that lies fully inside the image.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM on luma with an 11×11 Gaussian window (σ = 1.5), population
/// statistics, K1 = 0.01, K2 = 0.03 and data range 1. Only window positions
/// that fit entirely inside the image contribute.
pub fn ssim(reference: &ImageField, test: &ImageField) -> Result<f64> {
    reference.check_same_shape(test)?;
    let (h, w) = (reference.height(), reference.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let a = luma(reference)?.into_vec();
    let b = luma(test)?.into_vec();
    let k = gaussian_window();
    let product = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };

    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let aa = filter_valid(&product(&a, &a), h, w, &k);
    let bb = filter_valid(&product(&b, &b), h, w, &k);
    let ab = filter_valid(&product(&a, &b), h, w, &k);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Blocking-effect factor of `img` on luma, for an 8×8 grid anchored at the
/// top-left corner.
///
/// `D_b` is the mean squared difference over horizontally and vertically
/// adjacent pixel pairs that straddle a block boundary, `D_nb` the same over
/// all other adjacent pairs. The result is `η·(D_b − D_nb)` when positive and
/// zero otherwise, with `η = log2(8) / log2(min(H, W))`.
pub fn bef(img: &ImageField) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    if h < 2 * BLOCK || w < 2 * BLOCK {
        return Err(Error::TooSmall(format!("BEF needs at least 16x16 pixels, got {h}x{w}")));
    }
    let y = luma(img)?.into_vec();
    let (mut boundary, mut n_boundary) = (0.0, 0usize);
    let (mut inner, mut n_inner) = (0.0, 0usize);
    let mut add = |d: f64, straddles: bool| {
        if straddles {
            boundary += d * d;
            n_boundary += 1;
        } else {
            inner += d * d;
            n_inner += 1;
        }
    };
    for r in 0..h {
        for c in 0..w - 1 {
            add(y[r * w + c] - y[r * w + c + 1], (c + 1) % BLOCK == 0);
        }
    }
    for r in 0..h - 1 {
        for c in 0..w {
            add(y[r * w + c] - y[(r + 1) * w + c], (r + 1) % BLOCK == 0);
        }
    }
    let d_b = boundary / n_boundary as f64;
    let d_nb = inner / n_inner as f64;
    if d_b <= d_nb {
        return Ok(0.0);
    }
    let eta = (BLOCK as f64).log2() / (h.min(w) as f64).log2();
    Ok(eta * (d_b - d_nb))
}

/// `10·log10(1/(MSE + BEF(test)))`; BEF is evaluated on `test` only.
pub fn psnr_b(reference: &ImageField, test: &ImageField) -> Result<f64> {
    Ok(mse_to_db(mse(reference, test)? + bef(test)?))
}

/// All metrics for one (reference, test) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_b: f64,
    /// Raw (unscaled) blocking-effect factor of the test image.
    pub bef: f64,
    pub mse: f64,
}

impl ImageMetrics {
    pub fn compute(reference: &ImageField, test: &ImageField) -> Result<Self> {
        let mse = mse(reference, test)?;
        let bef = bef(test)?;
        Ok(Self {
            psnr: mse_to_db(mse),
            ssim: ssim(reference, test)?,
            psnr_b: mse_to_db(mse + bef),
            bef,
            mse,
        })
    }
}

/// One CSV line: which image, which restoration method, which corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub image: String,
    pub method: String,
    /// Corruption label, e.g. `qf10` or `dj30-10`.
    pub condition: String,
    pub metrics: ImageMetrics,
}

/// Mean metrics over every row sharing a (method, condition) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub condition: String,
    pub count: usize,
    pub metrics: ImageMetrics,
}

#[derive(Serialize)]
struct CsvRecord<'a> {
    image: &'a str,
    method: &'a str,
    condition: &'a str,
    ssim: f64,
    psnr: f64,
    psnr_b: f64,
    bef_e4: f64,
    mse: f64,
}

/// Per-image rows plus grouped means.
///
/// Infinite PSNR values are capped at [`PSNR_CAP_DB`] in aggregates and CSV
/// output; BEF is scaled by [`BEF_REPORT_SCALE`] in CSV output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn push(&mut self, image: &str, method: &str, condition: &str, metrics: ImageMetrics) {
        self.rows.push(MetricsRow {
            image: image.to_string(),
            method: method.to_string(),
            condition: condition.to_string(),
            metrics,
        });
    }

    /// Group means in first-appearance order of (method, condition).
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut sums: BTreeMap<(String, String), (usize, [f64; 5])> = BTreeMap::new();
        for row in &self.rows {
            let key = (row.method.clone(), row.condition.clone());
            let entry = sums.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (0, [0.0; 5])
            });
            let m = &row.metrics;
            entry.0 += 1;
            for (acc, v) in entry.1.iter_mut().zip([cap(m.psnr), m.ssim, cap(m.psnr_b), m.bef, m.mse]) {
                *acc += v;
            }
        }
        order
            .into_iter()
            .map(|key| {
                let (count, s) = sums[&key];
                let n = count as f64;
                AggregateRow {
                    method: key.0,
                    condition: key.1,
                    count,
                    metrics: ImageMetrics {
                        psnr: s[0] / n,
                        ssim: s[1] / n,
                        psnr_b: s[2] / n,
                        bef: s[3] / n,
                        mse: s[4] / n,
                    },
                }
            })
            .collect()
    }

    /// Look up the aggregate for one (method, condition) pair.
    pub fn mean(&self, method: &str, condition: &str) -> Option<ImageMetrics> {
        self.aggregate()
            .into_iter()
            .find(|a| a.method == method && a.condition == condition)
            .map(|a| a.metrics)
    }

    fn write_records<W: std::io::Write>(&self, sink: W, aggregates: bool) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(sink);
        let mut put = |image: &str, method: &str, condition: &str, m: &ImageMetrics| {
            w.serialize(CsvRecord {
                image,
                method,
                condition,
                ssim: m.ssim,
                psnr: cap(m.psnr),
                psnr_b: cap(m.psnr_b),
                bef_e4: m.bef * BEF_REPORT_SCALE,
                mse: m.mse,
            })
        };
        if aggregates {
            for a in self.aggregate() {
                put("mean", &a.method, &a.condition, &a.metrics)?;
            }
        } else {
            for r in &self.rows {
                put(&r.image, &r.method, &r.condition, &r.metrics)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Per-image CSV with columns `image,method,condition,ssim,psnr,psnr_b,bef_e4,mse`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_records(file, false).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Aggregate CSV with the same columns; the image column reads `mean`.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_records(file, true).map_err(|e| Error::format(path, e.to_string()))
    }

    /// The per-image CSV as a string.
    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_records(&mut buf, false).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

fn cap(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}
