//! JPEG corruption operator: the lossy part of baseline JPEG without the
//! entropy coder.
//!
//! RGB is converted to full-range YCbCr, chroma is optionally 2×2 box
//! subsampled, each 8×8 block goes through an orthonormal DCT-II, is
//! quantized with IJG-scaled tables and reconstructed. Entropy coding is
//! lossless, so it is skipped without changing any pixel.

use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ImageField;
use crate::rng::Rng;

/// Annex K luminance table, row-major.
pub const LUMA_BASE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K chrominance table, row-major.
pub const CHROMA_BASE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

pub type QuantTable = [u16; 64];

/// IJG quality scaling of the base tables. `qf = 0` is treated as 1.
pub fn qf_to_tables(qf: u8) -> Result<(QuantTable, QuantTable)> {
    if qf > 100 {
        return Err(Error::Config(format!("JPEG quality must be in 0..=100, got {qf}")));
    }
    let q = u32::from(qf.max(1));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let scaled = |base: &QuantTable| {
        let mut out = [0u16; 64];
        for (o, &b) in out.iter_mut().zip(base) {
            *o = ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as u16;
        }
        out
    };
    Ok((scaled(&LUMA_BASE), scaled(&CHROMA_BASE)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChromaSubsampling {
    #[serde(rename = "4:4:4")]
    S444,
    #[serde(rename = "4:2:0")]
    S420,
}

impl FromStr for ChromaSubsampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "444" | "4:4:4" => Ok(Self::S444),
            "420" | "4:2:0" => Ok(Self::S420),
            other => Err(Error::Config(format!("unknown chroma subsampling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JpegConfig {
    pub qf: u8,
    #[serde(default = "default_subsampling")]
    pub subsampling: ChromaSubsampling,
    /// Clamp and round to 8 bits between stages, as a real codec does.
    #[serde(default = "default_true")]
    pub round_to_8bit: bool,
}

fn default_subsampling() -> ChromaSubsampling {
    ChromaSubsampling::S420
}

fn default_true() -> bool {
    true
}

impl JpegConfig {
    pub fn new(qf: u8) -> Self {
        Self {
            qf,
            subsampling: default_subsampling(),
            round_to_8bit: true,
        }
    }

    pub fn with_subsampling(self, subsampling: ChromaSubsampling) -> Self {
        Self { subsampling, ..self }
    }
}

/// Compress at `qf1`, crop off `shift_y` rows and `shift_x` columns so the
/// block grid no longer lines up, then compress at `qf2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleJpegConfig {
    pub qf1: u8,
    pub qf2: u8,
    pub shift_x: usize,
    pub shift_y: usize,
    #[serde(default = "default_subsampling")]
    pub subsampling: ChromaSubsampling,
}

impl DoubleJpegConfig {
    pub fn new(qf1: u8, qf2: u8, shift_x: usize, shift_y: usize) -> Self {
        Self {
            qf1,
            qf2,
            shift_x,
            shift_y,
            subsampling: default_subsampling(),
        }
    }
}

impl FromStr for DoubleJpegConfig {
    type Err = Error;

    /// Parses `qf1,qf2,shift_x,shift_y`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("expected `qf1,qf2,shift_x,shift_y`, got `{s}`"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let n: Vec<usize> = parts.iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        if n[0] > 100 || n[1] > 100 {
            return Err(bad());
        }
        Ok(Self::new(n[0] as u8, n[1] as u8, n[2], n[3]))
    }
}

const MAX_SHIFT: usize = 4;

/// Orthonormal 8-point DCT-II basis, `C[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// `C B Cᵀ` when `forward`, `Cᵀ B C` otherwise.
fn transform_block(block: &mut [f64; 64], c: &[[f64; 8]; 8], forward: bool) {
    let coef = |i: usize, j: usize| if forward { c[i][j] } else { c[j][i] };
    let mut tmp = [0.0; 64];
    for i in 0..8 {
        for x in 0..8 {
            tmp[i * 8 + x] = (0..8).map(|k| coef(i, k) * block[k * 8 + x]).sum();
        }
    }
    for i in 0..8 {
        for j in 0..8 {
            block[i * 8 + j] = (0..8).map(|k| tmp[i * 8 + k] * coef(j, k)).sum();
        }
    }
}

/// A single-channel plane in 0..255 sample units.
#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Edge-replicated padding up to `(h, w)`.
    fn padded(&self, h: usize, w: usize) -> Plane {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(y.min(self.h - 1), x.min(self.w - 1)));
            }
        }
        Plane { h, w, data }
    }

    fn downsample2(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let s = self.at(2 * y, 2 * x) + self.at(2 * y, 2 * x + 1) + self.at(2 * y + 1, 2 * x) + self.at(2 * y + 1, 2 * x + 1);
                data.push(0.25 * s);
            }
        }
        Plane { h, w, data }
    }

    fn upsample2(&self) -> Plane {
        let (h, w) = (self.h * 2, self.w * 2);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(y / 2, x / 2));
            }
        }
        Plane { h, w, data }
    }

    /// Quantization round trip of every 8×8 block; dimensions must be
    /// multiples of 8.
    fn quantize_blocks(&mut self, table: &QuantTable, basis: &[[f64; 8]; 8], round: bool) {
        let mut block = [0.0; 64];
        for by in (0..self.h).step_by(8) {
            for bx in (0..self.w).step_by(8) {
                for i in 0..8 {
                    for j in 0..8 {
                        block[i * 8 + j] = self.at(by + i, bx + j) - 128.0;
                    }
                }
                transform_block(&mut block, basis, true);
                for (v, &q) in block.iter_mut().zip(table) {
                    let q = f64::from(q);
                    *v = (*v / q).round() * q;
                }
                transform_block(&mut block, basis, false);
                for i in 0..8 {
                    for j in 0..8 {
                        let mut v = block[i * 8 + j] + 128.0;
                        if round {
                            v = v.round().clamp(0.0, 255.0);
                        }
                        self.data[(by + i) * self.w + bx + j] = v;
                    }
                }
            }
        }
    }
}

fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [f64; 3] {
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168_735_891_647_856_1 * r - 0.331_264_108_352_143_9 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418_687_589_158_345_2 * g - 0.081_312_410_841_654_8 * b + 128.0,
    ]
}

fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    let (cb, cr) = (cb - 128.0, cr - 128.0);
    [y + 1.402 * cr, y - 0.344_136_286_201_022 * cb - 0.714_136_286_201_022 * cr, y + 1.772 * cb]
}

/// JPEG quantization round trip of an RGB (3-channel) or grayscale
/// (1-channel) image in `[0, 1]`.
pub fn compress_decompress(img: &ImageField, cfg: &JpegConfig) -> Result<ImageField> {
    let (c, h, w) = img.shape();
    if h == 0 || w == 0 {
        return Err(Error::Empty("image to compress".into()));
    }
    if c != 1 && c != 3 {
        return Err(Error::Shape {
            expected: (3, h, w),
            actual: (c, h, w),
        });
    }
    let (luma_table, chroma_table) = qf_to_tables(cfg.qf)?;
    let round = cfg.round_to_8bit;
    let quant8 = |v: f64| if round { v.round().clamp(0.0, 255.0) } else { v };
    let basis = dct_basis();

    let to_plane = |data: Vec<f64>| Plane { h, w, data };
    let samples = |ch: usize| img.plane(ch).iter().map(|v| quant8(v * 255.0)).collect::<Vec<_>>();

    if c == 1 {
        let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
        let mut y = to_plane(samples(0)).padded(ph, pw);
        y.quantize_blocks(&luma_table, &basis, round);
        let data = (0..h * w).map(|i| (y.at(i / w, i % w) / 255.0).clamp(0.0, 1.0)).collect();
        return ImageField::from_vec(1, h, w, data);
    }

    let (r, g, b) = (samples(0), samples(1), samples(2));
    let mut ycc = [Vec::with_capacity(h * w), Vec::with_capacity(h * w), Vec::with_capacity(h * w)];
    for i in 0..h * w {
        for (plane, v) in ycc.iter_mut().zip(rgb_to_ycbcr(r[i], g[i], b[i])) {
            plane.push(quant8(v));
        }
    }
    let [yp, cbp, crp] = ycc.map(to_plane);

    let mcu = match cfg.subsampling {
        ChromaSubsampling::S444 => 8,
        ChromaSubsampling::S420 => 16,
    };
    let (ph, pw) = (h.div_ceil(mcu) * mcu, w.div_ceil(mcu) * mcu);
    let mut yp = yp.padded(ph, pw);
    yp.quantize_blocks(&luma_table, &basis, round);
    let chroma = |p: Plane| -> Plane {
        let p = p.padded(ph, pw);
        match cfg.subsampling {
            ChromaSubsampling::S444 => {
                let mut p = p;
                p.quantize_blocks(&chroma_table, &basis, round);
                p
            }
            ChromaSubsampling::S420 => {
                let mut small = p.downsample2();
                if round {
                    small.data.iter_mut().for_each(|v| *v = v.round());
                }
                small.quantize_blocks(&chroma_table, &basis, round);
                small.upsample2()
            }
        }
    };
    let (cbp, crp) = (chroma(cbp), chroma(crp));

    let mut out = ImageField::zeros(3, h, w);
    for yy in 0..h {
        for xx in 0..w {
            let rgb = ycbcr_to_rgb(yp.at(yy, xx), cbp.at(yy, xx), crp.at(yy, xx));
            for (ch, v) in rgb.into_iter().enumerate() {
                out.set(ch, yy, xx, (quant8(v) / 255.0).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Unaligned double compression. Output is smaller than the input by the
/// shifts.
pub fn double_compress(img: &ImageField, cfg: &DoubleJpegConfig) -> Result<ImageField> {
    if cfg.shift_x > MAX_SHIFT || cfg.shift_y > MAX_SHIFT {
        return Err(Error::Config(format!(
            "double-compression shifts must be in 0..={MAX_SHIFT}, got ({}, {})",
            cfg.shift_x, cfg.shift_y
        )));
    }
    let (_, h, w) = img.shape();
    if h <= cfg.shift_y || w <= cfg.shift_x {
        return Err(Error::TooSmall(format!(
            "{h}×{w} image cannot be cropped by ({}, {})",
            cfg.shift_y, cfg.shift_x
        )));
    }
    let first = compress_decompress(img, &JpegConfig::new(cfg.qf1).with_subsampling(cfg.subsampling))?;
    let cropped = first.crop(cfg.shift_y, cfg.shift_x, h - cfg.shift_y, w - cfg.shift_x)?;
    compress_decompress(&cropped, &JpegConfig::new(cfg.qf2).with_subsampling(cfg.subsampling))
}

/// Training-time corruption: `qf ~ U{0, …, 100}`. The quality factor is
/// returned for logging only; it never reaches the model.
pub fn sample_degradation(img: &ImageField, subsampling: ChromaSubsampling, rng: &mut Rng) -> Result<(ImageField, u8)> {
    sample_degradation_in(img, 0, 100, subsampling, rng)
}

/// Like [`sample_degradation`] with `qf ~ U{qf_min, …, qf_max}`.
pub fn sample_degradation_in(
    img: &ImageField,
    qf_min: u8,
    qf_max: u8,
    subsampling: ChromaSubsampling,
    rng: &mut Rng,
) -> Result<(ImageField, u8)> {
    if qf_min > qf_max || qf_max > 100 {
        return Err(Error::Config(format!("invalid quality range {qf_min}..={qf_max}")));
    }
    let qf = rng.random_range(qf_min..=qf_max);
    let y = compress_decompress(img, &JpegConfig::new(qf).with_subsampling(subsampling))?;
    Ok((y, qf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn textured(h: usize, w: usize) -> ImageField {
        ImageField::from_fn(3, h, w, |c, y, x| {
            let v = 0.5 + 0.3 * ((x as f64 * 0.7 + c as f64).sin() * (y as f64 * 0.4).cos());
            v + 0.1 * (((x * 7 + y * 13 + c * 5) % 11) as f64 / 11.0 - 0.5)
        })
    }

    fn psnr(a: &ImageField, b: &ImageField) -> f64 {
        let mse = a.zip_map(b, |x, y| (x - y).powi(2)).unwrap().mean();
        10.0 * (1.0 / mse).log10()
    }

    #[test]
    fn table_scaling_cases() {
        let (l, c) = qf_to_tables(50).unwrap();
        assert_eq!(l, LUMA_BASE);
        assert_eq!(c, CHROMA_BASE);
        let (l, c) = qf_to_tables(100).unwrap();
        assert!(l.iter().chain(&c).all(|v| *v == 1));
        assert_eq!(qf_to_tables(0).unwrap(), qf_to_tables(1).unwrap());
        let (l, _) = qf_to_tables(1).unwrap();
        assert!(l.iter().all(|v| *v == 255));
        assert!(qf_to_tables(101).is_err());
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let c = dct_basis();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = (0..8).map(|k| c[i][k] * c[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn color_conversion_round_trip_within_one_level() {
        for r in (0..=255).step_by(15) {
            for g in (0..=255).step_by(17) {
                for b in (0..=255).step_by(51) {
                    let ycc = rgb_to_ycbcr(r as f64, g as f64, b as f64).map(f64::round);
                    let back = ycbcr_to_rgb(ycc[0], ycc[1], ycc[2]).map(|v| v.round().clamp(0.0, 255.0));
                    for (a, b) in back.iter().zip([r, g, b]) {
                        assert!((a - b as f64).abs() <= 1.0, "{r},{g},{b} -> {back:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn quality_100_is_nearly_lossless() {
        let img = textured(32, 40);
        let out = compress_decompress(&img, &JpegConfig::new(100).with_subsampling(ChromaSubsampling::S444)).unwrap();
        let p = psnr(&img, &out);
        assert!(p > 40.0, "{p}");
    }

    #[test]
    fn constant_images_survive_moderate_quality() {
        let img = ImageField::from_fn(3, 19, 23, |c, _, _| [0.2, 0.55, 0.9][c]);
        let want = img.map(|v| (v * 255.0).round() / 255.0);
        for qf in [30, 50, 75, 90, 100] {
            let out = compress_decompress(&img, &JpegConfig::new(qf)).unwrap();
            assert!(out.max_abs_diff(&want).unwrap() <= 1.0 / 255.0 + 1e-12, "qf {qf}");
        }
        // Below that the DC step exceeds 16 levels and a flat block moves by
        // up to step/16 per YCbCr channel, exactly as in libjpeg.
        for qf in [0, 5, 10] {
            let out = compress_decompress(&img, &JpegConfig::new(qf)).unwrap();
            let (l, c) = qf_to_tables(qf).unwrap();
            let bound = (f64::from(l[0].max(c[0])) / 16.0 + 1.0) * 2.0 / 255.0;
            assert!(out.max_abs_diff(&want).unwrap() <= bound, "qf {qf}");
            // every pixel of a flat image stays flat
            for ch in 0..3 {
                let p = out.plane(ch);
                assert!(p.iter().all(|v| (v - p[0]).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn output_keeps_shape_and_range() {
        let img = textured(13, 29);
        let out = compress_decompress(&img, &JpegConfig::new(10)).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let gray = img.channel_slice(0, 1);
        assert_eq!(compress_decompress(&gray, &JpegConfig::new(10)).unwrap().shape(), (1, 13, 29));
        assert!(compress_decompress(&ImageField::zeros(2, 8, 8), &JpegConfig::new(10)).is_err());
        assert!(compress_decompress(&ImageField::zeros(3, 0, 8), &JpegConfig::new(10)).is_err());
    }

    #[test]
    fn lower_quality_loses_more() {
        let img = textured(48, 48);
        let mut last = 0.0;
        for qf in [5, 10, 20, 30, 50, 80, 95] {
            let p = psnr(&img, &compress_decompress(&img, &JpegConfig::new(qf)).unwrap());
            assert!(p >= last, "qf {qf}: {p} < {last}");
            last = p;
        }
    }

    #[test]
    fn double_compression_cases() {
        let img = textured(40, 40);
        let out = double_compress(&img, &DoubleJpegConfig::new(30, 10, 3, 1)).unwrap();
        assert_eq!(out.shape(), (3, 39, 37));
        assert!(double_compress(&img, &DoubleJpegConfig::new(30, 10, 5, 0)).is_err());
        assert!(double_compress(&ImageField::zeros(3, 2, 2), &DoubleJpegConfig::new(30, 10, 3, 3)).is_err());

        // aligned recompression at the same quality changes little
        let q = 30;
        let once = compress_decompress(&img, &JpegConfig::new(q)).unwrap();
        let twice = double_compress(&img, &DoubleJpegConfig::new(q, q, 0, 0)).unwrap();
        let mse1 = img.zip_map(&once, |a, b| (a - b).powi(2)).unwrap().mean();
        let mse2 = once.zip_map(&twice, |a, b| (a - b).powi(2)).unwrap().mean();
        assert!(mse2 < mse1, "{mse2} vs {mse1}");
    }

    #[test]
    fn double_config_parses() {
        let c: DoubleJpegConfig = "30,10,2,4".parse().unwrap();
        assert_eq!(c, DoubleJpegConfig::new(30, 10, 2, 4));
        assert!("30,10,2".parse::<DoubleJpegConfig>().is_err());
        assert!("300,10,2,1".parse::<DoubleJpegConfig>().is_err());
    }

    #[test]
    fn sampled_quality_is_uniform() {
        let mut rng = rng_from_seed(3);
        let img = textured(8, 8);
        let mut counts = [0usize; 101];
        for _ in 0..2000 {
            let (_, qf) = sample_degradation(&img, ChromaSubsampling::S420, &mut rng).unwrap();
            counts[qf as usize] += 1;
        }
        assert!(counts.iter().all(|c| *c > 0));
    }
}
