//! Image files, the raw tensor container and model checkpoints.
//!
//! Images are 8-bit binary PPM (P6) or PNG, chosen by extension. Lossless
//! intermediates use a raw container: magic `DRTENSOR`, a `u32` version, a
//! `u32` rank, `u32` dims and row-major little-endian `f32` data.
//!
//! A checkpoint is magic `DRCKPT\0\0`, a `u32` version, a length-prefixed
//! TOML metadata block and a list of named `f32` tensors: `live/…` for the
//! current weights and `ema/…` for their moving average.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ImageField;
use crate::forward::TrainingMode;
use crate::net::params::{ParamSet, Tensor};
use crate::net::{NetSpec, ScoreModelParams, ScoreNet};
use crate::sde::SdeSettings;

const TENSOR_MAGIC: &[u8; 8] = b"DRTENSOR";
const CHECKPOINT_MAGIC: &[u8; 8] = b"DRCKPT\0\0";
const FORMAT_VERSION: u32 = 1;

/// Read an image as a 3-channel field in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<ImageField> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(ImageField::from_fn(3, h, w, |c, y, x| f64::from(raw[(y * w + x) * 3 + c]) / 255.0))
}

/// Quantize to 8 bits (round, clamp) and write PPM or PNG by extension.
pub fn write_image(path: &Path, img: &ImageField) -> Result<()> {
    let (c, h, w) = img.shape();
    if c != 3 && c != 1 {
        return Err(Error::Shape {
            expected: (3, h, w),
            actual: img.shape(),
        });
    }
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                let v = img.get(if c == 1 { 0 } else { k }, y, x);
                raw[(y * w + x) * 3 + k] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to the image");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

struct Reader<R> {
    inner: R,
    path: std::path::PathBuf,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format(&self.path, "truncated file"),
            _ => Error::io(&self.path, e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n.checked_mul(4).ok_or_else(|| Error::format(&self.path, "tensor too large"))?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect())
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::format(&self.path, format!("implausible tensor rank {ndim}")));
        }
        (0..ndim).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(&self.path, "trailing bytes after the last tensor")),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

fn open_reader(path: &Path, magic: &[u8; 8]) -> Result<Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path: path.to_path_buf(),
    };
    if r.bytes(8)?.as_slice() != magic {
        return Err(Error::format(path, "bad magic number"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    Ok(r)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("value {v} does not fit the file format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Write a field to the raw container (values stored as `f32`).
pub fn write_tensor(path: &Path, field: &ImageField) -> Result<()> {
    let mut out = Vec::with_capacity(24 + 4 * field.len());
    out.extend_from_slice(TENSOR_MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize)?;
    put_u32(&mut out, 3)?;
    let (c, h, w) = field.shape();
    for d in [c, h, w] {
        put_u32(&mut out, d)?;
    }
    put_f32s(&mut out, field.as_slice());
    write_all(path, &out)
}

/// Read a rank-3 field from the raw container.
pub fn read_tensor(path: &Path) -> Result<ImageField> {
    let mut r = open_reader(path, TENSOR_MAGIC)?;
    let dims = r.dims()?;
    let [c, h, w] = dims[..] else {
        return Err(Error::format(path, format!("expected a rank-3 tensor, got rank {}", dims.len())));
    };
    let data = r.f32s(c * h * w)?;
    r.expect_end()?;
    ImageField::from_vec(c, h, w, data)
}

/// Everything about a training run that is not a tensor.
///
/// Wall-clock time is deliberately absent so that reruns with the same seed
/// produce byte-identical checkpoints; it lives in the training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub net: NetSpec,
    pub sde: SdeSettings,
    pub mode: TrainingMode,
    pub step_count: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ScoreModelParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = toml::to_string(&self.meta).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, FORMAT_VERSION as usize)?;
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        let sets = [("live", &self.params.weights), ("ema", &self.params.ema_shadow)];
        put_u32(&mut out, sets.iter().map(|(_, s)| s.len()).sum())?;
        for (prefix, set) in sets {
            for t in set.tensors() {
                let name = format!("{prefix}/{}", t.name);
                put_u32(&mut out, name.len())?;
                out.extend_from_slice(name.as_bytes());
                put_u32(&mut out, t.shape.len())?;
                for &d in &t.shape {
                    put_u32(&mut out, d)?;
                }
                put_f32s(&mut out, &t.data);
            }
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("partial");
        write_all(&tmp, &out)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = open_reader(path, CHECKPOINT_MAGIC)?;
        let meta_len = r.u32()? as usize;
        let meta_bytes = r.bytes(meta_len)?;
        let meta_text = String::from_utf8(meta_bytes).map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
        let meta: CheckpointMeta =
            toml::from_str(&meta_text).map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        let net = ScoreNet::new(meta.net)?;
        let mut live = net.zero_params();
        let mut ema = net.zero_params();
        let n = r.u32()? as usize;
        if n != live.len() + ema.len() {
            return Err(Error::format(path, format!("expected {} tensors, found {n}", live.len() + ema.len())));
        }
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.bytes(name_len)?).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let shape = r.dims()?;
            let (set, local) = match name.split_once('/') {
                Some(("live", rest)) => (&mut live, rest),
                Some(("ema", rest)) => (&mut ema, rest),
                _ => return Err(Error::format(path, format!("unexpected tensor `{name}`"))),
            };
            let slot: &mut Tensor = set
                .get_mut(local)
                .ok_or_else(|| Error::format(path, format!("unknown tensor `{name}`")))?;
            if slot.shape != shape {
                return Err(Error::format(path, format!("tensor `{name}` has shape {shape:?}, expected {:?}", slot.shape)));
            }
            slot.data = r.f32s(shape.iter().product())?;
        }
        r.expect_end()?;
        let params = ScoreModelParams::from_parts(live, ema, meta.step_count)?;
        Ok(Self { meta, params })
    }

    /// The network described by the metadata.
    pub fn network(&self) -> Result<ScoreNet> {
        ScoreNet::new(self.meta.net)
    }
}

/// Convenience for tests and tools: a parameter set's tensors by name.
pub fn tensor_names(set: &ParamSet) -> Vec<&str> {
    set.tensors().iter().map(|t| t.name.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_field, rng_from_seed};

    #[test]
    fn image_round_trip_is_exact_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageField::from_fn(3, 5, 7, |c, y, x| ((c * 31 + y * 17 + x * 5) % 256) as f64 / 255.0);
        for ext in ["ppm", "png"] {
            let path = dir.path().join(format!("a.{ext}"));
            write_image(&path, &img).unwrap();
            assert_eq!(read_image(&path).unwrap(), img);
        }
    }

    #[test]
    fn tensor_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let f = normal_field(2, 3, 4, &mut rng_from_seed(1)).map(|v| v as f32 as f64);
        write_tensor(&path, &f).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), f);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"NOTATENSOR......").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));
        assert!(matches!(read_tensor(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = NetSpec {
            base_width: 8,
            depth: 2,
            time_embed_dim: 8,
            ..NetSpec::default()
        };
        let net = ScoreNet::new(spec).unwrap();
        let mut params = ScoreModelParams::new(net.init_params(5));
        // give the output head non-zero values via one optimizer step
        let mut grads = params.weights.zeros_like();
        grads.tensors_mut().iter_mut().for_each(|t| t.data.fill(0.3));
        params.adamw_step(&grads, 1e-2, 0.01).unwrap();
        params.ema_update();
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                net: spec,
                sde: SdeSettings::default(),
                mode: TrainingMode::Score,
                step_count: params.step_count,
                seed: 9,
            },
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.params.weights, ckpt.params.weights);
        assert_eq!(back.params.ema_shadow, ckpt.params.ema_shadow);

        let mut rng = rng_from_seed(2);
        let x = normal_field(3, 8, 8, &mut rng);
        let y = normal_field(3, 8, 8, &mut rng);
        let a = net.forward(&ckpt.params.ema_shadow, &x, &y, 0.4).unwrap();
        let b = net.forward(&back.params.ema_shadow, &x, &y, 0.4).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().any(|v| *v != 0.0));
    }
}
